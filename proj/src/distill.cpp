#include "clipcl/distill.hpp"

#include "clipcl/similarity.hpp"

#include <cmath>
#include <string>

namespace clipcl {

namespace {

Vec floored_neg_log(const Vec& p) { return -(p.array().max(kProbFloor)).log(); }

}  // namespace

double lwf_loss(const Vec& p_new, const Vec& p_old, DistillDirection direction) {
  if (p_new.size() != p_old.size())
    throw InvalidInput("probability vectors differ in length (" + std::to_string(p_new.size()) + " vs " +
                       std::to_string(p_old.size()) + ")");
  if (direction == DistillDirection::AsPrinted) return p_new.dot(floored_neg_log(p_old));
  return p_old.dot(floored_neg_log(p_new));
}

Mat class_probabilities(const Mat& images, const Mat& class_embeddings, double tau) {
  if (!(tau > 0.0)) throw InvalidInput("tau must be positive");
  return softmax_columns(tau * (class_embeddings.transpose() * images));
}

DistillLoss distill_loss(const Mat& student_images, const Mat& student_classes, double tau_student,
                         const Mat& teacher_probs, DistillDirection direction) {
  const Eigen::Index k = student_classes.cols();
  const Eigen::Index b = student_images.cols();
  if (teacher_probs.rows() != k || teacher_probs.cols() != b)
    throw InvalidInput("teacher probabilities have shape " + std::to_string(teacher_probs.rows()) + "x" +
                       std::to_string(teacher_probs.cols()) + ", expected " + std::to_string(k) + "x" +
                       std::to_string(b));
  if (b == 0) throw InvalidInput("empty distillation batch");
  Mat logits = tau_student * (student_classes.transpose() * student_images);
  Mat d_logits(k, b);
  DistillLoss out;
  for (Eigen::Index i = 0; i < b; ++i) {
    Vec p = softmax(logits.col(i));
    Vec q = teacher_probs.col(i);
    if (direction == DistillDirection::AsPrinted) {
      Vec v = floored_neg_log(q);
      double expected = p.dot(v);
      out.loss += expected;
      d_logits.col(i) = p.array() * (v.array() - expected);
    } else {
      Vec logp = log_softmax(logits.col(i));
      out.loss -= q.dot(logp);
      d_logits.col(i) = p - q;
    }
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  out.loss *= inv_b;
  d_logits *= inv_b * tau_student;
  out.d_images = student_classes * d_logits;
  out.d_classes = student_images * d_logits.transpose();
  return out;
}

double geodl_loss(const Vec& z_old, const Vec& z_new, const GeodesicFlowKernel& kernel) {
  if (z_old.size() != kernel.q.rows() || z_new.size() != kernel.q.rows())
    throw InvalidInput("feature dimension does not match the kernel");
  double a = (kernel.q_sqrt * z_new).norm();
  double b = (kernel.q_sqrt * z_old).norm();
  if (a < 1e-10 || b < 1e-10) throw DegenerateProjection("feature annihilated by the flow kernel");
  return -z_new.dot(kernel.q * z_old) / (a * b);
}

GeoDlLoss geodl_batch(const Mat& z_old, const Mat& z_new, const GeodesicFlowKernel& kernel) {
  if (z_old.rows() != kernel.q.rows() || z_new.rows() != kernel.q.rows() || z_old.cols() != z_new.cols())
    throw InvalidInput("feature matrices do not match the kernel");
  const Eigen::Index n = z_new.cols();
  if (n == 0) throw InvalidInput("empty GeoDL batch");
  GeoDlLoss out;
  out.d_new.resize(z_new.rows(), n);
  Mat qz_old = kernel.q * z_old;
  Mat qz_new = kernel.q * z_new;
  for (Eigen::Index i = 0; i < n; ++i) {
    // |Q^1/2 z|^2 = z^T Q z for the clamped PSD kernel
    double a2 = z_new.col(i).dot(qz_new.col(i));
    double b2 = z_old.col(i).dot(qz_old.col(i));
    double a = std::sqrt(std::max(a2, 0.0));
    double b = std::sqrt(std::max(b2, 0.0));
    if (a < 1e-10 || b < 1e-10) throw DegenerateProjection("feature annihilated by the flow kernel");
    double g = z_new.col(i).dot(qz_old.col(i)) / (a * b);
    out.loss -= g;
    out.d_new.col(i) = -(qz_old.col(i) / (a * b) - g * qz_new.col(i) / a2);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  out.loss *= inv_n;
  out.d_new *= inv_n;
  return out;
}

VrLwfLoss vr_lwf_loss(const DualEncoder& encoder, const Mat& f_old, const Mat& f_new,
                      std::span<const TextSequence> pseudo_classes, const ParameterSet& old_params,
                      const ParameterSet& new_params, double tau_old, double tau_new, Gradients* grads,
                      DistillDirection direction) {
  if (pseudo_classes.size() < 2) throw InvalidInput("replayed vocabulary needs at least 2 pseudo-classes");
  Mat t_old = encoder.encode_texts(old_params, pseudo_classes);
  TextCache cache;
  Mat t_new = encoder.encode_texts(new_params, pseudo_classes, grads ? &cache : nullptr);
  VrLwfLoss out;
  out.teacher_probs = class_probabilities(f_old, t_old, tau_old);
  auto d = distill_loss(f_new, t_new, tau_new, out.teacher_probs, direction);
  out.loss = d.loss;
  out.d_images = std::move(d.d_images);
  if (grads) encoder.backward_texts(new_params, cache, d.d_classes, *grads);
  return out;
}

VrLwfMstLoss vr_lwf_mst_loss(const DualEncoder& encoder, const Mat& f_old, const Mat& f_new,
                             std::span<const TextSequence> pseudo_classes,
                             std::span<const TextSequence> previous_class_prompts,
                             const ParameterSet& replay_teacher, const ParameterSet& old_params,
                             const ParameterSet& new_params, double tau_old, double tau_new, Gradients* grads,
                             DistillDirection direction) {
  auto replay = vr_lwf_loss(encoder, f_old, f_new, pseudo_classes, replay_teacher, new_params, tau_old, tau_new,
                            grads, direction);
  VrLwfMstLoss out;
  out.replay_term = replay.loss;
  out.d_images = std::move(replay.d_images);
  if (!previous_class_prompts.empty()) {
    Mat c_old = encoder.encode_texts(old_params, previous_class_prompts);
    TextCache cache;
    Mat c_new = encoder.encode_texts(new_params, previous_class_prompts, grads ? &cache : nullptr);
    Mat teacher = class_probabilities(f_old, c_old, tau_old);
    out.previous_classes = teacher.rows();
    auto d = distill_loss(f_new, c_new, tau_new, teacher, direction);
    out.previous_term = d.loss;
    out.d_images += d.d_images;
    if (grads) encoder.backward_texts(new_params, cache, d.d_classes, *grads);
  }
  out.loss = out.replay_term + out.previous_term;
  return out;
}

}  // namespace clipcl
