#pragma once

#include "clipcl/common.hpp"
#include "clipcl/gfk.hpp"
#include "clipcl/method_config.hpp"
#include "clipcl/model.hpp"
#include "clipcl/replay.hpp"

#include <span>
#include <vector>

namespace clipcl {

inline constexpr double kProbFloor = 1e-12;

/// LwF distillation between two probability vectors. AsPrinted computes
/// -sum_c p_new[c] * log(p_old[c]); log arguments are floored at 1e-12.
double lwf_loss(const Vec& p_new, const Vec& p_old,
                DistillDirection direction = DistillDirection::AsPrinted);

/// softmax(tau * C^T F) per column; (classes x batch).
Mat class_probabilities(const Mat& images, const Mat& class_embeddings, double tau);

struct DistillLoss {
  double loss = 0.0;
  Mat d_images;   // w.r.t. student image embeddings
  Mat d_classes;  // w.r.t. student class / pseudo-class embeddings
};

/// Batch-averaged LwF loss of the student's class posterior against fixed
/// teacher probabilities (classes x batch). Teacher values are constants.
DistillLoss distill_loss(const Mat& student_images, const Mat& student_classes, double tau_student,
                         const Mat& teacher_probs, DistillDirection direction);

/// -(a^T Q b) / (|Q^1/2 a| |Q^1/2 b|) for a = z_new, b = z_old. Throws
/// DegenerateProjection when either projected norm is below 1e-10.
double geodl_loss(const Vec& z_old, const Vec& z_new, const GeodesicFlowKernel& kernel);

struct GeoDlLoss {
  double loss = 0.0;
  Mat d_new;  // d x n
};

/// Column-averaged geodl_loss with its gradient w.r.t. z_new. The kernel is
/// treated as a constant of the step.
GeoDlLoss geodl_batch(const Mat& z_old, const Mat& z_new, const GeodesicFlowKernel& kernel);

struct VrLwfLoss {
  double loss = 0.0;
  Mat d_images;  // w.r.t. f_new
  Mat teacher_probs;
};

/// Replayed-vocabulary distillation. Every pseudo-sentence is encoded by
/// both text towers; teacher and student posteriors over the K_s
/// pseudo-classes are compared per image. Gradients for the student's text
/// tower go into `grads` (when non-null); the image-embedding gradient is
/// returned for the caller to backpropagate.
VrLwfLoss vr_lwf_loss(const DualEncoder& encoder, const Mat& f_old, const Mat& f_new,
                      std::span<const TextSequence> pseudo_classes, const ParameterSet& old_params,
                      const ParameterSet& new_params, double tau_old, double tau_new, Gradients* grads,
                      DistillDirection direction = DistillDirection::AsPrinted);

/// Multi-session VR-LwF: replay term plus an LwF term restricted to the
/// prompts of previous-session classes (zero when there are none).
/// Pseudo-classes are encoded by `replay_teacher`'s text tower, previous
/// class prompts by `old_params`; `f_old` is supplied by the caller.
struct VrLwfMstLoss {
  double loss = 0.0;
  double replay_term = 0.0;
  double previous_term = 0.0;
  Mat d_images;
  Eigen::Index previous_classes = 0;
};

VrLwfMstLoss vr_lwf_mst_loss(const DualEncoder& encoder, const Mat& f_old, const Mat& f_new,
                             std::span<const TextSequence> pseudo_classes,
                             std::span<const TextSequence> previous_class_prompts,
                             const ParameterSet& replay_teacher, const ParameterSet& old_params,
                             const ParameterSet& new_params,
                             double tau_old, double tau_new, Gradients* grads,
                             DistillDirection direction = DistillDirection::AsPrinted);

}  // namespace clipcl
