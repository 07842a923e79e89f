#include "clipcl/similarity.hpp"

#include <cmath>
#include <string>

namespace clipcl {

Vec softmax(const Vec& logits) {
  if (logits.size() == 0) throw InvalidInput("softmax over an empty vector");
  Vec e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

Vec log_softmax(const Vec& logits) {
  if (logits.size() == 0) throw InvalidInput("softmax over an empty vector");
  double m = logits.maxCoeff();
  double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

Mat softmax_columns(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) out.col(c) = softmax(logits.col(c));
  return out;
}

std::size_t argmax(const Vec& v) {
  if (v.size() == 0) throw InvalidInput("argmax over an empty vector");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return static_cast<std::size_t>(best);
}

Vec classify(const Vec& image_embedding, const Mat& class_embeddings, double tau) {
  if (class_embeddings.cols() == 0) throw InvalidInput("classify needs at least one class");
  if (!(tau > 0.0)) throw InvalidInput("tau must be positive");
  if (class_embeddings.rows() != image_embedding.size())
    throw InvalidInput("embedding dimension mismatch in classify");
  return softmax(tau * (class_embeddings.transpose() * image_embedding));
}

ContrastiveLoss contrastive_loss(const Mat& images, const Mat& texts, double tau) {
  const Eigen::Index b = images.cols();
  if (b != texts.cols()) throw InvalidInput("image and caption batch sizes differ");
  if (b < 2) throw InvalidInput("contrastive loss needs a batch of at least 2 pairs");
  if (!(tau > 0.0)) throw InvalidInput("tau must be positive");
  Mat sim = images.transpose() * texts;  // rows: images, cols: texts
  Mat logits = tau * sim;
  // image -> text: softmax over each row; text -> image: over each column.
  Mat p_i2t = softmax_columns(logits.transpose());  // (texts x images)
  Mat p_t2i = softmax_columns(logits);              // (images x texts)
  double loss = 0.0;
  for (Eigen::Index i = 0; i < b; ++i)
    loss -= log_softmax(logits.row(i).transpose())(i) + log_softmax(logits.col(i))(i);
  loss /= 2.0 * static_cast<double>(b);

  // d loss / d logits(i, j)
  Mat d_logits = (p_i2t.transpose() + p_t2i);
  d_logits.diagonal().array() -= 2.0;
  d_logits /= 2.0 * static_cast<double>(b);

  ContrastiveLoss out;
  out.loss = loss;
  out.d_tau = (d_logits.cwiseProduct(sim)).sum();
  Mat d_sim = tau * d_logits;
  out.d_images = texts * d_sim.transpose();
  out.d_texts = images * d_sim;
  return out;
}

CrossEntropyLoss cross_entropy_loss(const Mat& images, const Mat& class_embeddings,
                                    std::span<const int> labels, double tau) {
  const Eigen::Index k = class_embeddings.cols();
  if (k == 0) throw InvalidInput("cross-entropy needs at least one class");
  if (static_cast<Eigen::Index>(labels.size()) != images.cols())
    throw InvalidInput("label count does not match batch size");
  if (!(tau > 0.0)) throw InvalidInput("tau must be positive");
  Mat logits = tau * (class_embeddings.transpose() * images);  // K x B
  CrossEntropyLoss out;
  out.probs = softmax_columns(logits);
  Mat d_logits = out.probs;
  const double inv_b = 1.0 / static_cast<double>(images.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int y = labels[i];
    if (y < 0 || y >= k) throw InvalidInput("label " + std::to_string(y) + " outside the class set");
    auto col = static_cast<Eigen::Index>(i);
    out.loss -= log_softmax(logits.col(col))(y);
    d_logits(y, col) -= 1.0;
  }
  out.loss *= inv_b;
  d_logits *= inv_b * tau;
  out.d_images = class_embeddings * d_logits;
  out.d_classes = images * d_logits.transpose();
  return out;
}

}  // namespace clipcl
