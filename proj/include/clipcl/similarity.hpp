#pragma once

#include "clipcl/common.hpp"

#include <span>
#include <vector>

namespace clipcl {

/// Max-subtracted softmax.
Vec softmax(const Vec& logits);
Vec log_softmax(const Vec& logits);
/// Column-wise softmax of a (classes x batch) logit matrix.
Mat softmax_columns(const Mat& logits);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(const Vec& v);

/// p(y = c | x) = softmax_c(tau * <f, t_c>). `class_embeddings` holds one
/// unit-norm class embedding per column.
Vec classify(const Vec& image_embedding, const Mat& class_embeddings, double tau);

struct ContrastiveLoss {
  double loss = 0.0;
  Mat d_images;      // d loss / d image embeddings (d x B)
  Mat d_texts;       // d loss / d text embeddings (d x B)
  double d_tau = 0.0;
};

/// Symmetric in-batch InfoNCE: mean of image->text and text->image
/// cross-entropy over tau * F^T T, pairs aligned by column.
ContrastiveLoss contrastive_loss(const Mat& images, const Mat& texts, double tau);

struct CrossEntropyLoss {
  double loss = 0.0;
  Mat d_images;   // d x B
  Mat d_classes;  // d x K
  Mat probs;      // K x B
};

/// Mean cross-entropy of Eq.-1-style probabilities against integer labels
/// indexing the columns of `class_embeddings`.
CrossEntropyLoss cross_entropy_loss(const Mat& images, const Mat& class_embeddings,
                                    std::span<const int> labels, double tau);

}  // namespace clipcl
