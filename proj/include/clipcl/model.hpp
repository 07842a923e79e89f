#pragma once

#include "clipcl/common.hpp"
#include "clipcl/parameters.hpp"
#include "clipcl/vocabulary.hpp"

#include <span>
#include <string>
#include <vector>

namespace clipcl {

// Layer names. Adapter tensors hang off these as "rkr.<layer>.scale" and
// "rkr.<layer>.rect".
inline const std::string kImageFc1 = "image.fc1";
inline const std::string kImageFc2 = "image.fc2";
inline const std::string kTextFc1 = "text.fc1";
inline const std::string kTextFc2 = "text.fc2";
inline const std::string kTokenEmbedding = "text.token_embedding";
inline const std::string kPositionScale = "text.position_scale";
inline const std::string kLogitScaleName = "logit_scale";

struct ModelConfig {
  int input_dim = 64;
  int embed_dim = 32;
  int hidden_dim = 64;
  int token_dim = 32;
  int max_seq_len = 16;
  int vocab_size = 0;
  double position_scale_init = 0.1;
  double tau_init = 10.0;
};

/// Fixed sinusoidal position signal, token_dim x max_len.
Mat position_signal(int token_dim, int max_len);

struct DenseCache {
  Mat input;
  Mat raw;  // W x + b before any adapter scaling
};

struct ImageCache {
  DenseCache fc1;
  Mat hidden;
  DenseCache fc2;
  Mat emb;  // normalized output
  Vec norms;
};

struct TextCache {
  std::vector<TextSequence> seqs;
  std::vector<std::size_t> offsets;  // start column of each sequence in token_act
  Mat token_act;                     // tanh(E[t] + scale * P[pos]) per token
  DenseCache fc1;
  Mat hidden;
  DenseCache fc2;
  Mat emb;
  Vec norms;
};

/// Toy dual-tower encoder. Images: two dense layers with tanh between,
/// then L2 normalization. Text: per-token tanh(embedding + scaled position
/// signal), mean pooling, two dense layers, L2 normalization. The model is
/// stateless; weights live in a ParameterSet.
class DualEncoder {
 public:
  explicit DualEncoder(ModelConfig config);

  [[nodiscard]] const ModelConfig& config() const { return config_; }

  [[nodiscard]] ParameterSet init_parameters(std::uint64_t seed) const;

  /// Embeds the columns of `images` (input_dim x batch). Columns of the
  /// result are unit norm.
  Mat encode_images(const ParameterSet& params, const Mat& images, ImageCache* cache = nullptr) const;
  Mat encode_texts(const ParameterSet& params, std::span<const TextSequence> seqs,
                   TextCache* cache = nullptr) const;

  Vec encode_image(const Vec& features, const ParameterSet& params) const;
  Vec encode_text(const TextSequence& seq, const ParameterSet& params) const;

  /// Accumulate d(loss)/d(params) given d(loss)/d(embeddings).
  void backward_images(const ParameterSet& params, const ImageCache& cache, const Mat& d_emb,
                       Gradients& grads) const;
  void backward_texts(const ParameterSet& params, const TextCache& cache, const Mat& d_emb,
                      Gradients& grads) const;

  void check_params(const ParameterSet& params) const;

 private:
  ModelConfig config_;
  Mat positions_;
};

/// Dense layer with optional RKR adapters attached to `layer`.
Mat dense_forward(const ParameterSet& params, const std::string& layer, const Mat& input,
                  DenseCache* cache);
/// Returns d(loss)/d(input) when `want_input` is set, otherwise an empty matrix.
Mat dense_backward(const ParameterSet& params, const std::string& layer, const DenseCache& cache,
                   const Mat& d_out, Gradients& grads, bool want_input);

/// Column-wise L2 normalization; throws DegenerateEmbedding when a column
/// norm is below 1e-12.
Mat normalize_columns(const Mat& m, Vec* norms);
Mat normalize_backward(const Mat& normalized, const Vec& norms, const Mat& d_normalized);

}  // namespace clipcl
