#include "clipcl/model.hpp"

#include "clipcl/rkr.hpp"

#include <cmath>
#include <random>

namespace clipcl {

namespace {

constexpr double kNormEpsilon = 1e-12;

Mat gaussian(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
  return m;
}

}  // namespace

Mat position_signal(int token_dim, int max_len) {
  Mat p(token_dim, max_len);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int j = 0; j < token_dim; ++j) {
      double rate = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / token_dim);
      p(j, pos) = (j % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  }
  return p;
}

DualEncoder::DualEncoder(ModelConfig config)
    : config_(config), positions_(position_signal(config.token_dim, config.max_seq_len)) {
  if (config_.input_dim <= 0 || config_.embed_dim <= 0 || config_.hidden_dim <= 0 ||
      config_.token_dim <= 0 || config_.max_seq_len <= 0)
    throw InvalidInput("model dimensions must be positive");
}

ParameterSet DualEncoder::init_parameters(std::uint64_t seed) const {
  if (config_.vocab_size <= 0) throw InvalidInput("model vocab_size must be positive");
  std::mt19937_64 rng(seed);
  const auto& c = config_;
  ParameterSet p;
  auto dense = [&](const std::string& layer, Partition part, int out, int in) {
    p.add(layer + ".weight", part, gaussian(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    // Nonzero biases keep a zero input away from a zero pre-norm output.
    p.add(layer + ".bias", part, gaussian(out, 1, 0.1, rng));
  };
  dense(kImageFc1, Partition::Image, c.hidden_dim, c.input_dim);
  dense(kImageFc2, Partition::Image, c.embed_dim, c.hidden_dim);
  p.add(kTokenEmbedding, Partition::Text, gaussian(c.token_dim, c.vocab_size, 0.5, rng));
  p.add(kPositionScale, Partition::Text, Mat::Constant(1, 1, c.position_scale_init));
  dense(kTextFc1, Partition::Text, c.hidden_dim, c.token_dim);
  dense(kTextFc2, Partition::Text, c.embed_dim, c.hidden_dim);
  p.add(kLogitScaleName, Partition::LogitScale, Mat::Constant(1, 1, std::log(c.tau_init)));
  return p;
}

void DualEncoder::check_params(const ParameterSet& params) const {
  const auto& c = config_;
  auto expect = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const Mat& m = params.at(name);
    if (m.rows() != rows || m.cols() != cols)
      throw InvalidInput("parameter '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  };
  expect(kImageFc1 + ".weight", c.hidden_dim, c.input_dim);
  expect(kImageFc2 + ".weight", c.embed_dim, c.hidden_dim);
  expect(kTokenEmbedding, c.token_dim, c.vocab_size);
  expect(kTextFc1 + ".weight", c.hidden_dim, c.token_dim);
  expect(kTextFc2 + ".weight", c.embed_dim, c.hidden_dim);
  if (!(params.tau() > 0.0)) throw InvalidInput("tau must be positive");
}

Mat dense_forward(const ParameterSet& params, const std::string& layer, const Mat& input,
                  DenseCache* cache) {
  const Mat& w = params.at(layer + ".weight");
  const Mat& b = params.at(layer + ".bias");
  Mat raw;
  auto rect = rkr_rect_name(layer);
  if (params.has(rect)) {
    raw = (w + params.at(rect)) * input;
  } else {
    raw = w * input;
  }
  raw.colwise() += b.col(0);
  Mat out = rkr_apply(raw, params, layer);
  if (cache) {
    cache->input = input;
    cache->raw = std::move(raw);
  }
  return out;
}

Mat dense_backward(const ParameterSet& params, const std::string& layer, const DenseCache& cache,
                   const Mat& d_out, Gradients& grads, bool want_input) {
  auto scale_name = rkr_scale_name(layer);
  auto rect_name = rkr_rect_name(layer);
  Mat d_raw;
  if (params.has(scale_name)) {
    const Mat& s = params.at(scale_name);
    if (grads.wants(scale_name)) grads.at(scale_name) += (d_out.cwiseProduct(cache.raw)).rowwise().sum();
    d_raw = d_out.array().colwise() * s.col(0).array();
  } else {
    d_raw = d_out;
  }
  const std::string wname = layer + ".weight";
  const std::string bname = layer + ".bias";
  bool want_w = grads.wants(wname);
  bool want_r = params.has(rect_name) && grads.wants(rect_name);
  if (want_w || want_r) {
    Mat dw = d_raw * cache.input.transpose();
    if (want_w) grads.at(wname) += dw;
    if (want_r) grads.at(rect_name) += dw;
  }
  if (grads.wants(bname)) grads.at(bname) += d_raw.rowwise().sum();
  if (!want_input) return {};
  if (params.has(rect_name)) return (params.at(wname) + params.at(rect_name)).transpose() * d_raw;
  return params.at(wname).transpose() * d_raw;
}

Mat normalize_columns(const Mat& m, Vec* norms) {
  Vec n = m.colwise().norm().transpose();
  for (Eigen::Index i = 0; i < n.size(); ++i) {
    if (!(n(i) >= kNormEpsilon))
      throw DegenerateEmbedding("embedding norm " + std::to_string(n(i)) + " below 1e-12");
  }
  Mat out = m;
  for (Eigen::Index i = 0; i < n.size(); ++i) out.col(i) /= n(i);
  if (norms) *norms = std::move(n);
  return out;
}

Mat normalize_backward(const Mat& normalized, const Vec& norms, const Mat& d_normalized) {
  // d(v/|v|) = (I - u u^T) / |v|
  Mat out(d_normalized.rows(), d_normalized.cols());
  for (Eigen::Index i = 0; i < normalized.cols(); ++i) {
    double proj = normalized.col(i).dot(d_normalized.col(i));
    out.col(i) = (d_normalized.col(i) - proj * normalized.col(i)) / norms(i);
  }
  return out;
}

Mat DualEncoder::encode_images(const ParameterSet& params, const Mat& images, ImageCache* cache) const {
  if (images.rows() != config_.input_dim)
    throw InvalidInput("image feature dimension " + std::to_string(images.rows()) +
                       " does not match input_dim " + std::to_string(config_.input_dim));
  if (!images.allFinite()) throw InvalidInput("non-finite image features");
  DenseCache fc1;
  DenseCache fc2;
  Mat hidden = dense_forward(params, kImageFc1, images, cache ? &fc1 : nullptr).array().tanh().matrix();
  Mat out = dense_forward(params, kImageFc2, hidden, cache ? &fc2 : nullptr);
  Vec norms;
  Mat emb = normalize_columns(out, &norms);
  if (cache) {
    cache->fc1 = std::move(fc1);
    cache->fc2 = std::move(fc2);
    cache->hidden = std::move(hidden);
    cache->emb = emb;
    cache->norms = std::move(norms);
  }
  return emb;
}

void DualEncoder::backward_images(const ParameterSet& params, const ImageCache& cache,
                                  const Mat& d_emb, Gradients& grads) const {
  if (!grads.wants_prefix("image.") && !grads.wants_prefix("rkr.image.")) return;
  Mat d_out = normalize_backward(cache.emb, cache.norms, d_emb);
  bool need_fc1 = grads.wants_prefix(kImageFc1 + ".") || grads.wants_prefix("rkr." + kImageFc1 + ".");
  Mat d_hidden = dense_backward(params, kImageFc2, cache.fc2, d_out, grads, need_fc1);
  if (!need_fc1) return;
  Mat d_pre = d_hidden.array() * (1.0 - cache.hidden.array().square());
  dense_backward(params, kImageFc1, cache.fc1, d_pre, grads, false);
}

Mat DualEncoder::encode_texts(const ParameterSet& params, std::span<const TextSequence> seqs,
                              TextCache* cache) const {
  const Mat& table = params.at(kTokenEmbedding);
  const double pscale = params.at(kPositionScale)(0, 0);
  std::size_t total = 0;
  for (const auto& s : seqs) {
    validate_sequence(s, static_cast<std::size_t>(table.cols()),
                      static_cast<std::size_t>(config_.max_seq_len));
    total += s.size();
  }
  Mat token_act(config_.token_dim, static_cast<Eigen::Index>(total));
  Mat pooled(config_.token_dim, static_cast<Eigen::Index>(seqs.size()));
  std::vector<std::size_t> offsets;
  offsets.reserve(seqs.size());
  std::size_t col = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    offsets.push_back(col);
    const auto& ids = seqs[i].ids;
    Vec acc = Vec::Zero(config_.token_dim);
    for (std::size_t pos = 0; pos < ids.size(); ++pos, ++col) {
      auto c = static_cast<Eigen::Index>(col);
      token_act.col(c) =
          (table.col(ids[pos]) + pscale * positions_.col(static_cast<Eigen::Index>(pos))).array().tanh();
      acc += token_act.col(c);
    }
    pooled.col(static_cast<Eigen::Index>(i)) = acc / static_cast<double>(ids.size());
  }
  DenseCache fc1;
  DenseCache fc2;
  Mat hidden = dense_forward(params, kTextFc1, pooled, cache ? &fc1 : nullptr).array().tanh().matrix();
  Mat out = dense_forward(params, kTextFc2, hidden, cache ? &fc2 : nullptr);
  Vec norms;
  Mat emb = normalize_columns(out, &norms);
  if (cache) {
    cache->seqs.assign(seqs.begin(), seqs.end());
    cache->offsets = std::move(offsets);
    cache->token_act = std::move(token_act);
    cache->fc1 = std::move(fc1);
    cache->hidden = std::move(hidden);
    cache->fc2 = std::move(fc2);
    cache->emb = emb;
    cache->norms = std::move(norms);
  }
  return emb;
}

void DualEncoder::backward_texts(const ParameterSet& params, const TextCache& cache,
                                 const Mat& d_emb, Gradients& grads) const {
  if (!grads.wants_prefix("text.") && !grads.wants_prefix("rkr.text.")) return;
  Mat d_out = normalize_backward(cache.emb, cache.norms, d_emb);
  bool need_fc1 = grads.wants_prefix(kTextFc1 + ".") || grads.wants_prefix("rkr." + kTextFc1 + ".") ||
                  grads.wants(kTokenEmbedding) || grads.wants(kPositionScale);
  Mat d_hidden = dense_backward(params, kTextFc2, cache.fc2, d_out, grads, need_fc1);
  if (!need_fc1) return;
  Mat d_pre = d_hidden.array() * (1.0 - cache.hidden.array().square());
  bool need_tokens = grads.wants(kTokenEmbedding) || grads.wants(kPositionScale);
  Mat d_pooled = dense_backward(params, kTextFc1, cache.fc1, d_pre, grads, need_tokens);
  if (!need_tokens) return;
  bool want_table = grads.wants(kTokenEmbedding);
  bool want_scale = grads.wants(kPositionScale);
  double d_scale = 0.0;
  for (std::size_t i = 0; i < cache.seqs.size(); ++i) {
    const auto& ids = cache.seqs[i].ids;
    Vec d_tok = d_pooled.col(static_cast<Eigen::Index>(i)) / static_cast<double>(ids.size());
    for (std::size_t pos = 0; pos < ids.size(); ++pos) {
      auto c = static_cast<Eigen::Index>(cache.offsets[i] + pos);
      Vec d_in = d_tok.array() * (1.0 - cache.token_act.col(c).array().square());
      if (want_table) grads.at(kTokenEmbedding).col(ids[pos]) += d_in;
      if (want_scale) d_scale += d_in.dot(positions_.col(static_cast<Eigen::Index>(pos)));
    }
  }
  if (want_scale) grads.at(kPositionScale)(0, 0) += d_scale;
}

Vec DualEncoder::encode_image(const Vec& features, const ParameterSet& params) const {
  return encode_images(params, features).col(0);
}

Vec DualEncoder::encode_text(const TextSequence& seq, const ParameterSet& params) const {
  return encode_texts(params, std::span<const TextSequence>(&seq, 1)).col(0);
}

}  // namespace clipcl
