#include "clipcl/metrics.hpp"

#include "clipcl/similarity.hpp"

#include <cmath>
#include <set>
#include <string>

namespace clipcl {

void AccuracyMatrix::add_row(std::vector<double> row) {
  if (row.size() != acc.size() + 1)
    throw InvalidInput("accuracy-matrix row " + std::to_string(acc.size() + 1) + " must have " +
                       std::to_string(acc.size() + 1) + " entries");
  for (double v : row)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("accuracy outside [0, 1]");
  acc.push_back(std::move(row));
}

std::vector<int> predict(const Mat& image_embeddings, const Mat& class_embeddings) {
  if (class_embeddings.cols() == 0) throw InvalidInput("no candidate classes");
  Mat sim = class_embeddings.transpose() * image_embeddings;
  std::vector<int> out(static_cast<std::size_t>(sim.cols()));
  for (Eigen::Index i = 0; i < sim.cols(); ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(argmax(sim.col(i)));
  return out;
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (truth.empty()) throw InvalidInput("accuracy over an empty dataset");
  if (predicted.size() != truth.size()) throw InvalidInput("prediction count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

ClassificationResult classification_accuracy(const DualEncoder& encoder, const ParameterSet& params,
                                             const SyntheticWorld& world, const ImageSet& images,
                                             const std::vector<int>& candidate_classes) {
  if (images.size() == 0) throw InvalidInput("classification over an empty dataset");
  std::vector<TextSequence> prompts;
  for (int c : candidate_classes) prompts.push_back(world.prompt_for(c));
  Mat classes = encoder.encode_texts(params, prompts);
  Mat emb = encoder.encode_images(params, images.features);
  auto cols = predict(emb, classes);
  ClassificationResult out;
  out.predicted_class_ids.reserve(cols.size());
  for (int c : cols) out.predicted_class_ids.push_back(candidate_classes[static_cast<std::size_t>(c)]);
  out.accuracy = accuracy(out.predicted_class_ids, images.class_ids);
  return out;
}

double session_average_ut_acc(std::span<const double> row) {
  if (row.empty()) throw InvalidInput("session average over an empty row");
  double sum = 0.0;
  for (double v : row) sum += v;
  return sum / static_cast<double>(row.size());
}

double subset_accuracy(std::span<const int> predicted, std::span<const int> truth,
                       const std::vector<int>& classes) {
  std::set<int> keep(classes.begin(), classes.end());
  std::size_t n = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!keep.count(truth[i])) continue;
    ++n;
    hits += predicted[i] == truth[i] ? 1 : 0;
  }
  if (n == 0) throw InvalidInput("no samples of the requested classes");
  return static_cast<double>(hits) / static_cast<double>(n);
}

namespace {

// Number of candidates ranked ahead of `target` in `scores`; ties go to the
// lower index.
std::size_t rank_of(const std::vector<double>& scores, std::size_t target) {
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > scores[target] || (scores[j] == scores[target] && j < target)) ++ahead;
  }
  return ahead;
}

}  // namespace

std::map<int, double> recall_from_embeddings(const Mat& image_emb, const Mat& caption_emb,
                                             const RetrievalSet& set, std::span<const int> ks,
                                             RetrievalDirection direction) {
  const std::size_t n_images = set.images.size();
  if (n_images == 0 || set.captions.empty()) throw InvalidInput("empty retrieval set");
  if (set.fold_count < 1 || static_cast<std::size_t>(set.fold_count) > n_images)
    throw InvalidInput("bad fold count");
  std::map<int, double> out;
  for (int k : ks) out[k] = 0.0;

  for (int fold = 0; fold < set.fold_count; ++fold) {
    std::vector<std::size_t> images;
    std::vector<std::size_t> captions;
    for (std::size_t i = 0; i < n_images; ++i)
      if (set.fold_of_image(i) == fold) images.push_back(i);
    std::set<std::size_t> in_fold(images.begin(), images.end());
    for (std::size_t c = 0; c < set.captions.size(); ++c)
      if (in_fold.count(static_cast<std::size_t>(set.caption_image[c]))) captions.push_back(c);

    const std::size_t pool = direction == RetrievalDirection::TextRetrieval ? captions.size() : images.size();
    for (int k : ks)
      if (k < 1 || static_cast<std::size_t>(k) > pool)
        throw InvalidInput("k = " + std::to_string(k) + " exceeds the candidate pool of " + std::to_string(pool));

    std::map<int, std::size_t> hits;
    std::size_t queries = 0;
    if (direction == RetrievalDirection::TextRetrieval) {
      for (std::size_t qi = 0; qi < images.size(); ++qi) {
        std::vector<double> scores(captions.size());
        std::size_t best = captions.size();
        for (std::size_t j = 0; j < captions.size(); ++j)
          scores[j] = image_emb.col(static_cast<Eigen::Index>(images[qi]))
                          .dot(caption_emb.col(static_cast<Eigen::Index>(captions[j])));
        for (std::size_t j = 0; j < captions.size(); ++j)
          if (static_cast<std::size_t>(set.caption_image[captions[j]]) == images[qi])
            best = std::min(best, rank_of(scores, j));
        for (int k : ks) hits[k] += best < static_cast<std::size_t>(k) ? 1 : 0;
        ++queries;
      }
    } else {
      for (std::size_t qc = 0; qc < captions.size(); ++qc) {
        std::vector<double> scores(images.size());
        std::size_t target = 0;
        for (std::size_t j = 0; j < images.size(); ++j) {
          scores[j] = caption_emb.col(static_cast<Eigen::Index>(captions[qc]))
                          .dot(image_emb.col(static_cast<Eigen::Index>(images[j])));
          if (images[j] == static_cast<std::size_t>(set.caption_image[captions[qc]])) target = j;
        }
        std::size_t r = rank_of(scores, target);
        for (int k : ks) hits[k] += r < static_cast<std::size_t>(k) ? 1 : 0;
        ++queries;
      }
    }
    for (int k : ks) out[k] += static_cast<double>(hits[k]) / static_cast<double>(queries);
  }
  for (auto& [k, v] : out) v /= static_cast<double>(set.fold_count);
  return out;
}

std::map<int, double> recall_at_k(const DualEncoder& encoder, const ParameterSet& params,
                                  const RetrievalSet& set, std::span<const int> ks,
                                  RetrievalDirection direction) {
  Mat images = encoder.encode_images(params, set.images.features);
  Mat captions = encoder.encode_texts(params, set.captions);
  return recall_from_embeddings(images, captions, set, ks, direction);
}

double backward_transfer(const AccuracyMatrix& m) {
  const std::size_t s = m.sessions();
  if (s < 2) throw UndefinedMetric("backward transfer needs at least 2 sessions");
  const auto& last = m.acc[s - 1];
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < s; ++i) sum += last[i] - m.acc[i][i];
  return sum / static_cast<double>(s - 1);
}

double a_acc(double ut, double zs) {
  if (!(ut >= 0.0 && ut <= 1.0) || !(zs >= 0.0 && zs <= 1.0))
    throw InvalidInput("accuracies must lie in [0, 1]");
  return (ut + zs) / 2.0;
}

ShuffleProbe shuffle_probe(const DualEncoder& encoder, const ParameterSet& params, const RetrievalSet& set,
                           std::uint64_t seed, std::span<const int> ks) {
  auto shuffled = shuffle_captions(set, seed);
  ShuffleProbe out;
  Mat images = encoder.encode_images(params, set.images.features);
  Mat caps = encoder.encode_texts(params, set.captions);
  Mat caps_shuffled = encoder.encode_texts(params, shuffled.captions);
  for (auto* report : {&out.original, &out.shuffled}) report->fold_count = set.fold_count;
  out.original.tr_at = recall_from_embeddings(images, caps, set, ks, RetrievalDirection::TextRetrieval);
  out.original.ir_at = recall_from_embeddings(images, caps, set, ks, RetrievalDirection::ImageRetrieval);
  out.shuffled.tr_at = recall_from_embeddings(images, caps_shuffled, shuffled, ks, RetrievalDirection::TextRetrieval);
  out.shuffled.ir_at =
      recall_from_embeddings(images, caps_shuffled, shuffled, ks, RetrievalDirection::ImageRetrieval);
  for (int k : ks) {
    out.tr_delta[k] = out.shuffled.tr_at[k] - out.original.tr_at[k];
    out.ir_delta[k] = out.shuffled.ir_at[k] - out.original.ir_at[k];
  }
  out.chance = static_cast<double>(set.fold_count) / static_cast<double>(set.captions.size());
  return out;
}

double to_percent(double fraction) { return std::round(fraction * 10000.0) / 100.0; }

nlohmann::json to_json(const MetricsReport& m, bool percent) {
  auto f = [&](double v) { return percent ? to_percent(v) : v; };
  nlohmann::json tr = nlohmann::json::object();
  nlohmann::json ir = nlohmann::json::object();
  for (const auto& [k, v] : m.tr_at) tr[std::to_string(k)] = f(v);
  for (const auto& [k, v] : m.ir_at) ir[std::to_string(k)] = f(v);
  nlohmann::json j = {{"ut_acc", f(m.ut_acc)},
                      {"ut_acc_overall", f(m.ut_acc_overall)},
                      {"zs_acc", f(m.zs_acc)},
                      {"a_acc", f(a_acc(m.ut_acc, m.zs_acc))},
                      {"tr_at", tr},
                      {"ir_at", ir},
                      {"fold_count", m.fold_count}};
  j["bwt"] = m.bwt ? nlohmann::json(percent ? std::round(*m.bwt * 10000.0) / 100.0 : *m.bwt) : nlohmann::json();
  return j;
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport m;
  m.ut_acc = j.at("ut_acc").get<double>();
  m.ut_acc_overall = j.at("ut_acc_overall").get<double>();
  m.zs_acc = j.at("zs_acc").get<double>();
  m.a_acc = j.at("a_acc").get<double>();
  for (const auto& [k, v] : j.at("tr_at").items()) m.tr_at[std::stoi(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("ir_at").items()) m.ir_at[std::stoi(k)] = v.get<double>();
  if (!j.at("bwt").is_null()) m.bwt = j.at("bwt").get<double>();
  m.fold_count = j.at("fold_count").get<int>();
  return m;
}

}  // namespace clipcl
