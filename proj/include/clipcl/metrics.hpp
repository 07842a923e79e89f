#pragma once

#include "clipcl/common.hpp"
#include "clipcl/model.hpp"
#include "clipcl/world.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <span>
#include <vector>

namespace clipcl {

/// acc[s][i]: accuracy on session-i classes after training session s, i <= s.
/// Rows are 0-based here; row s holds s + 1 entries.
struct AccuracyMatrix {
  std::vector<std::vector<double>> acc;

  [[nodiscard]] std::size_t sessions() const { return acc.size(); }
  void add_row(std::vector<double> row);
};

struct MetricsReport {
  double ut_acc = 0.0;          // overall for OST, session-averaged for MST
  double ut_acc_overall = 0.0;  // always the overall fraction
  double zs_acc = 0.0;
  double a_acc = 0.0;
  std::map<int, double> tr_at;
  std::map<int, double> ir_at;
  std::optional<double> bwt;
  int fold_count = 1;
};

enum class RetrievalDirection { TextRetrieval, ImageRetrieval };

/// Predicted column of `class_embeddings` per image (argmax of similarity,
/// ties to the lowest index).
std::vector<int> predict(const Mat& image_embeddings, const Mat& class_embeddings);

/// Fraction of positions where predicted == truth.
double accuracy(std::span<const int> predicted, std::span<const int> truth);

struct ClassificationResult {
  double accuracy = 0.0;
  std::vector<int> predicted_class_ids;
};

/// Classifies every image among `candidate_classes` via their prompts.
ClassificationResult classification_accuracy(const DualEncoder& encoder, const ParameterSet& params,
                                             const SyntheticWorld& world, const ImageSet& images,
                                             const std::vector<int>& candidate_classes);

/// Unweighted mean of one accuracy-matrix row. Not comparable with the
/// overall accuracy when sessions differ in size.
double session_average_ut_acc(std::span<const double> row);

/// Accuracy restricted to the images whose true class is in `classes`.
double subset_accuracy(std::span<const int> predicted, std::span<const int> truth,
                       const std::vector<int>& classes);

/// Recall@k from precomputed embeddings (columns). Averages over folds.
std::map<int, double> recall_from_embeddings(const Mat& image_emb, const Mat& caption_emb,
                                             const RetrievalSet& set, std::span<const int> ks,
                                             RetrievalDirection direction);

std::map<int, double> recall_at_k(const DualEncoder& encoder, const ParameterSet& params,
                                  const RetrievalSet& set, std::span<const int> ks,
                                  RetrievalDirection direction);

/// (1 / (S - 1)) * sum_{i < S} (acc[S][i] - acc[i][i]).
double backward_transfer(const AccuracyMatrix& m);

double a_acc(double ut, double zs);

struct ShuffleProbe {
  MetricsReport original;
  MetricsReport shuffled;
  std::map<int, double> tr_delta;
  std::map<int, double> ir_delta;
  double chance = 0.0;  // 1 / caption pool size per fold
};

ShuffleProbe shuffle_probe(const DualEncoder& encoder, const ParameterSet& params, const RetrievalSet& set,
                           std::uint64_t seed, std::span<const int> ks);

/// Fractions as percentages rounded to 2 decimals.
double to_percent(double fraction);

/// a_acc is recomputed from ut_acc and zs_acc at serialization time.
nlohmann::json to_json(const MetricsReport& m, bool percent);
MetricsReport metrics_from_json(const nlohmann::json& j);

}  // namespace clipcl
