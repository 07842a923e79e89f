#pragma once

#include "clipcl/common.hpp"
#include "clipcl/vocabulary.hpp"

#include <json.hpp>

#include <optional>
#include <random>
#include <string>
#include <vector>

namespace clipcl {

enum class ConceptRole { PretrainOnly, UpdateTask, ZeroShot, Validation };

std::string to_string(ConceptRole role);

struct ConceptSpec {
  int class_id = 0;
  std::vector<std::string> name_tokens;  // 1 or 2 tokens
  Vec prototype;                         // latent_dim
  ConceptRole role = ConceptRole::PretrainOnly;

  [[nodiscard]] std::string name() const;
};

struct WorldConfig {
  int num_pretrain_only = 150;
  int num_update = 40;
  int num_zero_shot = 50;
  int num_validation = 10;
  int input_dim = 64;
  int latent_dim = 16;
  double noise_sigma = 0.5;
  int num_filler_tokens = 60;
  int min_filler = 3;
  int max_filler = 8;
  // Update-task concepts are fine-grained: their prototypes scatter around
  // a few shared centers instead of being drawn independently.
  int update_clusters = 10;
  double update_spread = 0.6;
  /// Probability that a concept gets a two-token name.
  double two_token_name_rate = 0.3;
  int max_retries = 100;

  [[nodiscard]] int num_concepts() const {
    return num_pretrain_only + num_update + num_zero_shot + num_validation;
  }
};

/// Seeded generative ground truth. Read-only after construction.
struct SyntheticWorld {
  std::uint64_t seed = 0;
  WorldConfig config;
  std::vector<ConceptSpec> concepts;
  Vocabulary vocabulary;
  Mat render_matrix;  // input_dim x latent_dim
  double noise_sigma = 0.0;
  PromptTemplate prompt = PromptTemplate::photo_of();
  std::vector<TokenId> filler_tokens;

  [[nodiscard]] const ConceptSpec& concept_at(int class_id) const;
  [[nodiscard]] std::vector<int> concepts_with_role(ConceptRole role) const;
  [[nodiscard]] TextSequence prompt_for(int class_id) const;
  [[nodiscard]] Vec noiseless_image(int class_id) const;
};

SyntheticWorld generate_world(const WorldConfig& config, std::uint64_t seed);

/// Single image; class_id empty for unlabeled images.
struct ImageSample {
  Vec features;
  std::optional<int> class_id;
};

/// Images stacked column-wise with their concept ids.
struct ImageSet {
  Mat features;  // input_dim x N
  std::vector<int> class_ids;

  [[nodiscard]] std::size_t size() const { return class_ids.size(); }
  [[nodiscard]] ImageSample sample(std::size_t i) const;
  [[nodiscard]] ImageSet subset(const std::vector<std::size_t>& indices) const;
  [[nodiscard]] std::vector<int> distinct_classes() const;
};

ImageSet concat(const std::vector<const ImageSet*>& parts);

Vec sample_image(const SyntheticWorld& world, int concept_id, std::mt19937_64& rng);
TextSequence sample_caption(const SyntheticWorld& world, int concept_id, std::mt19937_64& rng);
std::pair<ImageSample, TextSequence> sample_pair(const SyntheticWorld& world, int concept_id,
                                                 std::mt19937_64& rng);

/// Ordered class-id groups for multi-session training.
struct SessionPlan {
  std::vector<std::vector<int>> groups;

  static SessionPlan contiguous(const std::vector<int>& classes, int num_sessions);
  void validate(const std::vector<int>& update_classes) const;
  [[nodiscard]] std::vector<int> all_classes() const;
};

struct RetrievalSet {
  ImageSet images;
  std::vector<TextSequence> captions;
  std::vector<int> caption_image;  // image index of each caption
  int fold_count = 1;

  /// Fold of image i: floor(i * folds / N).
  [[nodiscard]] int fold_of_image(std::size_t i) const;
};

RetrievalSet shuffle_captions(const RetrievalSet& set, std::uint64_t seed);

struct SplitSizes {
  int pretrain_pairs = 40;         // per pretrain-only / zero-shot / validation concept
  int update_pretrain_pairs = 1;   // per update-task concept
  int train_per_class = 200;
  int test_per_class = 25;
  int zeroshot_per_class = 20;
  int validation_update_per_class = 5;
  int validation_zeroshot_per_class = 20;
  int retrieval_folds = 2;
  int retrieval_images_per_fold = 100;
  int captions_per_image = 2;
};

struct PretrainCorpus {
  ImageSet images;
  std::vector<TextSequence> captions;
};

struct Splits {
  PretrainCorpus pretrain;
  ImageSet ost_train;
  std::vector<ImageSet> mst_sessions;
  ImageSet update_test;
  ImageSet zeroshot_test;
  RetrievalSet retrieval;
  ImageSet validation_update;
  ImageSet validation_zeroshot;
  SessionPlan plan;
};

Splits build_splits(const SyntheticWorld& world, const SessionPlan& plan, const SplitSizes& sizes);

/// Table-I-style audit manifest: per-session class names and counts.
nlohmann::json split_manifest(const SyntheticWorld& world, const Splits& splits);

nlohmann::json to_json(const WorldConfig& c);
nlohmann::json to_json(const SplitSizes& s);

}  // namespace clipcl
