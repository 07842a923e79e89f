#include "clipcl/world.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace clipcl {

namespace {

// Salts for independent RNG streams derived from the world seed.
constexpr std::uint64_t kSaltNames = 0x6e616d65;
constexpr std::uint64_t kSaltPretrain = 0x70726574;
constexpr std::uint64_t kSaltTrain = 0x74726169;
constexpr std::uint64_t kSaltTest = 0x74657374;
constexpr std::uint64_t kSaltZeroShot = 0x7a65726f;
constexpr std::uint64_t kSaltRetrieval = 0x72657472;
constexpr std::uint64_t kSaltValidation = 0x76616c69;

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

const std::vector<std::string> kOnsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p",
                                          "r", "s", "t", "v", "z", "br", "kr", "st", "tr"};
const std::vector<std::string> kVowels = {"a", "e", "i", "o", "u", "ai", "ou"};

std::string make_word(std::mt19937_64& rng, int syllables) {
  std::uniform_int_distribution<std::size_t> onset(0, kOnsets.size() - 1);
  std::uniform_int_distribution<std::size_t> vowel(0, kVowels.size() - 1);
  std::string w;
  for (int i = 0; i < syllables; ++i) w += kOnsets[onset(rng)] + kVowels[vowel(rng)];
  return w;
}

std::string fresh_token(std::mt19937_64& rng, const Vocabulary& vocab, int syllables) {
  for (;;) {
    auto w = make_word(rng, syllables);
    if (!vocab.contains(w)) return w;
    ++syllables;
  }
}

Vec gaussian_vec(int n, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = sigma * dist(rng);
  return v;
}

bool prototypes_distinct(const std::vector<ConceptSpec>& concepts, double min_dist) {
  for (std::size_t i = 0; i < concepts.size(); ++i)
    for (std::size_t j = i + 1; j < concepts.size(); ++j)
      if ((concepts[i].prototype - concepts[j].prototype).norm() <= min_dist) return false;
  return true;
}

ImageSet sample_images(const SyntheticWorld& world, const std::vector<int>& classes, int per_class,
                       std::mt19937_64& rng) {
  ImageSet set;
  set.features.resize(world.config.input_dim, static_cast<Eigen::Index>(classes.size()) * per_class);
  Eigen::Index col = 0;
  for (int c : classes) {
    for (int i = 0; i < per_class; ++i, ++col) {
      set.features.col(col) = sample_image(world, c, rng);
      set.class_ids.push_back(c);
    }
  }
  return set;
}

}  // namespace

std::string to_string(ConceptRole role) {
  switch (role) {
    case ConceptRole::PretrainOnly: return "pretrain-only";
    case ConceptRole::UpdateTask: return "update-task";
    case ConceptRole::ZeroShot: return "zero-shot";
    case ConceptRole::Validation: return "validation";
  }
  return "unknown";
}

std::string ConceptSpec::name() const {
  std::string out;
  for (const auto& t : name_tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

const ConceptSpec& SyntheticWorld::concept_at(int class_id) const {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= concepts.size())
    throw InvalidInput("unknown concept " + std::to_string(class_id));
  return concepts[static_cast<std::size_t>(class_id)];
}

std::vector<int> SyntheticWorld::concepts_with_role(ConceptRole role) const {
  std::vector<int> out;
  for (const auto& c : concepts)
    if (c.role == role) out.push_back(c.class_id);
  return out;
}

TextSequence SyntheticWorld::prompt_for(int class_id) const {
  return render_prompt(concept_at(class_id).name(), prompt, vocabulary);
}

Vec SyntheticWorld::noiseless_image(int class_id) const {
  return render_matrix * concept_at(class_id).prototype;
}

SyntheticWorld generate_world(const WorldConfig& config, std::uint64_t seed) {
  const auto& c = config;
  if (c.num_pretrain_only < 0 || c.num_update < 0 || c.num_zero_shot < 0 || c.num_validation < 0 ||
      c.num_concepts() < 1)
    throw InvalidInput("concept counts must be non-negative with at least one concept");
  if (c.input_dim < 1 || c.latent_dim < 1 || c.latent_dim > c.input_dim)
    throw InvalidInput("need 1 <= latent_dim <= input_dim");
  if (c.noise_sigma < 0.0) throw InvalidInput("noise_sigma must be non-negative");
  if (c.num_filler_tokens < 1 || c.min_filler < 0 || c.max_filler < c.min_filler)
    throw InvalidInput("bad filler configuration");
  if (c.update_clusters < 1) throw InvalidInput("update_clusters must be positive");

  SyntheticWorld world;
  world.seed = seed;
  world.config = config;
  world.noise_sigma = config.noise_sigma;

  std::mt19937_64 rng(seed);
  world.render_matrix = Mat(c.input_dim, c.latent_dim);
  {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(c.latent_dim)));
    for (Eigen::Index j = 0; j < world.render_matrix.cols(); ++j)
      for (Eigen::Index i = 0; i < world.render_matrix.rows(); ++i) world.render_matrix(i, j) = dist(rng);
  }

  std::vector<ConceptRole> roles;
  roles.insert(roles.end(), static_cast<std::size_t>(c.num_pretrain_only), ConceptRole::PretrainOnly);
  roles.insert(roles.end(), static_cast<std::size_t>(c.num_update), ConceptRole::UpdateTask);
  roles.insert(roles.end(), static_cast<std::size_t>(c.num_zero_shot), ConceptRole::ZeroShot);
  roles.insert(roles.end(), static_cast<std::size_t>(c.num_validation), ConceptRole::Validation);

  const double min_dist = 2.0 * c.noise_sigma;
  bool ok = false;
  for (int attempt = 0; attempt <= c.max_retries && !ok; ++attempt) {
    world.concepts.clear();
    std::vector<Vec> centers;
    for (int k = 0; k < c.update_clusters; ++k) centers.push_back(gaussian_vec(c.latent_dim, 1.0, rng));
    int update_index = 0;
    for (std::size_t i = 0; i < roles.size(); ++i) {
      ConceptSpec spec;
      spec.class_id = static_cast<int>(i);
      spec.role = roles[i];
      if (spec.role == ConceptRole::UpdateTask) {
        const Vec& center = centers[static_cast<std::size_t>(update_index++ % c.update_clusters)];
        spec.prototype = center + gaussian_vec(c.latent_dim, c.update_spread, rng);
      } else {
        spec.prototype = gaussian_vec(c.latent_dim, 1.0, rng);
      }
      world.concepts.push_back(std::move(spec));
    }
    ok = prototypes_distinct(world.concepts, min_dist);
  }
  if (!ok)
    throw WorldGenerationError("could not draw pairwise-distinct prototypes after " +
                               std::to_string(c.max_retries) + " retries");

  auto names_rng = stream(seed, kSaltNames);
  for (const auto& t : world.prompt.all_tokens()) world.vocabulary.add(t);
  for (int i = 0; i < c.num_filler_tokens; ++i)
    world.filler_tokens.push_back(world.vocabulary.add(fresh_token(names_rng, world.vocabulary, 1)));
  for (const auto& t : world.prompt.all_tokens()) world.filler_tokens.push_back(world.vocabulary.id(t));
  std::bernoulli_distribution two_tokens(c.two_token_name_rate);
  for (auto& spec : world.concepts) {
    int n = two_tokens(names_rng) ? 2 : 1;
    for (int k = 0; k < n; ++k) {
      auto tok = fresh_token(names_rng, world.vocabulary, 2);
      world.vocabulary.add(tok);
      spec.name_tokens.push_back(tok);
    }
  }
  return world;
}

ImageSample ImageSet::sample(std::size_t i) const {
  return ImageSample{features.col(static_cast<Eigen::Index>(i)), class_ids.at(i)};
}

ImageSet ImageSet::subset(const std::vector<std::size_t>& indices) const {
  ImageSet out;
  out.features.resize(features.rows(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    out.features.col(static_cast<Eigen::Index>(k)) = features.col(static_cast<Eigen::Index>(indices[k]));
    out.class_ids.push_back(class_ids.at(indices[k]));
  }
  return out;
}

std::vector<int> ImageSet::distinct_classes() const {
  std::set<int> s(class_ids.begin(), class_ids.end());
  return {s.begin(), s.end()};
}

ImageSet concat(const std::vector<const ImageSet*>& parts) {
  ImageSet out;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  for (const auto* p : parts) {
    if (p->size() == 0) continue;
    rows = p->features.rows();
    cols += p->features.cols();
  }
  out.features.resize(rows, cols);
  Eigen::Index at = 0;
  for (const auto* p : parts) {
    if (p->size() == 0) continue;
    out.features.middleCols(at, p->features.cols()) = p->features;
    at += p->features.cols();
    out.class_ids.insert(out.class_ids.end(), p->class_ids.begin(), p->class_ids.end());
  }
  return out;
}

Vec sample_image(const SyntheticWorld& world, int concept_id, std::mt19937_64& rng) {
  const auto& spec = world.concept_at(concept_id);
  Vec latent = spec.prototype;
  if (world.noise_sigma > 0.0) latent += gaussian_vec(world.config.latent_dim, world.noise_sigma, rng);
  return world.render_matrix * latent;
}

TextSequence sample_caption(const SyntheticWorld& world, int concept_id, std::mt19937_64& rng) {
  const auto& spec = world.concept_at(concept_id);
  const auto& c = world.config;
  std::uniform_int_distribution<int> count(c.min_filler, c.max_filler);
  int fillers = count(rng);
  std::uniform_int_distribution<int> split(0, fillers);
  int before = split(rng);
  std::uniform_int_distribution<std::size_t> pick(0, world.filler_tokens.size() - 1);
  TextSequence seq;
  for (int i = 0; i < before; ++i) seq.ids.push_back(world.filler_tokens[pick(rng)]);
  for (const auto& t : spec.name_tokens) seq.ids.push_back(world.vocabulary.id(t));
  for (int i = before; i < fillers; ++i) seq.ids.push_back(world.filler_tokens[pick(rng)]);
  return seq;
}

std::pair<ImageSample, TextSequence> sample_pair(const SyntheticWorld& world, int concept_id,
                                                 std::mt19937_64& rng) {
  Vec image = sample_image(world, concept_id, rng);
  TextSequence caption = sample_caption(world, concept_id, rng);
  return {ImageSample{std::move(image), concept_id}, std::move(caption)};
}

SessionPlan SessionPlan::contiguous(const std::vector<int>& classes, int num_sessions) {
  if (num_sessions < 1) throw InvalidInput("need at least one session");
  if (classes.size() % static_cast<std::size_t>(num_sessions) != 0)
    throw InvalidInput(std::to_string(classes.size()) + " update classes do not split evenly into " +
                       std::to_string(num_sessions) + " sessions");
  SessionPlan plan;
  std::size_t per = classes.size() / static_cast<std::size_t>(num_sessions);
  for (int s = 0; s < num_sessions; ++s)
    plan.groups.emplace_back(classes.begin() + static_cast<std::ptrdiff_t>(s * per),
                             classes.begin() + static_cast<std::ptrdiff_t>((s + 1) * per));
  return plan;
}

void SessionPlan::validate(const std::vector<int>& update_classes) const {
  if (groups.empty()) throw InvalidInput("session plan has no groups");
  std::set<int> seen;
  for (const auto& g : groups) {
    if (g.empty()) throw InvalidInput("empty session group");
    for (int c : g)
      if (!seen.insert(c).second) throw InvalidInput("class " + std::to_string(c) + " in two sessions");
  }
  std::set<int> expected(update_classes.begin(), update_classes.end());
  if (seen != expected) throw InvalidInput("session groups must cover exactly the update-task classes");
}

std::vector<int> SessionPlan::all_classes() const {
  std::vector<int> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

int RetrievalSet::fold_of_image(std::size_t i) const {
  return static_cast<int>(i * static_cast<std::size_t>(fold_count) / images.size());
}

RetrievalSet shuffle_captions(const RetrievalSet& set, std::uint64_t seed) {
  RetrievalSet out = set;
  std::mt19937_64 rng(seed);
  for (auto& cap : out.captions) std::shuffle(cap.ids.begin(), cap.ids.end(), rng);
  return out;
}

Splits build_splits(const SyntheticWorld& world, const SessionPlan& plan, const SplitSizes& sizes) {
  const auto update = world.concepts_with_role(ConceptRole::UpdateTask);
  const auto zero_shot = world.concepts_with_role(ConceptRole::ZeroShot);
  const auto validation = world.concepts_with_role(ConceptRole::Validation);
  const auto pretrain_only = world.concepts_with_role(ConceptRole::PretrainOnly);
  plan.validate(update);
  if (sizes.train_per_class < 1 || sizes.test_per_class < 1 || sizes.zeroshot_per_class < 0 ||
      sizes.pretrain_pairs < 0 || sizes.update_pretrain_pairs < 0 || sizes.retrieval_folds < 1 ||
      sizes.retrieval_images_per_fold < 1 || sizes.captions_per_image < 1)
    throw InvalidInput("split sizes must be positive");

  Splits s;
  s.plan = plan;

  {
    auto rng = stream(world.seed, kSaltPretrain);
    std::vector<Vec> images;
    for (const auto& spec : world.concepts) {
      int n = spec.role == ConceptRole::UpdateTask ? sizes.update_pretrain_pairs : sizes.pretrain_pairs;
      for (int i = 0; i < n; ++i) {
        auto [img, cap] = sample_pair(world, spec.class_id, rng);
        images.push_back(std::move(img.features));
        s.pretrain.images.class_ids.push_back(spec.class_id);
        s.pretrain.captions.push_back(std::move(cap));
      }
    }
    s.pretrain.images.features.resize(world.config.input_dim, static_cast<Eigen::Index>(images.size()));
    for (std::size_t i = 0; i < images.size(); ++i)
      s.pretrain.images.features.col(static_cast<Eigen::Index>(i)) = images[i];
  }
  {
    auto rng = stream(world.seed, kSaltTrain);
    // Class order follows the session plan so each session is a contiguous block.
    s.ost_train = sample_images(world, plan.all_classes(), sizes.train_per_class, rng);
    std::size_t at = 0;
    for (const auto& g : plan.groups) {
      std::vector<std::size_t> idx(g.size() * static_cast<std::size_t>(sizes.train_per_class));
      std::iota(idx.begin(), idx.end(), at);
      at += idx.size();
      s.mst_sessions.push_back(s.ost_train.subset(idx));
    }
  }
  {
    auto rng = stream(world.seed, kSaltTest);
    s.update_test = sample_images(world, update, sizes.test_per_class, rng);
  }
  {
    auto rng = stream(world.seed, kSaltZeroShot);
    s.zeroshot_test = sample_images(world, zero_shot, sizes.zeroshot_per_class, rng);
  }
  {
    auto rng = stream(world.seed, kSaltRetrieval);
    std::vector<int> pool = pretrain_only;
    pool.insert(pool.end(), update.begin(), update.end());
    pool.insert(pool.end(), zero_shot.begin(), zero_shot.end());
    if (pool.empty()) throw InvalidInput("no concepts available for retrieval images");
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    int n = sizes.retrieval_folds * sizes.retrieval_images_per_fold;
    auto& r = s.retrieval;
    r.fold_count = sizes.retrieval_folds;
    r.images.features.resize(world.config.input_dim, n);
    for (int i = 0; i < n; ++i) {
      int c = pool[pick(rng)];
      r.images.features.col(i) = sample_image(world, c, rng);
      r.images.class_ids.push_back(c);
      for (int k = 0; k < sizes.captions_per_image; ++k) {
        r.captions.push_back(sample_caption(world, c, rng));
        r.caption_image.push_back(i);
      }
    }
  }
  {
    auto rng = stream(world.seed, kSaltValidation);
    s.validation_update = sample_images(world, update, sizes.validation_update_per_class, rng);
    s.validation_zeroshot = sample_images(world, validation, sizes.validation_zeroshot_per_class, rng);
  }
  return s;
}

nlohmann::json to_json(const WorldConfig& c) {
  return {{"num_pretrain_only", c.num_pretrain_only},
          {"num_update", c.num_update},
          {"num_zero_shot", c.num_zero_shot},
          {"num_validation", c.num_validation},
          {"input_dim", c.input_dim},
          {"latent_dim", c.latent_dim},
          {"noise_sigma", c.noise_sigma},
          {"num_filler_tokens", c.num_filler_tokens},
          {"min_filler", c.min_filler},
          {"max_filler", c.max_filler},
          {"update_clusters", c.update_clusters},
          {"update_spread", c.update_spread},
          {"two_token_name_rate", c.two_token_name_rate},
          {"max_retries", c.max_retries}};
}

nlohmann::json to_json(const SplitSizes& s) {
  return {{"pretrain_pairs", s.pretrain_pairs},
          {"update_pretrain_pairs", s.update_pretrain_pairs},
          {"train_per_class", s.train_per_class},
          {"test_per_class", s.test_per_class},
          {"zeroshot_per_class", s.zeroshot_per_class},
          {"validation_update_per_class", s.validation_update_per_class},
          {"validation_zeroshot_per_class", s.validation_zeroshot_per_class},
          {"retrieval_folds", s.retrieval_folds},
          {"retrieval_images_per_fold", s.retrieval_images_per_fold},
          {"captions_per_image", s.captions_per_image}};
}

nlohmann::json split_manifest(const SyntheticWorld& world, const Splits& splits) {
  nlohmann::json sessions = nlohmann::json::array();
  for (std::size_t i = 0; i < splits.plan.groups.size(); ++i) {
    const auto& g = splits.plan.groups[i];
    std::set<int> members(g.begin(), g.end());
    std::vector<std::string> names;
    for (int c : g) names.push_back(world.concept_at(c).name());
    auto test_count = std::count_if(splits.update_test.class_ids.begin(), splits.update_test.class_ids.end(),
                                    [&](int c) { return members.count(c) != 0; });
    sessions.push_back({{"session", i + 1},
                        {"class_ids", g},
                        {"class_names", names},
                        {"train_count", splits.mst_sessions[i].size()},
                        {"test_count", test_count}});
  }
  nlohmann::json roles;
  for (auto role : {ConceptRole::PretrainOnly, ConceptRole::UpdateTask, ConceptRole::ZeroShot,
                    ConceptRole::Validation})
    roles[to_string(role)] = world.concepts_with_role(role).size();
  return {{"seed", world.seed},
          {"world", to_json(world.config)},
          {"vocabulary_size", world.vocabulary.size()},
          {"roles", roles},
          {"sessions", sessions},
          {"counts",
           {{"pretrain_pairs", splits.pretrain.captions.size()},
            {"ost_train", splits.ost_train.size()},
            {"update_test", splits.update_test.size()},
            {"zeroshot_test", splits.zeroshot_test.size()},
            {"retrieval_images", splits.retrieval.images.size()},
            {"retrieval_captions", splits.retrieval.captions.size()},
            {"retrieval_folds", splits.retrieval.fold_count},
            {"validation_update", splits.validation_update.size()},
            {"validation_zeroshot", splits.validation_zeroshot.size()}}}};
}

}  // namespace clipcl
