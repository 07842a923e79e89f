#include "clipcl/training.hpp"

#include "clipcl/distill.hpp"
#include "clipcl/gfk.hpp"
#include "clipcl/imm.hpp"
#include "clipcl/optimizer.hpp"
#include "clipcl/replay.hpp"
#include "clipcl/rkr.hpp"
#include "clipcl/similarity.hpp"

#include <algorithm>
#include <chrono>
#include <future>
#include <numeric>

namespace clipcl {

namespace {

constexpr std::uint64_t kSaltPretrainRun = 0x50524554;
constexpr std::uint64_t kSaltFinetune = 0x46494e45;
const std::vector<int> kRecallKs = {1, 5, 10};

std::mt19937_64 run_stream(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

std::vector<TextSequence> prompts_for(const SyntheticWorld& world, const std::vector<int>& classes) {
  std::vector<TextSequence> out;
  out.reserve(classes.size());
  for (int c : classes) out.push_back(world.prompt_for(c));
  return out;
}

Mat columns(const Mat& m, std::span<const std::size_t> idx) {
  Mat out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.col(static_cast<Eigen::Index>(k)) = m.col(static_cast<Eigen::Index>(idx[k]));
  return out;
}

void add_scaled(Gradients& into, const Gradients& from, double weight) {
  for (const auto& name : into.trainable) into.at(name) += weight * from.buffers.at(name);
}

std::vector<int> concat_groups(const std::vector<std::vector<int>>& groups, std::size_t first, std::size_t last) {
  std::vector<int> out;
  for (std::size_t g = first; g < last; ++g) out.insert(out.end(), groups[g].begin(), groups[g].end());
  return out;
}

/// One fine-tuning stage (the whole OST run, or one MST session).
struct Stage {
  const ImageSet* data = nullptr;
  std::vector<int> ce_classes;
  std::vector<int> distill_classes;   // LwF / GeoDL text class set
  std::vector<int> previous_classes;  // VR-LwF previous-session prompts
  Snapshot teacher;
  Snapshot replay_teacher;  // text encoder for VR-LwF pseudo-classes
  int session = 1;
};

class StageTrainer {
 public:
  StageTrainer(const Lab& lab, const TrainPlan& plan, std::mt19937_64& rng) : lab_(lab), plan_(plan), rng_(rng) {}

  void run(ParameterSet& params, const Stage& stage, const std::set<std::string>& trainable,
           std::vector<EpochLog>& log) {
    const auto& method = plan_.method;
    const auto& enc = lab_.encoder;
    const ImageSet& data = *stage.data;
    if (data.size() == 0) throw InvalidInput("empty training stage");
    const bool needs_teacher = method.distills();
    if (needs_teacher && !stage.teacher) throw InvalidInput("distillation method without a teacher snapshot");

    std::map<int, int> label_of;
    for (std::size_t i = 0; i < stage.ce_classes.size(); ++i) label_of[stage.ce_classes[i]] = static_cast<int>(i);
    auto ce_prompts = prompts_for(lab_.world, stage.ce_classes);
    auto distill_prompts = prompts_for(lab_.world, stage.distill_classes);
    auto previous_prompts = prompts_for(lab_.world, stage.previous_classes);

    Mat teacher_images;
    Mat teacher_classes;
    double tau_old = 0.0;
    if (needs_teacher) {
      teacher_images = enc.encode_images(*stage.teacher, data.features);
      tau_old = stage.teacher->tau();
      if (method.method == Method::LwF || method.method == Method::GeoDL)
        teacher_classes = enc.encode_texts(*stage.teacher, distill_prompts);
    }

    Adam adam(trainable);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    const auto batch = static_cast<std::size_t>(plan_.batch_size);
    for (int epoch = 1; epoch <= plan_.epochs; ++epoch) {
      double lr = plan_.lr;
      if (plan_.decay_epoch > 0 && epoch > plan_.decay_epoch) lr *= plan_.decay_factor;
      std::shuffle(order.begin(), order.end(), rng_);
      double sum_total = 0.0;
      double sum_ce = 0.0;
      double sum_distill = 0.0;
      std::size_t steps = 0;
      for (std::size_t start = 0; start < order.size(); start += batch) {
        std::span<const std::size_t> idx(order.data() + start, std::min(batch, order.size() - start));
        auto losses = step(params, stage, adam, lr, data, idx, label_of, ce_prompts, distill_prompts,
                           previous_prompts, teacher_images, teacher_classes, tau_old);
        sum_ce += losses.first;
        sum_distill += losses.second;
        sum_total += losses.first + (method.beta ? *method.beta : 0.0) * losses.second;
        ++steps;
      }
      EpochLog e;
      e.session = stage.session;
      e.epoch = epoch;
      e.loss_total = sum_total / static_cast<double>(steps);
      e.loss_ce = sum_ce / static_cast<double>(steps);
      if (method.distills()) e.loss_distill = sum_distill / static_cast<double>(steps);
      log.push_back(e);
    }
  }

 private:
  // Returns (ce loss, unweighted distillation loss).
  std::pair<double, double> step(ParameterSet& params, const Stage& stage, Adam& adam, double lr,
                                 const ImageSet& data, std::span<const std::size_t> idx,
                                 const std::map<int, int>& label_of, const std::vector<TextSequence>& ce_prompts,
                                 const std::vector<TextSequence>& distill_prompts,
                                 const std::vector<TextSequence>& previous_prompts, const Mat& teacher_images,
                                 const Mat& teacher_classes, double tau_old) {
    const auto& enc = lab_.encoder;
    const auto& method = plan_.method;
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) {
      int c = data.class_ids[i];
      if (lab_.world.concept_at(c).role == ConceptRole::ZeroShot)
        throw Error("zero-shot class " + std::to_string(c) + " reached a fine-tuning batch");
      auto it = label_of.find(c);
      if (it == label_of.end()) throw InvalidInput("label " + std::to_string(c) + " outside the session's classes");
      labels.push_back(it->second);
    }
    Mat x = columns(data.features, idx);
    const double tau = params.tau();

    Gradients grads = Gradients::for_params(params, adam.trainable());
    ImageCache icache;
    TextCache ccache;
    Mat f_new = enc.encode_images(params, x, &icache);
    Mat c_new = enc.encode_texts(params, ce_prompts, &ccache);
    auto ce = cross_entropy_loss(f_new, c_new, labels, tau);
    Mat d_images = ce.d_images;
    enc.backward_texts(params, ccache, ce.d_classes, grads);

    double distill = 0.0;
    if (method.distills()) {
      const double beta = *method.beta;
      Mat f_old = columns(teacher_images, idx);
      switch (method.method) {
        case Method::LwF: {
          TextCache dcache;
          Mat t_new = enc.encode_texts(params, distill_prompts, &dcache);
          Mat teacher = class_probabilities(f_old, teacher_classes, tau_old);
          auto d = distill_loss(f_new, t_new, tau, teacher, method.direction);
          distill = d.loss;
          d_images += beta * d.d_images;
          enc.backward_texts(params, dcache, beta * d.d_classes, grads);
          break;
        }
        case Method::GeoDL: {
          if (f_new.cols() >= 2) {
            int k = *method.subspace_dim > 0 ? *method.subspace_dim : default_subspace_dim(f_new.cols(), f_new.rows());
            auto qi = geodesic_flow_kernel(f_old, f_new, k);
            auto gi = geodl_batch(f_old, f_new, qi);
            distill += gi.loss;
            d_images += beta * gi.d_new;
          }
          TextCache dcache;
          Mat t_new = enc.encode_texts(params, distill_prompts, &dcache);
          if (t_new.cols() >= 2) {
            int k = *method.subspace_dim > 0 ? *method.subspace_dim : default_subspace_dim(t_new.cols(), t_new.rows());
            k = std::min<int>(k, static_cast<int>(t_new.cols()));
            auto qt = geodesic_flow_kernel(teacher_classes, t_new, k);
            auto gt = geodl_batch(teacher_classes, t_new, qt);
            distill += gt.loss;
            enc.backward_texts(params, dcache, beta * gt.d_new, grads);
          }
          break;
        }
        case Method::VRLwF: {
          auto pseudo = pseudo_classes(previous_prompts);
          Gradients vgrads = Gradients::for_params(params, adam.trainable());
          bool separate_previous = *method.replay_source != ReplaySource::PreviousClassesAugmented;
          std::span<const TextSequence> prev =
              separate_previous ? std::span<const TextSequence>(previous_prompts) : std::span<const TextSequence>();
          auto v = vr_lwf_mst_loss(enc, f_old, f_new, pseudo, prev, *stage.replay_teacher, *stage.teacher, params,
                                   tau_old, tau,
                                   &vgrads, method.direction);
          distill = v.loss;
          d_images += beta * v.d_images;
          add_scaled(grads, vgrads, beta);
          break;
        }
        default: break;
      }
    }
    enc.backward_images(params, icache, d_images, grads);
    adam.step(params, grads, lr);
    return {ce.loss, distill};
  }

  std::vector<TextSequence> pseudo_classes(const std::vector<TextSequence>& previous_prompts) {
    const auto& method = plan_.method;
    ReplayedVocabulary replay;
    if (*method.replay_source == ReplaySource::CaptionCorpus) {
      replay = sample_caption_replay(lab_.splits.pretrain.captions, *method.replay_count, rng_);
    } else {
      replay = build_replayed_vocabulary(lab_.world.vocabulary.size(), *method.sample_length,
                                         *method.replay_count, rng_);
    }
    if (method.template_pseudo) {
      const auto& tmpl = lab_.world.prompt;
      for (auto& seq : replay.sequences) {
        std::vector<TokenId> ids;
        for (const auto& t : tmpl.prefix) ids.push_back(lab_.world.vocabulary.id(t));
        ids.insert(ids.end(), seq.ids.begin(), seq.ids.end());
        for (const auto& t : tmpl.suffix) ids.push_back(lab_.world.vocabulary.id(t));
        seq.ids = std::move(ids);
      }
    }
    if (*method.replay_source == ReplaySource::PreviousClassesAugmented)
      replay.sequences.insert(replay.sequences.end(), previous_prompts.begin(), previous_prompts.end());
    return std::move(replay.sequences);
  }

  const Lab& lab_;
  const TrainPlan& plan_;
  std::mt19937_64& rng_;
};

struct SessionEval {
  std::vector<int> ut_predictions;
  double ut_overall = 0.0;
  double zs = 0.0;
};

SessionEval evaluate_classification(const Lab& lab, const ParameterSet& params) {
  SessionEval out;
  auto update = lab.world.concepts_with_role(ConceptRole::UpdateTask);
  auto ut = classification_accuracy(lab.encoder, params, lab.world, lab.splits.update_test, update);
  out.ut_predictions = std::move(ut.predicted_class_ids);
  out.ut_overall = ut.accuracy;
  out.zs = classification_accuracy(lab.encoder, params, lab.world, lab.splits.zeroshot_test,
                                   lab.world.concepts_with_role(ConceptRole::ZeroShot))
               .accuracy;
  return out;
}

void fill_retrieval(const Lab& lab, const ParameterSet& params, MetricsReport& m) {
  Mat images = lab.encoder.encode_images(params, lab.splits.retrieval.images.features);
  Mat caps = lab.encoder.encode_texts(params, lab.splits.retrieval.captions);
  m.tr_at = recall_from_embeddings(images, caps, lab.splits.retrieval, kRecallKs, RetrievalDirection::TextRetrieval);
  m.ir_at = recall_from_embeddings(images, caps, lab.splits.retrieval, kRecallKs, RetrievalDirection::ImageRetrieval);
  m.fold_count = lab.splits.retrieval.fold_count;
}

std::vector<double> session_row(const Lab& lab, const std::vector<int>& predictions, std::size_t sessions) {
  std::vector<double> row;
  for (std::size_t i = 0; i < sessions; ++i)
    row.push_back(subset_accuracy(predictions, lab.splits.update_test.class_ids, lab.splits.plan.groups[i]));
  return row;
}

MetricsReport original_report(const Lab& lab, const ParameterSet& original, Protocol protocol) {
  MetricsReport m = evaluate_model(lab, original);
  if (protocol == Protocol::MST) {
    auto eval = evaluate_classification(lab, original);
    m.ut_acc = session_average_ut_acc(session_row(lab, eval.ut_predictions, lab.splits.plan.groups.size()));
  }
  m.a_acc = a_acc(m.ut_acc, m.zs_acc);
  return m;
}

ParameterSet prepare_student(const ParameterSet& original, const TrainPlan& plan) {
  ParameterSet p = original;
  if (plan.method.method == Method::RKR) {
    RkrOptions opts;
    opts.image = plan.option != UpdateOption::TO;
    opts.text = plan.option != UpdateOption::IO;
    opts.rectification = plan.method.rectification.value_or(false);
    install_rkr_adapters(p, opts);
  }
  return p;
}

}  // namespace

std::string to_string(Protocol p) { return p == Protocol::OST ? "OST" : "MST"; }
std::string to_string(TeacherPolicy t) {
  switch (t) {
    case TeacherPolicy::Auto: return "auto";
    case TeacherPolicy::PreviousSession: return "previous-session";
    case TeacherPolicy::Original: return "original";
  }
  return "?";
}

Protocol parse_protocol(const std::string& s) {
  if (s == "OST") return Protocol::OST;
  if (s == "MST") return Protocol::MST;
  throw ConfigError("unknown protocol '" + s + "' (expected OST or MST)");
}

TeacherPolicy parse_teacher_policy(const std::string& s) {
  if (s == "auto") return TeacherPolicy::Auto;
  if (s == "previous-session") return TeacherPolicy::PreviousSession;
  if (s == "original") return TeacherPolicy::Original;
  throw ConfigError("unknown teacher policy '" + s + "' (expected auto, previous-session or original)");
}

Lab make_lab(const LabConfig& config, std::uint64_t seed) {
  auto world = generate_world(config.world, seed);
  auto plan = SessionPlan::contiguous(world.concepts_with_role(ConceptRole::UpdateTask), config.num_sessions);
  auto splits = build_splits(world, plan, config.sizes);
  ModelConfig model = config.model;
  model.input_dim = config.world.input_dim;
  model.vocab_size = static_cast<int>(world.vocabulary.size());
  DualEncoder encoder(model);
  return Lab{std::move(world), std::move(splits), std::move(encoder)};
}

PretrainResult pretrain_contrastive(const Lab& lab, const PretrainPlan& plan, std::uint64_t seed) {
  if (plan.epochs < 0 || plan.batch_size < 2 || !(plan.lr > 0.0)) throw InvalidInput("bad pretraining plan");
  PretrainResult out;
  out.params = lab.encoder.init_parameters(seed);
  auto rng = run_stream(seed, kSaltPretrainRun);
  const auto& corpus = lab.splits.pretrain;
  std::set<std::string> trainable = out.params.names();
  Adam adam(trainable);
  std::vector<std::size_t> order(corpus.captions.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(plan.batch_size);
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += batch) {
      std::size_t n = std::min(batch, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, n);
      std::vector<TextSequence> caps;
      caps.reserve(n);
      for (std::size_t i : idx) caps.push_back(corpus.captions[i]);
      Gradients grads = Gradients::for_params(out.params, trainable);
      ImageCache icache;
      TextCache tcache;
      Mat f = lab.encoder.encode_images(out.params, columns(corpus.images.features, idx), &icache);
      Mat t = lab.encoder.encode_texts(out.params, caps, &tcache);
      double tau = out.params.tau();
      auto loss = contrastive_loss(f, t, tau);
      lab.encoder.backward_images(out.params, icache, loss.d_images, grads);
      lab.encoder.backward_texts(out.params, tcache, loss.d_texts, grads);
      // d/d(log tau) through the clamp
      if (out.params.tau_in_range()) grads.at(kLogitScaleName)(0, 0) += loss.d_tau * tau;
      adam.step(out.params, grads, plan.lr);
      out.params.clamp_logit_scale();
      sum += loss.loss;
      ++steps;
    }
    out.epoch_losses.push_back(steps ? sum / static_cast<double>(steps) : 0.0);
  }
  auto zs_classes = lab.world.concepts_with_role(ConceptRole::ZeroShot);
  if (!zs_classes.empty() && lab.splits.zeroshot_test.size() > 0) {
    out.chance = 1.0 / static_cast<double>(zs_classes.size());
    out.zs_acc = classification_accuracy(lab.encoder, out.params, lab.world, lab.splits.zeroshot_test, zs_classes).accuracy;
    if (plan.enforce_gate && out.zs_acc < plan.gate_ratio * out.chance)
      throw PretrainQualityError("pretrained zero-shot accuracy " + std::to_string(out.zs_acc) + " is below " +
                                 std::to_string(plan.gate_ratio) + "x chance (" + std::to_string(out.chance) +
                                 "); final epoch loss " +
                                 (out.epoch_losses.empty() ? std::string("n/a") : std::to_string(out.epoch_losses.back())));
  }
  return out;
}

TrainPlan TrainPlan::defaults(Protocol protocol) {
  TrainPlan p;
  p.protocol = protocol;
  if (protocol == Protocol::OST) {
    p.epochs = 15;
    p.decay_epoch = 10;
  } else {
    p.epochs = 10;
    p.decay_epoch = 0;
  }
  return p;
}

void TrainPlan::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (decay_epoch < 0) throw ConfigError("decay_epoch must be >= 0");
  if (joint && protocol != Protocol::MST) throw ConfigError("joint training is an MST protocol flag");
  if (joint && method.method != Method::FT) throw ConfigError("joint training uses plain fine-tuning");
  method.validate();
}

std::set<std::string> apply_update_option(const ParameterSet& params, UpdateOption option, bool adapters_only) {
  std::set<std::string> out;
  bool image = option != UpdateOption::TO;
  bool text = option != UpdateOption::IO;
  for (const auto& [name, t] : params.tensors()) {
    bool take = false;
    if (adapters_only) {
      take = (image && t.partition == Partition::ImageAdapter) || (text && t.partition == Partition::TextAdapter);
    } else {
      take = (image && t.partition == Partition::Image) || (text && t.partition == Partition::Text);
    }
    if (take) out.insert(name);
  }
  return out;
}

std::string MemoryCheckpointStore::put(const std::string& label, const ParameterSet& params) {
  blobs_[label] = serialize_checkpoint(params);
  return label;
}

ParameterSet MemoryCheckpointStore::get(const std::string& id) const {
  auto it = blobs_.find(id);
  if (it == blobs_.end()) throw InvalidInput("no checkpoint '" + id + "'");
  return deserialize_checkpoint(it->second);
}

std::string DirectoryCheckpointStore::put(const std::string& label, const ParameterSet& params) {
  auto rel = std::filesystem::path("checkpoints") / (label + ".ckpt");
  save_checkpoint(params, dir_ / rel);
  return rel.generic_string();
}

ParameterSet DirectoryCheckpointStore::get(const std::string& id) const { return load_checkpoint(dir_ / id); }

double finetune_classification_loss(const Lab& lab, const ImageSet& batch, const ParameterSet& params,
                                    const std::vector<int>& class_ids, Gradients* grads) {
  std::map<int, int> label_of;
  for (std::size_t i = 0; i < class_ids.size(); ++i) label_of[class_ids[i]] = static_cast<int>(i);
  std::vector<int> labels;
  for (int c : batch.class_ids) {
    auto it = label_of.find(c);
    if (it == label_of.end()) throw InvalidInput("label " + std::to_string(c) + " outside the class set");
    labels.push_back(it->second);
  }
  auto prompts = prompts_for(lab.world, class_ids);
  ImageCache icache;
  TextCache tcache;
  Mat f = lab.encoder.encode_images(params, batch.features, grads ? &icache : nullptr);
  Mat c = lab.encoder.encode_texts(params, prompts, grads ? &tcache : nullptr);
  auto ce = cross_entropy_loss(f, c, labels, params.tau());
  if (grads) {
    lab.encoder.backward_images(params, icache, ce.d_images, *grads);
    lab.encoder.backward_texts(params, tcache, ce.d_classes, *grads);
  }
  return ce.loss;
}

MetricsReport evaluate_model(const Lab& lab, const ParameterSet& params) {
  MetricsReport m;
  auto eval = evaluate_classification(lab, params);
  m.ut_acc = eval.ut_overall;
  m.ut_acc_overall = eval.ut_overall;
  m.zs_acc = eval.zs;
  m.a_acc = a_acc(m.ut_acc, m.zs_acc);
  fill_retrieval(lab, params, m);
  return m;
}

RunRecord run_ost(const Lab& lab, const TrainPlan& plan, const ParameterSet& original, CheckpointStore& store) {
  if (plan.protocol != Protocol::OST) throw InvalidInput("run_ost needs an OST plan");
  plan.validate();
  auto started = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.seed = plan.seed;
  rec.plan = plan;
  rec.original_metrics = original_report(lab, original, Protocol::OST);

  auto rng = run_stream(plan.seed, kSaltFinetune);
  Snapshot teacher = snapshot(original);
  ParameterSet params = prepare_student(original, plan);
  auto trainable = apply_update_option(params, plan.option, plan.method.method == Method::RKR);

  Stage stage;
  stage.data = &lab.splits.ost_train;
  stage.ce_classes = lab.splits.plan.all_classes();
  stage.distill_classes = stage.ce_classes;
  stage.teacher = teacher;
  stage.replay_teacher = teacher;
  StageTrainer trainer(lab, plan, rng);
  trainer.run(params, stage, trainable, rec.per_epoch);
  if (plan.method.method == Method::IMM) params = imm_merge(original, params, *plan.method.alpha, plan.option);

  rec.checkpoints.push_back(store.put("final", params));
  ParameterSet reloaded = store.get(rec.checkpoints.back());
  rec.metrics = evaluate_model(lab, reloaded);
  rec.sessions.push_back({1, rec.metrics.ut_acc_overall, rec.metrics.zs_acc});
  rec.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

RunRecord run_mst(const Lab& lab, const TrainPlan& plan, const ParameterSet& original, CheckpointStore& store) {
  if (plan.protocol != Protocol::MST) throw InvalidInput("run_mst needs an MST plan");
  plan.validate();
  auto started = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.seed = plan.seed;
  rec.plan = plan;
  rec.original_metrics = original_report(lab, original, Protocol::MST);

  const auto& groups = lab.splits.plan.groups;
  auto rng = run_stream(plan.seed, kSaltFinetune);
  // Adapters are installed once and trained through every session.
  ParameterSet params = prepare_student(original, plan);
  ParameterSet previous = params;
  Snapshot original_snapshot = snapshot(original);
  Snapshot teacher = original_snapshot;
  auto trainable = apply_update_option(params, plan.option, plan.method.method == Method::RKR);
  StageTrainer trainer(lab, plan, rng);

  for (std::size_t s = 0; s < groups.size(); ++s) {
    Stage stage;
    stage.session = static_cast<int>(s) + 1;
    stage.teacher = teacher;
    stage.replay_teacher = plan.teacher == TeacherPolicy::PreviousSession ? teacher : original_snapshot;
    ImageSet joint_data;
    if (plan.joint) {
      std::vector<const ImageSet*> parts;
      for (std::size_t g = 0; g <= s; ++g) parts.push_back(&lab.splits.mst_sessions[g]);
      joint_data = concat(parts);
      stage.data = &joint_data;
      stage.ce_classes = concat_groups(groups, 0, s + 1);
      params = original;
    } else {
      stage.data = &lab.splits.mst_sessions[s];
      stage.ce_classes = groups[s];
    }
    stage.distill_classes = concat_groups(groups, 0, s + 1);
    stage.previous_classes = concat_groups(groups, 0, s);
    trainer.run(params, stage, trainable, rec.per_epoch);
    if (plan.method.method == Method::IMM) params = imm_merge(previous, params, *plan.method.alpha, plan.option);

    rec.checkpoints.push_back(store.put("session_" + std::to_string(s + 1), params));
    ParameterSet reloaded = store.get(rec.checkpoints.back());
    auto eval = evaluate_classification(lab, reloaded);
    rec.acc_matrix.add_row(session_row(lab, eval.ut_predictions, s + 1));
    rec.sessions.push_back({static_cast<int>(s) + 1, eval.ut_overall, eval.zs});

    if (s + 1 == groups.size()) {
      rec.metrics.ut_acc = session_average_ut_acc(rec.acc_matrix.acc.back());
      rec.metrics.ut_acc_overall = eval.ut_overall;
      rec.metrics.zs_acc = eval.zs;
      rec.metrics.a_acc = a_acc(rec.metrics.ut_acc, rec.metrics.zs_acc);
      if (groups.size() >= 2) rec.metrics.bwt = backward_transfer(rec.acc_matrix);
      fill_retrieval(lab, reloaded, rec.metrics);
    }
    if (plan.teacher != TeacherPolicy::Original) teacher = snapshot(params);
    previous = params;
  }
  rec.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

RunRecord run_protocol(const Lab& lab, const TrainPlan& plan, const ParameterSet& original, CheckpointStore& store) {
  return plan.protocol == Protocol::OST ? run_ost(lab, plan, original, store) : run_mst(lab, plan, original, store);
}

double validation_a_acc(const Lab& lab, const ParameterSet& params, double* ut, double* zs) {
  double u = classification_accuracy(lab.encoder, params, lab.world, lab.splits.validation_update,
                                     lab.world.concepts_with_role(ConceptRole::UpdateTask))
                 .accuracy;
  double z = classification_accuracy(lab.encoder, params, lab.world, lab.splits.validation_zeroshot,
                                     lab.world.concepts_with_role(ConceptRole::Validation))
                 .accuracy;
  if (ut) *ut = u;
  if (zs) *zs = z;
  return a_acc(u, z);
}

Selection select_hyperparameters(const Lab& lab, const TrainPlan& plan, const ParameterSet& original,
                                 const std::vector<MethodConfig>& grid, int jobs) {
  if (grid.empty()) throw InvalidInput("empty hyperparameter grid");
  auto evaluate_point = [&](const MethodConfig& m) {
    TrainPlan p = plan;
    p.method = m;
    MemoryCheckpointStore store;
    auto rec = run_protocol(lab, p, original, store);
    GridPoint gp;
    gp.method = m;
    gp.validation_a_acc = validation_a_acc(lab, final_model(rec, store), &gp.validation_ut, &gp.validation_zs);
    return gp;
  };
  Selection out;
  out.points.resize(grid.size());
  if (jobs <= 1) {
    for (std::size_t i = 0; i < grid.size(); ++i) out.points[i] = evaluate_point(grid[i]);
  } else {
    std::size_t next = 0;
    while (next < grid.size()) {
      std::vector<std::future<GridPoint>> running;
      std::size_t first = next;
      for (int j = 0; j < jobs && next < grid.size(); ++j, ++next)
        running.push_back(std::async(std::launch::async, evaluate_point, std::cref(grid[next])));
      for (std::size_t j = 0; j < running.size(); ++j) out.points[first + j] = running[j].get();
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < out.points.size(); ++i) {
    const auto& a = out.points[i];
    const auto& b = out.points[best];
    double ab = a.method.beta.value_or(0.0), bb = b.method.beta.value_or(0.0);
    double aa = a.method.alpha.value_or(0.0), ba = b.method.alpha.value_or(0.0);
    if (a.validation_a_acc > b.validation_a_acc ||
        (a.validation_a_acc == b.validation_a_acc && (ab < bb || (ab == bb && aa < ba))))
      best = i;
  }
  out.best = out.points[best].method;
  return out;
}

ParameterSet final_model(const RunRecord& record, const CheckpointStore& store) {
  if (record.checkpoints.empty()) throw InvalidInput("run has no checkpoints");
  return store.get(record.checkpoints.back());
}

nlohmann::json to_json(const MethodConfig& m) {
  nlohmann::json j = {{"name", to_string(m.method)}};
  if (m.beta) j["beta"] = *m.beta;
  if (m.alpha) j["alpha"] = *m.alpha;
  if (m.sample_length) j["M"] = *m.sample_length;
  if (m.replay_count) j["K_s"] = *m.replay_count;
  if (m.replay_source) j["replay_source"] = to_string(*m.replay_source);
  if (m.subspace_dim) j["subspace_dim"] = *m.subspace_dim;
  if (m.rectification) j["rectification"] = *m.rectification;
  j["distill_direction"] = to_string(m.direction);
  j["template_pseudo"] = m.template_pseudo;
  return j;
}

nlohmann::json to_json(const TrainPlan& p) {
  return {{"protocol", to_string(p.protocol)}, {"epochs", p.epochs},
          {"lr", p.lr},                        {"decay_epoch", p.decay_epoch},
          {"decay_factor", p.decay_factor},    {"batch_size", p.batch_size},
          {"method", to_json(p.method)},       {"option", to_string(p.option)},
          {"teacher", to_string(p.teacher)},   {"joint", p.joint},
          {"seed", p.seed}};
}

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json per_epoch = nlohmann::json::array();
  for (const auto& e : r.per_epoch) {
    nlohmann::json j = {{"session", e.session}, {"epoch", e.epoch}, {"loss_total", e.loss_total}, {"loss_ce", e.loss_ce}};
    if (e.loss_distill) j["loss_distill"] = *e.loss_distill;
    per_epoch.push_back(j);
  }
  nlohmann::json sessions = nlohmann::json::array();
  for (const auto& s : r.sessions)
    sessions.push_back({{"session", s.session}, {"ut_acc_overall", s.ut_acc_overall}, {"zs_acc", s.zs_acc}});
  return {{"schema_version", 1},
          {"config", r.config},
          {"config_hash", r.config_hash},
          {"seed", r.seed},
          {"plan", to_json(r.plan)},
          {"per_epoch", per_epoch},
          {"acc_matrix", r.acc_matrix.acc},
          {"sessions", sessions},
          {"metrics", to_json(r.metrics, true)},
          {"metrics_exact", to_json(r.metrics, false)},
          {"original_metrics", to_json(r.original_metrics, true)},
          {"original_metrics_exact", to_json(r.original_metrics, false)},
          {"checkpoints", r.checkpoints},
          {"selection", r.selection},
          {"wall_clock_seconds", r.wall_clock_seconds}};
}

}  // namespace clipcl
