#pragma once

#include "clipcl/metrics.hpp"
#include "clipcl/method_config.hpp"
#include "clipcl/model.hpp"
#include "clipcl/parameters.hpp"
#include "clipcl/world.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace clipcl {

enum class Protocol { OST, MST };
/// MST teacher snapshots. Auto: previous-session model everywhere except the
/// VR-LwF pseudo-class text encoding, which uses the original model.
enum class TeacherPolicy { Auto, PreviousSession, Original };

std::string to_string(Protocol p);
std::string to_string(TeacherPolicy t);
Protocol parse_protocol(const std::string& s);
TeacherPolicy parse_teacher_policy(const std::string& s);

/// World, splits and model shape shared by every run on one seed.
struct Lab {
  SyntheticWorld world;
  Splits splits;
  DualEncoder encoder;
};

struct LabConfig {
  WorldConfig world;
  SplitSizes sizes;
  int num_sessions = 8;
  ModelConfig model;  // vocab_size is taken from the world
};

Lab make_lab(const LabConfig& config, std::uint64_t seed);

struct PretrainPlan {
  int epochs = 40;
  double lr = 3e-3;
  int batch_size = 128;
  /// Zero-shot accuracy must reach gate_ratio x chance.
  double gate_ratio = 5.0;
  bool enforce_gate = true;
};

struct PretrainResult {
  ParameterSet params;
  std::vector<double> epoch_losses;
  double zs_acc = 0.0;
  double chance = 0.0;
};

PretrainResult pretrain_contrastive(const Lab& lab, const PretrainPlan& plan, std::uint64_t seed);

struct TrainPlan {
  Protocol protocol = Protocol::OST;
  int epochs = 15;
  double lr = 1e-3;
  int decay_epoch = 10;  // lr *= decay_factor from this epoch on; 0 disables
  double decay_factor = 0.1;
  int batch_size = 64;
  MethodConfig method;
  UpdateOption option = UpdateOption::WM;
  TeacherPolicy teacher = TeacherPolicy::Auto;
  /// MST only: each session retrains the original model on all data seen so far.
  bool joint = false;
  std::uint64_t seed = 0;

  static TrainPlan defaults(Protocol protocol);
  void validate() const;
};

/// Names of the tensors an option lets the optimizer touch. With
/// `adapters_only` the mask is intersected with the RKR adapter tensors.
std::set<std::string> apply_update_option(const ParameterSet& params, UpdateOption option,
                                          bool adapters_only = false);

struct EpochLog {
  int session = 1;
  int epoch = 1;
  double loss_total = 0.0;
  double loss_ce = 0.0;
  std::optional<double> loss_distill;
};

struct SessionLog {
  int session = 1;
  double ut_acc_overall = 0.0;
  double zs_acc = 0.0;
};

struct RunRecord {
  nlohmann::json config;
  std::string config_hash;
  std::uint64_t seed = 0;
  TrainPlan plan;
  std::vector<EpochLog> per_epoch;
  AccuracyMatrix acc_matrix;
  std::vector<SessionLog> sessions;
  MetricsReport metrics;
  MetricsReport original_metrics;
  std::vector<std::string> checkpoints;
  nlohmann::json selection;  // hyperparameter search results, when run
  double wall_clock_seconds = 0.0;
};

/// Where per-session checkpoints go. Evaluation always reads back through
/// the store.
class CheckpointStore {
 public:
  virtual ~CheckpointStore() = default;
  virtual std::string put(const std::string& label, const ParameterSet& params) = 0;
  virtual ParameterSet get(const std::string& id) const = 0;
};

class MemoryCheckpointStore : public CheckpointStore {
 public:
  std::string put(const std::string& label, const ParameterSet& params) override;
  ParameterSet get(const std::string& id) const override;

 private:
  std::map<std::string, std::string> blobs_;
};

class DirectoryCheckpointStore : public CheckpointStore {
 public:
  explicit DirectoryCheckpointStore(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::string put(const std::string& label, const ParameterSet& params) override;
  ParameterSet get(const std::string& id) const override;

 private:
  std::filesystem::path dir_;
};

/// Cross-entropy of the model's class posterior over `class_ids` prompts,
/// labels being concept ids. Gradients accumulate into `grads` when given.
double finetune_classification_loss(const Lab& lab, const ImageSet& batch, const ParameterSet& params,
                                    const std::vector<int>& class_ids, Gradients* grads);

/// Full evaluation: overall UT-Acc over all update classes, ZS-Acc over the
/// zero-shot classes, TR/IR@{1,5,10}.
MetricsReport evaluate_model(const Lab& lab, const ParameterSet& params);

RunRecord run_ost(const Lab& lab, const TrainPlan& plan, const ParameterSet& original, CheckpointStore& store);
RunRecord run_mst(const Lab& lab, const TrainPlan& plan, const ParameterSet& original, CheckpointStore& store);
RunRecord run_protocol(const Lab& lab, const TrainPlan& plan, const ParameterSet& original,
                       CheckpointStore& store);

struct GridPoint {
  MethodConfig method;
  double validation_ut = 0.0;
  double validation_zs = 0.0;
  double validation_a_acc = 0.0;
};

struct Selection {
  MethodConfig best;
  std::vector<GridPoint> points;
};

/// Validation A-Acc: mean of update-class and validation-concept accuracy.
double validation_a_acc(const Lab& lab, const ParameterSet& params, double* ut = nullptr, double* zs = nullptr);

/// Runs `plan` once per grid point and keeps the highest validation A-Acc;
/// ties go to the smallest beta, then the smallest alpha.
Selection select_hyperparameters(const Lab& lab, const TrainPlan& plan, const ParameterSet& original,
                                 const std::vector<MethodConfig>& grid, int jobs = 1);

/// The final model of a finished run as stored in `store`.
ParameterSet final_model(const RunRecord& record, const CheckpointStore& store);

nlohmann::json to_json(const RunRecord& r);
nlohmann::json to_json(const TrainPlan& p);
nlohmann::json to_json(const MethodConfig& m);

}  // namespace clipcl
