#pragma once

#include "clipcl/config.hpp"
#include "clipcl/training.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

namespace clipcl {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kUnexpected = 1;
inline constexpr int kConfig = 2;
inline constexpr int kGate = 3;
}  // namespace exit_code

struct RunOptions {
  std::filesystem::path out;
  bool force = false;
  int jobs = 1;
  std::ostream* log = nullptr;
};

/// Pretrained Original models keyed by (pretrain hash, seed); shared across
/// the cells of a matrix and persisted under <out>/cache.
class PretrainCache {
 public:
  struct Entry {
    ParameterSet params;
    double zs_acc = 0.0;
    double chance = 0.0;
    std::vector<double> epoch_losses;
  };

  std::shared_ptr<const Entry> get(const ExperimentConfig& cfg, const Lab& lab, std::uint64_t seed,
                                   const std::filesystem::path& out, std::ostream* log);

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const Entry>> entries_;
};

/// Where the record of (config, seed) lives.
std::filesystem::path run_directory(const std::filesystem::path& out, const ExperimentConfig& cfg,
                                    std::uint64_t seed);

struct RunOutcome {
  RunRecord record;
  std::filesystem::path record_path;
  bool verified = false;  // existing outputs were checked instead of recomputed
};

/// Runs one (config, seed), or verifies a finished one. Hyperparameter
/// selection runs first when the config has a grid for the method.
RunOutcome execute_run(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opts, PretrainCache& cache);

RunRecord record_from_json(const nlohmann::json& j);
RunRecord load_record(const std::filesystem::path& path);

/// Writes `contents` to `path` through a temporary file and rename.
void write_atomic(const std::filesystem::path& path, const std::string& contents);

struct TableRow {
  std::string method;
  std::string option;  // group key; empty for the baseline row
  bool failed = false;
  std::string error;
  std::string note;  // free-form, e.g. the control-variable hash of an ablation row
  std::map<std::string, double> values;  // percent, averaged over seeds
  std::set<std::string> best;
  int seeds = 0;
};

struct ComparisonTable {
  std::vector<std::string> columns;
  std::vector<TableRow> rows;
};

/// Metric columns for a protocol, in display order.
std::vector<std::string> metric_columns(Protocol p);
/// Percent values of the table columns from one report.
std::map<std::string, double> metric_values(const MetricsReport& m, Protocol p);
/// Marks, per option group and column, the row(s) with the highest value.
/// Baseline and failed rows never take part.
void mark_best(ComparisonTable& t);
std::string to_csv(const ComparisonTable& t);
std::string to_text(const ComparisonTable& t);

/// Mean of per-seed metric values over the records of one cell.
TableRow summarize(const std::string& method, const std::string& option, const std::vector<RunRecord>& records);

int cmd_run(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, const RunOptions& opts);
int cmd_matrix(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, const RunOptions& opts);
int cmd_ablate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, const std::string& axis,
               const RunOptions& opts);
/// Long-format per-session CSV from MST run records.
std::string curves_csv(const std::vector<RunRecord>& records);
int cmd_curves(const std::vector<std::filesystem::path>& records, const RunOptions& opts);
/// Metrics and shuffle probe of a stored checkpoint on the config's world.
nlohmann::json evaluate_checkpoint(const ExperimentConfig& cfg, std::uint64_t seed,
                                   const std::filesystem::path& checkpoint);
int cmd_evaluate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                 const std::filesystem::path& checkpoint, const RunOptions& opts);

/// Seeds from the command line when given, else from the config.
std::vector<std::uint64_t> effective_seeds(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& cli);

}  // namespace clipcl
