#pragma once

#include "clipcl/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace clipcl {

/// Bumped whenever a change alters numeric outputs for an unchanged config.
inline constexpr const char* kCodeVersion = "clipcl-1.0.0";
inline constexpr int kSchemaVersion = 1;

struct MatrixSpec {
  std::vector<Method> methods;
  std::vector<UpdateOption> options;
  /// Per-method parameter blocks replacing that method's defaults.
  std::map<Method, MethodConfig> overrides;
};

enum class AblationAxis { M, Ks, ReplaySource };
std::string to_string(AblationAxis a);
AblationAxis parse_ablation_axis(const std::string& s);

struct AblationSpec {
  std::map<AblationAxis, std::vector<nlohmann::json>> values;
};

/// Validation-set search over beta (distilling methods) and alpha (IMM).
struct SelectionSpec {
  std::vector<double> beta;
  std::vector<double> alpha;
};

struct ExperimentConfig {
  LabConfig lab;
  PretrainPlan pretrain;
  TrainPlan plan;  // protocol, schedule, method and option
  std::optional<SelectionSpec> selection;
  std::optional<MatrixSpec> matrix;
  std::optional<AblationSpec> ablation;
  std::string output_dir;
  std::vector<std::uint64_t> seeds;
};

/// Parses and validates a config document. Errors are ConfigError with
/// "<origin>:<line>: <json pointer>: <reason>".
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Normalized form with every default filled in; round-trips through parse_config.
nlohmann::json to_json(const ExperimentConfig& c);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

/// Hash of what determines the pretrained model: world, splits, model, pretrain plan.
std::string pretrain_hash(const ExperimentConfig& c);
/// Hash of what determines one run for a given seed (output location,
/// seed list, matrix and ablation blocks excluded).
std::string run_hash(const ExperimentConfig& c);
nlohmann::json run_identity(const ExperimentConfig& c);

MethodConfig method_from_json(const nlohmann::json& j);

}  // namespace clipcl
