#pragma once

#include "clipcl/common.hpp"

#include <optional>
#include <string>

namespace clipcl {

enum class Method { FT, LwF, GeoDL, IMM, RKR, VRLwF };
enum class UpdateOption { WM, IO, TO };
enum class ReplaySource { Random, CaptionCorpus, PreviousClassesAugmented };
/// AsPrinted: -sum p_new log p_old. Conventional: -sum p_old log p_new.
enum class DistillDirection { AsPrinted, Conventional };

std::string to_string(Method m);
std::string to_string(UpdateOption o);
std::string to_string(ReplaySource s);
std::string to_string(DistillDirection d);
Method parse_method(const std::string& s);
UpdateOption parse_update_option(const std::string& s);
ReplaySource parse_replay_source(const std::string& s);
DistillDirection parse_distill_direction(const std::string& s);

/// Per-method hyperparameters. A field is set exactly when the method uses it.
struct MethodConfig {
  Method method = Method::FT;
  std::optional<double> beta;          // LwF, GeoDL, VR-LwF
  std::optional<double> alpha;         // IMM
  std::optional<int> sample_length;    // VR-LwF (M)
  std::optional<int> replay_count;     // VR-LwF (K_s)
  std::optional<ReplaySource> replay_source;  // VR-LwF
  std::optional<int> subspace_dim;     // GeoDL; 0 = min(8, batch - 1)
  std::optional<bool> rectification;   // RKR
  // Methods default to the conventional direction; the as-printed form is
  // selectable through distill_direction.
  DistillDirection direction = DistillDirection::Conventional;
  /// Pass pseudo-sentences through the prompt template before encoding.
  bool template_pseudo = false;

  /// Fills every parameter the method uses with its default value.
  static MethodConfig defaults(Method m);
  /// Throws ConfigError when a parameter is missing, superfluous or out of range.
  void validate() const;

  [[nodiscard]] bool uses_beta() const;
  [[nodiscard]] bool distills() const;
};

}  // namespace clipcl
