#pragma once

#include "clipcl/common.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>

namespace clipcl {

/// Which part of the model a tensor belongs to. Freezing options and merges
/// address tensors through this tag.
enum class Partition : std::uint8_t {
  Image = 0,
  Text = 1,
  LogitScale = 2,
  ImageAdapter = 3,
  TextAdapter = 4,
};

std::string to_string(Partition p);

struct Tensor {
  Partition partition;
  Mat value;
};

/// Named, partitioned model weights. Iteration order is lexicographic by
/// name, which keeps optimizers, merges and checkpoints deterministic.
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void add(const std::string& name, Partition partition, Mat value);
  void erase(const std::string& name) { tensors_.erase(name); }

  [[nodiscard]] bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  [[nodiscard]] Mat& at(const std::string& name);
  [[nodiscard]] const Mat& at(const std::string& name) const;
  [[nodiscard]] Partition partition(const std::string& name) const;

  [[nodiscard]] const Map& tensors() const { return tensors_; }
  [[nodiscard]] Map& tensors() { return tensors_; }

  [[nodiscard]] std::set<std::string> names() const;
  [[nodiscard]] std::set<std::string> names_in(Partition p) const;
  [[nodiscard]] ParameterSet zeros_like() const;
  [[nodiscard]] std::size_t scalar_count() const;

  /// Logit scale, exp of the stored log value clamped to [1, 100].
  [[nodiscard]] double tau() const;
  [[nodiscard]] bool tau_in_range() const;
  void clamp_logit_scale();

  [[nodiscard]] bool has_adapters() const;

  bool operator==(const ParameterSet& other) const;

 private:
  Map tensors_;
};

inline constexpr double kMinTau = 1.0;
inline constexpr double kMaxTau = 100.0;

/// Read-only deep copy shared between evaluators and distillation teachers.
using Snapshot = std::shared_ptr<const ParameterSet>;
Snapshot snapshot(const ParameterSet& params);

/// Gradient accumulator over a ParameterSet. Only names in `trainable`
/// receive accumulation; every other buffer stays exactly zero.
struct Gradients {
  ParameterSet buffers;
  std::set<std::string> trainable;

  static Gradients for_params(const ParameterSet& params, std::set<std::string> trainable);
  static Gradients full(const ParameterSet& params);

  [[nodiscard]] bool wants(const std::string& name) const { return trainable.count(name) != 0; }
  /// True when any trainable tensor has the given name prefix.
  [[nodiscard]] bool wants_prefix(const std::string& prefix) const;
  Mat& at(const std::string& name) { return buffers.at(name); }
  void zero();
};

// Checkpoint format (little-endian):
//   "CLCK" | u32 version | u32 tensor count |
//   per tensor: u32 name length | name bytes | u8 partition | u64 rows | u64 cols |
//               rows*cols f64 values in row-major order
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const ParameterSet& params);
ParameterSet deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path);

}  // namespace clipcl
