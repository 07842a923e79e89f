#include "clipcl/imm.hpp"

#include <string>

namespace clipcl {

ParameterSet imm_merge(const ParameterSet& params_old, const ParameterSet& params_new, double alpha,
                       UpdateOption option) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidInput("alpha must lie in [0, 1]");
  if (params_old.names() != params_new.names()) throw InvalidInput("parameter sets hold different tensors");
  auto merges = [&](Partition p) {
    switch (p) {
      case Partition::Image:
      case Partition::ImageAdapter: return option != UpdateOption::TO;
      case Partition::Text:
      case Partition::TextAdapter: return option != UpdateOption::IO;
      case Partition::LogitScale: return false;
    }
    return false;
  };
  ParameterSet out = params_old;
  for (auto& [name, tensor] : out.tensors()) {
    const Mat& a = params_old.at(name);
    const Mat& b = params_new.at(name);
    if (a.rows() != b.rows() || a.cols() != b.cols())
      throw InvalidInput("shape mismatch for '" + name + "'");
    if (params_new.partition(name) != tensor.partition)
      throw InvalidInput("partition mismatch for '" + name + "'");
    if (!merges(tensor.partition)) continue;
    // Endpoints copy exactly so alpha = 0 / 1 reproduce the inputs bitwise.
    if (alpha == 0.0) {
      tensor.value = a;
    } else if (alpha == 1.0) {
      tensor.value = b;
    } else {
      tensor.value = (1.0 - alpha) * a + alpha * b;
    }
  }
  return out;
}

}  // namespace clipcl
