#pragma once

#include "clipcl/parameters.hpp"

#include <map>
#include <set>
#include <string>

namespace clipcl {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam over the trainable subset of a ParameterSet. Tensors outside the
/// set are never written.
class Adam {
 public:
  Adam(std::set<std::string> trainable, AdamConfig config = {});

  void step(ParameterSet& params, const Gradients& grads, double lr);

  [[nodiscard]] const std::set<std::string>& trainable() const { return trainable_; }
  [[nodiscard]] long steps() const { return t_; }

 private:
  std::set<std::string> trainable_;
  AdamConfig config_;
  std::map<std::string, Mat> m_;
  std::map<std::string, Mat> v_;
  long t_ = 0;
};

}  // namespace clipcl
