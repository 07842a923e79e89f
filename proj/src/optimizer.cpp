#include "clipcl/optimizer.hpp"

#include <cmath>

namespace clipcl {

Adam::Adam(std::set<std::string> trainable, AdamConfig config)
    : trainable_(std::move(trainable)), config_(config) {}

void Adam::step(ParameterSet& params, const Gradients& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& name : trainable_) {
    const Mat& g = grads.buffers.at(name);
    Mat& w = params.at(name);
    auto [mit, m_new] = m_.try_emplace(name, Mat::Zero(w.rows(), w.cols()));
    auto [vit, v_new] = v_.try_emplace(name, Mat::Zero(w.rows(), w.cols()));
    Mat& m = mit->second;
    Mat& v = vit->second;
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseAbs2();
    w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.epsilon);
  }
}

}  // namespace clipcl
