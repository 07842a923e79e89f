#pragma once

#include "clipcl/common.hpp"
#include "clipcl/parameters.hpp"

#include <string>
#include <vector>

namespace clipcl {

struct RkrOptions {
  bool image = true;
  bool text = true;
  /// Weight rectification (theta + r). Off by default: it destroys zero-shot
  /// ability in practice.
  bool rectification = false;
};

std::string rkr_scale_name(const std::string& layer);
std::string rkr_rect_name(const std::string& layer);

/// Adds fresh adapters (scales = 1, rectifications = 0) for every dense
/// layer of the selected towers. Existing adapters are left untouched.
void install_rkr_adapters(ParameterSet& params, const RkrOptions& options);

/// Adapter layer ids present in `params`.
std::vector<std::string> rkr_layers(const ParameterSet& params);

/// Scales a layer output (rows = layer width, columns = batch) by the
/// adapter's per-dimension factors. Identity when no adapter is attached.
Mat rkr_apply(const Mat& layer_output, const ParameterSet& params, const std::string& layer);

}  // namespace clipcl
