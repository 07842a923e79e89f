#include "clipcl/rkr.hpp"

#include "clipcl/model.hpp"

namespace clipcl {

std::string rkr_scale_name(const std::string& layer) { return "rkr." + layer + ".scale"; }
std::string rkr_rect_name(const std::string& layer) { return "rkr." + layer + ".rect"; }

void install_rkr_adapters(ParameterSet& params, const RkrOptions& options) {
  auto install = [&](const std::string& layer, Partition part) {
    const Mat& w = params.at(layer + ".weight");
    if (!params.has(rkr_scale_name(layer)))
      params.add(rkr_scale_name(layer), part, Mat::Ones(w.rows(), 1));
    if (options.rectification && !params.has(rkr_rect_name(layer)))
      params.add(rkr_rect_name(layer), part, Mat::Zero(w.rows(), w.cols()));
  };
  if (options.image) {
    install(kImageFc1, Partition::ImageAdapter);
    install(kImageFc2, Partition::ImageAdapter);
  }
  if (options.text) {
    install(kTextFc1, Partition::TextAdapter);
    install(kTextFc2, Partition::TextAdapter);
  }
}

std::vector<std::string> rkr_layers(const ParameterSet& params) {
  std::vector<std::string> out;
  for (const auto& layer : {kImageFc1, kImageFc2, kTextFc1, kTextFc2})
    if (params.has(rkr_scale_name(layer))) out.push_back(layer);
  return out;
}

Mat rkr_apply(const Mat& layer_output, const ParameterSet& params, const std::string& layer) {
  auto name = rkr_scale_name(layer);
  if (!params.has(name)) return layer_output;
  const Mat& s = params.at(name);
  if (s.rows() != layer_output.rows())
    throw InvalidInput("adapter for '" + layer + "' has width " + std::to_string(s.rows()) +
                       ", layer output has " + std::to_string(layer_output.rows()));
  return layer_output.array().colwise() * s.col(0).array();
}

}  // namespace clipcl
