#include "clipcl/method_config.hpp"

namespace clipcl {

std::string to_string(Method m) {
  switch (m) {
    case Method::FT: return "FT";
    case Method::LwF: return "LwF";
    case Method::GeoDL: return "GeoDL";
    case Method::IMM: return "IMM";
    case Method::RKR: return "RKR";
    case Method::VRLwF: return "VR-LwF";
  }
  return "?";
}

std::string to_string(UpdateOption o) {
  switch (o) {
    case UpdateOption::WM: return "WM";
    case UpdateOption::IO: return "IO";
    case UpdateOption::TO: return "TO";
  }
  return "?";
}

std::string to_string(ReplaySource s) {
  switch (s) {
    case ReplaySource::Random: return "random";
    case ReplaySource::CaptionCorpus: return "caption-corpus";
    case ReplaySource::PreviousClassesAugmented: return "previous-classes-augmented";
  }
  return "?";
}

std::string to_string(DistillDirection d) {
  return d == DistillDirection::AsPrinted ? "as-printed" : "conventional";
}

Method parse_method(const std::string& s) {
  for (auto m : {Method::FT, Method::LwF, Method::GeoDL, Method::IMM, Method::RKR, Method::VRLwF})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "' (expected FT, LwF, GeoDL, IMM, RKR or VR-LwF)");
}

UpdateOption parse_update_option(const std::string& s) {
  for (auto o : {UpdateOption::WM, UpdateOption::IO, UpdateOption::TO})
    if (to_string(o) == s) return o;
  throw ConfigError("unknown update option '" + s + "' (expected WM, IO or TO)");
}

ReplaySource parse_replay_source(const std::string& s) {
  for (auto r : {ReplaySource::Random, ReplaySource::CaptionCorpus, ReplaySource::PreviousClassesAugmented})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown replay source '" + s + "'");
}

DistillDirection parse_distill_direction(const std::string& s) {
  if (s == "as-printed") return DistillDirection::AsPrinted;
  if (s == "conventional") return DistillDirection::Conventional;
  throw ConfigError("unknown distill direction '" + s + "' (expected as-printed or conventional)");
}

MethodConfig MethodConfig::defaults(Method m) {
  MethodConfig c;
  c.method = m;
  switch (m) {
    case Method::FT: break;
    case Method::LwF: c.beta = 1.0; break;
    case Method::GeoDL:
      c.beta = 1.0;
      c.subspace_dim = 0;
      break;
    case Method::IMM: c.alpha = 0.5; break;
    case Method::RKR: c.rectification = false; break;
    case Method::VRLwF:
      c.beta = 1.0;
      c.sample_length = 10;
      c.replay_count = 100;
      c.replay_source = ReplaySource::Random;
      break;
  }
  return c;
}

bool MethodConfig::uses_beta() const {
  return method == Method::LwF || method == Method::GeoDL || method == Method::VRLwF;
}

bool MethodConfig::distills() const { return uses_beta(); }

void MethodConfig::validate() const {
  const std::string name = to_string(method);
  auto need = [&](bool present, bool used, const char* field) {
    if (used && !present) throw ConfigError(name + " requires '" + field + "'");
    if (!used && present) throw ConfigError(name + " does not use '" + field + "'");
  };
  need(beta.has_value(), uses_beta(), "beta");
  need(alpha.has_value(), method == Method::IMM, "alpha");
  need(sample_length.has_value(), method == Method::VRLwF, "M");
  need(replay_count.has_value(), method == Method::VRLwF, "K_s");
  need(replay_source.has_value(), method == Method::VRLwF, "replay_source");
  need(subspace_dim.has_value(), method == Method::GeoDL, "subspace_dim");
  need(rectification.has_value(), method == Method::RKR, "rectification");
  if (beta && *beta < 0.0) throw ConfigError("beta must be >= 0");
  if (alpha && (*alpha < 0.0 || *alpha > 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (sample_length && *sample_length < 1) throw ConfigError("M must be >= 1");
  if (replay_count && *replay_count < 2) throw ConfigError("K_s must be >= 2");
  if (subspace_dim && *subspace_dim < 0) throw ConfigError("subspace_dim must be >= 0");
}

}  // namespace clipcl
