#include "clipcl/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace clipcl {

namespace {

const char* const kLogitScale = "logit_scale";

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw InvalidInput("truncated checkpoint");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

std::string to_string(Partition p) {
  switch (p) {
    case Partition::Image: return "image";
    case Partition::Text: return "text";
    case Partition::LogitScale: return "logit_scale";
    case Partition::ImageAdapter: return "image_adapter";
    case Partition::TextAdapter: return "text_adapter";
  }
  return "unknown";
}

void ParameterSet::add(const std::string& name, Partition partition, Mat value) {
  if (has(name)) throw InvalidInput("duplicate parameter '" + name + "'");
  tensors_.emplace(name, Tensor{partition, std::move(value)});
}

Mat& ParameterSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InvalidInput("unknown parameter '" + name + "'");
  return it->second.value;
}

const Mat& ParameterSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InvalidInput("unknown parameter '" + name + "'");
  return it->second.value;
}

Partition ParameterSet::partition(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InvalidInput("unknown parameter '" + name + "'");
  return it->second.partition;
}

std::set<std::string> ParameterSet::names() const {
  std::set<std::string> out;
  for (const auto& [name, t] : tensors_) out.insert(name);
  return out;
}

std::set<std::string> ParameterSet::names_in(Partition p) const {
  std::set<std::string> out;
  for (const auto& [name, t] : tensors_)
    if (t.partition == p) out.insert(name);
  return out;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& [name, t] : tensors_)
    out.add(name, t.partition, Mat::Zero(t.value.rows(), t.value.cols()));
  return out;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += static_cast<std::size_t>(t.value.size());
  return n;
}

double ParameterSet::tau() const {
  double log_tau = at(kLogitScale)(0, 0);
  return std::exp(std::clamp(log_tau, std::log(kMinTau), std::log(kMaxTau)));
}

bool ParameterSet::tau_in_range() const {
  double log_tau = at(kLogitScale)(0, 0);
  return log_tau > std::log(kMinTau) && log_tau < std::log(kMaxTau);
}

void ParameterSet::clamp_logit_scale() {
  double& v = at(kLogitScale)(0, 0);
  v = std::clamp(v, std::log(kMinTau), std::log(kMaxTau));
}

bool ParameterSet::has_adapters() const {
  return std::any_of(tensors_.begin(), tensors_.end(), [](const auto& kv) {
    return kv.second.partition == Partition::ImageAdapter ||
           kv.second.partition == Partition::TextAdapter;
  });
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (const auto& [name, t] : tensors_) {
    auto it = other.tensors_.find(name);
    if (it == other.tensors_.end()) return false;
    if (it->second.partition != t.partition) return false;
    const Mat& a = t.value;
    const Mat& b = it->second.value;
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) != 0)
      return false;
  }
  return true;
}

Snapshot snapshot(const ParameterSet& params) {
  return std::make_shared<const ParameterSet>(params);
}

Gradients Gradients::for_params(const ParameterSet& params, std::set<std::string> trainable) {
  for (const auto& name : trainable)
    if (!params.has(name)) throw InvalidInput("trainable name '" + name + "' not in parameter set");
  return Gradients{params.zeros_like(), std::move(trainable)};
}

Gradients Gradients::full(const ParameterSet& params) {
  return for_params(params, params.names());
}

bool Gradients::wants_prefix(const std::string& prefix) const {
  auto it = trainable.lower_bound(prefix);
  return it != trainable.end() && it->compare(0, prefix.size(), prefix) == 0;
}

void Gradients::zero() {
  for (auto& [name, t] : buffers.tensors()) t.value.setZero();
}

std::string serialize_checkpoint(const ParameterSet& params) {
  std::string out = "CLCK";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.tensors().size()));
  for (const auto& [name, t] : params.tensors()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.partition));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
    for (Eigen::Index r = 0; r < t.value.rows(); ++r)
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) put<double>(out, t.value(r, c));
  }
  return out;
}

ParameterSet deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "CLCK") != 0) throw InvalidInput("not a checkpoint");
  std::size_t pos = 4;
  auto version = take<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw InvalidInput("unsupported checkpoint version " + std::to_string(version));
  auto count = take<std::uint32_t>(bytes, pos);
  ParameterSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto len = take<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw InvalidInput("truncated checkpoint");
    std::string name = bytes.substr(pos, len);
    pos += len;
    auto part = take<std::uint8_t>(bytes, pos);
    if (part > static_cast<std::uint8_t>(Partition::TextAdapter))
      throw InvalidInput("bad partition tag in checkpoint");
    auto rows = take<std::uint64_t>(bytes, pos);
    auto cols = take<std::uint64_t>(bytes, pos);
    Mat value(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < value.rows(); ++r)
      for (Eigen::Index c = 0; c < value.cols(); ++c) value(r, c) = take<double>(bytes, pos);
    params.add(name, static_cast<Partition>(part), std::move(value));
  }
  if (pos != bytes.size()) throw InvalidInput("trailing bytes in checkpoint");
  return params;
}

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    auto bytes = serialize_checkpoint(params);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace clipcl
