#include "clipcl/config.hpp"

#include <fstream>
#include <iterator>
#include <sstream>

namespace clipcl {

namespace {

using nlohmann::json;

/// Char iterator that counts the newlines it steps over.
class LineCountingIterator {
 public:
  using iterator_category = std::forward_iterator_tag;
  using value_type = char;
  using difference_type = std::ptrdiff_t;
  using pointer = const char*;
  using reference = const char&;

  LineCountingIterator() = default;
  LineCountingIterator(const char* p, int* line) : p_(p), line_(line) {}
  reference operator*() const { return *p_; }
  LineCountingIterator& operator++() {
    if (*p_ == '\n') ++*line_;
    ++p_;
    return *this;
  }
  LineCountingIterator operator++(int) {
    auto old = *this;
    ++*this;
    return old;
  }
  bool operator==(const LineCountingIterator& o) const { return p_ == o.p_; }
  bool operator!=(const LineCountingIterator& o) const { return p_ != o.p_; }

 private:
  const char* p_ = nullptr;
  int* line_ = nullptr;
};

/// Records the source line of every JSON pointer in a document.
class LineRecorder : public nlohmann::json_sax<json> {
 public:
  explicit LineRecorder(const int* line) : line_(line) {}

  std::map<std::string, int> lines;
  std::string error;

  bool null() override { return value(); }
  bool boolean(bool) override { return value(); }
  bool number_integer(number_integer_t) override { return value(); }
  bool number_unsigned(number_unsigned_t) override { return value(); }
  bool number_float(number_float_t, const string_t&) override { return value(); }
  bool string(string_t&) override { return value(); }
  bool binary(binary_t&) override { return value(); }
  bool start_object(std::size_t) override {
    value();
    stack_.push_back({false, "", 0});
    return true;
  }
  bool key(string_t& k) override {
    stack_.back().key = k;
    lines[pointer()] = *line_;
    return true;
  }
  bool end_object() override {
    stack_.pop_back();
    return true;
  }
  bool start_array(std::size_t) override {
    value();
    stack_.push_back({true, "", 0});
    return true;
  }
  bool end_array() override {
    stack_.pop_back();
    return true;
  }
  bool parse_error(std::size_t, const std::string&, const nlohmann::detail::exception& ex) override {
    error = ex.what();
    return false;
  }

 private:
  struct Frame {
    bool array;
    std::string key;
    std::size_t next;
  };

  bool value() {
    if (stack_.empty()) {
      lines[""] = *line_;
    } else if (stack_.back().array) {
      stack_.back().key = std::to_string(stack_.back().next++);
      lines[pointer()] = *line_;
    }
    return true;
  }

  std::string pointer() const {
    std::string out;
    for (const auto& f : stack_) out += "/" + f.key;
    return out;
  }

  const int* line_;
  std::vector<Frame> stack_;
};

struct Source {
  std::string origin;
  std::map<std::string, int> lines;

  int line_of(const std::string& ptr) const {
    std::string p = ptr;
    while (true) {
      auto it = lines.find(p);
      if (it != lines.end()) return it->second;
      if (p.empty()) return 1;
      p = p.substr(0, p.rfind('/'));
    }
  }

  [[noreturn]] void fail(const std::string& ptr, const std::string& msg) const {
    throw ConfigError(origin + ":" + std::to_string(line_of(ptr)) + ": " + (ptr.empty() ? "/" : ptr) + ": " + msg);
  }
};

/// Strict view of one JSON object: every key must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string ptr, const Source& src) : j_(j), ptr_(std::move(ptr)), src_(src) {
    if (!j_.is_object()) src_.fail(ptr_, "expected an object");
  }

  [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }
  [[nodiscard]] std::string at(const std::string& key) const { return ptr_ + "/" + key; }
  [[noreturn]] void fail(const std::string& key, const std::string& msg) const { src_.fail(at(key), msg); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    return Reader(j_.at(key), at(key), src_);
  }

  template <class T>
  bool get(const std::string& key, T& out) {
    if (!has(key)) return false;
    seen_.insert(key);
    out = convert<T>(j_.at(key), at(key));
    return true;
  }

  template <class T>
  void require(const std::string& key, T& out) {
    if (!get(key, out)) src_.fail(ptr_, "missing required field '" + key + "'");
  }

  template <class T>
  T convert(const json& v, const std::string& ptr) const {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) src_.fail(ptr, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) src_.fail(ptr, "expected a non-negative integer");
      return v.get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) src_.fail(ptr, "expected an integer");
      auto x = v.get<std::int64_t>();
      if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) src_.fail(ptr, "integer out of range");
      return static_cast<T>(x);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) src_.fail(ptr, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) src_.fail(ptr, "expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) src_.fail(ptr, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], ptr + "/" + std::to_string(i)));
      return out;
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) src_.fail(at(it.key()), "unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string ptr_;
  const Source& src_;
  std::set<std::string> seen_;
};

template <class F>
auto checked(const Source& src, const std::string& ptr, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::string what = e.what();
    if (what.rfind(src.origin + ":", 0) == 0) throw;
    src.fail(ptr, what);
  }
}

void read_world(Reader r, WorldConfig& w) {
  r.get("num_pretrain_only", w.num_pretrain_only);
  r.get("num_update", w.num_update);
  r.get("num_zero_shot", w.num_zero_shot);
  r.get("num_validation", w.num_validation);
  r.get("input_dim", w.input_dim);
  r.get("latent_dim", w.latent_dim);
  r.get("noise_sigma", w.noise_sigma);
  r.get("num_filler_tokens", w.num_filler_tokens);
  r.get("min_filler", w.min_filler);
  r.get("max_filler", w.max_filler);
  r.get("update_clusters", w.update_clusters);
  r.get("update_spread", w.update_spread);
  r.get("two_token_name_rate", w.two_token_name_rate);
  r.get("max_retries", w.max_retries);
  r.finish();
}

void read_sizes(Reader r, SplitSizes& s) {
  r.get("pretrain_pairs", s.pretrain_pairs);
  r.get("update_pretrain_pairs", s.update_pretrain_pairs);
  r.get("train_per_class", s.train_per_class);
  r.get("test_per_class", s.test_per_class);
  r.get("zeroshot_per_class", s.zeroshot_per_class);
  r.get("validation_update_per_class", s.validation_update_per_class);
  r.get("validation_zeroshot_per_class", s.validation_zeroshot_per_class);
  r.get("retrieval_folds", s.retrieval_folds);
  r.get("retrieval_images_per_fold", s.retrieval_images_per_fold);
  r.get("captions_per_image", s.captions_per_image);
  r.finish();
}

void read_model(Reader r, ModelConfig& m) {
  r.get("embed_dim", m.embed_dim);
  r.get("hidden_dim", m.hidden_dim);
  r.get("token_dim", m.token_dim);
  r.get("max_seq_len", m.max_seq_len);
  r.get("position_scale_init", m.position_scale_init);
  r.get("tau_init", m.tau_init);
  r.finish();
}

void read_pretrain(Reader r, PretrainPlan& p) {
  r.get("epochs", p.epochs);
  r.get("lr", p.lr);
  r.get("batch_size", p.batch_size);
  r.get("gate_ratio", p.gate_ratio);
  r.get("enforce_gate", p.enforce_gate);
  r.finish();
}

void read_train(Reader r, TrainPlan& p, const Source& src) {
  r.get("epochs", p.epochs);
  r.get("lr", p.lr);
  r.get("decay_epoch", p.decay_epoch);
  r.get("decay_factor", p.decay_factor);
  r.get("batch_size", p.batch_size);
  std::string teacher;
  if (r.get("teacher", teacher)) checked(src, r.at("teacher"), [&] { p.teacher = parse_teacher_policy(teacher); });
  r.get("joint", p.joint);
  r.finish();
}

/// Method block: defaults for the named method, then the given fields.
MethodConfig read_method(Reader r, const Source& src, std::optional<Method> fixed = std::nullopt) {
  Method m;
  if (fixed) {
    m = *fixed;
  } else {
    std::string name;
    r.require("name", name);
    m = checked(src, r.at("name"), [&] { return parse_method(name); });
  }
  MethodConfig c = MethodConfig::defaults(m);
  auto field = [&](const std::string& key, bool used, auto& slot) {
    if (!r.has(key)) return;
    if (!used) r.fail(key, to_string(m) + " does not use '" + key + "'");
    typename std::remove_reference_t<decltype(slot)>::value_type v{};
    r.get(key, v);
    slot = v;
  };
  field("beta", c.uses_beta(), c.beta);
  field("alpha", m == Method::IMM, c.alpha);
  field("M", m == Method::VRLwF, c.sample_length);
  field("K_s", m == Method::VRLwF, c.replay_count);
  field("subspace_dim", m == Method::GeoDL, c.subspace_dim);
  field("rectification", m == Method::RKR, c.rectification);
  if (r.has("replay_source")) {
    if (m != Method::VRLwF) r.fail("replay_source", to_string(m) + " does not use 'replay_source'");
    std::string s;
    r.get("replay_source", s);
    c.replay_source = checked(src, r.at("replay_source"), [&] { return parse_replay_source(s); });
  }
  std::string dir;
  if (r.get("distill_direction", dir))
    c.direction = checked(src, r.at("distill_direction"), [&] { return parse_distill_direction(dir); });
  r.get("template_pseudo", c.template_pseudo);
  if (fixed && r.has("name")) {
    std::string name;
    r.get("name", name);
    if (name != to_string(m)) r.fail("name", "override block for " + to_string(m) + " names " + name);
  }
  r.finish();
  return c;
}

json method_to_json(const MethodConfig& m) { return to_json(m); }

}  // namespace

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::M: return "M";
    case AblationAxis::Ks: return "K_s";
    case AblationAxis::ReplaySource: return "replay_source";
  }
  return "?";
}

AblationAxis parse_ablation_axis(const std::string& s) {
  if (s == "M") return AblationAxis::M;
  if (s == "K_s") return AblationAxis::Ks;
  if (s == "replay_source") return AblationAxis::ReplaySource;
  throw ConfigError("unknown ablation axis '" + s + "' (expected M, K_s or replay_source)");
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  Source src{origin, {}};
  int line = 1;
  LineRecorder recorder(&line);
  LineCountingIterator first(text.data(), &line);
  LineCountingIterator last(text.data() + text.size(), &line);
  if (!json::sax_parse(first, last, &recorder)) {
    throw ConfigError(origin + ":" + std::to_string(line) + ": malformed JSON (" + recorder.error + ")");
  }
  src.lines = std::move(recorder.lines);
  const json doc = json::parse(text);

  ExperimentConfig c;
  Reader root(doc, "", src);
  int version = 0;
  root.require("schema_version", version);
  if (version != kSchemaVersion)
    root.fail("schema_version", "unsupported schema_version " + std::to_string(version) + " (expected " +
                                    std::to_string(kSchemaVersion) + ")");

  std::string protocol;
  root.require("protocol", protocol);
  Protocol proto = checked(src, root.at("protocol"), [&] { return parse_protocol(protocol); });
  c.plan = TrainPlan::defaults(proto);

  if (root.has("world")) read_world(root.child("world"), c.lab.world);
  if (root.has("splits")) read_sizes(root.child("splits"), c.lab.sizes);
  root.get("num_sessions", c.lab.num_sessions);
  if (root.has("model")) read_model(root.child("model"), c.lab.model);
  if (root.has("pretrain")) read_pretrain(root.child("pretrain"), c.pretrain);
  if (root.has("train")) read_train(root.child("train"), c.plan, src);

  if (!root.has("method")) root.fail("", "missing required field 'method'");
  c.plan.method = read_method(root.child("method"), src);
  std::string option;
  root.require("option", option);
  c.plan.option = checked(src, root.at("option"), [&] { return parse_update_option(option); });

  if (root.has("selection")) {
    Reader r = root.child("selection");
    SelectionSpec s;
    r.get("beta", s.beta);
    r.get("alpha", s.alpha);
    r.finish();
    for (double b : s.beta)
      if (b < 0.0) r.fail("beta", "grid values must be >= 0");
    for (double a : s.alpha)
      if (a < 0.0 || a > 1.0) r.fail("alpha", "grid values must lie in [0, 1]");
    c.selection = s;
  }

  if (root.has("matrix")) {
    Reader r = root.child("matrix");
    MatrixSpec m;
    std::vector<std::string> methods;
    std::vector<std::string> options;
    r.require("methods", methods);
    r.require("options", options);
    for (std::size_t i = 0; i < methods.size(); ++i)
      m.methods.push_back(checked(src, r.at("methods") + "/" + std::to_string(i), [&] { return parse_method(methods[i]); }));
    for (std::size_t i = 0; i < options.size(); ++i)
      m.options.push_back(
          checked(src, r.at("options") + "/" + std::to_string(i), [&] { return parse_update_option(options[i]); }));
    if (m.methods.empty()) r.fail("methods", "matrix needs at least one method");
    if (m.options.empty()) r.fail("options", "matrix needs at least one option");
    if (r.has("overrides")) {
      Reader o = r.child("overrides");
      const json& raw = r.raw("overrides");
      for (auto it = raw.begin(); it != raw.end(); ++it) {
        Method meth = checked(src, o.at(it.key()), [&] { return parse_method(it.key()); });
        m.overrides[meth] = read_method(o.child(it.key()), src, meth);
      }
      o.finish();
    }
    r.finish();
    c.matrix = m;
  }

  if (root.has("ablation")) {
    Reader r = root.child("ablation");
    AblationSpec a;
    const json& raw = doc.at("ablation");
    for (auto it = raw.begin(); it != raw.end(); ++it) {
      AblationAxis axis = checked(src, r.at(it.key()), [&] { return parse_ablation_axis(it.key()); });
      if (!it.value().is_array() || it.value().empty()) r.fail(it.key(), "expected a non-empty array of values");
      std::vector<json> values;
      for (std::size_t i = 0; i < it.value().size(); ++i) {
        const json& v = it.value()[i];
        std::string ptr = r.at(it.key()) + "/" + std::to_string(i);
        if (axis == AblationAxis::ReplaySource) {
          if (!v.is_string()) src.fail(ptr, "expected a string");
          checked(src, ptr, [&] { return parse_replay_source(v.get<std::string>()); });
        } else if (!v.is_number_integer()) {
          src.fail(ptr, "expected an integer");
        }
        values.push_back(v);
      }
      a.values[axis] = std::move(values);
    }
    c.ablation = a;
  }

  root.get("output_dir", c.output_dir);
  root.require("seeds", c.seeds);
  if (c.seeds.empty()) root.fail("seeds", "at least one seed is required");
  root.finish();

  checked(src, "/method", [&] { c.plan.method.validate(); });
  checked(src, "/train", [&] { c.plan.validate(); });
  if (c.lab.num_sessions < 1) root.fail("num_sessions", "must be >= 1");
  if (c.lab.world.num_update % c.lab.num_sessions != 0)
    root.fail("num_sessions", "must divide world.num_update (" + std::to_string(c.lab.world.num_update) + ")");
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& m = c.lab.model;
  json j = {
      {"schema_version", kSchemaVersion},
      {"protocol", to_string(c.plan.protocol)},
      {"world", to_json(c.lab.world)},
      {"splits", to_json(c.lab.sizes)},
      {"num_sessions", c.lab.num_sessions},
      {"model",
       {{"embed_dim", m.embed_dim},
        {"hidden_dim", m.hidden_dim},
        {"token_dim", m.token_dim},
        {"max_seq_len", m.max_seq_len},
        {"position_scale_init", m.position_scale_init},
        {"tau_init", m.tau_init}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"lr", c.pretrain.lr},
        {"batch_size", c.pretrain.batch_size},
        {"gate_ratio", c.pretrain.gate_ratio},
        {"enforce_gate", c.pretrain.enforce_gate}}},
      {"train",
       {{"epochs", c.plan.epochs},
        {"lr", c.plan.lr},
        {"decay_epoch", c.plan.decay_epoch},
        {"decay_factor", c.plan.decay_factor},
        {"batch_size", c.plan.batch_size},
        {"teacher", to_string(c.plan.teacher)},
        {"joint", c.plan.joint}}},
      {"method", method_to_json(c.plan.method)},
      {"option", to_string(c.plan.option)},
      {"output_dir", c.output_dir},
      {"seeds", c.seeds},
  };
  if (c.selection) j["selection"] = {{"beta", c.selection->beta}, {"alpha", c.selection->alpha}};
  if (c.matrix) {
    std::vector<std::string> methods;
    std::vector<std::string> options;
    for (auto mm : c.matrix->methods) methods.push_back(to_string(mm));
    for (auto o : c.matrix->options) options.push_back(to_string(o));
    json overrides = json::object();
    for (const auto& [meth, cfg] : c.matrix->overrides) {
      json o = method_to_json(cfg);
      o.erase("name");
      overrides[to_string(meth)] = o;
    }
    j["matrix"] = {{"methods", methods}, {"options", options}, {"overrides", overrides}};
  }
  if (c.ablation) {
    json a = json::object();
    for (const auto& [axis, values] : c.ablation->values) a[to_string(axis)] = values;
    j["ablation"] = a;
  }
  return j;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return out;
}

std::string pretrain_hash(const ExperimentConfig& c) {
  json full = to_json(c);
  json sub = {{"world", full["world"]},
              {"splits", full["splits"]},
              {"num_sessions", full["num_sessions"]},
              {"model", full["model"]},
              {"pretrain", full["pretrain"]},
              {"code_version", kCodeVersion}};
  return hex64(fnv1a64(sub.dump()));
}

nlohmann::json run_identity(const ExperimentConfig& c) {
  json j = to_json(c);
  for (const char* k : {"output_dir", "seeds", "matrix", "ablation"}) j.erase(k);
  return j;
}

std::string run_hash(const ExperimentConfig& c) {
  json j = run_identity(c);
  j["code_version"] = kCodeVersion;
  return hex64(fnv1a64(j.dump()));
}

MethodConfig method_from_json(const nlohmann::json& j) {
  Source src{"<record>", {}};
  return read_method(Reader(j, "/method", src), src);
}

}  // namespace clipcl
