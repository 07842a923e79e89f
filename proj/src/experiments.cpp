#include "clipcl/experiments.hpp"

#include "clipcl/metrics.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

namespace clipcl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<int> kKs = {1, 5, 10};

void say(const RunOptions& opts, const std::string& msg) {
  if (opts.log) *opts.log << msg << std::endl;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string cell_label(const TrainPlan& plan) {
  std::string m = plan.joint ? "Joint-FT" : to_string(plan.method.method);
  return m + "-" + to_string(plan.option) + "-" + to_string(plan.protocol);
}

bool same_metrics(const MetricsReport& a, const MetricsReport& b) {
  return a.ut_acc_overall == b.ut_acc_overall && a.zs_acc == b.zs_acc && a.tr_at == b.tr_at && a.ir_at == b.ir_at;
}

/// Grid from the selection block for the method's tunable weight, or empty.
std::vector<MethodConfig> selection_grid(const ExperimentConfig& cfg) {
  std::vector<MethodConfig> grid;
  if (!cfg.selection) return grid;
  const MethodConfig& base = cfg.plan.method;
  if (base.uses_beta()) {
    for (double b : cfg.selection->beta) {
      MethodConfig m = base;
      m.beta = b;
      grid.push_back(m);
    }
  } else if (base.method == Method::IMM) {
    for (double a : cfg.selection->alpha) {
      MethodConfig m = base;
      m.alpha = a;
      grid.push_back(m);
    }
  }
  return grid;
}

json selection_to_json(const Selection& s) {
  json points = json::array();
  for (const auto& p : s.points)
    points.push_back({{"method", to_json(p.method)},
                      {"validation_ut", p.validation_ut},
                      {"validation_zs", p.validation_zs},
                      {"validation_a_acc", p.validation_a_acc}});
  return {{"points", points}, {"best", to_json(s.best)}};
}

std::string fmt2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

/// Runs `n` jobs on up to `workers` threads; each job must catch its own errors.
template <class F>
void parallel_for(std::size_t n, int workers, F&& job) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers && static_cast<std::size_t>(w) < n; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  for (auto& t : pool) t.join();
}

struct Cell {
  ExperimentConfig cfg;
  std::string method_label;
  std::string option_label;
  std::vector<RunRecord> records;
  std::string error;
  bool gate_failure = false;
};

int run_cells(std::vector<Cell>& cells, const std::vector<std::uint64_t>& seeds, const RunOptions& opts,
              PretrainCache& cache) {
  struct Job {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < cells.size(); ++c)
    for (auto s : seeds) jobs.push_back({c, s});
  std::vector<std::optional<RunRecord>> results(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::vector<char> gate(jobs.size(), 0);
  std::mutex log_mutex;
  RunOptions inner = opts;
  inner.jobs = 1;
  parallel_for(jobs.size(), opts.jobs, [&](std::size_t i) {
    const auto& job = jobs[i];
    try {
      auto outcome = execute_run(cells[job.cell].cfg, job.seed, inner, cache);
      results[i] = std::move(outcome.record);
      std::lock_guard lock(log_mutex);
      say(opts, (outcome.verified ? "verified " : "finished ") + cell_label(cells[job.cell].cfg.plan) + " seed " +
                    std::to_string(job.seed));
    } catch (const PretrainQualityError& e) {
      errors[i] = e.what();
      gate[i] = 1;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  int code = exit_code::kOk;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    Cell& cell = cells[jobs[i].cell];
    if (results[i]) {
      cell.records.push_back(std::move(*results[i]));
    } else {
      cell.error = errors[i];
      cell.gate_failure = cell.gate_failure || gate[i];
      say(opts, "failed " + cell_label(cell.cfg.plan) + " seed " + std::to_string(jobs[i].seed) + ": " + errors[i]);
      code = std::max(code, gate[i] ? exit_code::kGate : exit_code::kUnexpected);
    }
  }
  return code;
}

TableRow baseline_row(const std::vector<Cell>& cells, Protocol protocol) {
  for (const auto& cell : cells) {
    if (cell.records.empty()) continue;
    std::vector<RunRecord> originals;
    for (const auto& r : cell.records) {
      RunRecord o;
      o.metrics = r.original_metrics;
      o.plan = r.plan;
      originals.push_back(o);
    }
    TableRow row = summarize("Original", "", originals);
    row.values.erase("bwt");
    (void)protocol;
    return row;
  }
  TableRow row;
  row.method = "Original";
  row.failed = true;
  row.error = "no finished cell";
  return row;
}

void emit_table(const ComparisonTable& table, const fs::path& dir, const std::string& stem, const RunOptions& opts) {
  fs::create_directories(dir);
  write_atomic(dir / (stem + ".csv"), to_csv(table));
  std::string text = to_text(table);
  write_atomic(dir / (stem + ".txt"), text);
  if (opts.log) *opts.log << text;
  say(opts, "wrote " + (dir / (stem + ".csv")).string());
}

}  // namespace

void write_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << contents;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::shared_ptr<const PretrainCache::Entry> PretrainCache::get(const ExperimentConfig& cfg, const Lab& lab,
                                                               std::uint64_t seed, const fs::path& out,
                                                               std::ostream* log) {
  const std::string key = pretrain_hash(cfg) + "_seed" + std::to_string(seed);
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key);
  std::shared_ptr<const Entry> entry;
  if (it != entries_.end()) {
    entry = it->second;
  } else {
    const fs::path dir = out / "cache";
    const fs::path ckpt = dir / ("pretrain_" + key + ".ckpt");
    const fs::path meta = dir / ("pretrain_" + key + ".json");
    auto e = std::make_shared<Entry>();
    if (fs::exists(ckpt) && fs::exists(meta)) {
      e->params = load_checkpoint(ckpt);
      json j = json::parse(read_file(meta));
      e->zs_acc = j.at("zs_acc").get<double>();
      e->chance = j.at("chance").get<double>();
      e->epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
    } else {
      if (log) *log << "pretraining seed " << seed << " (" << key << ")" << std::endl;
      PretrainPlan plan = cfg.pretrain;
      plan.enforce_gate = false;
      auto result = pretrain_contrastive(lab, plan, seed);
      e->params = std::move(result.params);
      e->zs_acc = result.zs_acc;
      e->chance = result.chance;
      e->epoch_losses = std::move(result.epoch_losses);
      save_checkpoint(e->params, ckpt);
      json j = {{"pretrain_hash", pretrain_hash(cfg)}, {"seed", seed},        {"zs_acc", e->zs_acc},
                {"chance", e->chance},                 {"epoch_losses", e->epoch_losses}, {"code_version", kCodeVersion}};
      write_atomic(meta, j.dump(2));
      write_atomic(dir / ("splits_" + key + ".json"), split_manifest(lab.world, lab.splits).dump(2));
    }
    entry = e;
    entries_[key] = entry;
  }
  if (cfg.pretrain.enforce_gate && entry->zs_acc < cfg.pretrain.gate_ratio * entry->chance) {
    std::ostringstream os;
    os << "pretrained model for seed " << seed << " fails the quality gate: zero-shot accuracy " << entry->zs_acc
       << " < " << cfg.pretrain.gate_ratio << " x chance " << entry->chance << "; final epoch loss "
       << (entry->epoch_losses.empty() ? 0.0 : entry->epoch_losses.back());
    throw PretrainQualityError(os.str());
  }
  return entry;
}

fs::path run_directory(const fs::path& out, const ExperimentConfig& cfg, std::uint64_t seed) {
  return out / "runs" / (cell_label(cfg.plan) + "_" + run_hash(cfg)) / ("seed_" + std::to_string(seed));
}

RunOutcome execute_run(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opts, PretrainCache& cache) {
  const fs::path dir = run_directory(opts.out, cfg, seed);
  const fs::path record_path = dir / "run_record.json";
  const std::string hash = run_hash(cfg);
  Lab lab = make_lab(cfg.lab, seed);

  if (fs::exists(record_path) && !opts.force) {
    RunRecord stored = load_record(record_path);
    if (stored.config_hash != hash)
      throw Error("config hash mismatch at " + record_path.string() + ": stored " + stored.config_hash +
                  ", expected " + hash);
    DirectoryCheckpointStore store(dir);
    for (const auto& id : stored.checkpoints) (void)store.get(id);
    MetricsReport again = evaluate_model(lab, final_model(stored, store));
    if (!same_metrics(again, stored.metrics))
      throw Error("verification failed at " + record_path.string() + ": final checkpoint metrics differ from record");
    return {std::move(stored), record_path, true};
  }

  auto original = cache.get(cfg, lab, seed, opts.out, opts.log);
  TrainPlan plan = cfg.plan;
  plan.seed = seed;
  json selection;
  auto grid = selection_grid(cfg);
  if (!grid.empty()) {
    auto sel = select_hyperparameters(lab, plan, original->params, grid, opts.jobs);
    plan.method = sel.best;
    selection = selection_to_json(sel);
  }
  if (opts.force && fs::exists(dir)) fs::remove_all(dir);
  DirectoryCheckpointStore store(dir);
  RunRecord rec = run_protocol(lab, plan, original->params, store);
  rec.config = run_identity(cfg);
  rec.config_hash = hash;
  rec.selection = selection;
  write_atomic(record_path, to_json(rec).dump(2));
  return {std::move(rec), record_path, false};
}

RunRecord record_from_json(const json& j) {
  RunRecord r;
  r.config = j.at("config");
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  const json& p = j.at("plan");
  r.plan.protocol = parse_protocol(p.at("protocol").get<std::string>());
  r.plan.epochs = p.at("epochs").get<int>();
  r.plan.lr = p.at("lr").get<double>();
  r.plan.decay_epoch = p.at("decay_epoch").get<int>();
  r.plan.decay_factor = p.at("decay_factor").get<double>();
  r.plan.batch_size = p.at("batch_size").get<int>();
  r.plan.method = method_from_json(p.at("method"));
  r.plan.option = parse_update_option(p.at("option").get<std::string>());
  r.plan.teacher = parse_teacher_policy(p.at("teacher").get<std::string>());
  r.plan.joint = p.at("joint").get<bool>();
  r.plan.seed = p.at("seed").get<std::uint64_t>();
  for (const auto& e : j.at("per_epoch")) {
    EpochLog log;
    log.session = e.at("session").get<int>();
    log.epoch = e.at("epoch").get<int>();
    log.loss_total = e.at("loss_total").get<double>();
    log.loss_ce = e.at("loss_ce").get<double>();
    if (e.contains("loss_distill")) log.loss_distill = e.at("loss_distill").get<double>();
    r.per_epoch.push_back(log);
  }
  for (const auto& row : j.at("acc_matrix")) r.acc_matrix.add_row(row.get<std::vector<double>>());
  for (const auto& s : j.at("sessions"))
    r.sessions.push_back({s.at("session").get<int>(), s.at("ut_acc_overall").get<double>(), s.at("zs_acc").get<double>()});
  r.metrics = metrics_from_json(j.at("metrics_exact"));
  r.original_metrics = metrics_from_json(j.at("original_metrics_exact"));
  r.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
  r.selection = j.at("selection");
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  return r;
}

RunRecord load_record(const fs::path& path) {
  try {
    return record_from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw Error("malformed run record " + path.string() + ": " + e.what());
  }
}

std::vector<std::string> metric_columns(Protocol p) {
  std::vector<std::string> cols = {"ut_acc"};
  if (p == Protocol::MST) cols.push_back("bwt");
  for (const char* c : {"zs_acc", "tr@1", "tr@5", "tr@10", "ir@1", "ir@5", "ir@10", "a_acc"}) cols.push_back(c);
  if (p == Protocol::MST) cols.push_back("ut_acc_overall");
  return cols;
}

std::map<std::string, double> metric_values(const MetricsReport& m, Protocol p) {
  std::map<std::string, double> v = {{"ut_acc", m.ut_acc}, {"zs_acc", m.zs_acc}, {"a_acc", a_acc(m.ut_acc, m.zs_acc)}};
  for (int k : kKs) {
    if (m.tr_at.count(k)) v["tr@" + std::to_string(k)] = m.tr_at.at(k);
    if (m.ir_at.count(k)) v["ir@" + std::to_string(k)] = m.ir_at.at(k);
  }
  if (p == Protocol::MST) {
    v["ut_acc_overall"] = m.ut_acc_overall;
    if (m.bwt) v["bwt"] = *m.bwt;
  }
  return v;
}

TableRow summarize(const std::string& method, const std::string& option, const std::vector<RunRecord>& records) {
  TableRow row;
  row.method = method;
  row.option = option;
  row.seeds = static_cast<int>(records.size());
  if (records.empty()) {
    row.failed = true;
    return row;
  }
  std::map<std::string, double> sum;
  std::map<std::string, int> count;
  for (const auto& r : records)
    for (const auto& [k, v] : metric_values(r.metrics, r.plan.protocol)) {
      sum[k] += v;
      ++count[k];
    }
  for (const auto& [k, s] : sum) {
    double mean = s / count[k];
    row.values[k] = k == "bwt" ? std::round(mean * 10000.0) / 100.0 : to_percent(mean);
  }
  return row;
}

void mark_best(ComparisonTable& t) {
  std::map<std::string, std::vector<TableRow*>> groups;
  for (auto& r : t.rows) {
    r.best.clear();
    if (!r.option.empty() && !r.failed) groups[r.option].push_back(&r);
  }
  for (auto& [option, rows] : groups) {
    for (const auto& col : t.columns) {
      double best = -std::numeric_limits<double>::infinity();
      for (auto* r : rows)
        if (r->values.count(col)) best = std::max(best, r->values.at(col));
      for (auto* r : rows)
        if (r->values.count(col) && r->values.at(col) == best) r->best.insert(col);
    }
  }
}

std::string to_csv(const ComparisonTable& t) {
  std::ostringstream os;
  os << "method,option,status,seeds";
  for (const auto& c : t.columns) os << "," << c;
  os << ",best,note,error\n";
  for (const auto& r : t.rows) {
    os << r.method << "," << r.option << "," << (r.failed ? "failed" : "ok") << "," << r.seeds;
    for (const auto& c : t.columns) {
      os << ",";
      if (r.values.count(c)) os << fmt2(r.values.at(c));
    }
    std::string best;
    for (const auto& c : t.columns)
      if (r.best.count(c)) best += (best.empty() ? "" : ";") + c;
    std::string err = r.error;
    for (auto& ch : err)
      if (ch == ',' || ch == '\n') ch = ' ';
    os << "," << best << "," << r.note << "," << err << "\n";
  }
  return os.str();
}

std::string to_text(const ComparisonTable& t) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header = {"method", "option"};
  header.insert(header.end(), t.columns.begin(), t.columns.end());
  cells.push_back(header);
  for (const auto& r : t.rows) {
    std::vector<std::string> line = {r.method, r.option.empty() ? "-" : r.option};
    for (const auto& c : t.columns) {
      if (r.failed) {
        line.push_back("failed");
      } else if (!r.values.count(c)) {
        line.push_back("-");
      } else {
        line.push_back(fmt2(r.values.at(c)) + (r.best.count(c) ? "*" : ""));
      }
    }
    cells.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::ostringstream os;
  std::string prev_group = "\x01";
  for (std::size_t l = 0; l < cells.size(); ++l) {
    if (l > 0) {
      const std::string& group = t.rows[l - 1].option;
      if (group != prev_group) {
        os << std::string(std::accumulate(width.begin(), width.end(), std::size_t{0}) + 2 * width.size(), '-') << "\n";
        prev_group = group;
      }
    }
    for (std::size_t i = 0; i < cells[l].size(); ++i)
      os << std::left << std::setw(static_cast<int>(width[i]) + 2) << cells[l][i];
    os << "\n";
  }
  os << "* best in option group (higher is better; percent)\n";
  for (const auto& r : t.rows)
    if (r.failed && !r.error.empty()) os << "failed " << r.method << "-" << r.option << ": " << r.error << "\n";
  return os.str();
}

std::vector<std::uint64_t> effective_seeds(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& cli) {
  return cli.empty() ? cfg.seeds : cli;
}

int cmd_run(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, const RunOptions& opts) {
  PretrainCache cache;
  std::vector<Cell> cells(1);
  cells[0].cfg = cfg;
  int code = run_cells(cells, seeds, opts, cache);
  for (const auto& r : cells[0].records) {
    std::cout << run_directory(opts.out, cfg, r.seed).string() << "/run_record.json\n";
  }
  return code;
}

int cmd_matrix(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, const RunOptions& opts) {
  if (!cfg.matrix) throw ConfigError("matrix command needs a 'matrix' block in the config");
  const auto& spec = *cfg.matrix;
  std::vector<Cell> cells;
  for (auto option : spec.options) {
    for (auto method : spec.methods) {
      Cell c;
      c.cfg = cfg;
      c.cfg.plan.method = spec.overrides.count(method) ? spec.overrides.at(method) : MethodConfig::defaults(method);
      c.cfg.plan.option = option;
      c.cfg.plan.joint = false;
      c.method_label = to_string(method);
      c.option_label = to_string(option);
      cells.push_back(std::move(c));
    }
  }
  if (cfg.plan.joint && cfg.plan.protocol == Protocol::MST) {
    Cell c;
    c.cfg = cfg;
    c.cfg.plan.method = MethodConfig::defaults(Method::FT);
    c.cfg.plan.option = UpdateOption::WM;
    c.cfg.plan.joint = true;
    c.method_label = "Joint-FT";
    cells.push_back(std::move(c));
  }
  PretrainCache cache;
  int code = run_cells(cells, seeds, opts, cache);

  ComparisonTable table;
  table.columns = metric_columns(cfg.plan.protocol);
  table.rows.push_back(baseline_row(cells, cfg.plan.protocol));
  for (const auto& c : cells) {
    if (c.method_label == "Joint-FT") continue;
    TableRow row = summarize(c.method_label, c.option_label, c.records);
    if (!c.error.empty()) {
      row.failed = true;
      row.error = c.error;
    }
    table.rows.push_back(std::move(row));
  }
  for (const auto& c : cells) {
    if (c.method_label != "Joint-FT") continue;
    TableRow row = summarize(c.method_label, "", c.records);
    // Upper-bound row: only UT-Acc is meaningful.
    for (auto it = row.values.begin(); it != row.values.end();)
      it = (it->first == "ut_acc" || it->first == "ut_acc_overall") ? std::next(it) : row.values.erase(it);
    if (!c.error.empty()) {
      row.failed = true;
      row.error = c.error;
    }
    table.rows.push_back(std::move(row));
  }
  mark_best(table);
  emit_table(table, opts.out / "tables", "matrix_" + to_string(cfg.plan.protocol), opts);
  return code;
}

int cmd_ablate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, const std::string& axis_name,
               const RunOptions& opts) {
  AblationAxis axis = parse_ablation_axis(axis_name);
  if (cfg.plan.method.method != Method::VRLwF)
    throw ConfigError("ablation sweeps apply to VR-LwF only (config method is " + to_string(cfg.plan.method.method) + ")");
  std::vector<json> values;
  if (cfg.ablation && cfg.ablation->values.count(axis)) {
    values = cfg.ablation->values.at(axis);
  } else if (axis == AblationAxis::M) {
    values = {5, 10, 20, 30};
  } else if (axis == AblationAxis::Ks) {
    values = {10, 50, 100, 200};
  } else {
    values = {"random", "caption-corpus"};
  }

  std::vector<Cell> cells;
  for (const auto& v : values) {
    Cell c;
    c.cfg = cfg;
    auto& m = c.cfg.plan.method;
    if (axis == AblationAxis::M) m.sample_length = v.get<int>();
    if (axis == AblationAxis::Ks) m.replay_count = v.get<int>();
    if (axis == AblationAxis::ReplaySource) m.replay_source = parse_replay_source(v.get<std::string>());
    m.validate();
    if (m.sample_length && m.template_pseudo &&
        *m.sample_length + 6 > cfg.lab.model.max_seq_len)
      throw ConfigError("M = " + std::to_string(*m.sample_length) + " does not fit max_seq_len with the template");
    c.method_label = to_string(axis) + "=" + (v.is_string() ? v.get<std::string>() : v.dump());
    c.option_label = to_string(cfg.plan.option);
    cells.push_back(std::move(c));
  }
  Cell ft;
  ft.cfg = cfg;
  ft.cfg.plan.method = MethodConfig::defaults(Method::FT);
  ft.method_label = "FT";
  cells.push_back(std::move(ft));

  PretrainCache cache;
  int code = run_cells(cells, seeds, opts, cache);
  ComparisonTable table;
  table.columns = metric_columns(cfg.plan.protocol);
  table.rows.push_back(baseline_row(cells, cfg.plan.protocol));
  for (const auto& c : cells) {
    TableRow row = summarize(c.method_label, c.option_label, c.records);
    json control = run_identity(c.cfg);
    if (axis == AblationAxis::M) control["method"].erase("M");
    if (axis == AblationAxis::Ks) control["method"].erase("K_s");
    if (axis == AblationAxis::ReplaySource) control["method"].erase("replay_source");
    row.note = "control=" + hex64(fnv1a64(control.dump()));
    if (!c.error.empty()) {
      row.failed = true;
      row.error = c.error;
    }
    table.rows.push_back(std::move(row));
  }
  mark_best(table);
  emit_table(table, opts.out / "tables", "ablate_" + to_string(axis) + "_" + to_string(cfg.plan.protocol), opts);
  return code;
}

std::string curves_csv(const std::vector<RunRecord>& records) {
  if (records.empty()) throw ConfigError("curves need at least one run record");
  std::ostringstream os;
  os << "session,method,option,seed,ut_acc_overall,zs_acc\n";
  std::size_t sessions = 0;
  for (const auto& r : records) {
    if (r.plan.protocol != Protocol::MST) throw ConfigError("curves need MST run records (got an OST record)");
    sessions = std::max(sessions, r.sessions.size());
  }
  const auto& base = records.front();
  for (std::size_t s = 1; s <= sessions; ++s)
    os << s << ",Original,-," << base.seed << "," << fmt2(to_percent(base.original_metrics.ut_acc_overall)) << ","
       << fmt2(to_percent(base.original_metrics.zs_acc)) << "\n";
  for (const auto& r : records) {
    std::string method = r.plan.joint ? "Joint-FT" : to_string(r.plan.method.method);
    for (const auto& s : r.sessions)
      os << s.session << "," << method << "," << to_string(r.plan.option) << "," << r.seed << ","
         << fmt2(to_percent(s.ut_acc_overall)) << "," << fmt2(to_percent(s.zs_acc)) << "\n";
  }
  return os.str();
}

int cmd_curves(const std::vector<fs::path>& paths, const RunOptions& opts) {
  std::vector<RunRecord> records;
  for (const auto& p : paths) records.push_back(load_record(p));
  std::string csv = curves_csv(records);
  write_atomic(opts.out / "curves.csv", csv);
  std::cout << csv;
  say(opts, "wrote " + (opts.out / "curves.csv").string());
  return exit_code::kOk;
}

json evaluate_checkpoint(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& checkpoint) {
  Lab lab = make_lab(cfg.lab, seed);
  ParameterSet params = load_checkpoint(checkpoint);
  lab.encoder.check_params(params);
  MetricsReport m = evaluate_model(lab, params);
  auto probe = shuffle_probe(lab.encoder, params, lab.splits.retrieval, seed, kKs);
  json shuffled_tr = json::object();
  json shuffled_ir = json::object();
  for (const auto& [k, v] : probe.shuffled.tr_at) shuffled_tr[std::to_string(k)] = v;
  for (const auto& [k, v] : probe.shuffled.ir_at) shuffled_ir[std::to_string(k)] = v;
  return {{"checkpoint", checkpoint.string()},
          {"seed", seed},
          {"metrics", to_json(m, true)},
          {"metrics_exact", to_json(m, false)},
          {"shuffle_probe", {{"tr_at", shuffled_tr}, {"ir_at", shuffled_ir}, {"chance", probe.chance}}}};
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds, const fs::path& checkpoint,
                 const RunOptions& opts) {
  json all = json::array();
  for (auto seed : seeds) {
    json j = evaluate_checkpoint(cfg, seed, checkpoint);
    write_atomic(opts.out / ("evaluate_" + checkpoint.stem().string() + "_seed" + std::to_string(seed) + ".json"),
                 j.dump(2));
    all.push_back(j);
  }
  std::cout << all.dump(2) << "\n";
  return exit_code::kOk;
}

}  // namespace clipcl
