#pragma once

// Experiment orchestration behind the `calign` CLI. Every command reads a JSON
// config (or a previous run's manifest.json), writes its artifacts under
// <output_dir>/<run_id>/ and records input/output hashes in manifest.json.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "calign/attribution.hpp"
#include "calign/dfa.hpp"
#include "calign/faithfulness.hpp"
#include "calign/io.hpp"
#include "calign/svg.hpp"
#include "calign/zoo.hpp"

namespace calign::harness {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "calign-0.1";

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"attribute", "train-align", "evaluate", "ablate", "matrix", "report"};
  return names;
}

// ------------------------------------------------------------ config

struct ExperimentConfig {
  std::string run_id = "run";
  ModelConfig source{2, 4, 32, 128, 64, 16, 1};
  ModelConfig target{3, 6, 48, 192, 64, 16, 2};
  bool reverse = false;
  std::vector<TaskId> tasks{kAllTasks.begin(), kAllTasks.end()};
  std::vector<ScoreMethod> methods{ScoreMethod::nap};
  ScoreMethod align_method = ScoreMethod::nap;  // source scores fed to W, and the gold method
  std::vector<Regime> regimes{kAllRegimes.begin(), kAllRegimes.end()};
  TrainConfig train;
  KGrid k_grid = default_k_grid();
  int ig_steps = kDefaultIgSteps;
  std::size_t n_attr = 32;
  std::uint64_t attr_seed = 7;
  std::size_t n_eval = 32;
  std::uint64_t eval_seed = 1234;
  std::uint64_t seed = 0;
  bool oracle = false;
  std::string output_dir = "runs";
  std::vector<std::string> report_runs;  // run directories; empty means this run
  std::vector<std::pair<TaskId, TaskId>> missing_cells;  // (train, eval) cells of the transfer matrix
  int pretrain_steps = PretrainConfig{}.max_steps;

  fs::path run_dir() const { return fs::path(output_dir) / run_id; }

  void validate() const {
    if (run_id.empty() || run_id.find('/') != std::string::npos) throw ConfigError("run_id must be a plain name");
    source.validate();
    target.validate();
    if (!reverse && source.node_count() > target.node_count()) {
      throw ConfigError("source has more nodes than target; set reverse for larger-to-smaller transfer");
    }
    if (tasks.empty()) throw ConfigError("tasks is empty");
    if (std::set<TaskId>(tasks.begin(), tasks.end()).size() != tasks.size()) throw ConfigError("tasks repeat");
    if (methods.empty()) throw ConfigError("methods is empty");
    for (ScoreMethod m : methods)
      if (m == ScoreMethod::aligned) throw ConfigError("methods: 'aligned' is not an attribution method");
    if (std::find(methods.begin(), methods.end(), align_method) == methods.end()) {
      throw ConfigError("align_method '" + std::string(to_string(align_method)) + "' must be listed in methods");
    }
    if (regimes.empty()) throw ConfigError("regimes is empty");
    TrainConfig t = train;
    t.tasks = {TaskId::ioi_toy};
    t.validate();
    k_grid.validate();
    if (ig_steps <= 0) throw ConfigError("ig_steps must be positive");
    if (n_attr == 0 || n_eval == 0) throw ConfigError("n_attr and n_eval must be positive");
    if (attr_seed == eval_seed) throw ConfigError("attr_seed and eval_seed must differ");
    if (pretrain_steps <= 0) throw ConfigError("pretrain_steps must be positive");
  }
};

namespace detail {

// Reads keys off a JSON object and rejects any key left unread.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError("config: " + where_ + " must be an object");
  }

  template <class T>
  bool get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return false;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: " + where_ + key + ": " + e.what());
    }
    return true;
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + where_ + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline ModelConfig parse_model(const json& j, const std::string& where, ModelConfig c) {
  Fields f(j, where);
  f.get("n_layers", c.n_layers);
  f.get("n_heads", c.n_heads);
  f.get("d_model", c.d_model);
  f.get("d_mlp", c.d_mlp);
  f.get("vocab_size", c.vocab_size);
  f.get("max_seq_len", c.max_seq_len);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

inline json model_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"d_model", c.d_model},
              {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
              {"seed", c.seed}};
}

template <class T, class Parse>
std::vector<T> parse_names(Fields& f, const char* key, std::vector<T> fallback, Parse parse) {
  std::vector<std::string> names;
  if (!f.get(key, names)) return fallback;
  std::vector<T> out;
  for (const auto& n : names) out.push_back(parse(n));
  return out;
}

template <class T>
json names_json(const std::vector<T>& v) {
  json a = json::array();
  for (const T& x : v) a.push_back(to_string(x));
  return a;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  detail::Fields f(j, "");
  f.get("run_id", c.run_id);
  if (const json* s = f.sub("source")) c.source = detail::parse_model(*s, "source.", c.source);
  if (const json* t = f.sub("target")) c.target = detail::parse_model(*t, "target.", c.target);
  f.get("reverse", c.reverse);
  c.tasks = detail::parse_names(f, "tasks", c.tasks, [](const std::string& n) { return parse_task(n); });
  c.methods = detail::parse_names(f, "methods", c.methods, [](const std::string& n) { return parse_method(n); });
  c.regimes = detail::parse_names(f, "regimes", c.regimes, [](const std::string& n) { return parse_regime(n); });
  std::string m;
  if (f.get("align_method", m)) c.align_method = parse_method(m);
  if (const json* t = f.sub("train")) {
    detail::Fields tf(*t, "train.");
    tf.get("lambda", c.train.lambda);
    tf.get("lr", c.train.lr);
    tf.get("steps", c.train.steps);
    tf.get("batch_size", c.train.batch_size);
    tf.get("pool_size", c.train.pool_size);
    tf.get("data_seed", c.train.data_seed);
    std::string src;
    if (tf.get("clean_source", src)) c.train.clean_source = parse_clean_source(src);
    tf.finish();
  }
  if (const json* g = f.sub("k_grid")) {
    if (g->is_string()) {
      if (g->get<std::string>() != default_k_grid().id) {
        throw ConfigError("config: unknown k_grid id '" + g->get<std::string>() + "'; give {id, ks} for custom grids");
      }
    } else {
      detail::Fields gf(*g, "k_grid.");
      c.k_grid = KGrid{};
      if (!gf.get("id", c.k_grid.id) || !gf.get("ks", c.k_grid.ks)) throw ConfigError("config: k_grid needs id and ks");
      gf.finish();
      if (c.k_grid.id == default_k_grid().id && c.k_grid.ks != default_k_grid().ks) {
        throw ConfigError("config: k_grid id '" + c.k_grid.id + "' is reserved for the default grid");
      }
    }
  }
  f.get("ig_steps", c.ig_steps);
  f.get("n_attr", c.n_attr);
  f.get("attr_seed", c.attr_seed);
  f.get("n_eval", c.n_eval);
  f.get("eval_seed", c.eval_seed);
  f.get("seed", c.seed);
  f.get("oracle", c.oracle);
  f.get("output_dir", c.output_dir);
  f.get("report_runs", c.report_runs);
  f.get("pretrain_steps", c.pretrain_steps);
  std::vector<std::vector<std::string>> missing;
  if (f.get("missing_cells", missing)) {
    for (const auto& cell : missing) {
      if (cell.size() != 2) throw ConfigError("config: missing_cells entries are [train_task, eval_task]");
      c.missing_cells.emplace_back(parse_task(cell[0]), parse_task(cell[1]));
    }
  }
  f.finish();
  c.validate();
  return c;
}

// Every field, resolved; parse_config(config_json(c)) reproduces c.
inline json config_json(const ExperimentConfig& c) {
  json missing = json::array();
  for (const auto& [a, b] : c.missing_cells) missing.push_back({to_string(a), to_string(b)});
  return json{{"run_id", c.run_id},
              {"source", detail::model_json(c.source)},
              {"target", detail::model_json(c.target)},
              {"reverse", c.reverse},
              {"tasks", detail::names_json(c.tasks)},
              {"methods", detail::names_json(c.methods)},
              {"align_method", to_string(c.align_method)},
              {"regimes", detail::names_json(c.regimes)},
              {"train",
               {{"lambda", c.train.lambda},
                {"lr", c.train.lr},
                {"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"pool_size", c.train.pool_size},
                {"data_seed", c.train.data_seed},
                {"clean_source", to_string(c.train.clean_source)}}},
              {"k_grid", {{"id", c.k_grid.id}, {"ks", c.k_grid.ks}}},
              {"ig_steps", c.ig_steps},
              {"n_attr", c.n_attr},
              {"attr_seed", c.attr_seed},
              {"n_eval", c.n_eval},
              {"eval_seed", c.eval_seed},
              {"seed", c.seed},
              {"oracle", c.oracle},
              {"output_dir", c.output_dir},
              {"report_runs", c.report_runs},
              {"missing_cells", missing},
              {"pretrain_steps", c.pretrain_steps}};
}

// A config file, or a manifest written by an earlier run of `command`.
inline ExperimentConfig load_config(const fs::path& path, const std::string& command) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  } catch (const MissingArtifactError&) {
    throw ConfigError("config file not found: " + path.string());
  }
  if (j.is_object() && j.contains("calign_manifest")) {
    const json& cmds = j.at("commands");
    if (cmds.contains(command)) return parse_config(cmds.at(command).at("config"));
    return parse_config(j.at("config"));
  }
  return parse_config(j);
}

struct CliOptions {
  std::optional<std::uint64_t> seed;
  bool oracle = false;
  std::optional<std::string> out;
  bool train_models = false;
};

inline void apply_overrides(ExperimentConfig& c, const CliOptions& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.oracle) c.oracle = true;
  if (o.out) c.output_dir = *o.out;
  c.validate();
}

// ------------------------------------------------------------ tables

struct Table {
  std::string name;
  std::vector<std::string> columns;
  struct Row {
    std::string key;
    std::vector<std::optional<double>> cells;
    std::vector<std::string> flags;
    std::vector<std::vector<std::string>> sources;  // artifacts each cell was computed from
  };
  std::vector<Row> rows;

  Row& add(std::string key) {
    rows.push_back({std::move(key), std::vector<std::optional<double>>(columns.size()),
                    std::vector<std::string>(columns.size()), std::vector<std::vector<std::string>>(columns.size())});
    return rows.back();
  }

  const Row* find(std::string_view key) const {
    for (const Row& r : rows)
      if (r.key == key) return &r;
    return nullptr;
  }

  std::size_t column(std::string_view name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw MissingArtifactError("table " + this->name + " has no column '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - columns.begin());
  }
};

inline std::string table_csv(const Table& t) {
  std::string out = "row";
  for (const auto& c : t.columns) out += "," + c;
  out += "\n";
  for (const auto& r : t.rows) {
    out += r.key;
    for (const auto& c : r.cells) out += "," + (c ? format_double(*c) : std::string());
    out += "\n";
  }
  return out;
}

inline json table_json(const Table& t, const std::string& manifest_key) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json cells = json::object(), flags = json::object();
    for (std::size_t i = 0; i < t.columns.size(); ++i) {
      cells[t.columns[i]] = r.cells[i] ? json(*r.cells[i]) : json(nullptr);
      if (!r.flags[i].empty()) flags[t.columns[i]] = r.flags[i];
    }
    rows.push_back({{"row", r.key}, {"cells", cells}, {"flags", flags}});
  }
  return json{{"table", t.name}, {"manifest_key", manifest_key}, {"columns", t.columns}, {"rows", rows}};
}

inline std::string provenance_csv(const Table& t, const std::string& manifest_key) {
  std::string out = "row,column,manifest_key,sources\n";
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < t.columns.size(); ++i) {
      if (!r.cells[i]) continue;
      std::string src;
      for (const auto& s : r.sources[i]) src += (src.empty() ? "" : ";") + s;
      out += r.key + "," + t.columns[i] + "," + manifest_key + "," + src + "\n";
    }
  }
  return out;
}

inline Table parse_table_json(const json& j) {
  Table t;
  try {
    t.name = j.at("table").get<std::string>();
    t.columns = j.at("columns").get<std::vector<std::string>>();
    for (const json& r : j.at("rows")) {
      Table::Row& row = t.add(r.at("row").get<std::string>());
      for (std::size_t i = 0; i < t.columns.size(); ++i) {
        const json& v = r.at("cells").at(t.columns[i]);
        if (!v.is_null()) row.cells[i] = v.get<double>();
        if (r.at("flags").contains(t.columns[i])) row.flags[i] = r.at("flags").at(t.columns[i]).get<std::string>();
      }
    }
  } catch (const json::exception& e) {
    throw MissingArtifactError(std::string("malformed table: ") + e.what());
  }
  return t;
}

// Mean of the present cells in `cols`; nullopt when none is present.
inline std::optional<double> mean_of_present(const Table::Row& r, std::span<const std::size_t> cols) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t c : cols) {
    if (r.cells[c]) {
      s += *r.cells[c];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

// Marks "best" and "second" among `candidates` per column. Earlier candidates
// win ties, so candidate order is the tie rule.
inline void flag_best(Table& t, std::span<const std::size_t> candidates) {
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    std::optional<std::size_t> best, second;
    for (std::size_t r : candidates) {
      const auto& v = t.rows[r].cells[c];
      if (!v) continue;
      if (!best || *v > *t.rows[*best].cells[c]) {
        second = best;
        best = r;
      } else if (!second || *v > *t.rows[*second].cells[c]) {
        second = r;
      }
    }
    if (best) t.rows[*best].flags[c] = "best";
    if (second) t.rows[*second].flags[c] = "second";
  }
}

// ------------------------------------------------------------ run context

inline std::string iso_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class Run {
 public:
  Run(ExperimentConfig cfg, std::string command, bool allow_train, fs::path cache_root = default_cache_root())
      : cfg_(std::move(cfg)),
        command_(std::move(command)),
        allow_train_(allow_train),
        cache_root_(std::move(cache_root)),
        started_(std::chrono::steady_clock::now()),
        started_iso_(iso_now()) {
    key_ = sha256_hex(command_ + "\n" + dump(config_json(cfg_)));
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  const std::string& key() const { return key_; }
  fs::path dir() const { return cfg_.run_dir(); }
  json& extra() { return extra_; }

  const Transformer& source() {
    if (!source_) source_ = load_model(cfg_.source);
    return *source_;
  }
  const Transformer& target() {
    if (!target_) target_ = load_model(cfg_.target);
    return *target_;
  }

  void write(const std::string& rel, std::string_view content) {
    write_file(dir() / rel, content);
    outputs_[rel] = sha256_hex(content);
  }

  void write_table(const Table& t) {
    write("tables/" + t.name + ".csv", table_csv(t));
    write("tables/" + t.name + ".json", dump(table_json(t, key_)));
    write("tables/" + t.name + ".provenance.csv", provenance_csv(t, key_));
  }

  // Records the hash of an artifact this command consumes.
  fs::path input(const std::string& rel) {
    const fs::path p = dir() / rel;
    if (!fs::exists(p)) throw MissingArtifactError("missing input artifact " + p.string() + " (run the producing command first)");
    inputs_[rel] = sha256_file(p);
    return p;
  }

  void external_input(const std::string& label, const fs::path& p) { inputs_[label] = sha256_file(p); }

  ScoreVector scores(const std::string& model_dir, TaskId t, ScoreMethod m) {
    return load_scores(input(score_path(model_dir, t, m)));
  }

  AlignmentMatrix alignment(Regime r, TaskId t) { return load_alignment(input(alignment_stem(r, t) + ".json")); }

  static std::string score_path(const std::string& model_dir, TaskId t, ScoreMethod m) {
    return "scores/" + model_dir + "/" + std::string(to_string(t)) + "__" + std::string(to_string(m)) + ".json";
  }
  static std::string alignment_stem(Regime r, TaskId t) {
    return "alignments/" + std::string(to_string(r)) + "__" + std::string(to_string(t));
  }

  void finish() {
    std::string listing;
    for (const auto& [rel, h] : outputs_) listing += h + "  " + rel + "\n";
    json entry{{"config", config_json(cfg_)},
               {"key", key_},
               {"tool_version", kToolVersion},
               {"content_version", sha256_hex(listing)},
               {"inputs", inputs_},
               {"outputs", outputs_},
               {"extra", extra_},
               {"wall_clock",
                {{"started", started_iso_},
                 {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count()}}}};
    const fs::path path = dir() / "manifest.json";
    json m;
    if (fs::exists(path)) {
      try {
        m = json::parse(read_file(path));
      } catch (const json::exception&) {
        m = json();
      }
    }
    if (!m.is_object() || !m.contains("calign_manifest")) {
      m = json{{"calign_manifest", 1}, {"run_id", cfg_.run_id}, {"config", json()}, {"commands", json::object()}};
    }
    m["config"] = config_json(cfg_);
    m["commands"][command_] = entry;
    write_file(path, dump(m));
  }

 private:
  Transformer load_model(const ModelConfig& mc) {
    PretrainConfig pc;
    pc.max_steps = cfg_.pretrain_steps;
    Transformer t = obtain_model(mc, cache_root_, allow_train_, pc);
    external_input("cache:" + weight_cache_path(cache_root_, mc).filename().string(), weight_cache_path(cache_root_, mc));
    return t;
  }

  ExperimentConfig cfg_;
  std::string command_;
  bool allow_train_;
  fs::path cache_root_;
  std::chrono::steady_clock::time_point started_;
  std::string started_iso_;
  std::string key_;
  std::optional<Transformer> source_;
  std::optional<Transformer> target_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
  json extra_ = json::object();
};

inline void log(const std::string& msg) { std::cerr << "[calign] " << msg << "\n"; }

// ------------------------------------------------------------ attribute

inline void cmd_attribute(Run& run) {
  const auto& c = run.cfg();
  std::vector<ScoreMethod> methods = c.methods;
  if (c.oracle && std::find(methods.begin(), methods.end(), ScoreMethod::exact) == methods.end()) {
    methods.push_back(ScoreMethod::exact);
  }
  for (const auto& [dir, model] : {std::pair<std::string, const Transformer*>{"source", &run.source()},
                                   std::pair<std::string, const Transformer*>{"target", &run.target()}}) {
    for (TaskId t : c.tasks) {
      const TaskBatch batch = generate(t, c.n_attr, c.attr_seed);
      for (ScoreMethod m : methods) {
        log("attribute " + dir + " " + std::string(to_string(t)) + " " + std::string(to_string(m)));
        const ScoreVector s = attribute(*model, batch, m, c.ig_steps);
        const int steps = (m == ScoreMethod::nap_ig_inputs || m == ScoreMethod::nap_ig_acts) ? c.ig_steps : 0;
        run.write(Run::score_path(dir, t, m), dump(scores_to_json(s, {c.n_attr, c.attr_seed, steps})));
      }
    }
  }
}

// ------------------------------------------------------------ train-align

inline std::string task_set_key(std::span<const TaskId> ts) {
  std::string k;
  for (TaskId t : ts) k += std::string(to_string(t)) + ",";
  return k;
}

inline void cmd_train_align(Run& run) {
  const auto& c = run.cfg();
  const Transformer& target = run.target();
  const std::size_t rows = c.source.node_count();
  std::map<TaskId, ScoreVector> src;
  std::map<std::string, TrainResult> memo;  // identical training sets give identical matrices
  for (Regime r : c.regimes) {
    std::size_t applied = 0;
    for (TaskId t : c.tasks) {
      if (!regime_applies(r, t)) continue;
      const auto train_tasks = training_tasks(r, t, c.tasks);
      ++applied;
      for (TaskId tt : train_tasks)
        if (!src.count(tt)) src.emplace(tt, run.scores("source", tt, c.align_method));
      TrainConfig tc = c.train;
      tc.tasks = train_tasks;
      tc.seed = c.seed;
      const std::string key = task_set_key(train_tasks);
      if (!memo.count(key)) {
        log("train-align " + std::string(to_string(r)) + " " + std::string(to_string(t)) + " on " + key);
        const AlignmentMatrix w0 = init_alignment(rows, target.node_count(), src.begin()->second.model_id,
                                                  target.model_id(), c.seed);
        memo.emplace(key, train_alignment(w0, src, target, tc));
      }
      const TrainResult& res = memo.at(key);
      const std::string stem = Run::alignment_stem(r, t);
      run.write(stem + ".bin", alignment_bytes(res.w));
      run.write(stem + ".json", alignment_header(res.w, train_config_json(tc), fs::path(stem + ".bin").filename()));
      run.write(stem + ".loss.csv", loss_trace_csv(res.trace));
    }
    if (applied == 0) {
      throw ConfigError("regime " + std::string(to_string(r)) + " applies to none of the configured tasks");
    }
  }
}

// ------------------------------------------------------------ evaluation

struct TaskEval {
  std::unique_ptr<TaskBatch> batch;
  std::unique_ptr<CircuitEvaluator<Transformer>> ev;
  ScoreVector src;
  ScoreVector gold;
};

class Evaluator {
 public:
  explicit Evaluator(Run& run) : run_(run) {}

  TaskEval& task(TaskId t) {
    auto it = cache_.find(t);
    if (it != cache_.end()) return it->second;
    const auto& c = run_.cfg();
    TaskEval e;
    e.src = run_.scores("source", t, c.align_method);
    e.gold = run_.scores("target", t, c.align_method);
    e.batch = std::make_unique<TaskBatch>(generate(t, c.n_eval, c.eval_seed));
    e.ev = std::make_unique<CircuitEvaluator<Transformer>>(run_.target(), *e.batch);
    return cache_.emplace(t, std::move(e)).first->second;
  }

  FaithfulnessCurve curve_of(TaskId t, const ScoreVector& s) {
    return curve(*task(t).ev, s.scores, s.rank_mode(), run_.cfg().k_grid);
  }

  AlignmentMatrix random_w() {
    const auto& c = run_.cfg();
    return init_alignment(c.source.node_count(), c.target.node_count(), run_.source().model_id(),
                          run_.target().model_id(), c.seed);
  }

 private:
  Run& run_;
  std::map<TaskId, TaskEval> cache_;
};

inline std::string row_label(const std::string& key) {
  static const std::map<std::string, std::string> labels{
      {"baseline_random_w", "Baseline (random W)"}, {"gold", "Gold"},
      {"dfa_in_distribution", "DFA in-distribution"}, {"dfa_near_distribution", "DFA near-distribution"},
      {"dfa_zero_shot", "DFA zero-shot"},          {"dfa_best", "DFA (best)"},
      {"random_w", "Random W"},                      {"scrambled_s", "Scrambled s"},
      {"permuted_w", "Permuted W"},                  {"heuristic_depth", "Heuristic depth"}};
  const auto it = labels.find(key);
  return it == labels.end() ? key : it->second;
}

inline std::vector<std::string> task_columns(const ExperimentConfig& c, bool with_avg) {
  std::vector<std::string> cols;
  for (TaskId t : c.tasks) cols.emplace_back(to_string(t));
  if (with_avg) cols.emplace_back("avg");
  return cols;
}

inline void fill_avg(Table& t, std::size_t n_tasks) {
  std::vector<std::size_t> cols(n_tasks);
  std::iota(cols.begin(), cols.end(), 0);
  for (auto& r : t.rows) {
    r.cells[n_tasks] = mean_of_present(r, cols);
    for (std::size_t i = 0; i < n_tasks; ++i)
      if (r.cells[i]) r.sources[n_tasks].push_back("row:" + r.key + "/" + t.columns[i]);
  }
}

// Row of per-task maxima over `rows`; earlier rows win ties.
inline void fill_best(Table& t, Table::Row& best, std::span<const std::size_t> rows, std::size_t n_tasks) {
  for (std::size_t c = 0; c < n_tasks; ++c) {
    for (std::size_t r : rows) {
      const auto& v = t.rows[r].cells[c];
      if (v && (!best.cells[c] || *v > *best.cells[c])) {
        best.cells[c] = v;
        best.sources[c] = {"row:" + t.rows[r].key + "/" + t.columns[c]};
      }
    }
  }
}

inline void cmd_evaluate(Run& run) {
  const auto& c = run.cfg();
  Evaluator ev(run);
  const std::size_t n = c.tasks.size();
  Table t{"leaderboard", task_columns(c, true), {}};
  t.add("baseline_random_w");
  t.add("gold");
  std::vector<std::size_t> regime_rows;
  for (Regime r : c.regimes) {
    regime_rows.push_back(t.rows.size());
    t.add("dfa_" + std::string(to_string(r)));
  }
  const AlignmentMatrix rw = ev.random_w();
  for (std::size_t i = 0; i < n; ++i) {
    const TaskId task = c.tasks[i];
    const std::string tn(to_string(task));
    log("evaluate " + tn);
    TaskEval& te = ev.task(task);
    const std::string src_path = Run::score_path("source", task, c.align_method);
    const std::string gold_path = Run::score_path("target", task, c.align_method);
    svg::LineChart chart{"Faithfulness: " + tn, "k (retained proportion)", "faithfulness f", {}};
    auto record = [&](std::size_t row, const ScoreVector& s, std::vector<std::string> sources) {
      const FaithfulnessCurve fc = ev.curve_of(task, s);
      const std::string curve_rel = "curves/" + t.rows[row].key + "__" + tn + ".csv";
      run.write(curve_rel, curve_csv(fc));
      sources.push_back(curve_rel);
      t.rows[row].cells[i] = fc.cpr;
      t.rows[row].sources[i] = std::move(sources);
      chart.series.push_back({row_label(t.rows[row].key), fc.grid.ks, fc.f});
    };
    record(0, predict_scores(rw, te.src), {src_path, "seed:" + std::to_string(c.seed)});
    record(1, te.gold, {gold_path});
    for (std::size_t k = 0; k < c.regimes.size(); ++k) {
      if (!regime_applies(c.regimes[k], task)) continue;
      const std::string stem = Run::alignment_stem(c.regimes[k], task);
      record(regime_rows[k], predict_scores(run.alignment(c.regimes[k], task), te.src), {src_path, stem + ".json"});
    }
    run.write("plots/curve__" + tn + ".svg", svg::render(chart));
  }
  Table::Row best = t.add("dfa_best");
  t.rows.pop_back();
  fill_best(t, best, regime_rows, n);
  t.rows.push_back(std::move(best));
  fill_avg(t, n);
  flag_best(t, regime_rows);
  run.write_table(t);
}

inline const Table::Row& require_row(const Table& t, std::string_view key) {
  const Table::Row* r = t.find(key);
  if (!r) throw MissingArtifactError("table " + t.name + " has no row '" + std::string(key) + "'");
  return *r;
}

// Per task, the regime whose alignment scores best (ties by regime order).
inline std::map<TaskId, Regime> best_regimes(Run& run, Evaluator& ev) {
  const auto& c = run.cfg();
  std::map<TaskId, Regime> out;
  for (TaskId task : c.tasks) {
    std::optional<double> best;
    for (Regime r : c.regimes) {
      if (!regime_applies(r, task)) continue;
      const double cpr = ev.curve_of(task, predict_scores(run.alignment(r, task), ev.task(task).src)).cpr;
      if (!best || cpr > *best) {
        best = cpr;
        out[task] = r;
      }
    }
    if (!best) throw MissingArtifactError("ablate: no alignment applies to " + std::string(to_string(task)));
  }
  return out;
}

inline void cmd_ablate(Run& run) {
  const auto& c = run.cfg();
  Evaluator ev(run);
  const std::size_t n = c.tasks.size();
  Table t{"ablation", task_columns(c, true), {}};
  for (const char* k : {"random_w", "scrambled_s", "permuted_w", "heuristic_depth", "dfa_zero_shot", "dfa_best"}) t.add(k);
  const auto best = best_regimes(run, ev);
  const AlignmentMatrix rw = ev.random_w();
  const AlignmentMatrix hw = heuristic_depth(c.source, c.target, run.source().model_id(), run.target().model_id());
  json seeds = json::object();
  for (std::size_t i = 0; i < n; ++i) {
    const TaskId task = c.tasks[i];
    const std::string tn(to_string(task));
    log("ablate " + tn);
    TaskEval& te = ev.task(task);
    const std::string src_path = Run::score_path("source", task, c.align_method);
    const Regime br = best.at(task);
    const std::string best_stem = Run::alignment_stem(br, task) + ".json";
    const AlignmentMatrix bw = run.alignment(br, task);
    const std::uint64_t scramble = scramble_seed(c.seed, task);
    const std::uint64_t permute = scramble_seed(c.seed ^ 0x5DEECE66DULL, task);
    seeds[tn] = {{"scrambled_s", scramble}, {"permuted_w", permute}, {"controls_use", to_string(br)}};
    auto set = [&](std::size_t row, const ScoreVector& s, std::vector<std::string> sources) {
      t.rows[row].cells[i] = ev.curve_of(task, s).cpr;
      t.rows[row].sources[i] = std::move(sources);
    };
    set(0, predict_scores(rw, te.src), {src_path, "seed:" + std::to_string(c.seed)});
    set(1, scrambled_s(bw, te.src, scramble), {src_path, best_stem, "seed:" + std::to_string(scramble)});
    set(2, predict_scores(permuted_w(bw, permute), te.src), {src_path, best_stem, "seed:" + std::to_string(permute)});
    set(3, predict_scores(hw, te.src), {src_path});
    if (std::find(c.regimes.begin(), c.regimes.end(), Regime::zero_shot) != c.regimes.end()) {
      const std::string zs = Run::alignment_stem(Regime::zero_shot, task) + ".json";
      set(4, predict_scores(run.alignment(Regime::zero_shot, task), te.src), {src_path, zs});
    }
    set(5, predict_scores(bw, te.src), {src_path, best_stem});
  }
  run.extra()["control_seeds"] = seeds;
  fill_avg(t, n);
  run.write_table(t);
}

inline void cmd_matrix(Run& run) {
  const auto& c = run.cfg();
  Evaluator ev(run);
  const std::size_t n = c.tasks.size();
  Table t{"transfer_matrix", task_columns(c, false), {}};
  std::set<std::pair<TaskId, TaskId>> missing(c.missing_cells.begin(), c.missing_cells.end());
  svg::Heatmap hm{"Transfer CPR (rows: training task, columns: evaluation task)", {}, t.columns, {}};
  for (TaskId row : c.tasks) {
    const std::string rn(to_string(row));
    Table::Row& r = t.add(rn);
    hm.row_labels.push_back(rn);
    const std::string stem = Run::alignment_stem(Regime::in_distribution, row) + ".json";
    const AlignmentMatrix w = run.alignment(Regime::in_distribution, row);
    for (std::size_t j = 0; j < n; ++j) {
      const TaskId col = c.tasks[j];
      if (missing.count({row, col})) {
        hm.cells.push_back(std::nullopt);
        continue;
      }
      log("matrix " + rn + " -> " + std::string(to_string(col)));
      r.cells[j] = ev.curve_of(col, predict_scores(w, ev.task(col).src)).cpr;
      r.sources[j] = {stem, Run::score_path("source", col, c.align_method)};
      hm.cells.push_back(r.cells[j]);
    }
  }
  run.write_table(t);
  run.write("plots/transfer_matrix.svg", svg::render(hm));
}

struct RecoveryStats {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

// Per-task DFA(best)/Gold ratios; zero Gold cells are degenerate and skipped.
inline RecoveryStats recovery_stats(const Table& leaderboard, std::span<const std::string> task_cols) {
  const auto& best = require_row(leaderboard, "dfa_best");
  const auto& gold = require_row(leaderboard, "gold");
  std::vector<double> ratios;
  for (const auto& col : task_cols) {
    const std::size_t i = leaderboard.column(col);
    if (!best.cells[i] || !gold.cells[i] || *gold.cells[i] == 0.0) continue;
    ratios.push_back(*best.cells[i] / *gold.cells[i]);
  }
  RecoveryStats s;
  s.n = ratios.size();
  if (s.n == 0) return s;
  for (double r : ratios) s.mean += r;
  s.mean /= static_cast<double>(s.n);
  for (double r : ratios) s.std += (r - s.mean) * (r - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(s.n));
  return s;
}

inline void cmd_report(Run& run) {
  const auto& c = run.cfg();
  std::vector<fs::path> runs;
  for (const auto& r : c.report_runs) runs.emplace_back(r);
  if (runs.empty()) runs.push_back(run.dir());
  Table t{"scaling", {"baseline", "dfa", "gold", "recovery_percent"}, {}};
  svg::BarChart bars{"Mean faithfulness recovery ratio across tasks", "DFA / Gold", {}, {}, {}, 1.0};
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const fs::path lb_path = runs[k] / "tables" / "leaderboard.json";
    if (!fs::exists(lb_path)) throw MissingArtifactError("report: no leaderboard at " + lb_path.string());
    run.external_input("report:" + std::to_string(k) + ":" + lb_path.string(), lb_path);
    const Table lb = parse_table_json(read_json(lb_path));
    const json m = read_json(runs[k] / "manifest.json");
    std::string pair;
    try {
      const ExperimentConfig rc = parse_config(m.at("config"));
      pair = trained_model_id(rc.source) + "->" + trained_model_id(rc.target);
    } catch (const json::exception& e) {
      throw MissingArtifactError("report: malformed manifest in " + runs[k].string() + ": " + e.what());
    }
    std::vector<std::string> task_cols;
    for (const auto& col : lb.columns)
      if (col != "avg") task_cols.push_back(col);
    const std::size_t avg = lb.column("avg");
    Table::Row& row = t.add(pair);
    const std::string src = lb_path.string();
    row.cells[0] = require_row(lb, "baseline_random_w").cells[avg];
    row.cells[1] = require_row(lb, "dfa_best").cells[avg];
    row.cells[2] = require_row(lb, "gold").cells[avg];
    if (row.cells[1] && row.cells[2]) {
      if (*row.cells[2] == 0.0) {
        row.flags[3] = "degenerate";
      } else {
        row.cells[3] = recovery_ratio(*row.cells[1], *row.cells[2]);
      }
    }
    for (auto& s : row.sources) s = {src};
    const RecoveryStats rs = recovery_stats(lb, task_cols);
    if (rs.n == 0) continue;
    bars.labels.push_back(pair);
    bars.means.push_back(rs.mean);
    bars.stds.push_back(rs.std);
  }
  run.write_table(t);
  if (!bars.labels.empty()) run.write("plots/recovery.svg", svg::render(bars));
}

// ------------------------------------------------------------ dispatch

inline void execute(const std::string& command, const ExperimentConfig& cfg, const CliOptions& opts,
                    const fs::path& cache_root = default_cache_root()) {
  Run run(cfg, command, opts.train_models, cache_root);
  if (command == "attribute") {
    cmd_attribute(run);
  } else if (command == "train-align") {
    cmd_train_align(run);
  } else if (command == "evaluate") {
    cmd_evaluate(run);
  } else if (command == "ablate") {
    cmd_ablate(run);
  } else if (command == "matrix") {
    cmd_matrix(run);
  } else if (command == "report") {
    cmd_report(run);
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  run.finish();
}

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kMissing = 3, kNumeric = 4 };

// Maps the exception in flight to a CLI exit code.
inline int exit_code_for(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError&) {
    return kConfig;
  } catch (const MissingArtifactError&) {
    return kMissing;
  } catch (const NumericError&) {
    return kNumeric;
  } catch (const DegenerateTaskError&) {
    return kNumeric;
  } catch (...) {
    return kInternal;
  }
}

// Loads the config, applies overrides and runs; errors are reported on stderr.
inline int run_cli(const std::string& command, const fs::path& config_path, const CliOptions& opts,
                   const fs::path& cache_root = default_cache_root()) {
  try {
    ExperimentConfig cfg = load_config(config_path, command);
    apply_overrides(cfg, opts);
    execute(command, cfg, opts, cache_root);
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "calign " << command << ": " << e.what() << "\n";
    return exit_code_for(std::current_exception());
  }
}

}  // namespace calign::harness
