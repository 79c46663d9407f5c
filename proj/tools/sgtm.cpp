// sgtm: train, sweep, ablate, calibrate, attack and analyze runs.
//
// Every command writes into a content-addressed directory below --out and
// never touches an existing completed directory.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sgtm/eval.hpp"
#include "sgtm/experiment.hpp"
#include "sgtm/run_io.hpp"
#include "sgtm/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sgtm;

namespace {

// Refused because inputs disagree with recorded state; exit code 3.
class Refusal : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  unsigned threads = 1;
  std::string precision;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)");
  cmd->add_option("--seed", c.seed, "top-level seed (overrides the config)");
  cmd->add_option("--out", c.out, "output root")->capture_default_str();
  cmd->add_option("--threads", c.threads, "concurrent sweep points")->check(CLI::PositiveNumber);
  cmd->add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
}

std::mutex log_mutex;

template <class... Args>
void log(const char* fmt, Args... args) {
  std::lock_guard lock(log_mutex);
  std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
}

fs::path out_root(const Common& c) {
  std::uint64_t unused = 0;
  fs::path root = c.out;
  apply_env_overrides(unused, root);
  return root;
}

// Config from --config with --seed, SGTM_SEED and --precision applied.
ExperimentConfig load_config(const Common& c) {
  if (c.config.empty()) throw ConfigError("--config is required");
  ExperimentConfig cfg = ExperimentConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  fs::path unused;
  apply_env_overrides(cfg.seed, unused);
  if (!c.precision.empty()) cfg.precision = c.precision;
  cfg.validate();
  return cfg;
}

std::string diff_text(const json& recorded, const json& given) {
  std::string msg;
  for (const std::string& line : json_diff(recorded, given)) msg += "\n  " + line;
  return msg;
}

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a(ss.str()));
}

json seeds_of(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"init", init_seed(c)},
          {"corpus", mix_seed(c.seed, 0x636f7270)},
          {"test", mix_seed(c.seed, 0x74657374)},
          {"labels", mix_seed(c.seed, 0x6c61626c, c.labels.seed)},
          {"grammar", c.data.grammar.seed}};
}

// Output directory handling shared by all commands: returns false when the
// directory already holds a completed manifest.
struct OutputDir {
  fs::path dir;
  std::optional<RunLock> lock;
  std::string started = utc_timestamp();

  OutputDir(fs::path d, const json& identity) : dir(std::move(d)) {
    if (run_complete(dir)) {
      check_identity(identity);
      return;
    }
    fs::create_directories(dir);
    lock.emplace(dir);
    if (fs::exists(dir / "inputs.json")) check_identity(identity);
    write_json(dir / "inputs.json", identity);
  }

  bool done() const { return !lock.has_value(); }

  void check_identity(const json& identity) const {
    const json recorded = read_json(dir / "inputs.json");
    if (recorded != identity) {
      throw Refusal(dir.string() + " was produced from different inputs:" + diff_text(recorded, identity));
    }
  }

  void finish(const std::string& command, const std::string& hash, json seeds,
              std::vector<std::string> artifacts, json extra = json::object()) {
    artifacts.insert(artifacts.begin(), "inputs.json");
    RunManifest m;
    m.command = command;
    m.config_hash = hash;
    m.code_version = code_version();
    m.seeds = std::move(seeds);
    m.started = started;
    m.finished = utc_timestamp();
    m.artifacts = std::move(artifacts);
    m.extra = std::move(extra);
    write_manifest(dir, m);
  }
};

// ---------------------------------------------------------------------------
// train / sweep

std::string run_name(const ExperimentConfig& c) {
  return std::string(to_string(c.train.method)) + "-" + c.hash();
}

template <class T>
RunRecord train_into(const ExperimentConfig& cfg, const ExperimentData& data) {
  return train_experiment<T>(cfg, data).record;
}

// Trains one config into its content-addressed directory; returns the path.
fs::path train_run(const ExperimentConfig& cfg, const fs::path& root) {
  const fs::path dir = root / "runs" / run_name(cfg);
  OutputDir od(dir, cfg.to_json());
  if (od.done()) {
    log("up to date: %s", dir.c_str());
    return dir;
  }
  log("training %s -> %s", to_string(cfg.train.method), dir.c_str());
  const ExperimentData data = build_experiment_data(cfg, root / "cache");
  write_json(dir / "config.json", cfg.to_json());
  write_label_csv(dir / "labels.csv", data.train);
  const RunRecord rec = cfg.precision == "f64" ? train_into<double>(cfg, data)
                                               : train_into<float>(cfg, data);
  if (rec.diverged) log("warning: %s diverged: %s", dir.c_str(), rec.diagnostic.c_str());
  std::vector<std::string> artifacts = save_run(dir, rec, cfg.to_json());
  artifacts.insert(artifacts.begin(), {"config.json", "labels.csv"});
  const auto& f = rec.final_metrics();
  log("  step %zu forget %.4f retain %.4f related %.4f", f.step, f.loss_forget_test,
      f.loss_retain_test, f.loss_related_test);
  od.finish("train", cfg.hash(), seeds_of(cfg), artifacts,
            {{"method", rec.method}, {"diverged", rec.diverged}});
  return dir;
}

int cmd_train(const Common& c, const std::string& method) {
  ExperimentConfig cfg = load_config(c);
  if (!method.empty()) cfg.train.method = method_from_string(method);
  std::cout << train_run(cfg, out_root(c)).string() << "\n";
  return 0;
}

struct SweepPoint {
  json axis_value;
  ExperimentConfig config;
};

int cmd_sweep(const Common& c, const std::string& axis, const std::vector<std::string>& methods) {
  const ExperimentConfig base = load_config(c);
  const fs::path root = out_root(c);
  std::vector<SweepPoint> points;
  for (const std::string& m : methods) {
    ExperimentConfig mc = base;
    mc.train.method = method_from_string(m);
    if (axis == "undiscovered_rate") {
      for (double r : base.analysis.undiscovered_rates) {
        points.push_back({json{{"undiscovered_rate", r}}, with_undiscovered_rate(mc, r)});
      }
    } else if (axis == "leakage_baseline") {
      std::set<double> rates(base.analysis.leakage_grid.begin(), base.analysis.leakage_grid.end());
      rates.insert(base.analysis.undiscovered_rates.begin(), base.analysis.undiscovered_rates.end());
      for (double r : rates) {
        points.push_back({json{{"undiscovered_rate", r}}, with_undiscovered_rate(mc, r)});
      }
    } else if (axis == "tpr_fpr_grid") {
      for (auto [tpr, fpr] : base.analysis.tpr_fpr_grid) {
        points.push_back({json{{"tpr", tpr}, {"fpr", fpr}}, with_tpr_fpr(mc, tpr, fpr)});
      }
    } else {
      if (base.analysis.model_sizes.empty()) throw ConfigError("analysis.model_sizes is empty");
      for (const SizeSpec& s : base.analysis.model_sizes) {
        points.push_back({json{{"n_layers", s.n_layers}, {"d_model", s.d_model}, {"d_mlp", s.d_mlp},
                               {"n_heads", s.n_heads}},
                          with_size(mc, s)});
      }
    }
  }
  for (const SweepPoint& p : points) p.config.validate();

  const json identity = {{"axis", axis}, {"methods", methods}, {"base", base.to_json()}};
  const fs::path dir = root / "sweeps" / (axis + "-" + hex64(fnv1a(identity.dump())));
  OutputDir od(dir, identity);
  if (od.done()) {
    log("up to date: %s", dir.c_str());
    std::cout << dir.string() << "\n";
    return 0;
  }

  std::vector<fs::path> run_dirs(points.size());
  std::vector<std::string> errors(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        run_dirs[i] = train_run(points[i].config, root);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  const unsigned n = std::max(1u, std::min<unsigned>(c.threads, static_cast<unsigned>(points.size())));
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!errors[i].empty()) throw std::runtime_error("sweep point " + points[i].axis_value.dump() + ": " + errors[i]);
  }

  std::ofstream csv(dir / "sweep.csv");
  csv << "point,method,run_dir,steps,tokens_forget,tokens_forget_unlabeled,loss_forget_test,"
         "loss_retain_test,loss_related_test\n";
  csv.precision(17);
  json rows = json::array();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const RunRecord r = load_run(run_dirs[i]);
    const MetricsRow& f = r.final_metrics();
    std::string point = points[i].axis_value.dump();
    std::replace(point.begin(), point.end(), ',', ';');
    csv << '"' << point << "\"," << r.method << ',' << fs::relative(run_dirs[i], root).string() << ','
        << f.step << ',' << f.tokens_forget << ',' << r.tokens_forget_unlabeled << ','
        << f.loss_forget_test << ',' << f.loss_retain_test << ',' << f.loss_related_test << '\n';
    rows.push_back({{"point", points[i].axis_value}, {"run_dir", run_dirs[i].string()}});
  }
  csv.close();
  write_json(dir / "points.json", rows);
  od.finish("sweep " + axis, base.hash(), seeds_of(base), {"sweep.csv", "points.json"});
  std::cout << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Commands over checkpoints

struct Loaded {
  Checkpoint ckpt;
  ExperimentConfig config;
};

// Checkpoint plus its recorded experiment. A --config must agree with the
// recording outside the analysis section; its analysis section is used.
Loaded load_checkpoint(const fs::path& path, const Common& c) {
  Loaded l{read_checkpoint(path), {}};
  if (!l.ckpt.experiment) throw IoError(path.string() + " does not record its experiment config");
  try {
    l.config = ExperimentConfig::from_json(*l.ckpt.experiment);
  } catch (const ConfigError& e) {
    throw Refusal(path.string() + ": recorded config does not match this schema: " + e.what());
  }
  if (!c.config.empty()) {
    ExperimentConfig given = ExperimentConfig::load(c.config);
    json a = l.config.to_json(), b = given.to_json();
    a.erase("analysis");
    b.erase("analysis");
    // The seed and method of the recording win; they name the run, not the setup.
    for (json* j : {&a, &b}) {
      j->erase("seed");
      j->at("train").erase("method");
    }
    if (a != b) throw Refusal("--config differs from the config recorded in " + path.string() + ":" + diff_text(a, b));
    l.config.analysis = given.analysis;
  }
  if (!c.precision.empty()) l.config.precision = c.precision;
  return l;
}

template <class T>
Transformer<T> model_of(const Checkpoint& ck) {
  Transformer<T> m(ck.model);
  m.params() = ck.params.template cast<T>();
  return m;
}

template <class T>
Transformer<T> reported_of(const Checkpoint& ck) {
  Transformer<T> m = model_of<T>(ck);
  if (ck.partition) m = ablate(m, build_designation(ck.model, *ck.partition));
  return m;
}

fs::path derived_dir(const fs::path& root, const std::string& kind, const std::string& name, const json& identity) {
  return root / kind / (name + "-" + hex64(fnv1a(identity.dump())));
}

json losses_json(const EvalLosses& l) {
  return {{"forget", l.forget}, {"retain", l.retain}, {"related", l.related}};
}

template <class T>
int ablate_impl(const Loaded& l, const fs::path& ckpt_path, const fs::path& root) {
  if (!l.ckpt.partition) throw ContractError(ckpt_path.string() + " has no partition to ablate");
  const json identity = {{"command", "ablate"}, {"checkpoint", file_hash(ckpt_path)}, {"precision", l.config.precision}};
  OutputDir od(derived_dir(root, "ablations", "ablate", identity), identity);
  if (!od.done()) {
    const ExperimentData data = build_experiment_data(l.config, root / "cache");
    const Transformer<T> model = model_of<T>(l.ckpt);
    const Transformer<T> ablated = ablate(model, build_designation(l.ckpt.model, *l.ckpt.partition));
    json extra = l.ckpt.header.value("extra", json::object());
    extra["experiment"] = l.config.to_json();
    extra["ablated"] = true;
    write_checkpoint(od.dir / "ablated.ckpt", l.ckpt.model, l.ckpt.partition,
                     ablated.params().template cast<float>(), l.ckpt.step, l.ckpt.method, extra);
    const json losses = {{"before", losses_json(evaluate(model, data.eval))},
                         {"after", losses_json(evaluate(ablated, data.eval))}};
    write_json(od.dir / "losses.json", losses);
    log("forget %.4f -> %.4f, retain %.4f -> %.4f", losses["before"]["forget"].get<double>(),
        losses["after"]["forget"].get<double>(), losses["before"]["retain"].get<double>(),
        losses["after"]["retain"].get<double>());
    od.finish("ablate", l.config.hash(), seeds_of(l.config), {"ablated.ckpt", "losses.json"});
  }
  std::cout << od.dir.string() << "\n";
  return 0;
}

void write_calibration(const fs::path& dir, const CalibrationResult& r) {
  write_json(dir / "calibration.json", r.to_json());
  std::ofstream csv(dir / "logit_bias.csv");
  csv.precision(17);
  csv << "token,bias\n";
  for (std::size_t t = 0; t < r.logit_bias.size(); ++t) csv << t << ',' << r.logit_bias[t] << '\n';
}

template <class T>
int calibrate_impl(const Loaded& l, const fs::path& ckpt_path, const fs::path& root) {
  const json identity = {{"command", "calibrate"},
                         {"checkpoint", file_hash(ckpt_path)},
                         {"calibration", l.config.analysis.to_json()["calibration"]},
                         {"precision", l.config.precision}};
  OutputDir od(derived_dir(root, "calibrations", "calibrate", identity), identity);
  if (!od.done()) {
    const ExperimentData data = build_experiment_data(l.config, root / "cache");
    const CalibrationResult r = calibrate(reported_of<T>(l.ckpt), data.eval, l.config.analysis.calibration);
    if (!r.converged) log("warning: calibration did not converge in %zu iterations", r.iterations);
    log("objective %.6f -> %.6f; forget %.4f -> %.4f, retain %.4f -> %.4f", r.objective_before,
        r.objective_after, r.before.forget, r.after.forget, r.before.retain, r.after.retain);
    write_calibration(od.dir, r);
    od.finish("calibrate", l.config.hash(), seeds_of(l.config), {"calibration.json", "logit_bias.csv"},
              {{"converged", r.converged}});
  }
  std::cout << od.dir.string() << "\n";
  return 0;
}

double baseline_from_run(const fs::path& run) { return load_run(run).final_metrics().loss_forget_test; }

template <class T>
int attack_impl(const Loaded& l, const fs::path& ckpt_path, const fs::path& root, const std::string& mode,
                std::optional<double> baseline) {
  if (mode == "finetune") {
    if (!baseline) throw ConfigError("finetune needs --baseline-loss or --baseline-run");
    FinetunePlan plan = l.config.analysis.finetune;
    plan.seed = mix_seed(l.config.seed, 0x6174746b, plan.seed);
    const json identity = {{"command", "attack finetune"}, {"checkpoint", file_hash(ckpt_path)},
                           {"plan", plan.to_json()},       {"baseline", *baseline},
                           {"precision", l.config.precision}};
    OutputDir od(derived_dir(root, "attacks", "finetune", identity), identity);
    if (!od.done()) {
      const ExperimentData data = build_experiment_data(l.config, root / "cache");
      const RelearnCurve curve = finetune_attack(plan, reported_of<T>(l.ckpt), data.train, data.eval, *baseline);
      std::ofstream csv(od.dir / "relearn.csv");
      csv.precision(17);
      csv << "step,forget_tokens,loss_forget_test,loss_retain_test\n";
      for (const RelearnPoint& p : curve.points) {
        csv << p.step << ',' << p.forget_tokens << ',' << p.loss_forget << ',' << p.loss_retain << '\n';
      }
      csv.close();
      const json summary = {
          {"baseline_forget_loss", curve.baseline_forget_loss},
          {"tolerance", plan.tolerance},
          {"steps_to_baseline", curve.steps_to_baseline ? json(*curve.steps_to_baseline) : json(nullptr)},
          {"tokens_to_baseline", curve.tokens_to_baseline ? json(*curve.tokens_to_baseline) : json(nullptr)},
          {"censored_at", curve.steps_to_baseline ? json(nullptr) : json(plan.steps)},
          {"plan", plan.to_json()}};
      write_json(od.dir / "relearn.json", summary);
      if (curve.steps_to_baseline) {
        log("recovered baseline + %.3f after %zu steps", plan.tolerance, *curve.steps_to_baseline);
      } else {
        log("not recovered within %zu steps", plan.steps);
      }
      od.finish("attack finetune", l.config.hash(), seeds_of(l.config), {"relearn.csv", "relearn.json"});
    }
    std::cout << od.dir.string() << "\n";
    return 0;
  }
  RmuPlan plan = l.config.analysis.rmu;
  plan.seed = mix_seed(l.config.seed, 0x726d75, plan.seed);
  plan.resolve(l.ckpt.model);
  const json identity = {{"command", "attack rmu"}, {"checkpoint", file_hash(ckpt_path)},
                         {"plan", plan.to_json()},  {"precision", l.config.precision}};
  OutputDir od(derived_dir(root, "attacks", "rmu", identity), identity);
  if (!od.done()) {
    if (l.ckpt.partition) log("%s", "warning: running RMU on a routed checkpoint; it is applied to the unablated weights");
    const ExperimentData data = build_experiment_data(l.config, root / "cache");
    Transformer<T> model = model_of<T>(l.ckpt);
    const RunRecord rec = run_rmu(plan, model, data.train, data.eval);
    write_metrics_csv(od.dir / "metrics.csv", rec.metrics);
    json extra = {{"experiment", l.config.to_json()}, {"rmu", plan.to_json()}, {"source", ckpt_path.string()}};
    write_checkpoint(od.dir / "rmu.ckpt", l.ckpt.model, std::nullopt, model.params().template cast<float>(),
                     l.ckpt.step, "rmu", extra);
    const auto& f = rec.final_metrics();
    log("rmu: forget %.4f retain %.4f", f.loss_forget_test, f.loss_retain_test);
    od.finish("attack rmu", l.config.hash(), seeds_of(l.config), {"metrics.csv", "rmu.ckpt"},
              {{"diverged", rec.diverged}});
  }
  std::cout << od.dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct RunInput {
  fs::path dir;
  RunRecord record;
  ExperimentConfig config;
  std::string hash;
};

RunInput load_run_input(const fs::path& dir) {
  if (!run_complete(dir)) throw IoError(dir.string() + " is not a completed run directory");
  RunInput r{dir, load_run(dir), {}, read_manifest(dir).config_hash};
  try {
    r.config = ExperimentConfig::from_json(read_json(dir / "config.json"));
  } catch (const ConfigError& e) {
    throw Refusal(dir.string() + ": recorded config does not match this schema: " + e.what());
  }
  return r;
}

class DataCache {
 public:
  explicit DataCache(fs::path root) : root_(std::move(root)) {}
  const ExperimentData& get(const ExperimentConfig& c) {
    auto it = cache_.find(c.hash());
    if (it == cache_.end()) it = cache_.emplace(c.hash(), build_experiment_data(c, root_ / "cache")).first;
    return it->second;
  }

 private:
  fs::path root_;
  std::map<std::string, ExperimentData> cache_;
};

template <class T>
std::vector<std::string> report_tradeoff(const std::vector<RunInput>& runs, const fs::path& dir, DataCache& dc,
                                         const AnalysisSpec& analysis) {
  std::ofstream csv(dir / "tradeoff.csv");
  csv.precision(17);
  csv << "run,method,step,tokens_forget,loss_forget_test,loss_retain_test,loss_related_test,"
         "calibrated_forget,calibrated_retain,calibrated_related\n";
  for (const RunInput& r : runs) {
    const ExperimentData& data = dc.get(r.config);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(r.dir / "checkpoints")) {
      if (e.path().extension() == ".ckpt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& file : files) {
      const Checkpoint ck = read_checkpoint(file);
      const Transformer<T> rep = reported_of<T>(ck);
      const CalibrationResult cal = calibrate(rep, data.eval, analysis.calibration);
      const MetricsRow* row = nullptr;
      for (const MetricsRow& m : r.record.metrics) {
        if (m.step == ck.step) row = &m;
      }
      csv << r.dir.filename().string() << ',' << r.record.method << ',' << ck.step << ','
          << (row ? row->tokens_forget : 0) << ',' << cal.before.forget << ',' << cal.before.retain << ','
          << cal.before.related << ',' << cal.after.forget << ',' << cal.after.retain << ','
          << cal.after.related << '\n';
      log("%s step %zu: calibrated forget %.4f retain %.4f", r.record.method.c_str(), ck.step,
          cal.after.forget, cal.after.retain);
    }
  }
  return {"tradeoff.csv"};
}

std::vector<std::string> report_leakage(const std::vector<RunInput>& runs, const std::vector<RunInput>& baselines,
                                        const fs::path& dir) {
  if (baselines.size() < 2) throw ConfigError("leakage needs at least two --baseline runs");
  std::vector<const RunRecord*> recs;
  for (const RunInput& b : baselines) recs.push_back(&b.record);
  const std::vector<BaselinePoint> curve = baseline_curve(recs);
  std::ofstream csv(dir / "leakage.csv");
  csv.precision(17);
  csv << "run,method,undiscovered_forget_tokens,forget_loss,in_range,equivalent_forget_tokens,leakage,"
         "leakage_lower,leakage_upper\n";
  json reports = json::array();
  for (const RunInput& r : runs) {
    const LeakageReport rep = leakage(r.record, curve);
    auto opt = [](const std::optional<double>& v) {
      if (!v) return std::string();
      std::ostringstream s;
      s.precision(17);
      s << *v;
      return s.str();
    };
    csv << r.dir.filename().string() << ',' << r.record.method << ',' << rep.undiscovered_forget_tokens << ','
        << rep.forget_loss << ',' << (rep.in_range ? 1 : 0) << ',' << opt(rep.equivalent_forget_tokens) << ','
        << opt(rep.leakage) << ',' << rep.leakage_lower << ',' << rep.leakage_upper << '\n';
    json j = rep.to_json();
    j["run"] = r.dir.string();
    j["method"] = r.record.method;
    reports.push_back(j);
    if (rep.leakage) {
      log("%s: leakage %.4f", r.record.method.c_str(), *rep.leakage);
    } else {
      log("%s: out of range, leakage in [%.4g, %.4g]", r.record.method.c_str(), rep.leakage_lower, rep.leakage_upper);
    }
  }
  json jc = json::array();
  for (const BaselinePoint& p : curve) jc.push_back({{"forget_tokens", p.forget_tokens}, {"forget_loss", p.forget_loss}});
  write_json(dir / "leakage.json", {{"baseline_curve", jc}, {"reports", reports}});
  return {"leakage.csv", "leakage.json"};
}

template <class T>
std::vector<std::string> report_gradnorms(const std::vector<RunInput>& runs, const fs::path& dir, DataCache& dc,
                                          const AnalysisSpec& analysis) {
  std::ofstream csv(dir / "gradnorms.csv");
  csv.precision(17);
  csv << "run,example_id,domain,forget_relative,retain_relative\n";
  json summary = json::array();
  for (const RunInput& r : runs) {
    if (!r.record.partition) throw ContractError(r.dir.string() + " has no partition");
    const ExperimentData& data = dc.get(r.config);
    const Checkpoint ck = read_checkpoint(latest_checkpoint(r.dir));
    const std::size_t per_domain = std::max<std::size_t>(1, analysis.grad_norm_examples / 2);
    std::vector<LabeledExample> examples;
    std::size_t nf = 0, nr = 0;
    for (const LabeledExample& ex : data.test) {
      std::size_t& n = ex.true_domain == Domain::kForget ? nf : nr;
      if (n < per_domain) {
        examples.push_back(ex);
        ++n;
      }
    }
    const auto samples = grad_norm_study(model_of<T>(ck), build_designation(ck.model, *ck.partition), examples);
    for (const GradNormSample& s : samples) {
      csv << r.dir.filename().string() << ',' << s.example_id << ',' << to_string(s.domain) << ','
          << s.forget_relative << ',' << s.retain_relative << '\n';
    }
    const GradNormSummary g = summarize(samples);
    summary.push_back({{"run", r.dir.string()},
                       {"forget_params_on_forget", g.forget_params_on_forget},
                       {"forget_params_on_retain", g.forget_params_on_retain},
                       {"retain_params_on_forget", g.retain_params_on_forget},
                       {"retain_params_on_retain", g.retain_params_on_retain}});
    log("theta_forget: %.4g on forget vs %.4g on retain; theta_retain: %.4g on retain vs %.4g on forget",
        g.forget_params_on_forget, g.forget_params_on_retain, g.retain_params_on_retain, g.retain_params_on_forget);
  }
  write_json(dir / "gradnorms.json", summary);
  return {"gradnorms.csv", "gradnorms.json"};
}

template <class T>
std::vector<std::string> report_pertoken(const std::vector<RunInput>& runs, const fs::path& dir, DataCache& dc,
                                         const AnalysisSpec& analysis, bool calibrated) {
  std::ofstream raw(dir / "pertoken.csv"), hist(dir / "histogram.csv");
  raw.precision(17);
  hist.precision(17);
  raw << "run,domain,loss\n";
  hist << "run,domain,bin_lo,bin_hi,count\n";
  json summary = json::array();
  for (const RunInput& r : runs) {
    const ExperimentData& data = dc.get(r.config);
    const Transformer<T> rep = reported_of<T>(read_checkpoint(latest_checkpoint(r.dir)));
    std::optional<std::vector<double>> bias;
    if (calibrated) bias = calibrate(rep, data.eval, analysis.calibration).logit_bias;
    for (Domain d : {Domain::kForget, Domain::kRetain}) {
      const auto& batches = d == Domain::kForget ? data.eval.forget : data.eval.retain;
      const LossHistogram h = per_token_losses(rep, batches, bias ? &*bias : nullptr, analysis.histogram_bins);
      const std::string name = r.dir.filename().string();
      for (double v : h.values) raw << name << ',' << to_string(d) << ',' << v << '\n';
      const double w = (h.hi - h.lo) / static_cast<double>(h.counts.size());
      for (std::size_t b = 0; b < h.counts.size(); ++b) {
        hist << name << ',' << to_string(d) << ',' << h.lo + w * static_cast<double>(b) << ','
             << h.lo + w * static_cast<double>(b + 1) << ',' << h.counts[b] << '\n';
      }
      summary.push_back({{"run", r.dir.string()}, {"domain", to_string(d)}, {"mean", h.mean}, {"median", h.median},
                         {"n_tokens", h.values.size()}, {"calibrated", calibrated}});
      log("%s %s: mean %.4f median %.4f", r.record.method.c_str(), to_string(d), h.mean, h.median);
    }
  }
  write_json(dir / "pertoken.json", summary);
  return {"pertoken.csv", "histogram.csv", "pertoken.json"};
}

std::vector<std::string> report_scaling(const std::vector<RunInput>& runs, const std::vector<RunInput>& targets,
                                        const fs::path& dir) {
  std::vector<const RunRecord*> recs;
  for (const RunInput& r : runs) recs.push_back(&r.record);
  std::ofstream csv(dir / "scaling.csv");
  csv.precision(17);
  csv << "subset,alpha,beta,residual,n_points,low_confidence\n";
  json out = {{"fits", json::object()}, {"penalties", json::array()}};
  for (TestSubset s : {TestSubset::kRetain, TestSubset::kForget, TestSubset::kRelated}) {
    const ScalingFit f = fit_scaling(recs, s);
    csv << to_string(s) << ',' << f.alpha << ',' << f.beta << ',' << f.residual << ',' << f.n_points << ','
        << (f.low_confidence ? 1 : 0) << '\n';
    out["fits"][to_string(s)] = {{"alpha", f.alpha}, {"beta", f.beta}, {"residual", f.residual},
                                 {"n_points", f.n_points}, {"low_confidence", f.low_confidence}};
    log("%s: loss = %.4g * C^(%.4g) (residual %.4g)%s", to_string(s), f.alpha, -f.beta, f.residual,
        f.low_confidence ? " low confidence" : "");
    for (const RunInput& t : targets) {
      const MetricsRow& m = t.record.final_metrics();
      const double loss = s == TestSubset::kRetain   ? m.loss_retain_test
                          : s == TestSubset::kForget ? m.loss_forget_test
                                                     : m.loss_related_test;
      const double pen = compute_penalty(loss, m.flops, f);
      out["penalties"].push_back({{"run", t.dir.string()}, {"subset", to_string(s)}, {"loss", loss},
                                  {"flops", m.flops}, {"penalty", pen}});
    }
  }
  write_json(dir / "scaling.json", out);
  return {"scaling.csv", "scaling.json"};
}

template <class T>
std::vector<std::string> analyze_impl(const std::string& report, const std::vector<RunInput>& runs,
                                      const std::vector<RunInput>& extra, const fs::path& dir, const fs::path& root,
                                      const AnalysisSpec& analysis, bool calibrated) {
  DataCache dc(root);
  if (report == "tradeoff") return report_tradeoff<T>(runs, dir, dc, analysis);
  if (report == "leakage") return report_leakage(runs, extra, dir);
  if (report == "gradnorms") return report_gradnorms<T>(runs, dir, dc, analysis);
  if (report == "pertoken") return report_pertoken<T>(runs, dir, dc, analysis, calibrated);
  return report_scaling(runs, extra, dir);
}

int cmd_analyze(const Common& c, const std::string& report, const std::vector<std::string>& run_dirs,
                const std::vector<std::string>& baseline_dirs, bool calibrated) {
  const fs::path root = out_root(c);
  std::vector<RunInput> runs, extra;
  for (const std::string& d : run_dirs) runs.push_back(load_run_input(d));
  for (const std::string& d : baseline_dirs) extra.push_back(load_run_input(d));
  if (runs.empty()) throw ConfigError("analyze needs at least one --run");
  AnalysisSpec analysis = runs.front().config.analysis;
  if (!c.config.empty()) analysis = ExperimentConfig::load(c.config).analysis;
  std::string precision = c.precision.empty() ? runs.front().config.precision : c.precision;

  json identity = {{"report", report},         {"runs", json::array()},        {"baselines", json::array()},
                   {"analysis", analysis.to_json()}, {"calibrated", calibrated}, {"precision", precision}};
  for (const RunInput& r : runs) identity["runs"].push_back(r.dir.filename().string() + "@" + r.hash);
  for (const RunInput& r : extra) identity["baselines"].push_back(r.dir.filename().string() + "@" + r.hash);
  OutputDir od(derived_dir(root, "analyses", report, identity), identity);
  if (!od.done()) {
    const auto artifacts = precision == "f64"
                               ? analyze_impl<double>(report, runs, extra, od.dir, root, analysis, calibrated)
                               : analyze_impl<float>(report, runs, extra, od.dir, root, analysis, calibrated);
    od.finish("analyze " + report, runs.front().hash, seeds_of(runs.front().config), artifacts);
  }
  std::cout << od.dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective gradient masking experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());

  Common common;
  std::string method, axis, mode, report, checkpoint, baseline_run;
  std::vector<std::string> methods{"sgtm", "filter_weak"}, run_dirs, baseline_dirs;
  std::optional<double> baseline_loss;
  bool calibrated = false;

  auto* train = app.add_subcommand("train", "train one run");
  add_common(train, common);
  train->add_option("--method", method, "sgtm, filter_weak, filter_perfect or filter_none");

  auto* sweep = app.add_subcommand("sweep", "train one run per point of an axis");
  add_common(sweep, common);
  sweep->add_option("--axis", axis)->required()->check(CLI::IsMember({"undiscovered_rate", "leakage_baseline", "tpr_fpr_grid", "model_size"}));
  sweep->add_option("--methods", methods, "methods per point")->delimiter(',')->capture_default_str();

  auto* ablate_cmd = app.add_subcommand("ablate", "zero the forget parameters of a checkpoint");
  add_common(ablate_cmd, common);
  ablate_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);

  auto* calibrate_cmd = app.add_subcommand("calibrate", "fit a logit bias to a (post-ablation) checkpoint");
  add_common(calibrate_cmd, common);
  calibrate_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);

  auto* attack = app.add_subcommand("attack", "fine-tuning attack or RMU unlearning");
  add_common(attack, common);
  attack->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  attack->add_option("--mode", mode)->required()->check(CLI::IsMember({"finetune", "rmu"}));
  auto* bl = attack->add_option("--baseline-loss", baseline_loss, "forget loss counted as recovered");
  attack->add_option("--baseline-run", baseline_run, "run whose final forget loss is the baseline")
      ->check(CLI::ExistingDirectory)
      ->excludes(bl);

  auto* analyze = app.add_subcommand("analyze", "reports over run directories");
  add_common(analyze, common);
  analyze->add_option("--report", report)->required()->check(
      CLI::IsMember({"tradeoff", "leakage", "gradnorms", "pertoken", "scaling"}));
  analyze->add_option("--run", run_dirs, "run directory (repeatable)")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--baseline", baseline_dirs,
                      "leakage: baseline runs; scaling: runs to convert into compute penalties")
      ->check(CLI::ExistingDirectory);
  analyze->add_flag("--calibrated", calibrated, "pertoken: apply logit calibration first");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(common, method);
    if (*sweep) return cmd_sweep(common, axis, methods);
    if (*analyze) return cmd_analyze(common, report, run_dirs, baseline_dirs, calibrated);

    const fs::path root = out_root(common);
    const Loaded l = load_checkpoint(checkpoint, common);
    const bool f64 = l.config.precision == "f64";
    if (*ablate_cmd) return f64 ? ablate_impl<double>(l, checkpoint, root) : ablate_impl<float>(l, checkpoint, root);
    if (*calibrate_cmd) {
      return f64 ? calibrate_impl<double>(l, checkpoint, root) : calibrate_impl<float>(l, checkpoint, root);
    }
    std::optional<double> baseline = baseline_loss;
    if (!baseline_run.empty()) baseline = baseline_from_run(baseline_run);
    return f64 ? attack_impl<double>(l, checkpoint, root, mode, baseline)
               : attack_impl<float>(l, checkpoint, root, mode, baseline);
  } catch (const Refusal& e) {
    std::cerr << "refused: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
