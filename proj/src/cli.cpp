// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "triformer/checkpoint.hpp"
#include "triformer/config.hpp"
#include "triformer/data.hpp"
#include "triformer/gradcheck.hpp"
#include "triformer/train.hpp"

#ifndef TRIFORMER_VERSION
#define TRIFORMER_VERSION "dev"
#endif

namespace triformer::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw std::runtime_error("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw std::runtime_error("output directory " + dir.string() + " is in use by another process (" +
                             path_.string() + ")");
  }
}

DirectoryLock::~DirectoryLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

namespace {

struct Globals {
  std::string seed;
  std::size_t threads = 0;
  std::string precision;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void apply_globals(RunConfig& config, const Globals& g) {
  if (!g.seed.empty()) config.train.seed = parse_u64("--seed", g.seed);
  if (g.threads) config.train.threads = g.threads;
  if (!g.precision.empty()) {
    if (g.precision != "f32" && g.precision != "f64")
      throw ConfigError("--precision", "expected f32 or f64, got '" + g.precision + "'");
    config.precision = g.precision;
  }
}

RunConfig resolve_config(const std::string& path, const Globals& g, RunConfig base = default_run_config()) {
  RunConfig config = base;
  if (!path.empty()) {
    if (!fs::exists(path)) throw ConfigError("--config", "config file not found: " + path);
    config = parse_run_config(KeyValueFile::load(path), base);
  }
  apply_globals(config, g);
  config.model.validate();
  config.train.validate();
  return config;
}

void require_dataset(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--data", "a dataset directory is required");
  if (!fs::is_directory(dir)) throw ConfigError("--data", "dataset directory not found: " + dir);
  if (!fs::exists(fs::path(dir) / "meta.csv"))
    throw ConfigError("--data", "dataset directory has no meta.csv: " + dir);
}

json config_json(const RunConfig& config) {
  json j = json::object();
  std::istringstream in(to_config_text(config));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

json manifest(const std::string& command, const RunConfig& config, const std::string& data_dir,
              const std::string& started) {
  json m;
  m["tool"] = "triformer";
  m["version"] = TRIFORMER_VERSION;
  m["command"] = command;
  m["seed"] = config.train.seed;
  m["started_at"] = started;
  if (!data_dir.empty()) {
    m["dataset"]["path"] = fs::absolute(data_dir).lexically_normal().string();
    m["dataset"]["hash"] = hex64(dataset_hash(data_dir));
  }
  m["config"] = config_json(config);
  return m;
}

void write_run_info(const fs::path& dir, std::size_t repeat, std::uint64_t seed) {
  json j;
  j["repeat"] = repeat;
  j["seed"] = seed;
  write_text(dir / "run.json", j.dump(2) + "\n");
}

// ---- synth ----

int cmd_synth(const std::string& spec_path, const std::string& out_dir, const Globals& g, std::ostream& out) {
  if (!fs::exists(spec_path)) throw ConfigError("--spec", "spec file not found: " + spec_path);
  SynthSpec spec = load_synth_spec(spec_path);
  if (!g.seed.empty()) spec.seed = parse_u64("--seed", g.seed);
  DirectoryLock lock(out_dir);
  const auto subjects = generate_synthetic(spec);
  write_dataset(out_dir, subjects);
  write_text(fs::path(out_dir) / "synth.cfg", to_spec_text(spec));
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (const auto& s : subjects) ++counts[s.cohort][to_string(s.label)];
  for (const auto& cohort : spec.cohorts) {
    out << "cohort " << cohort << ":";
    for (const char* label : {"sMCI", "pMCI", "AD", "CN"}) out << " " << label << "=" << counts[cohort][label];
    out << "\n";
  }
  out << "total " << subjects.size() << " subjects, dataset hash " << hex64(dataset_hash(out_dir)) << "\n";
  return kExitOk;
}

// ---- train ----

template <typename T>
EvalResult train_dispatch(const std::vector<Subject>& subjects, const RunConfig& config, const fs::path& out) {
  return run_repeats<T>(subjects, config, out);
}

int cmd_train(const std::string& data_dir, const std::string& config_path, const std::string& out_dir,
              const Globals& g, std::ostream& out) {
  const RunConfig config = resolve_config(config_path, g);
  require_dataset(data_dir);
  DirectoryLock lock(out_dir);
  const fs::path run(out_dir);
  const std::string started = utc_now();
  json m = manifest("train", config, data_dir, started);
  write_text(run / "config.cfg", to_config_text(config));
  write_text(run / "manifest.json", m.dump(2) + "\n");

  const auto subjects = read_dataset(data_dir);
  const EvalResult result = config.precision == "f64" ? train_dispatch<double>(subjects, config, run)
                                                      : train_dispatch<float>(subjects, config, run);
  for (std::size_t r = 0; r < result.repeats.size(); ++r)
    write_run_info(run / ("repeat" + std::to_string(r)), r, result.repeats[r].seed);
  // The first repeat doubles as the run's top-level artifacts.
  for (const char* name : {"history.csv", "best.ckpt", "run.json"})
    if (fs::exists(run / "repeat0" / name))
      fs::copy_file(run / "repeat0" / name, run / name, fs::copy_options::overwrite_existing);
  write_text(run / "result.json", result_json(result, config));
  m["finished_at"] = utc_now();
  write_text(run / "manifest.json", m.dump(2) + "\n");

  for (std::size_t r = 0; r < result.repeats.size(); ++r) {
    const auto& rep = result.repeats[r];
    out << "repeat " << r << ": val AUC " << rep.auc << ", ACC " << rep.acc << " (best epoch " << rep.best_epoch
        << ")";
    if (result.has_test) out << "; test AUC " << rep.test_auc << ", ACC " << rep.test_acc;
    out << "\n";
  }
  out << "mean: val AUC " << result.mean_auc << ", ACC " << result.mean_acc;
  if (result.has_test) out << "; test AUC " << result.mean_test_auc << ", ACC " << result.mean_test_acc;
  out << "\n";
  return kExitOk;
}

// ---- eval ----

template <typename T>
Metrics eval_dispatch(const RunConfig& config, const fs::path& ckpt, const ExperimentData& data, bool test) {
  TriFormerModel<T> model(config.model, config.train.seed);
  load_checkpoint(ckpt, model.parameters());
  return evaluate(model, test ? data.test : data.validation, data.normalizer, config.train.acc_threshold,
                  config.train.threads);
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, std::string config_path, const std::string& split,
             const Globals& g, std::ostream& out) {
  if (!fs::exists(ckpt)) throw ConfigError("--ckpt", "checkpoint not found: " + ckpt);
  const fs::path dir = fs::absolute(ckpt).parent_path();
  if (config_path.empty()) {
    for (const fs::path& p : {dir, dir.parent_path(), dir.parent_path().parent_path()}) {
      if (fs::exists(p / "config.cfg")) {
        config_path = (p / "config.cfg").string();
        break;
      }
    }
    if (config_path.empty()) throw ConfigError("--config", "no config.cfg next to " + ckpt + "; pass --config");
  }
  if (split != "val" && split != "test") throw ConfigError("--split", "expected val or test, got '" + split + "'");
  const RunConfig config = resolve_config(config_path, g);
  require_dataset(data_dir);

  std::size_t repeat = 0;
  if (fs::exists(dir / "run.json")) {
    std::ifstream in(dir / "run.json");
    repeat = json::parse(in).value("repeat", std::size_t{0});
  }
  const std::uint64_t seed = repeat_seed(config.train.seed, repeat);
  const auto subjects = read_dataset(data_dir);
  const auto data = prepare_experiment(subjects, config.train, seed);
  if (split == "test" && data.test.subjects.empty())
    throw ConfigError("--split", "config has no test cohort (train.test_cohort)");
  RunConfig seeded = config;
  seeded.train.seed = seed;
  const Metrics m = config.precision == "f64" ? eval_dispatch<double>(seeded, ckpt, data, split == "test")
                                              : eval_dispatch<float>(seeded, ckpt, data, split == "test");
  json j;
  j["checkpoint"] = ckpt;
  j["split"] = split;
  j["repeat"] = repeat;
  j["subjects"] = m.scores.size();
  j["auc"] = m.auc;
  j["acc"] = m.acc;
  out << j.dump(2) << "\n";
  return kExitOk;
}

// ---- ablate ----

template <typename T>
std::vector<AblationRow> ablate_dispatch(const std::vector<Subject>& subjects, const RunConfig& config,
                                         const std::vector<Variant>& variants, const fs::path& out) {
  return run_ablation<T>(subjects, config, variants, out);
}

int cmd_ablate(const std::string& data_dir, const std::string& config_path, const std::string& out_dir,
               const std::string& variant_list, const Globals& g, std::ostream& out) {
  const RunConfig config = resolve_config(config_path, g);
  std::vector<Variant> variants;
  if (variant_list.empty() || variant_list == "all") {
    variants = all_variants();
  } else {
    std::istringstream in(variant_list);
    std::string name;
    while (std::getline(in, name, ',')) {
      try {
        variants.push_back(parse_variant(name));
      } catch (const ConfigError& e) {
        throw ConfigError("--variants", e.what());
      }
    }
  }
  require_dataset(data_dir);
  DirectoryLock lock(out_dir);
  const fs::path run(out_dir);
  json m = manifest("ablate", config, data_dir, utc_now());
  for (Variant v : variants) m["variants"].push_back(to_string(v));
  write_text(run / "config.cfg", to_config_text(config));
  write_text(run / "manifest.json", m.dump(2) + "\n");

  const auto subjects = read_dataset(data_dir);
  const auto rows = config.precision == "f64" ? ablate_dispatch<double>(subjects, config, variants, run)
                                              : ablate_dispatch<float>(subjects, config, variants, run);
  for (const auto& row : rows) {
    RunConfig vc = config;
    vc.model.variant = row.variant;
    const fs::path vdir = run / to_string(row.variant);
    write_text(vdir / "config.cfg", to_config_text(vc));
    write_text(vdir / "result.json", result_json(row.result, vc));
    for (std::size_t r = 0; r < row.result.repeats.size(); ++r)
      write_run_info(vdir / ("repeat" + std::to_string(r)), r, row.result.repeats[r].seed);
  }
  m["finished_at"] = utc_now();
  write_text(run / "manifest.json", m.dump(2) + "\n");
  out << ablation_csv(rows);
  return kExitOk;
}

// ---- gradcheck ----

int cmd_gradcheck(const std::string& config_path, std::size_t max_elements, double tolerance, const Globals& g,
                  std::ostream& out) {
  RunConfig base = default_run_config();
  base.model = ModelConfig::tiny();
  const RunConfig config = resolve_config(config_path, g, base);
  GradcheckOptions options;
  options.max_elements = max_elements;
  if (!(tolerance > 0)) throw ConfigError("--tolerance", "must be positive");
  options.tolerance = tolerance;
  const auto report = gradcheck_model(config.model, config.train.seed, options);
  out << "checked " << report.checked << " elements of " << report.per_parameter.size() << " parameters ("
      << to_string(config.model.variant) << ", 64-bit)\n";
  out << "worst: " << report.worst.name << "[" << report.worst.index << "] analytic " << report.worst.analytic
      << " numeric " << report.worst.numeric << " rel err " << report.worst.rel_error << "\n";
  out << "max rel err " << report.max_rel_error << (report.passed ? " < " : " >= ") << options.tolerance << "\n";
  return report.passed ? kExitOk : kExitGradcheck;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"TriFormer: multi-modal transformer training and evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Override the run seed");
  app.add_option("--threads", g.threads, "Evaluation worker threads");
  app.add_option("--precision", g.precision, "f32 or f64");

  std::string spec, data, config, out_dir, ckpt, variants, split = "val";
  std::size_t max_elements = 0;
  double tolerance = GradcheckOptions{}.tolerance;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--spec", spec, "Synthetic spec file")->required();
  synth->add_option("--out", out_dir, "Output dataset directory")->required();

  auto* train = app.add_subcommand("train", "Train with repeats and write run artifacts");
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--config", config, "Run config file");
  train->add_option("--out", out_dir, "Run directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its validation or test split");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--config", config, "Run config (default: config.cfg beside the checkpoint)");
  eval->add_option("--split", split, "val or test");

  auto* ablate = app.add_subcommand("ablate", "Train every ablation variant on shared splits");
  ablate->add_option("--data", data, "Dataset directory")->required();
  ablate->add_option("--config", config, "Run config file");
  ablate->add_option("--out", out_dir, "Output directory")->required();
  ablate->add_option("--variants", variants, "Comma-separated variant names (default: all)");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of all model gradients");
  gradcheck->add_option("--config", config, "Run config overlaid on the tiny model");
  gradcheck->add_option("--max-elements", max_elements, "Elements checked per parameter (0: all)");
  gradcheck->add_option("--tolerance", tolerance, "Largest accepted relative error");

  for (auto* sub : {synth, train, eval, ablate, gradcheck}) sub->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(spec, out_dir, g, out);
    if (*train) return cmd_train(data, config, out_dir, g, out);
    if (*eval) return cmd_eval(ckpt, data, config, split, g, out);
    if (*ablate) return cmd_ablate(data, config, out_dir, variants, g, out);
    if (*gradcheck) return cmd_gradcheck(config, max_elements, tolerance, g, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace triformer::cli
