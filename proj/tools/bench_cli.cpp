#include "dml/data.hpp"
#include "dml/trainer.hpp"
#include "dml/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

using json = nlohmann::ordered_json;
using namespace dml;

namespace {

constexpr int kExitTrainFailure = 1;
constexpr int kExitConfigError = 2;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- experiment configuration ----

struct DatasetSource {
  std::string csv_path;       // one of the two is set
  SyntheticSpec synthetic;
  bool is_synthetic = true;
};

struct ExperimentConfig {
  std::string loss = "proxy-softmax";
  std::string sampler;  // empty: the loss's default
  DatasetSource source;
  std::string encoder = "linear";
  int embedding_dim = 64;
  int batch_size = 120;
  int steps = 500;
  int eval_every = 100;
  std::uint64_t seed = 0;
  bool normalize_on = false, normalize_off = false;  // neither: per-loss default
  double scale = 3.0;
  std::string optimizer;  // empty: adam (rmsprop for struct-clust)
  double learning_rate = 1e-2;
  int ensemble_size = 4;
  std::string out;
};

std::vector<std::string> split_csv_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

SyntheticSpec parse_synthetic(const std::string& text) {
  SyntheticSpec spec;
  if (text.empty()) return spec;
  for (const std::string& kv : split_csv_list(text)) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--synthetic entry is not key=value: " + kv);
    std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    try {
      if (key == "classes")
        spec.n_classes = std::stoi(val);
      else if (key == "per_class")
        spec.samples_per_class = std::stoi(val);
      else if (key == "dim")
        spec.input_dim = std::stoi(val);
      else if (key == "spread")
        spec.center_spread = std::stod(val);
      else if (key == "sigma")
        spec.noise_sigma = std::stod(val);
      else if (key == "seed")
        spec.seed = std::stoull(val);
      else
        throw ConfigError("--synthetic: unknown key " + key);
    } catch (const std::invalid_argument&) {
      throw ConfigError("--synthetic: bad value for " + key + ": " + val);
    }
  }
  return spec;
}

const char* expected_sampler(LossKind kind) {
  switch (kind) {
    case LossKind::TripletSemihard: return "semi-hard";
    case LossKind::Lifted: return "all-pairs";
    case LossKind::NPairs:
    case LossKind::Angular: return "npairs";
    case LossKind::Margin: return "distance-weighted";
    case LossKind::Proto: return "episodic";
    default: return "class-balanced";
  }
}

// Translates a flat batch size into the composition shape the loss
// needs; throws ConfigError when no shape fits.
void apply_batch_size(MethodConfig& m, int batch, int train_classes) {
  if (batch < 2) throw ConfigError("--batch-size must be >= 2");
  switch (m.loss) {
    case LossKind::NPairs:
    case LossKind::Angular:
      if (batch % 2 || batch / 2 < 2)
        throw ConfigError("--batch-size for npairs-style losses must be an even number >= 4");
      if (batch / 2 > train_classes)
        throw ConfigError("--batch-size needs " + std::to_string(batch / 2) +
                          " classes, dataset has " + std::to_string(train_classes));
      m.batch_classes = batch / 2;
      m.per_class = 2;
      return;
    case LossKind::Proto: {
      if (batch % 4 || batch / 4 < 2)
        throw ConfigError("--batch-size for proto must be a multiple of 4, >= 8");
      m.episode.classes_per_episode = std::min(batch / 4, train_classes);
      m.episode.support_per_class = 2;
      m.episode.query_per_class = 2;
      m.episodes_per_batch = 1;
      if (m.episode.classes_per_episode * 4 != batch)
        throw ConfigError("--batch-size " + std::to_string(batch) + " does not fit " +
                          std::to_string(train_classes) + " classes for proto");
      return;
    }
    default: {
      int per_class = (batch % 4 == 0 && batch / 4 >= 2) ? 4 : 2;
      if (batch % per_class) throw ConfigError("--batch-size must be even");
      int classes = batch / per_class;
      if (classes > train_classes) {
        if (batch % train_classes)
          throw ConfigError("--batch-size " + std::to_string(batch) +
                            " is not divisible across " + std::to_string(train_classes) +
                            " classes");
        classes = train_classes;
        per_class = batch / train_classes;
      }
      if (classes < 2 || per_class < 2)
        throw ConfigError("--batch-size " + std::to_string(batch) +
                          " leaves fewer than 2 classes or 2 samples per class");
      m.batch_classes = classes;
      m.per_class = per_class;
      return;
    }
  }
}

struct BuiltExperiment {
  Dataset train, test;
  EncoderSpec encoder;
  MethodConfig method;
  OptimizerConfig optimizer;
  TrainSchedule schedule;
  std::uint64_t seed = 0;
  bool is_dreml = false;
};

BuiltExperiment build_experiment(const ExperimentConfig& cfg) {
  BuiltExperiment b;
  b.seed = cfg.seed;

  Dataset full;
  try {
    full = cfg.source.is_synthetic ? gen_synthetic(cfg.source.synthetic)
                                   : load_feature_csv(cfg.source.csv_path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
  std::tie(b.train, b.test) = split_disjoint_classes(full, {});

  LossKind kind = loss_from_name(cfg.loss);
  b.is_dreml = kind == LossKind::Dreml;

  b.method.loss = kind;
  b.method.proxy_scale = cfg.scale;
  b.method.ensemble_size = cfg.ensemble_size;
  if (b.is_dreml) {
    // members train with the base proxy loss on meta-classes
    int n_meta = b.method.ensemble_size > 1
                     ? std::max(2, std::min(cfg.embedding_dim, b.train.n_classes()))
                     : b.train.n_classes();
    MethodConfig probe = b.method;
    probe.loss = b.method.ensemble_base;
    apply_batch_size(probe, cfg.batch_size, n_meta);
    b.method.batch_classes = probe.batch_classes;
    b.method.per_class = probe.per_class;
  } else {
    apply_batch_size(b.method, cfg.batch_size, b.train.n_classes());
  }
  b.method.validate(b.train.n_classes());

  if (!cfg.sampler.empty() && cfg.sampler != expected_sampler(kind))
    throw ConfigError("--sampler " + cfg.sampler + " is incompatible with --loss " + cfg.loss +
                      " (expected " + expected_sampler(kind) + ")");

  if (cfg.encoder == "linear")
    b.encoder.kind = EncoderKind::Linear;
  else if (cfg.encoder == "mlp") {
    b.encoder.kind = EncoderKind::Mlp;
    b.encoder.hidden_dims = {2 * cfg.embedding_dim};
  } else if (cfg.encoder == "identity")
    b.encoder.kind = EncoderKind::Identity;
  else
    throw ConfigError("--encoder must be identity, linear, or mlp");
  b.encoder.input_dim = static_cast<int>(b.train.dim());
  b.encoder.output_dim =
      b.encoder.kind == EncoderKind::Identity ? b.encoder.input_dim : cfg.embedding_dim;
  b.encoder.seed = cfg.seed;
  if (cfg.normalize_on && cfg.normalize_off)
    throw ConfigError("--normalize and --no-normalize are mutually exclusive");
  LossKind norm_kind = b.is_dreml ? b.method.ensemble_base : kind;
  b.encoder.normalize_output = cfg.normalize_on || (!cfg.normalize_off && default_normalize_eval(norm_kind));
  b.encoder.validate();

  std::string opt = cfg.optimizer;
  if (opt.empty()) opt = kind == LossKind::StructClust ? "rmsprop" : "adam";
  if (opt == "adam")
    b.optimizer.kind = OptimizerKind::Adam;
  else if (opt == "rmsprop")
    b.optimizer.kind = OptimizerKind::Rmsprop;
  else
    throw ConfigError("--optimizer must be adam or rmsprop");
  b.optimizer.learning_rate = cfg.learning_rate;
  b.optimizer.validate();

  if (cfg.steps < 0) throw ConfigError("--steps must be >= 0");
  if (cfg.eval_every < 1) throw ConfigError("--eval-every must be >= 1");
  b.schedule.steps = cfg.steps;
  b.schedule.eval_every = cfg.eval_every;
  b.schedule.recall_ks.clear();
  for (int k : {1, 2, 4, 8, 16})
    if (k <= b.test.size() - 1) b.schedule.recall_ks.push_back(k);
  if (b.schedule.recall_ks.empty()) throw ConfigError("test split too small for Recall@1");
  return b;
}

json config_echo(const ExperimentConfig& cfg, const BuiltExperiment& b) {
  json c;
  c["loss"] = cfg.loss;
  c["sampler"] = cfg.sampler.empty() ? expected_sampler(loss_from_name(cfg.loss)) : cfg.sampler;
  if (b.is_dreml) {
    c["ensemble_size"] = b.method.ensemble_size;
    c["ensemble_base"] = loss_name(b.method.ensemble_base);
  }
  if (cfg.source.is_synthetic) {
    const SyntheticSpec& s = cfg.source.synthetic;
    c["dataset"] = {{"synthetic",
                     {{"classes", s.n_classes},
                      {"per_class", s.samples_per_class},
                      {"dim", s.input_dim},
                      {"spread", s.center_spread},
                      {"sigma", s.noise_sigma},
                      {"seed", s.seed}}}};
  } else {
    c["dataset"] = {{"csv", cfg.source.csv_path}};
  }
  c["split"] = "first-half-classes";
  c["encoder"] = cfg.encoder;
  c["embedding_dim"] = b.encoder.output_dim;
  c["normalize"] = b.encoder.normalize_output;
  c["batch_size"] = cfg.batch_size;
  c["batch_classes"] = b.method.batch_classes;
  c["per_class"] = b.method.per_class;
  c["scale"] = cfg.scale;
  c["optimizer"] = {{"kind", b.optimizer.kind == OptimizerKind::Adam ? "adam" : "rmsprop"},
                    {"learning_rate", b.optimizer.learning_rate}};
  c["steps"] = cfg.steps;
  c["eval_every"] = cfg.eval_every;
  c["seed"] = cfg.seed;
  return c;
}

json history_json(const RunHistory& history) {
  json h = json::array();
  for (const auto& entry : history.entries) {
    json rec;
    rec["step"] = entry.step;
    json ra;
    for (const auto& [k, v] : entry.report.recall_at) ra[std::to_string(k)] = v;
    rec["recall_at"] = ra;
    rec["nmi"] = entry.report.nmi;
    h.push_back(rec);
  }
  return h;
}

void write_atomic(const std::string& path, const std::string& contents) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f << contents;
  }
  std::filesystem::rename(tmp, path);
}

void print_table(const RunHistory& history, const std::vector<int>& ks) {
  std::printf("%8s", "step");
  for (int k : ks) std::printf("  R@%-4d", k);
  std::printf("  %-8s\n", "NMI");
  for (const auto& entry : history.entries) {
    std::printf("%8ld", entry.step);
    for (int k : ks) std::printf("  %.4f", entry.report.recall_at.at(k));
    std::printf("  %.4f\n", entry.report.nmi);
  }
}

// Runs the schedule in eval-sized chunks so a mid-run failure still
// leaves the history collected so far.
RunHistory run_history(const BuiltExperiment& built, bool* diverged) {
  *diverged = false;
  RunHistory history;
  if (built.is_dreml) {
    EncoderSpec member = built.encoder;
    member.normalize_output = default_normalize_eval(built.method.ensemble_base);
    DremlModel model = dreml_train(built.train, built.test, member, built.method,
                                   built.optimizer, built.schedule, built.seed);
    return model.history;
  }
  TrainState state = init_state(built.encoder, built.method, built.optimizer,
                                built.train.n_classes(), built.seed);
  int done = 0;
  try {
    while (true) {
      int chunk = std::min(built.schedule.eval_every, built.schedule.steps - done);
      TrainSchedule part;
      part.steps = chunk;
      part.eval_every = std::max(chunk, 1);
      part.recall_ks = built.schedule.recall_ks;
      RunHistory piece = train_run(state, built.train, built.test, part);
      for (const auto& entry : piece.entries)
        if (history.entries.empty() || entry.step > history.entries.back().step)
          history.entries.push_back(entry);
      done += chunk;
      if (done >= built.schedule.steps) break;
    }
  } catch (const std::exception& e) {
    std::cerr << "training failed at step " << done << ": " << e.what() << "\n";
    *diverged = true;
  }
  return history;
}

int cmd_run(const ExperimentConfig& cfg) {
  BuiltExperiment built = build_experiment(cfg);
  auto t0 = std::chrono::steady_clock::now();
  bool diverged = false;
  RunHistory history = run_history(built, &diverged);
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json report;
  report["schema_version"] = 1;
  report["config"] = config_echo(cfg, built);
  report["history"] = history_json(history);
  report["seed"] = cfg.seed;
  if (!cfg.out.empty()) write_atomic(cfg.out, report.dump(2) + "\n");

  print_table(history, built.schedule.recall_ks);
  std::printf("wall time: %.2f s\n", wall);
  return diverged ? kExitTrainFailure : 0;
}

// ---- sweep ----

struct SweepCell {
  std::string axis_value;
  std::string loss;
  ExperimentConfig cfg;
};

std::string sweep_row(const SweepCell& cell) {
  std::ostringstream row;
  row << cell.axis_value << "," << cell.loss << ",";
  try {
    bool diverged = false;
    BuiltExperiment built = build_experiment(cell.cfg);
    RunHistory history = run_history(built, &diverged);
    if (diverged || history.entries.empty()) throw std::runtime_error("training diverged");
    const EvalReport& rep = history.entries.back().report;
    char buf[32];
    for (int k : {1, 2, 4, 8, 16}) {
      auto it = rep.recall_at.find(k);
      std::snprintf(buf, sizeof buf, "%.6f", it == rep.recall_at.end() ? 0.0 : it->second);
      row << buf << ",";
    }
    std::snprintf(buf, sizeof buf, "%.6f", rep.nmi);
    row << buf;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg)
      if (ch == ',' || ch == '\n') ch = ';';
    row << "error: " << msg << ",,,,,";
  }
  return row.str();
}

int cmd_sweep(const ExperimentConfig& base, const std::string& axis,
              const std::vector<std::string>& values, bool reseed, int workers,
              const std::string& out) {
  if (values.empty()) throw ConfigError("--values must be non-empty");
  if (workers < 1) throw ConfigError("--workers must be >= 1");

  std::vector<std::string> losses = split_csv_list(base.loss);
  std::vector<SweepCell> cells;
  for (const std::string& value : values) {
    std::vector<std::string> row_losses = axis == "loss" ? std::vector<std::string>{value} : losses;
    for (const std::string& loss : row_losses) {
      SweepCell cell;
      cell.axis_value = value;
      cell.loss = loss;
      cell.cfg = base;
      cell.cfg.loss = loss;
      try {
        if (axis == "embedding-size")
          cell.cfg.embedding_dim = std::stoi(value);
        else if (axis == "batch-size")
          cell.cfg.batch_size = std::stoi(value);
        else if (axis != "loss")
          throw ConfigError("--axis must be embedding-size, batch-size, or loss");
      } catch (const std::invalid_argument&) {
        throw ConfigError("--values entry is not a number: " + value);
      }
      if (reseed) cell.cfg.seed = base.seed + cells.size();
      cells.push_back(std::move(cell));
    }
  }

  std::vector<std::string> rows(cells.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1))
      rows[i] = sweep_row(cells[i]);
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ostringstream csv;
  csv << "axis_value,loss,recall_at_1,recall_at_2,recall_at_4,recall_at_8,recall_at_16,nmi\n";
  for (const std::string& row : rows) csv << row << "\n";
  if (out.empty())
    std::cout << csv.str();
  else
    write_atomic(out, csv.str());
  return 0;
}

int cmd_verify(const std::string& only) {
  auto results = run_verification(only);
  bool all = true;
  for (const auto& r : results) {
    std::printf("[%s] %-22s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    all = all && r.pass;
  }
  if (results.empty()) {
    std::printf("no checks match --only %s\n", only.c_str());
    return kExitConfigError;
  }
  std::printf("%s\n", all ? "all checks passed" : "verification FAILED");
  return all ? 0 : kExitTrainFailure;
}

void add_experiment_flags(CLI::App* cmd, ExperimentConfig& cfg, std::string& synthetic_text) {
  cmd->add_option("--loss", cfg.loss, "loss name (run: one; sweep: comma list)");
  cmd->add_option("--sampler", cfg.sampler, "sampler name; must match the loss");
  cmd->add_option("--dataset", cfg.source.csv_path, "feature CSV path (.csv or .csv.gz)");
  cmd->add_option("--synthetic", synthetic_text,
                  "synthetic spec: classes=,per_class=,dim=,spread=,sigma=,seed=");
  cmd->add_option("--encoder", cfg.encoder, "identity | linear | mlp");
  cmd->add_option("--embedding-dim", cfg.embedding_dim, "embedding dimension");
  cmd->add_option("--batch-size", cfg.batch_size, "flat batch size");
  cmd->add_option("--steps", cfg.steps, "optimizer steps");
  cmd->add_option("--eval-every", cfg.eval_every, "evaluation cadence in steps");
  cmd->add_option("--seed", cfg.seed, "run seed");
  cmd->add_flag("--normalize", cfg.normalize_on, "force last-layer normalization on");
  cmd->add_flag("--no-normalize", cfg.normalize_off, "force last-layer normalization off");
  cmd->add_option("--scale", cfg.scale, "proxy scale factor");
  cmd->add_option("--optimizer", cfg.optimizer, "adam | rmsprop");
  cmd->add_option("--lr", cfg.learning_rate, "learning rate");
  cmd->add_option("--ensemble-size", cfg.ensemble_size, "dreml ensemble size");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep metric learning benchmark harness"};
  app.require_subcommand(1);

  ExperimentConfig run_cfg;
  std::string run_synthetic;
  auto* run = app.add_subcommand("run", "train one configuration and write a JSON report");
  add_experiment_flags(run, run_cfg, run_synthetic);
  int run_workers = 1;
  run->add_option("--out", run_cfg.out, "JSON report path");
  run->add_option("--workers", run_workers, "accepted for interface symmetry; run is single-process");

  ExperimentConfig sweep_cfg;
  std::string sweep_synthetic, axis = "batch-size", values_text, sweep_out;
  bool reseed = false;
  int workers = 1;
  auto* sweep = app.add_subcommand("sweep", "grid over one axis, emit long-format CSV");
  add_experiment_flags(sweep, sweep_cfg, sweep_synthetic);
  sweep->add_option("--axis", axis, "embedding-size | batch-size | loss");
  sweep->add_option("--values", values_text, "comma-separated axis values")->required();
  sweep->add_flag("--reseed", reseed, "distinct seed per cell (default: shared seed)");
  sweep->add_option("--workers", workers, "parallel sweep threads");
  sweep->add_option("--out", sweep_out, "CSV output path (default stdout)");

  std::string only;
  auto* verify = app.add_subcommand("verify", "run the oracle and gradient suite");
  verify->add_option("--only", only, "substring filter over check names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp") return app.exit(e);
    app.exit(e);
    return kExitConfigError;
  }

  try {
    if (run->parsed()) {
      run_cfg.source.is_synthetic = run_cfg.source.csv_path.empty();
      run_cfg.source.synthetic = parse_synthetic(run_synthetic);
      return cmd_run(run_cfg);
    }
    if (sweep->parsed()) {
      sweep_cfg.source.is_synthetic = sweep_cfg.source.csv_path.empty();
      sweep_cfg.source.synthetic = parse_synthetic(sweep_synthetic);
      return cmd_sweep(sweep_cfg, axis, split_csv_list(values_text), reseed, workers, sweep_out);
    }
    return cmd_verify(only);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitTrainFailure;
  }
}
