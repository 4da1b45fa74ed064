#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "vralign/benchmark.hpp"

#ifndef VRALIGN_GIT_DESCRIBE
#define VRALIGN_GIT_DESCRIBE "unknown"
#endif

namespace vralign::cli {

// ---------------------------------------------------------------------------
// Run manifests
//
// Every command drops a JSON manifest next to its outputs: the command name,
// the effective configuration after flag/file/default resolution, the named
// RNG streams the master seed expands into, and an FNV-1a hash per artifact.
// Reruns with identical inputs must reproduce identical artifact hashes; the
// manifest itself is not an artifact (it carries wall time).
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::vector<std::string> rng_streams;
  std::map<std::string, std::string> effective_config;
  std::vector<std::string> artifact_paths;
};

namespace detail {

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

struct WallClock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

}  // namespace detail

inline void write_manifest(const std::string& path, const RunManifest& m,
                           double wall_seconds) {
  nlohmann::json j;
  j["format"] = "vralign-manifest/1";
  j["command"] = m.command;
  j["config_path"] = m.config_path;
  j["seed"] = m.seed;
  j["output_dir"] = m.output_dir;
  j["git_describe"] = VRALIGN_GIT_DESCRIBE;
  j["wall_time_s"] = wall_seconds;
  j["rng_streams"] = m.rng_streams;
  j["effective_config"] = m.effective_config;
  nlohmann::json arts = nlohmann::json::object();
  for (const auto& p : m.artifact_paths)
    arts[std::filesystem::path(p).filename().string()] =
        detail::hash_hex(io::file_hash(p));
  j["artifacts"] = arts;
  io::write_text_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared argument helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::array<std::size_t, 3> parse_dims(const std::string& s) {
  std::array<std::size_t, 3> d{};
  std::size_t start = 0;
  for (int i = 0; i < 3; ++i) {
    const std::size_t comma = s.find(',', start);
    const std::string part =
        s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (part.empty()) throw ConfigError("dims must be D,H,W (got '" + s + "')");
    char* end = nullptr;
    const unsigned long v = std::strtoul(part.c_str(), &end, 10);
    if (end == part.c_str() || *end != '\0' || v == 0)
      throw ConfigError("dims must be D,H,W (got '" + s + "')");
    d[static_cast<std::size_t>(i)] = v;
    if (i < 2) {
      if (comma == std::string::npos)
        throw ConfigError("dims must be D,H,W (got '" + s + "')");
      start = comma + 1;
    } else if (comma != std::string::npos) {
      throw ConfigError("dims must be D,H,W (got '" + s + "')");
    }
  }
  return d;
}

inline std::string parent_dir_of(const std::string& file) {
  const auto p = std::filesystem::path(file).parent_path();
  return p.empty() ? std::string(".") : p.string();
}

/// Model architecture used by every CLI run: the desk-scale configuration,
/// with input dims and vocabulary taken from the dataset file so checkpoints
/// and datasets stay mutually compatible.
inline ModelConfig model_for(const DatasetSpec& spec) {
  ModelConfig m = benchmark_model();
  m.vol.input_dims = spec.dims;
  m.txt.vocab_size = spec.vocab_size;
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenArgs {
  std::size_t n = 200;
  std::string dims = "16,16,16";
  std::size_t vocab = 64;
  double balance = 0.33;
  std::uint64_t seed = 7;
  std::string shift = "off";
  std::string out;
  std::string config_path;
};

inline int cmd_gen(const GenArgs& a) {
  detail::WallClock clock;
  DatasetSpec spec;
  spec.n_patients = a.n;
  spec.dims = detail::parse_dims(a.dims);
  spec.vocab_size = a.vocab;
  spec.class_balance = a.balance;
  spec.seed = a.seed;
  spec.shift = a.shift == "on";
  spec.validate();

  const auto records = generate_dataset(spec);
  save_dataset(a.out, spec, records);

  RunManifest m;
  m.command = "gen";
  m.config_path = a.config_path;
  m.seed = a.seed;
  m.output_dir = detail::parent_dir_of(a.out);
  m.rng_streams = {"data", "data-labels"};
  m.effective_config = {{"n", std::to_string(a.n)},
                        {"dims", a.dims},
                        {"vocab", std::to_string(a.vocab)},
                        {"balance", format_double(a.balance)},
                        {"seed", std::to_string(a.seed)},
                        {"shift", a.shift},
                        {"out", a.out}};
  m.artifact_paths = {a.out};
  write_manifest(a.out + ".manifest.json", m, clock.seconds());
  std::printf("gen: wrote %zu records to %s\n", records.size(), a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

struct PretrainArgs {
  std::string data;
  std::string out_dir = "pretrain-run";
  std::string mode = "full";
  std::size_t epochs = 340;
  std::size_t batch = 16;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double margin = 0.25;
  double location_coef = 0.5;
  std::string neg = "semihard:2";
  std::uint64_t seed = 0;
  std::string config_path;
};

inline int cmd_pretrain(const PretrainArgs& a) {
  detail::WallClock clock;
  const Dataset ds = load_dataset(a.data);
  const ModelConfig model = detail::model_for(ds.spec);

  TrainRunConfig run;
  run.epochs = a.epochs;
  run.batch_size = a.batch;
  run.seed = a.seed;
  run.mode = parse_ablation_mode(a.mode);
  run.strategy = NegativeSamplingStrategy::parse(a.neg);
  run.triplet.margin = a.margin;
  run.triplet.location_coef = a.location_coef;
  run.optimizer.lr = a.lr;
  run.optimizer.weight_decay = a.weight_decay;
  run.validate();

  ParamStore store;
  Rng init_rng = derive_stream(a.seed, "init");
  init_model_params(store, model, init_rng);
  const auto trajectory = pretrain(store, model, ds.records, run);

  std::filesystem::create_directories(a.out_dir);
  const std::string ckpt = (std::filesystem::path(a.out_dir) / "checkpoint.ckpt").string();
  const std::string traj = (std::filesystem::path(a.out_dir) / "trajectory.csv").string();
  save_checkpoint(ckpt, store);
  write_trajectory_csv(traj, trajectory);

  RunManifest m;
  m.command = "pretrain";
  m.config_path = a.config_path;
  m.seed = a.seed;
  m.output_dir = a.out_dir;
  m.rng_streams = {"init", "epoch-shuffle", "dropout", "negatives"};
  m.effective_config = {{"data", a.data},
                        {"out-dir", a.out_dir},
                        {"mode", a.mode},
                        {"epochs", std::to_string(a.epochs)},
                        {"batch", std::to_string(a.batch)},
                        {"lr", format_double(a.lr)},
                        {"weight-decay", format_double(a.weight_decay)},
                        {"margin", format_double(a.margin)},
                        {"location-coef", format_double(a.location_coef)},
                        {"neg", a.neg},
                        {"seed", std::to_string(a.seed)}};
  m.artifact_paths = {ckpt, traj};
  write_manifest((std::filesystem::path(a.out_dir) / "manifest.json").string(), m,
                 clock.seconds());
  std::printf("pretrain: %zu epochs, final objective %s, checkpoint %s\n",
              trajectory.size(), format_double(trajectory.back().total).c_str(),
              ckpt.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

struct FinetuneArgs {
  std::string data;
  std::string out_dir = "finetune-run";
  std::string init = "random";
  std::size_t folds = 5;
  std::size_t epochs = 20;
  std::size_t batch = 16;
  double lr = 3e-3;
  double weight_decay = 0.01;
  std::size_t freeze = 2;
  std::uint64_t seed = 0;
  std::string external;
  std::string name;
  std::string config_path;
};

namespace detail {

inline std::string parse_init_checkpoint(const std::string& init) {
  if (init == "random") return "";
  const std::string prefix = "pretrained:";
  if (init.rfind(prefix, 0) == 0 && init.size() > prefix.size())
    return init.substr(prefix.size());
  throw ConfigError("--init must be 'random' or 'pretrained:PATH' (got '" + init + "')");
}

}  // namespace detail

inline int cmd_finetune(const FinetuneArgs& a) {
  detail::WallClock clock;
  const Dataset ds = load_dataset(a.data);
  const ModelConfig model = detail::model_for(ds.spec);
  const std::string init_ckpt = detail::parse_init_checkpoint(a.init);
  const std::string variant =
      !a.name.empty() ? a.name : (init_ckpt.empty() ? "random" : "pretrained");

  Dataset ext;
  const bool has_external = !a.external.empty();
  if (has_external) {
    ext = load_dataset(a.external);
    if (ext.spec.dims != ds.spec.dims)
      throw ConfigError("external dataset dims do not match the training dataset");
  }

  FinetuneConfig fcfg;
  fcfg.epochs = a.epochs;
  fcfg.batch_size = a.batch;
  fcfg.seed = a.seed;
  fcfg.freeze_stages = a.freeze;
  fcfg.optimizer.lr = a.lr;
  fcfg.optimizer.weight_decay = a.weight_decay;
  fcfg.init_checkpoint = init_ckpt;
  fcfg.validate();

  const auto folds = make_folds(ds.records, a.folds, a.seed);
  std::filesystem::create_directories(a.out_dir);

  struct FoldRow {
    FoldMetrics m;
    double external_auc = 0.0, dice3d = 0.0, dice2d = 0.0;
  };
  std::vector<FoldRow> rows;
  std::vector<std::string> artifact_paths;

  for (std::size_t f = 0; f < folds.size(); ++f) {
    ParamStore trained;
    const FoldOutcome out = finetune_fold(ds.records, folds[f], model.vol, fcfg, f, &trained);
    FoldRow row;
    BinaryPredictions preds;
    preds.scores = out.scores;
    preds.labels = out.labels;
    row.m = compute_fold_metrics(preds);
    if (has_external) {
      row.external_auc = auc(score_patients(trained, model.vol, ext.records));
      const auto [d3, d2] = mean_attention_dice(trained, model.vol, ext.records);
      row.dice3d = d3;
      row.dice2d = d2;
    }
    rows.push_back(row);
    const std::string ckpt =
        (std::filesystem::path(a.out_dir) / ("fold-" + std::to_string(f) + ".ckpt")).string();
    save_checkpoint(ckpt, trained);
    artifact_paths.push_back(ckpt);
  }

  // Per-fold metrics table, the unit other commands compare.
  std::ostringstream csv;
  csv << "# vralign-foldmetrics v1\n";
  csv << "# variant=" << variant << "\n";
  csv << "fold,auc,precision,recall,f1";
  if (has_external) csv << ",external_auc,dice3d,dice2d";
  csv << "\n";
  for (std::size_t f = 0; f < rows.size(); ++f) {
    const auto& r = rows[f];
    csv << f << ',' << format_double(r.m.auc) << ',' << format_double(r.m.precision)
        << ',' << format_double(r.m.recall) << ',' << format_double(r.m.f1);
    if (has_external)
      csv << ',' << format_double(r.external_auc) << ',' << format_double(r.dice3d)
          << ',' << format_double(r.dice2d);
    csv << '\n';
  }
  const std::string metrics_path =
      (std::filesystem::path(a.out_dir) / "fold-metrics.csv").string();
  io::write_text_file(metrics_path, csv.str());
  artifact_paths.push_back(metrics_path);

  // Aggregate summary over folds.
  std::vector<std::pair<std::string, std::vector<double>>> columns = {
      {"auc", {}}, {"precision", {}}, {"recall", {}}, {"f1", {}}};
  if (has_external) {
    columns.push_back({"external_auc", {}});
    columns.push_back({"dice3d", {}});
    columns.push_back({"dice2d", {}});
  }
  for (const auto& r : rows) {
    columns[0].second.push_back(r.m.auc);
    columns[1].second.push_back(r.m.precision);
    columns[2].second.push_back(r.m.recall);
    columns[3].second.push_back(r.m.f1);
    if (has_external) {
      columns[4].second.push_back(r.external_auc);
      columns[5].second.push_back(r.dice3d);
      columns[6].second.push_back(r.dice2d);
    }
  }
  std::ostringstream sum;
  sum << "# vralign-foldsummary v1\n";
  sum << "# variant=" << variant << "\n";
  sum << "metric,mean,std\n";
  for (const auto& [name, values] : columns) {
    const MetricSummary s = summarize(values);
    sum << name << ',' << format_double(s.mean) << ',' << format_double(s.stddev) << '\n';
  }
  const std::string summary_path =
      (std::filesystem::path(a.out_dir) / "summary.csv").string();
  io::write_text_file(summary_path, sum.str());
  artifact_paths.push_back(summary_path);

  RunManifest m;
  m.command = "finetune";
  m.config_path = a.config_path;
  m.seed = a.seed;
  m.output_dir = a.out_dir;
  m.rng_streams = {"folds", "ft-init", "ft-shuffle", "ft-dropout"};
  m.effective_config = {{"data", a.data},
                        {"out-dir", a.out_dir},
                        {"init", a.init},
                        {"folds", std::to_string(a.folds)},
                        {"epochs", std::to_string(a.epochs)},
                        {"batch", std::to_string(a.batch)},
                        {"lr", format_double(a.lr)},
                        {"weight-decay", format_double(a.weight_decay)},
                        {"freeze", std::to_string(a.freeze)},
                        {"seed", std::to_string(a.seed)},
                        {"external", a.external},
                        {"name", variant}};
  m.artifact_paths = artifact_paths;
  write_manifest((std::filesystem::path(a.out_dir) / "manifest.json").string(), m,
                 clock.seconds());

  const MetricSummary auc_summary = summarize(columns[0].second);
  std::printf("finetune: %zu folds, auc %s (%s), metrics %s\n", rows.size(),
              format_double(auc_summary.mean).c_str(),
              format_double(auc_summary.stddev).c_str(), metrics_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::vector<std::string> inputs;
  std::string names;  // comma-separated overrides, one per input
  std::string out_dir = "evaluate-run";
  std::string config_path;
};

namespace detail {

struct ResultSet {
  std::string name;
  std::vector<std::string> columns;                 // excludes the fold index
  std::map<std::string, std::vector<double>> data;  // column -> per-fold values
  std::size_t folds = 0;
};

inline ResultSet load_result_set(const std::string& path) {
  std::istringstream is(io::read_text_file(path));
  std::string line;
  if (!std::getline(is, line) || line != "# vralign-foldmetrics v1")
    throw IoError("not a fold-metrics file (bad leading magic): " + path);
  ResultSet rs;
  rs.name = std::filesystem::path(path).stem().string();
  std::string header;
  while (std::getline(is, header)) {
    if (header.rfind("# variant=", 0) == 0) {
      rs.name = header.substr(10);
      continue;
    }
    if (!header.empty() && header[0] == '#') continue;
    break;
  }
  std::istringstream hs(header);
  std::string col;
  bool first = true;
  while (std::getline(hs, col, ',')) {
    if (first) {
      if (col != "fold") throw IoError("fold-metrics header must start with 'fold'");
      first = false;
      continue;
    }
    rs.columns.push_back(col);
    rs.data[col] = {};
  }
  if (rs.columns.empty()) throw IoError("fold-metrics file has no metric columns");
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string cell;
    if (!std::getline(ls, cell, ',')) throw IoError("malformed fold-metrics row");
    for (const auto& c : rs.columns) {
      if (!std::getline(ls, cell, ','))
        throw IoError("fold-metrics row has too few cells: '" + line + "'");
      rs.data[c].push_back(vralign::detail::parse_double(cell, c));
    }
    ++rs.folds;
  }
  if (rs.folds == 0) throw IoError("fold-metrics file has no rows: " + path);
  return rs;
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> parts;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) parts.push_back(part);
  return parts;
}

}  // namespace detail

inline int cmd_evaluate(const EvaluateArgs& a) {
  detail::WallClock clock;
  if (a.inputs.size() < 2)
    throw ConfigError("comparison needs at least 2 result sets (got " +
                      std::to_string(a.inputs.size()) + ")");

  std::vector<detail::ResultSet> sets;
  for (const auto& path : a.inputs) sets.push_back(detail::load_result_set(path));
  if (!a.names.empty()) {
    const auto names = detail::split_csv(a.names);
    if (names.size() != sets.size())
      throw ConfigError("--names needs exactly one name per input");
    for (std::size_t i = 0; i < sets.size(); ++i) sets[i].name = names[i];
  }
  for (std::size_t i = 1; i < sets.size(); ++i)
    if (sets[i].folds != sets[0].folds)
      throw ConfigError("comparison error: fold counts differ (" + sets[0].name + " has " +
                        std::to_string(sets[0].folds) + ", " + sets[i].name + " has " +
                        std::to_string(sets[i].folds) + ")");

  // Metrics every set reports, in the first set's column order.
  std::vector<std::string> metrics;
  for (const auto& col : sets[0].columns) {
    bool shared = true;
    for (const auto& s : sets) shared = shared && s.data.count(col) > 0;
    if (shared) metrics.push_back(col);
  }
  if (metrics.empty()) throw ConfigError("comparison error: no shared metric columns");

  std::filesystem::create_directories(a.out_dir);

  std::ostringstream sum;
  sum << "# vralign-comparison v1\n";
  sum << "variant,metric,mean,std\n";
  for (const auto& s : sets)
    for (const auto& metric : metrics) {
      const MetricSummary ms = summarize(s.data.at(metric));
      sum << s.name << ',' << metric << ',' << format_double(ms.mean) << ','
          << format_double(ms.stddev) << '\n';
    }
  const std::string summary_path =
      (std::filesystem::path(a.out_dir) / "summary.csv").string();
  io::write_text_file(summary_path, sum.str());

  std::ostringstream tt;
  tt << "# vralign-ttests v1\n";
  tt << "a,b,metric,t,p,degenerate\n";
  struct TestRow {
    std::string a, b, metric;
    double t = 0.0, p = 1.0;
    bool degenerate = false;
  };
  std::vector<TestRow> test_rows;
  for (std::size_t i = 0; i < sets.size(); ++i)
    for (std::size_t j = i + 1; j < sets.size(); ++j)
      for (const auto& metric : metrics) {
        TestRow row;
        row.a = sets[i].name;
        row.b = sets[j].name;
        row.metric = metric;
        try {
          const TTestResult r =
              paired_t_test(sets[i].data.at(metric), sets[j].data.at(metric));
          row.t = r.t;
          row.p = r.p;
        } catch (const DomainError&) {
          row.degenerate = true;
        }
        test_rows.push_back(row);
        tt << row.a << ',' << row.b << ',' << row.metric << ',' << format_double(row.t)
           << ',' << format_double(row.p) << ',' << (row.degenerate ? 1 : 0) << '\n';
      }
  const std::string ttests_path = (std::filesystem::path(a.out_dir) / "ttests.csv").string();
  io::write_text_file(ttests_path, tt.str());

  // Rendered table: mean (std) per variant column, then the t-test block.
  std::ostringstream txt;
  txt << "vralign comparison v1\n\n";
  std::size_t name_w = 12;
  for (const auto& s : sets) name_w = std::max(name_w, s.name.size() + 2);
  char buf[64];
  txt << "fold metrics, mean (std) over " << sets[0].folds << " folds\n";
  std::snprintf(buf, sizeof buf, "%-14s", "metric");
  txt << buf;
  for (const auto& s : sets) {
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(name_w + 10), s.name.c_str());
    txt << buf;
  }
  txt << '\n';
  for (const auto& metric : metrics) {
    std::snprintf(buf, sizeof buf, "%-14s", metric.c_str());
    txt << buf;
    for (const auto& s : sets) {
      const MetricSummary ms = summarize(s.data.at(metric));
      std::string cell;
      std::snprintf(buf, sizeof buf, "%.4f (%.4f)", ms.mean, ms.stddev);
      cell = buf;
      std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(name_w + 10), cell.c_str());
      txt << buf;
    }
    txt << '\n';
  }
  txt << "\npaired t-tests (two-sided)\n";
  std::snprintf(buf, sizeof buf, "%-*s%-*s%-14s%-12s%-12s\n", static_cast<int>(name_w),
                "a", static_cast<int>(name_w), "b", "metric", "t", "p");
  txt << buf;
  for (const auto& row : test_rows) {
    std::snprintf(buf, sizeof buf, "%-*s%-*s%-14s", static_cast<int>(name_w),
                  row.a.c_str(), static_cast<int>(name_w), row.b.c_str(),
                  row.metric.c_str());
    txt << buf;
    if (row.degenerate) {
      txt << "degenerate (zero-variance differences)";
    } else {
      std::snprintf(buf, sizeof buf, "%-12.4f%-12.4g", row.t, row.p);
      txt << buf;
    }
    txt << '\n';
  }
  const std::string tables_path = (std::filesystem::path(a.out_dir) / "tables.txt").string();
  io::write_text_file(tables_path, txt.str());

  RunManifest m;
  m.command = "evaluate";
  m.config_path = a.config_path;
  m.output_dir = a.out_dir;
  std::string joined_inputs, joined_names;
  for (const auto& p : a.inputs) joined_inputs += (joined_inputs.empty() ? "" : ",") + p;
  for (const auto& s : sets) joined_names += (joined_names.empty() ? "" : ",") + s.name;
  m.effective_config = {{"inputs", joined_inputs},
                        {"names", joined_names},
                        {"out-dir", a.out_dir}};
  m.artifact_paths = {summary_path, ttests_path, tables_path};
  write_manifest((std::filesystem::path(a.out_dir) / "manifest.json").string(), m,
                 clock.seconds());

  std::printf("evaluate: %zu sets, %zu metrics, tables %s\n", sets.size(), metrics.size(),
              tables_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// Top-level parser
// ---------------------------------------------------------------------------

namespace detail {

inline void list_valid_keys(const CLI::App* sub) {
  std::string keys;
  for (const auto* opt : sub->get_options()) {
    const auto& lnames = opt->get_lnames();
    if (lnames.empty() || lnames[0] == "help") continue;
    keys += (keys.empty() ? "" : ", ") + lnames[0];
  }
  std::fprintf(stderr, "valid keys for '%s': %s\n", sub->get_name().c_str(),
               keys.c_str());
}

}  // namespace detail

inline int run_cli(int argc, char** argv) {
  CLI::App app{"volume-report alignment: synthetic data, contrastive pretraining, "
               "fold fine-tuning, and experiment comparison"};
  app.require_subcommand(1);

  GenArgs ga;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset file");
  gen->add_option("--n", ga.n, "number of patients")->capture_default_str();
  gen->add_option("--dims", ga.dims, "volume dims as D,H,W")->capture_default_str();
  gen->add_option("--vocab", ga.vocab, "report vocabulary size")->capture_default_str();
  gen->add_option("--balance", ga.balance, "fraction of marker-1 patients")
      ->capture_default_str();
  gen->add_option("--seed", ga.seed, "master seed")->capture_default_str();
  gen->add_option("--shift", ga.shift, "distribution shift (external cohort)")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  gen->add_option("--out", ga.out, "output dataset path")->required();
  gen->set_config("--config", "", "flat key=value config file");

  PretrainArgs pa;
  CLI::App* pre = app.add_subcommand("pretrain", "contrastive pretraining on a dataset");
  pre->add_option("--data", pa.data, "dataset file from gen")->required();
  pre->add_option("--out-dir", pa.out_dir, "run output directory")->capture_default_str();
  pre->add_option("--mode", pa.mode, "training objective variant")
      ->check(CLI::IsMember({"full", "global-only", "local-only", "no-location",
                             "contrastive", "hard-negative"}))
      ->capture_default_str();
  pre->add_option("--epochs", pa.epochs, "training epochs")->capture_default_str();
  pre->add_option("--batch", pa.batch, "batch size")->capture_default_str();
  pre->add_option("--lr", pa.lr, "peak learning rate")->capture_default_str();
  pre->add_option("--weight-decay", pa.weight_decay, "decoupled weight decay")
      ->capture_default_str();
  pre->add_option("--margin", pa.margin, "triplet margin")->capture_default_str();
  pre->add_option("--location-coef", pa.location_coef,
                  "weight of same-location negatives")
      ->capture_default_str();
  pre->add_option("--neg", pa.neg, "negative sampler: random, semihard:K, hard")
      ->capture_default_str();
  pre->add_option("--seed", pa.seed, "master seed")->capture_default_str();
  pre->set_config("--config", "", "flat key=value config file");

  FinetuneArgs fa;
  CLI::App* fin = app.add_subcommand("finetune", "k-fold marker classification");
  fin->add_option("--data", fa.data, "labeled dataset file")->required();
  fin->add_option("--out-dir", fa.out_dir, "run output directory")->capture_default_str();
  fin->add_option("--init", fa.init, "encoder init: random or pretrained:PATH")
      ->capture_default_str();
  fin->add_option("--folds", fa.folds, "cross-validation folds")->capture_default_str();
  fin->add_option("--epochs", fa.epochs, "training epochs per fold")->capture_default_str();
  fin->add_option("--batch", fa.batch, "batch size")->capture_default_str();
  fin->add_option("--lr", fa.lr, "peak learning rate")->capture_default_str();
  fin->add_option("--weight-decay", fa.weight_decay, "decoupled weight decay")
      ->capture_default_str();
  fin->add_option("--freeze", fa.freeze, "encoder stages to freeze")->capture_default_str();
  fin->add_option("--seed", fa.seed, "master seed")->capture_default_str();
  fin->add_option("--external", fa.external,
                  "optional external dataset for transfer AUC and heatmap Dice");
  fin->add_option("--name", fa.name, "variant name in the metrics file");
  fin->set_config("--config", "", "flat key=value config file");

  EvaluateArgs ea;
  CLI::App* ev = app.add_subcommand("evaluate", "compare fold-metrics files");
  ev->add_option("inputs", ea.inputs, "two or more fold-metrics.csv files")
      ->expected(-1);
  ev->add_option("--names", ea.names, "comma-separated variant names, one per input");
  ev->add_option("--out-dir", ea.out_dir, "run output directory")->capture_default_str();
  ev->set_config("--config", "", "flat key=value config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ConfigError& e) {
    std::fprintf(stderr, "vralign: %s\n", e.what());
    if (argc > 1)
      if (const auto* sub = app.get_subcommand_no_throw(argv[1])) detail::list_valid_keys(sub);
    return 2;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const CLI::App* active = gen->parsed()   ? gen
                           : pre->parsed() ? pre
                           : fin->parsed() ? fin
                                           : ev;
  try {
    if (gen->parsed()) {
      ga.config_path = gen->get_config_ptr()->as<std::string>();
      return cmd_gen(ga);
    }
    if (pre->parsed()) {
      pa.config_path = pre->get_config_ptr()->as<std::string>();
      return cmd_pretrain(pa);
    }
    if (fin->parsed()) {
      fa.config_path = fin->get_config_ptr()->as<std::string>();
      return cmd_finetune(fa);
    }
    ea.config_path = ev->get_config_ptr()->as<std::string>();
    return cmd_evaluate(ea);
  } catch (const Error& e) {
    std::fprintf(stderr, "vralign %s: %s\n", active->get_name().c_str(), e.what());
    return 1;
  }
}

}  // namespace vralign::cli

namespace vralign {
using cli::run_cli;
}
