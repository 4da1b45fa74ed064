#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vralign/evaluation.hpp"
#include "vralign/training.hpp"

namespace vralign {

// ---------------------------------------------------------------------------
// Transfer benchmark: pretrain on an unlabeled cohort, fine-tune fold models
// on the labeled cohort, score every fold model on a distribution-shifted
// external cohort, and compare encoder initializations (contrastive
// checkpoint vs fresh random weights, plus single-term ablations).
// ---------------------------------------------------------------------------

inline ModelConfig benchmark_model() {
  ModelConfig m;
  m.vol.input_dims = {16, 16, 16};
  m.vol.stage_channels = {6, 12, 16, 24};
  m.vol.local_tap_stage = 3;
  m.vol.proj_dim = 24;
  m.vol.dropout_rate = 0.1;
  m.txt.vocab_size = 64;
  m.txt.embed_dim = 24;
  m.txt.num_layers = 2;
  m.txt.frozen_prefix_layers = 1;
  m.txt.proj_dim = 24;
  m.align_dim = 12;
  return m;
}

struct BenchmarkConfig {
  std::size_t n_train = 200;
  std::size_t n_external = 76;
  std::array<std::size_t, 3> dims{16, 16, 16};
  double train_balance = 0.33;
  double external_balance = 28.0 / 76.0;
  std::size_t vocab_size = 64;
  std::size_t n_folds = 5;

  ModelConfig model = benchmark_model();
  std::size_t pretrain_epochs = 60;
  std::size_t pretrain_batch = 16;
  double pretrain_lr = 1e-3;
  double pretrain_weight_decay = 0.0;
  std::size_t finetune_epochs = 20;
  std::size_t finetune_batch = 16;
  double finetune_lr = 3e-3;
  std::size_t freeze_stages = 2;
  bool ablations = true;  // also run global-only / local-only pretrains
  std::string work_dir = "bench-work";

  void validate() const {
    model.validate();
    if (n_folds < 2) throw ConfigError("benchmark needs at least 2 folds");
    if (pretrain_epochs == 0 || finetune_epochs == 0)
      throw ConfigError("benchmark epoch counts must be positive");
    if (model.vol.input_dims != dims)
      throw ConfigError("benchmark dims do not match the volume encoder config");
    if (work_dir.empty()) throw ConfigError("benchmark needs a work directory");
  }
};

/// One initialization arm accumulated across master seeds. AUC vectors hold
/// one entry per (seed, fold), seed-major, so paired tests line up entry by
/// entry between arms. Heatmap vectors hold one entry per seed: the mean
/// attention-vs-mask Dice over the external cohort (only scored for the
/// contrastive and random arms).
struct BenchmarkArm {
  std::string name;
  std::vector<double> external_auc;
  std::vector<double> fold_auc;
  std::vector<double> heatmap_dice3d;
  std::vector<double> heatmap_dice2d;
  std::vector<double> pretrain_final_total;  // last-epoch objective per seed
};

struct BenchmarkResult {
  std::vector<std::uint64_t> seeds;
  std::vector<BenchmarkArm> arms;

  const BenchmarkArm& arm(const std::string& name) const {
    for (const auto& a : arms)
      if (a.name == name) return a;
    throw ConfigError("unknown benchmark arm '" + name + "'");
  }
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw ShapeError("mean of empty vector");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline std::uint64_t benchmark_subseed(std::uint64_t master, std::string_view role) {
  return derive_stream(master, role).next_u64();
}

/// Scores every record with the fold classifier (probability of marker 1).
inline BinaryPredictions score_patients(const ParamStore& store,
                                        const VolumeEncoderConfig& vol_cfg,
                                        const std::vector<PatientRecord>& records) {
  BinaryPredictions out;
  for (const auto& rec : records) {
    Tape tape;
    BoundParams bound = bind_params(tape, store);
    Var logits = detail::classifier_logits(tape, rec.volume, vol_cfg, bound, nullptr);
    const double z0 = logits.value().at(0);
    const double z1 = logits.value().at(1);
    const double zmax = std::max(z0, z1);
    const double e0 = std::exp(z0 - zmax), e1 = std::exp(z1 - zmax);
    out.scores.push_back(e1 / (e0 + e1));
    out.labels.push_back(rec.marker);
  }
  return out;
}

/// Mean (3D, 2D) Dice between each record's attention heatmap and its
/// seg-mask, scored with the given encoder parameters.
inline std::pair<double, double> mean_attention_dice(
    const ParamStore& store, const VolumeEncoderConfig& vol_cfg,
    const std::vector<PatientRecord>& records, const HeatmapEvalConfig& heat_cfg = {}) {
  double d3 = 0.0, d2 = 0.0;
  for (const auto& rec : records) {
    Tape tape;
    BoundParams bound = bind_params(tape, store);
    EncoderOutput enc = encode_volume(tape, rec.volume, vol_cfg, bound, nullptr);
    const NdArray heat = extract_attention_heatmap(enc, vol_cfg.input_dims);
    const ExplainScores s = explainability_scores(heat, rec.seg_mask, heat_cfg);
    d3 += s.dice3d;
    d2 += s.dice2d;
  }
  const double n = static_cast<double>(records.size());
  return {d3 / n, d2 / n};
}

namespace detail {

struct PretrainArtifact {
  std::string checkpoint_path;
  double final_total = 0.0;
};

inline PretrainArtifact run_benchmark_pretrain(const BenchmarkConfig& cfg,
                                               std::uint64_t master_seed,
                                               AblationMode mode,
                                               const std::vector<PatientRecord>& train) {
  ParamStore store;
  Rng init_rng = derive_stream(benchmark_subseed(master_seed, "bench-init"), "init");
  init_model_params(store, cfg.model, init_rng);

  TrainRunConfig run;
  run.epochs = cfg.pretrain_epochs;
  run.batch_size = cfg.pretrain_batch;
  run.seed = benchmark_subseed(master_seed, "bench-pretrain");
  run.mode = mode;
  run.optimizer.lr = cfg.pretrain_lr;
  run.optimizer.weight_decay = cfg.pretrain_weight_decay;
  const auto trajectory = pretrain(store, cfg.model, train, run);

  PretrainArtifact art;
  art.final_total = trajectory.back().total;
  art.checkpoint_path =
      (std::filesystem::path(cfg.work_dir) /
       ("seed-" + std::to_string(master_seed) + "-" + ablation_mode_name(mode) + ".ckpt"))
          .string();
  save_checkpoint(art.checkpoint_path, store);
  return art;
}

}  // namespace detail

/// Runs the full benchmark over the given master seeds. Arms:
///   cl-full        fine-tune from the full contrastive checkpoint
///   random-init    fine-tune from fresh random weights
///   cl-global-only / cl-local-only   single-term pretraining ablations
/// All arms share datasets, folds, and fine-tune seeds per master seed, so
/// their fold-level AUC vectors are directly pairable.
inline BenchmarkResult run_benchmark(const BenchmarkConfig& cfg,
                                     const std::vector<std::uint64_t>& seeds) {
  cfg.validate();
  if (seeds.empty()) throw ConfigError("benchmark needs at least one master seed");
  std::filesystem::create_directories(cfg.work_dir);

  BenchmarkResult result;
  result.seeds = seeds;
  result.arms.push_back({"cl-full", {}, {}, {}, {}, {}});
  result.arms.push_back({"random-init", {}, {}, {}, {}, {}});
  if (cfg.ablations) {
    result.arms.push_back({"cl-global-only", {}, {}, {}, {}, {}});
    result.arms.push_back({"cl-local-only", {}, {}, {}, {}, {}});
  }

  for (const std::uint64_t master : seeds) {
    DatasetSpec train_spec;
    train_spec.n_patients = cfg.n_train;
    train_spec.dims = cfg.dims;
    train_spec.vocab_size = cfg.vocab_size;
    train_spec.class_balance = cfg.train_balance;
    train_spec.seed = benchmark_subseed(master, "bench-train-data");
    DatasetSpec ext_spec = train_spec;
    ext_spec.n_patients = cfg.n_external;
    ext_spec.class_balance = cfg.external_balance;
    ext_spec.seed = benchmark_subseed(master, "bench-external-data");
    ext_spec.shift = true;

    const auto train = generate_dataset(train_spec);
    const auto external = generate_dataset(ext_spec);
    const auto folds = make_folds(train, cfg.n_folds, benchmark_subseed(master, "bench-folds"));
    const std::uint64_t ft_seed = benchmark_subseed(master, "bench-finetune");

    for (auto& arm : result.arms) {
      std::string checkpoint;
      if (arm.name != "random-init") {
        AblationMode mode = AblationMode::full;
        if (arm.name == "cl-global-only") mode = AblationMode::global_only;
        if (arm.name == "cl-local-only") mode = AblationMode::local_only;
        const auto art = detail::run_benchmark_pretrain(cfg, master, mode, train);
        checkpoint = art.checkpoint_path;
        arm.pretrain_final_total.push_back(art.final_total);
      }

      FinetuneConfig fcfg;
      fcfg.epochs = cfg.finetune_epochs;
      fcfg.batch_size = cfg.finetune_batch;
      fcfg.seed = ft_seed;
      fcfg.freeze_stages = cfg.freeze_stages;
      fcfg.optimizer.lr = cfg.finetune_lr;
      fcfg.init_checkpoint = checkpoint;

      // Heatmap overlap is scored on the same fine-tuned models whose AUC is
      // reported, averaged over folds, so attention quality and transfer are
      // read off one set of weights per arm.
      const bool want_heatmaps =
          arm.name == "cl-full" || arm.name == "random-init";
      double h3_sum = 0.0, h2_sum = 0.0;
      for (std::size_t f = 0; f < folds.size(); ++f) {
        ParamStore trained;
        const FoldOutcome fold =
            finetune_fold(train, folds[f], cfg.model.vol, fcfg, f, &trained);
        BinaryPredictions in_fold;
        in_fold.scores = fold.scores;
        in_fold.labels = fold.labels;
        arm.fold_auc.push_back(auc(in_fold));
        arm.external_auc.push_back(auc(score_patients(trained, cfg.model.vol, external)));
        if (want_heatmaps) {
          const auto [h3, h2] = mean_attention_dice(trained, cfg.model.vol, external);
          h3_sum += h3;
          h2_sum += h2;
        }
      }
      if (want_heatmaps) {
        arm.heatmap_dice3d.push_back(h3_sum / static_cast<double>(folds.size()));
        arm.heatmap_dice2d.push_back(h2_sum / static_cast<double>(folds.size()));
      }
    }
  }
  return result;
}

/// Paired comparison of external AUC between two arms over (seed, fold).
inline TTestResult benchmark_transfer_test(const BenchmarkResult& r,
                                           const std::string& arm_a,
                                           const std::string& arm_b) {
  return paired_t_test(r.arm(arm_a).external_auc, r.arm(arm_b).external_auc);
}

}  // namespace vralign
