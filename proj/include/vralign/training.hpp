#pragma once

#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vralign/alignment.hpp"
#include "vralign/encoders.hpp"
#include "vralign/gradcheck.hpp"
#include "vralign/losses.hpp"
#include "vralign/params.hpp"
#include "vralign/synthdata.hpp"

namespace vralign {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Moment state is keyed by parameter name
/// and allocated lazily; frozen parameters are skipped entirely.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& store) { step(store, cfg_.lr); }

  void step(ParamStore& store, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, param] : store) {
      if (!param.trainable) continue;
      for (double g : param.grad.data)
        if (!std::isfinite(g))
          throw DomainError("poisoned gradient in parameter '" + name + "'");
      auto& st = state_[name];
      if (st.m.size() != param.value.data.size()) {
        st.m.assign(param.value.data.size(), 0.0);
        st.v.assign(param.value.data.size(), 0.0);
      }
      for (std::size_t i = 0; i < param.value.data.size(); ++i) {
        const double g = param.grad.data[i];
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        param.value.data[i] -=
            lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                  cfg_.weight_decay * param.value.data[i]);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, State> state_;
};

/// Warmup over the first 10 epochs, then the rate halves every 10 epochs.
inline double scheduler_lr(double base, std::size_t epoch) {
  if (epoch < 10) return base * static_cast<double>(epoch + 1) / 10.0;
  return base * std::pow(0.5, 1.0 + static_cast<double>((epoch - 10) / 10));
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

struct ModelConfig {
  VolumeEncoderConfig vol;
  ReportEncoderConfig txt;
  std::size_t align_dim = 32;

  void validate() const {
    vol.validate();
    txt.validate();
    if (align_dim == 0) throw ConfigError("align dim must be positive");
    if (vol.proj_dim != txt.proj_dim)
      throw ConfigError("global projection dims differ between encoders");
  }
  std::size_t local_img_channels() const {
    return vol.stage_channels[vol.local_tap_stage - 1];
  }
};

inline void init_model_params(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  init_volume_params(store, cfg.vol, rng);
  init_report_params(store, cfg.txt, rng);
  init_cross_attention_params(store, cfg.local_img_channels(), cfg.txt.embed_dim,
                              cfg.align_dim, rng);
  init_loss_weights(store);
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

enum class AblationMode {
  full,
  global_only,
  local_only,
  no_location,
  contrastive,
  hard_negative,
};

inline AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "full") return AblationMode::full;
  if (s == "global-only") return AblationMode::global_only;
  if (s == "local-only") return AblationMode::local_only;
  if (s == "no-location") return AblationMode::no_location;
  if (s == "contrastive") return AblationMode::contrastive;
  if (s == "hard-negative") return AblationMode::hard_negative;
  throw ConfigError("unknown training mode '" + s + "'");
}

inline std::string ablation_mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::full: return "full";
    case AblationMode::global_only: return "global-only";
    case AblationMode::local_only: return "local-only";
    case AblationMode::no_location: return "no-location";
    case AblationMode::contrastive: return "contrastive";
    default: return "hard-negative";
  }
}

struct TrainRunConfig {
  std::size_t epochs = 340;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  AblationMode mode = AblationMode::full;
  NegativeSamplingStrategy strategy;  // semi-hard with 2 candidates
  TripletConfig triplet;
  AdamWConfig optimizer;

  void validate() const {
    if (epochs == 0) throw ConfigError("need at least one epoch");
    if (batch_size < 2) throw ConfigError("batch size must be at least 2");
    triplet.validate();
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double global_loss = 0.0;  // mean over batches, before weighting
  double local_loss = 0.0;
  double alpha = 0.0;  // effective loss weights at epoch end
  double beta = 0.0;
  double total = 0.0;  // mean weighted objective
};

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_trajectory_csv(const std::string& path,
                                 const std::vector<EpochStats>& trajectory) {
  std::ostringstream os;
  os << "# vralign-trajectory v1\n";
  os << "epoch,global_loss,local_loss,alpha,beta,total\n";
  for (const auto& e : trajectory)
    os << e.epoch << ',' << format_double(e.global_loss) << ','
       << format_double(e.local_loss) << ',' << format_double(e.alpha) << ','
       << format_double(e.beta) << ',' << format_double(e.total) << '\n';
  io::write_text_file(path, os.str());
}

namespace detail {

/// Encodes one matched pair and projects both global representations into
/// the shared space.
struct PairForward {
  EncoderOutput img;
  EncoderOutput txt;
  Var img_global;
  Var txt_global;
};

inline PairForward forward_pair(Tape& tape, const PatientRecord& rec,
                                const ModelConfig& cfg, const BoundParams& bound,
                                Rng* dropout_rng) {
  PairForward f;
  f.img = encode_volume(tape, rec.volume, cfg.vol, bound, dropout_rng);
  f.txt = encode_report(tape, rec.tokens, cfg.txt, bound);
  f.img_global = project_global(bound, "vol.head", f.img.global_rep);
  f.txt_global = project_global(bound, "txt.head", f.txt.global_rep);
  return f;
}

}  // namespace detail

/// Loss components of one pretraining batch. Exposed separately from the
/// epoch loop so gradient checks can drive the exact training objective.
struct BatchObjective {
  Var global_term;
  Var local_term;
  Var total;
};

inline BatchObjective batch_objective(Tape& tape, const BoundParams& bound,
                                      const std::vector<PatientRecord>& records,
                                      const std::vector<std::size_t>& batch,
                                      const ModelConfig& model,
                                      const TrainRunConfig& run, Rng* dropout_rng,
                                      Rng& negative_rng) {
  if (batch.size() < 2) throw ConfigError("batch too small: need at least 2 pairs");

  TripletConfig triplet = run.triplet;
  NegativeSamplingStrategy strategy = run.strategy;
  if (run.mode == AblationMode::no_location) triplet.use_location = false;
  if (run.mode == AblationMode::hard_negative) strategy.kind = SamplerKind::hard;

  std::vector<detail::PairForward> fwd;
  fwd.reserve(batch.size());
  std::vector<Var> img_globals, txt_globals;
  std::vector<int> locations;
  for (auto idx : batch) {
    fwd.push_back(detail::forward_pair(tape, records[idx], model, bound, dropout_rng));
    img_globals.push_back(fwd.back().img_global);
    txt_globals.push_back(fwd.back().txt_global);
    locations.push_back(records[idx].location);
  }
  GlobalBatch gb{stack_rows(img_globals), stack_rows(txt_globals), locations};

  BatchObjective out;
  const Var zero = tape.constant(NdArray::scalar(0.0));
  if (run.mode == AblationMode::local_only) {
    out.global_term = zero;
  } else if (run.mode == AblationMode::contrastive) {
    out.global_term = pairwise_contrastive_loss(tape, gb, triplet.margin);
  } else {
    out.global_term = global_loss(tape, gb, triplet, strategy, negative_rng);
  }

  if (run.mode == AblationMode::global_only || run.mode == AblationMode::contrastive) {
    out.local_term = zero;
  } else {
    std::vector<PooledLocal> pooled;
    pooled.reserve(batch.size());
    for (const auto& f : fwd)
      pooled.push_back(pool_aligned(align_local(f.img.local_rep, f.txt.local_rep, bound)));
    out.local_term = local_loss(tape, pooled, triplet, strategy, negative_rng);
  }

  out.total = total_loss(tape, out.global_term, out.local_term, bound);
  return out;
}

/// Splits a seeded shuffle of [0, n) into batches; a trailing batch smaller
/// than 2 is dropped because the losses need a negative pair.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n,
                                                          std::size_t batch_size,
                                                          Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start >= 2)
      batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

/// Contrastive pretraining over matched volume/report pairs. The report
/// embedding and its leading layers stay frozen; everything else trains
/// under the warmup-then-halving schedule. Returns one stats row per epoch.
inline std::vector<EpochStats> pretrain(ParamStore& store, const ModelConfig& model,
                                        const std::vector<PatientRecord>& records,
                                        const TrainRunConfig& run) {
  model.validate();
  run.validate();
  if (records.size() < 2) throw ConfigError("pretraining needs at least 2 patients");
  if (run.batch_size > records.size())
    throw ConfigError("batch size exceeds dataset size");

  freeze_report_prefix(store, model.txt);
  AdamW opt(run.optimizer);
  std::vector<EpochStats> trajectory;
  trajectory.reserve(run.epochs);

  for (std::size_t epoch = 0; epoch < run.epochs; ++epoch) {
    const double lr = scheduler_lr(run.optimizer.lr, epoch);
    Rng shuffle_rng = derive_stream(run.seed, "epoch-shuffle", epoch);
    Rng dropout_rng = derive_stream(run.seed, "dropout", epoch);
    Rng negative_rng = derive_stream(run.seed, "negatives", epoch);
    const auto batches = make_batches(records.size(), run.batch_size, shuffle_rng);
    if (batches.empty()) throw ConfigError("no usable batches: dataset too small");

    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      try {
        Tape tape;
        BoundParams bound = bind_params(tape, store);
        const auto obj = batch_objective(tape, bound, records, batches[bi], model, run,
                                         &dropout_rng, negative_rng);
        tape.backward(obj.total);
        pull_grads(bound, store);
        opt.step(store, lr);
        store.zero_grads();
        stats.global_loss += obj.global_term.value().at(0);
        stats.local_loss += obj.local_term.value().at(0);
        stats.total += obj.total.value().at(0);
      } catch (const Error& e) {
        throw Error("epoch " + std::to_string(epoch) + " batch " + std::to_string(bi) +
                    ": " + e.what());
      }
    }
    const double nb = static_cast<double>(batches.size());
    stats.global_loss /= nb;
    stats.local_loss /= nb;
    stats.total /= nb;
    stats.alpha = std::max(0.05, store.at("loss.alpha_raw").value.at(0));
    stats.beta = std::max(0.05, store.at("loss.beta_raw").value.at(0));
    trajectory.push_back(stats);
  }
  return trajectory;
}

// ---------------------------------------------------------------------------
// Finetuning
// ---------------------------------------------------------------------------

struct FinetuneConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t freeze_stages = 2;
  AdamWConfig optimizer;
  std::string init_checkpoint;  // empty: train the encoder from scratch

  void validate() const {
    if (epochs == 0) throw ConfigError("need at least one epoch");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (freeze_stages > 4) throw ConfigError("cannot freeze more than 4 stages");
  }
};

struct FoldOutcome {
  std::vector<std::size_t> test_indices;
  std::vector<int> labels;
  std::vector<int> predictions;
  std::vector<double> scores;  // probability of marker 1
};

namespace detail {

inline Var classifier_logits(Tape& tape, const NdArray& volume,
                             const VolumeEncoderConfig& cfg, const BoundParams& bound,
                             Rng* dropout_rng) {
  EncoderOutput enc = encode_volume(tape, volume, cfg, bound, dropout_rng);
  Var g = reshape(enc.global_rep, {1, enc.global_rep.value().numel()});
  Var z = add_rowvec(matmul(g, bound.at("cls.w")), bound.at("cls.b"));
  return reshape(z, {z.value().numel()});
}

}  // namespace detail

inline void init_classifier_params(ParamStore& store, const VolumeEncoderConfig& cfg,
                                   Rng& rng) {
  const std::size_t c4 = cfg.stage_channels[3];
  NdArray w({c4, 2});
  const double scale = 1.0 / std::sqrt(static_cast<double>(c4));
  for (auto& x : w.data) x = scale * rng.normal();
  store.add("cls.w", std::move(w));
  store.add("cls.b", NdArray({2}));
}

/// Trains a marker classifier on one train split and scores the test split.
/// The volume encoder starts from `init_checkpoint` when given (matching
/// parameters by name) and from fresh random weights otherwise; the first
/// `freeze_stages` stages stay fixed either way.
inline FoldOutcome finetune_fold(const std::vector<PatientRecord>& records,
                                 const FoldSplit& split,
                                 const VolumeEncoderConfig& vol_cfg,
                                 const FinetuneConfig& cfg, std::size_t fold_index,
                                 ParamStore* final_params = nullptr) {
  cfg.validate();
  vol_cfg.validate();
  if (split.train.size() < 2) throw ConfigError("fold has too few training patients");
  if (split.test.empty()) throw ConfigError("fold has no test patients");

  ParamStore store;
  Rng init_rng = derive_stream(cfg.seed, "ft-init", fold_index);
  init_volume_params(store, vol_cfg, init_rng);
  init_classifier_params(store, vol_cfg, init_rng);
  if (!cfg.init_checkpoint.empty()) load_checkpoint_into(store, cfg.init_checkpoint);
  freeze_volume_stages(store, cfg.freeze_stages);

  AdamW opt(cfg.optimizer);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = scheduler_lr(cfg.optimizer.lr, epoch);
    Rng shuffle_rng = derive_stream(cfg.seed, "ft-shuffle", fold_index * 131071 + epoch);
    Rng dropout_rng = derive_stream(cfg.seed, "ft-dropout", fold_index * 131071 + epoch);

    std::vector<std::size_t> order = split.train;
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.below(i + 1)]);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tape tape;
      BoundParams bound = bind_params(tape, store);
      std::vector<Var> logits;
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < end; ++i) {
        const auto& rec = records[order[i]];
        logits.push_back(
            detail::classifier_logits(tape, rec.volume, vol_cfg, bound, &dropout_rng));
        labels.push_back(static_cast<std::size_t>(rec.marker));
      }
      Var loss = cross_entropy_logits(stack_rows(logits), labels);
      tape.backward(loss);
      pull_grads(bound, store);
      opt.step(store, lr);
      store.zero_grads();
    }
  }

  FoldOutcome out;
  out.test_indices = split.test;
  for (auto idx : split.test) {
    Tape tape;
    BoundParams bound = bind_params(tape, store);
    Var logits =
        detail::classifier_logits(tape, records[idx].volume, vol_cfg, bound, nullptr);
    const double z0 = logits.value().at(0);
    const double z1 = logits.value().at(1);
    const double zmax = std::max(z0, z1);
    const double e0 = std::exp(z0 - zmax), e1 = std::exp(z1 - zmax);
    out.scores.push_back(e1 / (e0 + e1));
    out.predictions.push_back(z1 > z0 ? 1 : 0);
    out.labels.push_back(records[idx].marker);
  }
  if (final_params) *final_params = store;
  return out;
}

inline std::vector<FoldOutcome> finetune(const std::vector<PatientRecord>& records,
                                         const std::vector<FoldSplit>& folds,
                                         const VolumeEncoderConfig& vol_cfg,
                                         const FinetuneConfig& cfg) {
  std::vector<FoldOutcome> out;
  out.reserve(folds.size());
  for (std::size_t f = 0; f < folds.size(); ++f)
    out.push_back(finetune_fold(records, folds[f], vol_cfg, cfg, f));
  return out;
}

}  // namespace vralign
