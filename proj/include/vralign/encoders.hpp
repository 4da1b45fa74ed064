#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "vralign/autodiff.hpp"
#include "vralign/params.hpp"
#include "vralign/rng.hpp"

namespace vralign {

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

/// Staged volume encoder: four blocks of per-position affine + leaky softplus,
/// with 2x strided mean pooling between blocks (so three halvings total), a
/// self-attention layer whose scores come from a grid-normalized view of the
/// block-4 map, and dropout after blocks 1-3 in training mode. Block outputs
/// play fixed roles: a configurable early block provides the local
/// (position-level) representation, block 4 provides the attention-weighted
/// global representation.
struct VolumeEncoderConfig {
  std::array<std::size_t, 3> input_dims{16, 16, 16};
  std::array<std::size_t, 4> stage_channels{8, 16, 32, 64};
  std::size_t local_tap_stage = 3;  // 1-based; taps that stage's pooled output
  std::size_t proj_dim = 64;
  double dropout_rate = 0.25;

  void validate() const {
    for (auto d : input_dims) {
      if (d < 8 || d % 8 != 0)
        throw ConfigError("volume dims must be positive multiples of 8, got " +
                          std::to_string(d));
    }
    for (auto c : stage_channels)
      if (c == 0) throw ConfigError("stage channel counts must be positive");
    if (local_tap_stage < 1 || local_tap_stage >= 4)
      throw ConfigError("local tap stage must be 1, 2 or 3");
    if (proj_dim == 0) throw ConfigError("projection dim must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ConfigError("dropout rate must be in [0, 1)");
  }

  std::array<std::size_t, 3> grid_after(std::size_t stage) const {
    // Pooling runs after stages 1..3, so stage k sees dims / 2^(k-1) and
    // emits dims / 2^min(k,3).
    const std::size_t h = stage >= 3 ? 8 : (std::size_t{1} << stage);
    return {input_dims[0] / h, input_dims[1] / h, input_dims[2] / h};
  }

  std::size_t positions_after(std::size_t stage) const {
    auto g = grid_after(stage);
    return g[0] * g[1] * g[2];
  }
};

/// Token-sequence encoder: embedding table with one reserved aggregate row,
/// a stack of self-attention blocks, global rep = final aggregate embedding,
/// local rep = final embeddings of the real tokens. Positional encodings are
/// off by default; token identity carries the content.
struct ReportEncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 3;
  std::size_t frozen_prefix_layers = 1;
  std::size_t max_tokens = 128;
  bool positional_encodings = false;
  std::size_t proj_dim = 64;

  void validate() const {
    if (vocab_size == 0) throw ConfigError("vocab size must be positive");
    if (embed_dim == 0) throw ConfigError("embed dim must be positive");
    if (num_layers == 0) throw ConfigError("report encoder needs at least one layer");
    if (frozen_prefix_layers >= num_layers)
      throw ConfigError("frozen prefix must leave at least one trainable layer");
    if (max_tokens == 0) throw ConfigError("max tokens must be positive");
    if (proj_dim == 0) throw ConfigError("projection dim must be positive");
  }

  std::size_t aggregate_id() const { return vocab_size; }
};

struct EncoderOutput {
  Var global_rep;                       // [C]
  Var local_rep;                        // [P x C_local]
  Var attn_weights;                     // [P' x P'], volume encoder only
  bool has_attn = false;
  std::array<std::size_t, 3> attn_grid{0, 0, 0};
};

// ---------------------------------------------------------------------------
// Self-attention
// ---------------------------------------------------------------------------

struct AttentionParams {
  Var wq, bq, wk, bk, wv, bv;
};

/// Scaled dot-product self-attention with a residual connection:
/// weights = softmax(QK^T / sqrt(C)), weighted = residual + weights . V.
/// Q, K, V are affine transforms of `content`; `residual` is the map the
/// attended values are added onto. The two usually coincide, but a caller can
/// score on a normalized view of a map while keeping the raw map in the
/// output path.
inline std::pair<Var, Var> self_attention(const Var& content, const Var& residual,
                                          const AttentionParams& p) {
  require_rank(content.value(), 2, "self_attention");
  if (!content.value().same_shape(residual.value()))
    throw ShapeError("self_attention: content and residual shapes differ");
  const std::size_t C = content.value().cols();
  Var q = add_rowvec(matmul(content, p.wq), p.bq);
  Var k = add_rowvec(matmul(content, p.wk), p.bk);
  Var v = add_rowvec(matmul(content, p.wv), p.bv);
  Var scores = scalar_mul(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(C)));
  Var weights = softmax_rows(scores);
  Var weighted = add(residual, matmul(weights, v));
  return {weighted, weights};
}

inline std::pair<Var, Var> self_attention(const Var& fmap, const AttentionParams& p) {
  return self_attention(fmap, fmap, p);
}

namespace detail {

inline AttentionParams bind_attention(const BoundParams& params, const std::string& prefix) {
  return AttentionParams{params.at(prefix + ".wq"), params.at(prefix + ".bq"),
                         params.at(prefix + ".wk"), params.at(prefix + ".bk"),
                         params.at(prefix + ".wv"), params.at(prefix + ".bv")};
}

inline void add_attention_params(ParamStore& store, const std::string& prefix,
                                 std::size_t dim, Rng& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (const char* w : {".wq", ".wk", ".wv"}) {
    NdArray m({dim, dim});
    for (auto& x : m.data) x = scale * rng.normal();
    store.add(prefix + w, std::move(m));
  }
  for (const char* b : {".bq", ".bk", ".bv"}) store.add(prefix + b, NdArray({dim}));
}

/// Inverted dropout: zero with probability rate, scale survivors by
/// 1/(1-rate) so evaluation needs no correction.
inline Var dropout(const Var& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  NdArray mask(x.value().shape);
  const double keep = 1.0 - rate;
  for (auto& m : mask.data) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return mul(x, x.tape().constant(std::move(mask)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

inline void init_volume_params(ParamStore& store, const VolumeEncoderConfig& cfg,
                               Rng& rng) {
  cfg.validate();
  std::size_t c_in = 1;
  for (std::size_t s = 1; s <= 4; ++s) {
    const std::size_t c_out = cfg.stage_channels[s - 1];
    NdArray w({c_in, c_out});
    const double scale = 1.0 / std::sqrt(static_cast<double>(c_in));
    for (auto& x : w.data) x = scale * rng.normal();
    NdArray b({c_out});
    if (s == 1) {
      // Voxel values live in [0,1]; pick each unit's bias so its relu kink
      // lands inside that range (b = -w*u puts the kink at v = u). A bias
      // near zero would leave every first-stage unit linear or dead over the
      // data, which erases all intensity-distribution information.
      for (std::size_t j = 0; j < c_out; ++j)
        b.data[j] = -w.at(0, j) * rng.uniform(0.05, 0.95);
    } else {
      for (auto& x : b.data) x = 0.1 * rng.normal();
    }
    store.add("vol.stage" + std::to_string(s) + ".weight", std::move(w));
    store.add("vol.stage" + std::to_string(s) + ".bias", std::move(b));
    c_in = c_out;
  }
  detail::add_attention_params(store, "vol.attn", cfg.stage_channels[3], rng);

  // Projection head: affine -> relu -> affine, all widths equal to proj_dim.
  const std::size_t c4 = cfg.stage_channels[3];
  const double s1 = 1.0 / std::sqrt(static_cast<double>(c4));
  NdArray w1({c4, cfg.proj_dim});
  for (auto& x : w1.data) x = s1 * rng.normal();
  store.add("vol.head.w1", std::move(w1));
  NdArray vb1({cfg.proj_dim});
  for (auto& x : vb1.data) x = 0.01 * rng.normal();
  store.add("vol.head.b1", std::move(vb1));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.proj_dim));
  NdArray w2({cfg.proj_dim, cfg.proj_dim});
  for (auto& x : w2.data) x = s2 * rng.normal();
  store.add("vol.head.w2", std::move(w2));
  NdArray vb2({cfg.proj_dim});
  for (auto& x : vb2.data) x = 0.01 * rng.normal();
  store.add("vol.head.b2", std::move(vb2));
}

inline void init_report_params(ParamStore& store, const ReportEncoderConfig& cfg,
                               Rng& rng) {
  cfg.validate();
  NdArray embed({cfg.vocab_size + 1, cfg.embed_dim});
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  for (auto& x : embed.data) x = scale * rng.normal();
  store.add("txt.embed", std::move(embed));
  for (std::size_t l = 1; l <= cfg.num_layers; ++l)
    detail::add_attention_params(store, "txt.layer" + std::to_string(l), cfg.embed_dim,
                                 rng);

  const double s1 = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  NdArray w1({cfg.embed_dim, cfg.proj_dim});
  for (auto& x : w1.data) x = s1 * rng.normal();
  store.add("txt.head.w1", std::move(w1));
  NdArray tb1({cfg.proj_dim});
  for (auto& x : tb1.data) x = 0.01 * rng.normal();
  store.add("txt.head.b1", std::move(tb1));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.proj_dim));
  NdArray w2({cfg.proj_dim, cfg.proj_dim});
  for (auto& x : w2.data) x = s2 * rng.normal();
  store.add("txt.head.w2", std::move(w2));
  NdArray tb2({cfg.proj_dim});
  for (auto& x : tb2.data) x = 0.01 * rng.normal();
  store.add("txt.head.b2", std::move(tb2));
}

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

/// Runs the four-stage volume encoder. `dropout_rng` non-null enables
/// training-mode dropout after stages 1-3; the local tap observes the same
/// (dropped) features the next stage consumes.
inline EncoderOutput encode_volume(Tape& tape, const NdArray& volume,
                                   const VolumeEncoderConfig& cfg,
                                   const BoundParams& params,
                                   Rng* dropout_rng = nullptr) {
  cfg.validate();
  if (volume.shape !=
      std::vector<std::size_t>{cfg.input_dims[0], cfg.input_dims[1], cfg.input_dims[2]}) {
    throw ConfigError("volume shape " + volume.shape_str() + " does not match config (" +
                      std::to_string(cfg.input_dims[0]) + "x" +
                      std::to_string(cfg.input_dims[1]) + "x" +
                      std::to_string(cfg.input_dims[2]) + ")");
  }
  std::size_t D = cfg.input_dims[0], H = cfg.input_dims[1], W = cfg.input_dims[2];
  Var x = tape.constant(NdArray({D * H * W, 1}, volume.data));

  Var local_tap;
  for (std::size_t s = 1; s <= 4; ++s) {
    const std::string prefix = "vol.stage" + std::to_string(s);
    // Leaky so no input region can silence a whole stage (the cosine losses
    // need nonzero feature norms even for tiny channel counts), and smooth so
    // stage thresholds never put a slope jump inside the data range, which
    // would show up as noise in finite-difference gradient checks.
    x = leaky_softplus(add_rowvec(matmul(x, params.at(prefix + ".weight")),
                                  params.at(prefix + ".bias")),
                       0.1, 8.0);
    if (s <= 3) {
      x = pool_halve(x, D, H, W);
      D /= 2;
      H /= 2;
      W /= 2;
      if (dropout_rng) x = detail::dropout(x, cfg.dropout_rate, *dropout_rng);
    }
    if (s == cfg.local_tap_stage) local_tap = x;
  }

  // Attention scores and values come from a grid-normalized view of the final
  // map: stage features ride on a large bias-driven component shared by every
  // cell, and raw-feature logits would live at the scale of the tiny
  // cross-cell residue, pinning the softmax near uniform no matter what
  // training wants. The raw map stays in the residual path so the pooled
  // global rep keeps the per-cell feature averages the downstream classifier
  // reads; normalization only feeds the selection mechanism.
  auto [weighted, weights] = self_attention(instance_norm(x), x,
                                            detail::bind_attention(params, "vol.attn"));

  EncoderOutput out;
  out.global_rep = mean_rows(weighted);
  out.local_rep = local_tap;
  out.attn_weights = weights;
  out.has_attn = true;
  out.attn_grid = {D, H, W};
  return out;
}

/// Sinusoidal positional encoding table for a sequence of `n` positions.
inline NdArray sinusoidal_encoding(std::size_t n, std::size_t dim) {
  NdArray pe({n, dim});
  for (std::size_t pos = 0; pos < n; ++pos)
    for (std::size_t i = 0; i < dim; ++i) {
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(dim));
      pe.at(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

inline EncoderOutput encode_report(Tape& tape, const std::vector<std::size_t>& tokens,
                                   const ReportEncoderConfig& cfg,
                                   const BoundParams& params) {
  cfg.validate();
  if (tokens.empty()) throw DomainError("report has no tokens");
  if (tokens.size() > cfg.max_tokens)
    throw ConfigError("report has " + std::to_string(tokens.size()) +
                      " tokens, max is " + std::to_string(cfg.max_tokens));
  for (auto t : tokens) {
    if (t >= cfg.vocab_size)
      throw ConfigError("vocabulary error: token id " + std::to_string(t) +
                        " outside vocabulary of size " + std::to_string(cfg.vocab_size));
  }

  std::vector<std::size_t> ids;
  ids.reserve(tokens.size() + 1);
  ids.push_back(cfg.aggregate_id());
  ids.insert(ids.end(), tokens.begin(), tokens.end());

  Var x = gather_rows(params.at("txt.embed"), ids);
  if (cfg.positional_encodings) {
    Var pe = tape.constant(sinusoidal_encoding(ids.size(), cfg.embed_dim));
    x = add(x, pe);
  }
  for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
    auto [weighted, weights] =
        self_attention(x, detail::bind_attention(params, "txt.layer" + std::to_string(l)));
    x = weighted;
  }

  EncoderOutput out;
  out.global_rep = row(x, 0);
  out.local_rep = slice_rows(x, 1, ids.size());
  out.has_attn = false;
  return out;
}

/// Shared projection head: affine -> relu -> affine on a single vector.
inline Var projection_head(const Var& rep, const Var& w1, const Var& b1, const Var& w2,
                           const Var& b2) {
  require_rank(rep.value(), 1, "projection_head");
  Var r = reshape(rep, {1, rep.value().numel()});
  Var h = relu(add_rowvec(matmul(r, w1), b1));
  Var o = add_rowvec(matmul(h, w2), b2);
  return reshape(o, {o.value().cols()});
}

inline Var project_global(const BoundParams& params, const std::string& head_prefix,
                          const Var& rep) {
  return projection_head(rep, params.at(head_prefix + ".w1"), params.at(head_prefix + ".b1"),
                         params.at(head_prefix + ".w2"), params.at(head_prefix + ".b2"));
}

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

/// Freezes the first `n_stages` volume blocks (their affine parameters).
inline std::size_t freeze_volume_stages(ParamStore& store, std::size_t n_stages) {
  if (n_stages > 4) throw ConfigError("volume encoder has 4 stages");
  std::size_t n = 0;
  for (std::size_t s = 1; s <= n_stages; ++s)
    n += store.freeze_prefix("vol.stage" + std::to_string(s) + ".");
  return n;
}

/// Freezes the embedding table plus the first `cfg.frozen_prefix_layers`
/// attention blocks of the report encoder.
inline std::size_t freeze_report_prefix(ParamStore& store, const ReportEncoderConfig& cfg) {
  std::size_t n = store.freeze_prefix("txt.embed");
  for (std::size_t l = 1; l <= cfg.frozen_prefix_layers; ++l)
    n += store.freeze_prefix("txt.layer" + std::to_string(l) + ".");
  return n;
}

// ---------------------------------------------------------------------------
// Attention heatmap
// ---------------------------------------------------------------------------

/// Reduces the self-attention weight matrix to a volume heatmap: per-position
/// salience is the column mean (attention received), reshaped to the
/// attention grid, nearest-neighbor upsampled to target dims, then min-max
/// normalized to [0,1]. A constant salience map has no localization signal
/// and normalizes to all zeros.
inline NdArray extract_attention_heatmap(const EncoderOutput& out,
                                         const std::array<std::size_t, 3>& target_dims) {
  if (!out.has_attn)
    throw DomainError("heatmap requires a volume encoder output with attention weights");
  const NdArray& w = out.attn_weights.value();
  const std::size_t P = w.rows();
  const auto [gd, gh, gw] = out.attn_grid;
  if (gd * gh * gw != P) throw ShapeError("attention grid does not match weight matrix");
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t g = out.attn_grid[a];
    if (g == 0 || target_dims[a] % g != 0)
      throw ConfigError("target dims must be multiples of the attention grid");
  }

  std::vector<double> salience(P, 0.0);
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t j = 0; j < P; ++j) salience[j] += w.at(i, j);
  for (auto& s : salience) s /= static_cast<double>(P);

  double lo = salience[0], hi = salience[0];
  for (double s : salience) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }

  const std::size_t D = target_dims[0], H = target_dims[1], W = target_dims[2];
  NdArray heat({D, H, W});
  if (hi > lo) {
    const std::size_t fd = D / gd, fh = H / gh, fw = W / gw;
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t p = ((d / fd) * gh + h / fh) * gw + x / fw;
          heat.at(d, h, x) = (salience[p] - lo) / (hi - lo);
        }
  }
  return heat;
}

}  // namespace vralign
