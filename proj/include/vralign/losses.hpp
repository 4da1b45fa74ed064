#pragma once

#include <limits>
#include <string>
#include <vector>

#include "vralign/alignment.hpp"
#include "vralign/autodiff.hpp"
#include "vralign/params.hpp"
#include "vralign/rng.hpp"

namespace vralign {

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

struct TripletConfig {
  double margin = 0.25;
  double location_coef = 0.5;
  // When false, the location term is disabled: every negative counts as a
  // different-location one (ablation switch).
  bool use_location = true;

  void validate() const {
    if (margin <= 0.0) throw ConfigError("triplet margin must be positive");
    if (location_coef <= 0.0 || location_coef >= 1.0)
      throw ConfigError("location coefficient must lie in (0, 1)");
  }
};

enum class SamplerKind { random, semi_hard, hard };

struct NegativeSamplingStrategy {
  SamplerKind kind = SamplerKind::semi_hard;
  std::size_t sample_size = 2;  // candidates drawn for semi-hard

  static NegativeSamplingStrategy parse(const std::string& text) {
    NegativeSamplingStrategy s;
    if (text == "random") {
      s.kind = SamplerKind::random;
    } else if (text == "hard") {
      s.kind = SamplerKind::hard;
    } else if (text.rfind("semihard", 0) == 0) {
      s.kind = SamplerKind::semi_hard;
      if (text.size() > 8) {
        if (text[8] != ':') throw ConfigError("bad sampling strategy: " + text);
        const std::string num = text.substr(9);
        if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos)
          throw ConfigError("bad sampling strategy: " + text);
        s.sample_size = std::stoul(num);
      }
    } else {
      throw ConfigError("unknown sampling strategy: " + text +
                        " (expected random | semihard[:s] | hard)");
    }
    if (s.sample_size == 0) throw ConfigError("sampling size must be at least 1");
    return s;
  }

  std::string str() const {
    switch (kind) {
      case SamplerKind::random: return "random";
      case SamplerKind::hard: return "hard";
      case SamplerKind::semi_hard: return "semihard:" + std::to_string(sample_size);
    }
    return "?";
  }
};

/// A batch of matched projected global representations. Row j of `img` and
/// row j of `txt` describe the same patient.
struct GlobalBatch {
  Var img;  // [n x d]
  Var txt;  // [n x d]
  std::vector<int> locations;

  std::size_t size() const { return locations.size(); }

  void validate() const {
    require_rank(img.value(), 2, "global batch");
    require_rank(txt.value(), 2, "global batch");
    if (img.value().rows() != locations.size() || txt.value().rows() != locations.size())
      throw ShapeError("global batch: rows and location labels disagree");
    if (img.value().cols() != txt.value().cols())
      throw ShapeError("global batch: modality dims differ");
  }
};

inline void init_loss_weights(ParamStore& store) {
  store.add("loss.alpha_raw", NdArray::scalar(1.0));
  store.add("loss.beta_raw", NdArray::scalar(1.0));
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

/// Picks a negative index != anchor_idx. Distances are cosine distances from
/// the anchor's own representation to the opposite modality's rows (plain
/// values, no tape). Ties break to the lowest index so runs are reproducible.
inline std::size_t sample_negative(std::size_t anchor_idx, const NdArray& anchor_reps,
                                   const NdArray& opp_reps,
                                   const NegativeSamplingStrategy& strategy, Rng& rng) {
  require_rank(anchor_reps, 2, "sample_negative");
  require_rank(opp_reps, 2, "sample_negative");
  const std::size_t n = opp_reps.rows();
  if (n < 2) throw ConfigError("batch too small: need at least 2 pairs to sample a negative");
  if (anchor_idx >= anchor_reps.rows()) throw ShapeError("sample_negative: anchor out of range");

  NdArray anchor({anchor_reps.cols()});
  std::copy(anchor_reps.data.begin() + anchor_idx * anchor_reps.cols(),
            anchor_reps.data.begin() + (anchor_idx + 1) * anchor_reps.cols(),
            anchor.data.begin());
  NdArray cand({opp_reps.cols()});
  auto distance_to = [&](std::size_t q) {
    std::copy(opp_reps.data.begin() + q * opp_reps.cols(),
              opp_reps.data.begin() + (q + 1) * opp_reps.cols(), cand.data.begin());
    return cosine_distance_value(anchor, cand);
  };

  switch (strategy.kind) {
    case SamplerKind::random: {
      const std::size_t r = rng.below(n - 1);
      return r >= anchor_idx ? r + 1 : r;
    }
    case SamplerKind::hard: {
      std::size_t best = anchor_idx == 0 ? 1 : 0;
      double best_d = distance_to(best);
      for (std::size_t q = best + 1; q < n; ++q) {
        if (q == anchor_idx) continue;
        const double d = distance_to(q);
        if (d < best_d) {
          best_d = d;
          best = q;
        }
      }
      return best;
    }
    case SamplerKind::semi_hard: {
      const std::size_t s = strategy.sample_size;
      if (s > n - 1)
        throw ConfigError("sampling size " + std::to_string(s) + " exceeds batch-1 (" +
                          std::to_string(n - 1) + ")");
      std::vector<std::size_t> others;
      others.reserve(n - 1);
      for (std::size_t q = 0; q < n; ++q)
        if (q != anchor_idx) others.push_back(q);
      // Partial Fisher-Yates: the first s entries are a uniform sample
      // without replacement.
      for (std::size_t i = 0; i < s; ++i) {
        const std::size_t j = i + rng.below(others.size() - i);
        std::swap(others[i], others[j]);
      }
      std::size_t best = others[0];
      double best_d = distance_to(best);
      for (std::size_t i = 1; i < s; ++i) {
        const double d = distance_to(others[i]);
        if (d < best_d || (d == best_d && others[i] < best)) {
          best_d = d;
          best = others[i];
        }
      }
      for (std::size_t i = 0; i < s; ++i) {
        if (best_d > distance_to(others[i]))
          throw Error("semi-hard sampler invariant violated");
      }
      return best;
    }
  }
  throw Error("sample_negative: unreachable");
}

/// One negative per direction per batch item: index [0][j] is the negative
/// pair for the image-anchored term of item j, index [1][j] for the
/// text-anchored term. Draw order is j-major, image direction first.
struct SampledNegatives {
  std::vector<std::size_t> img_dir;
  std::vector<std::size_t> txt_dir;
};

inline SampledNegatives sample_batch_negatives(const GlobalBatch& batch,
                                               const NegativeSamplingStrategy& strategy,
                                               Rng& rng) {
  SampledNegatives neg;
  const std::size_t n = batch.size();
  neg.img_dir.resize(n);
  neg.txt_dir.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    neg.img_dir[j] = sample_negative(j, batch.img.value(), batch.txt.value(), strategy, rng);
    neg.txt_dir[j] = sample_negative(j, batch.txt.value(), batch.img.value(), strategy, rng);
  }
  return neg;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace detail {

inline Var hinge(const Var& x) { return clamp_min(x, 0.0); }

/// max(0, (1-cos(a,p)) - coeff*(1-cos(a,n)) + m)
inline Var triplet_term(Tape& tape, const Var& a, const Var& p, const Var& n, double coeff,
                        double margin) {
  Var d_pos = cosine_distance(a, p);
  Var d_neg = cosine_distance(a, n);
  Var m = tape.constant(NdArray::scalar(margin));
  return hinge(add(sub(d_pos, scalar_mul(d_neg, coeff)), m));
}

}  // namespace detail

/// Location-weighted triplet loss over both anchor directions with the given
/// per-direction negative indices. The negative's distance coefficient is the
/// location coefficient when anchor and negative pairs share a location label
/// (and locations are enabled), else 1.
inline Var global_loss_with_negatives(Tape& tape, const GlobalBatch& batch,
                                      const TripletConfig& cfg, const SampledNegatives& neg) {
  cfg.validate();
  batch.validate();
  const std::size_t n = batch.size();
  if (n < 2) throw ConfigError("batch too small: global loss needs at least 2 pairs");
  if (neg.img_dir.size() != n || neg.txt_dir.size() != n)
    throw ShapeError("global loss: negative index count mismatch");

  Var total = tape.constant(NdArray::scalar(0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (int dir = 0; dir < 2; ++dir) {
      const bool img_anchor = dir == 0;
      const std::size_t q = img_anchor ? neg.img_dir[j] : neg.txt_dir[j];
      if (q == j || q >= n) throw ShapeError("global loss: bad negative index");
      Var a = img_anchor ? row(batch.img, j) : row(batch.txt, j);
      Var p = img_anchor ? row(batch.txt, j) : row(batch.img, j);
      Var nv = img_anchor ? row(batch.txt, q) : row(batch.img, q);
      const bool same_loc = cfg.use_location && batch.locations[j] == batch.locations[q];
      const double coeff = same_loc ? cfg.location_coef : 1.0;
      total = add(total, detail::triplet_term(tape, a, p, nv, coeff, cfg.margin));
    }
  }
  return total;
}

inline Var global_loss(Tape& tape, const GlobalBatch& batch, const TripletConfig& cfg,
                       const NegativeSamplingStrategy& strategy, Rng& rng) {
  return global_loss_with_negatives(tape, batch, cfg,
                                    sample_batch_negatives(batch, strategy, rng));
}

/// Mean-pooled local representations of one batch item, in the shared dim.
struct PooledLocal {
  Var img_orig;
  Var img_weighted;
  Var txt_orig;
  Var txt_weighted;
};

inline PooledLocal pool_aligned(const AlignedLocal& aligned) {
  PooledLocal p;
  p.img_orig = mean_rows(aligned.img_proj);
  p.img_weighted = mean_rows(aligned.img_weighted);
  p.txt_orig = mean_rows(aligned.txt_proj);
  p.txt_weighted = mean_rows(aligned.txt_weighted);
  return p;
}

/// Negative pair index per batch item for the local loss, drawn with the same
/// strategy as the global loss. The pair-level distance is measured between
/// the pooled projected original image rep (anchor) and the pooled projected
/// original text reps (candidates), mirroring the cross-modal semantics of
/// the global sampler. One index per item is shared by all four local terms.
inline std::vector<std::size_t> sample_local_negatives(const std::vector<PooledLocal>& batch,
                                                       const NegativeSamplingStrategy& strategy,
                                                       Rng& rng) {
  const std::size_t n = batch.size();
  if (n < 2) throw ConfigError("batch too small: local loss needs at least 2 pairs");
  const std::size_t d = batch[0].img_orig.value().numel();
  NdArray img({n, d}), txt({n, d});
  for (std::size_t j = 0; j < n; ++j) {
    std::copy(batch[j].img_orig.value().data.begin(), batch[j].img_orig.value().data.end(),
              img.data.begin() + j * d);
    std::copy(batch[j].txt_orig.value().data.begin(), batch[j].txt_orig.value().data.end(),
              txt.data.begin() + j * d);
  }
  std::vector<std::size_t> neg(n);
  for (std::size_t j = 0; j < n; ++j) neg[j] = sample_negative(j, img, txt, strategy, rng);
  return neg;
}

/// Alignment triplet loss: for each modality and each anchoring direction
/// (original anchors its weighted counterpart, and vice versa), a plain
/// triplet hinge against the negative pair's counterpart representation.
inline Var local_loss_with_negatives(Tape& tape, const std::vector<PooledLocal>& batch,
                                     const TripletConfig& cfg,
                                     const std::vector<std::size_t>& neg) {
  cfg.validate();
  const std::size_t n = batch.size();
  if (n < 2) throw ConfigError("batch too small: local loss needs at least 2 pairs");
  if (neg.size() != n) throw ShapeError("local loss: negative index count mismatch");

  Var total = tape.constant(NdArray::scalar(0.0));
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t q = neg[j];
    if (q == j || q >= n) throw ShapeError("local loss: bad negative index");
    const PooledLocal& self = batch[j];
    const PooledLocal& other = batch[q];
    struct Term {
      const Var *a, *p, *nv;
    };
    const Term terms[4] = {
        {&self.img_orig, &self.img_weighted, &other.img_weighted},
        {&self.img_weighted, &self.img_orig, &other.img_orig},
        {&self.txt_orig, &self.txt_weighted, &other.txt_weighted},
        {&self.txt_weighted, &self.txt_orig, &other.txt_orig},
    };
    for (const Term& t : terms)
      total = add(total, detail::triplet_term(tape, *t.a, *t.p, *t.nv, 1.0, cfg.margin));
  }
  return total;
}

inline Var local_loss(Tape& tape, const std::vector<PooledLocal>& batch,
                      const TripletConfig& cfg, const NegativeSamplingStrategy& strategy,
                      Rng& rng) {
  return local_loss_with_negatives(tape, batch, cfg,
                                   sample_local_negatives(batch, strategy, rng));
}

/// alpha * g + beta * l with trainable weights clamped to >= 0.05 so neither
/// term can be silenced entirely.
inline Var total_loss(Tape& tape, const Var& g, const Var& l, const BoundParams& params) {
  (void)tape;
  Var alpha = clamp_min(params.at("loss.alpha_raw"), 0.05);
  Var beta = clamp_min(params.at("loss.beta_raw"), 0.05);
  return add(mul(alpha, g), mul(beta, l));
}

/// Margin-based pairwise contrastive objective (ablation): pull the matched
/// pair together, push every other batch member beyond the margin.
inline Var pairwise_contrastive_loss(Tape& tape, const GlobalBatch& batch, double margin) {
  batch.validate();
  if (margin <= 0.0) throw ConfigError("contrastive margin must be positive");
  const std::size_t n = batch.size();
  if (n < 2) throw ConfigError("batch too small: contrastive loss needs at least 2 pairs");

  Var total = tape.constant(NdArray::scalar(0.0));
  Var m = tape.constant(NdArray::scalar(margin));
  for (std::size_t j = 0; j < n; ++j) {
    for (int dir = 0; dir < 2; ++dir) {
      const bool img_anchor = dir == 0;
      Var a = img_anchor ? row(batch.img, j) : row(batch.txt, j);
      Var p = img_anchor ? row(batch.txt, j) : row(batch.img, j);
      total = add(total, cosine_distance(a, p));
      for (std::size_t q = 0; q < n; ++q) {
        if (q == j) continue;
        Var nv = img_anchor ? row(batch.txt, q) : row(batch.img, q);
        total = add(total, detail::hinge(sub(m, cosine_distance(a, nv))));
      }
    }
  }
  return total;
}

}  // namespace vralign
