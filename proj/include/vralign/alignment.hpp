#pragma once

#include <cmath>
#include <string>

#include "vralign/autodiff.hpp"
#include "vralign/params.hpp"
#include "vralign/rng.hpp"

namespace vralign {

/// Linear (bias-free) maps into the shared alignment dimension.
struct CrossAttentionParams {
  Var wq;  // [dq x d]
  Var wk;  // [dk x d]
  Var wv;  // [dk x d]
};

struct CrossAttentionOutput {
  Var scores;           // [Nq x Nk], row-stochastic
  Var weighted_query;   // [Nq x d], scores . V
  Var projected_query;  // [Nq x d], the Q projection of the query rows
};

/// Attention of query rows over key/value rows:
/// scores = softmax(QK^T / sqrt(d)), weighted-query = scores . V.
inline CrossAttentionOutput cross_attention(const Var& query_rep, const Var& kv_rep,
                                            const CrossAttentionParams& p) {
  require_rank(query_rep.value(), 2, "cross_attention");
  require_rank(kv_rep.value(), 2, "cross_attention");
  const std::size_t d = p.wq.value().cols();
  Var q = matmul(query_rep, p.wq);
  Var k = matmul(kv_rep, p.wk);
  Var v = matmul(kv_rep, p.wv);
  Var scores =
      softmax_rows(scalar_mul(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d))));
  CrossAttentionOutput out;
  out.scores = scores;
  out.weighted_query = matmul(scores, v);
  out.projected_query = q;
  return out;
}

inline void init_cross_attention_params(ParamStore& store, std::size_t img_channels,
                                        std::size_t txt_channels, std::size_t align_dim,
                                        Rng& rng) {
  auto make = [&](std::size_t rows) {
    NdArray m({rows, align_dim});
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (auto& x : m.data) x = scale * rng.normal();
    return m;
  };
  // Image-as-query module attends over text keys/values; text-as-query mirrors it.
  store.add("xattn.img.wq", make(img_channels));
  store.add("xattn.img.wk", make(txt_channels));
  store.add("xattn.img.wv", make(txt_channels));
  store.add("xattn.txt.wq", make(txt_channels));
  store.add("xattn.txt.wk", make(img_channels));
  store.add("xattn.txt.wv", make(img_channels));
}

namespace detail {

inline CrossAttentionParams bind_cross_attention(const BoundParams& params,
                                                 const std::string& prefix) {
  return CrossAttentionParams{params.at(prefix + ".wq"), params.at(prefix + ".wk"),
                              params.at(prefix + ".wv")};
}

}  // namespace detail

struct AlignedLocal {
  Var img_weighted;  // [Pi x d], image positions described through the text
  Var txt_weighted;  // [Pt x d], tokens described through the image
  Var img_proj;      // [Pi x d], projected original image positions
  Var txt_proj;      // [Pt x d], projected original tokens
};

/// Runs both cross-attention directions between the local representations of
/// a matched pair and also returns the projected originals, so losses compare
/// vectors living in the same space.
inline AlignedLocal align_local(const Var& img_local, const Var& txt_local,
                                const BoundParams& params) {
  CrossAttentionOutput img_dir =
      cross_attention(img_local, txt_local, detail::bind_cross_attention(params, "xattn.img"));
  CrossAttentionOutput txt_dir =
      cross_attention(txt_local, img_local, detail::bind_cross_attention(params, "xattn.txt"));
  AlignedLocal out;
  out.img_weighted = img_dir.weighted_query;
  out.txt_weighted = txt_dir.weighted_query;
  out.img_proj = img_dir.projected_query;
  out.txt_proj = txt_dir.projected_query;
  return out;
}

}  // namespace vralign
