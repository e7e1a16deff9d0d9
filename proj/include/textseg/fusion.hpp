#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "textseg/errors.hpp"
#include "textseg/tensor.hpp"

namespace textseg {

// Text/image feature fusion at the segmentation bottleneck. Three variants:
//   dot_sum        parameter-free pooled-text gating baseline
//   t2i_once       one cross-attention step, image voxels as queries
//   bidirectional  text queries refine image-derived values, then image
//                  voxels attend over the refined rows
// All variants contract to: output shape == f_i shape.

enum class FusionVariant { dot_sum, t2i_once, bidirectional };

inline const char* fusion_variant_name(FusionVariant v) {
  switch (v) {
    case FusionVariant::dot_sum: return "dot_sum";
    case FusionVariant::t2i_once: return "t2i_once";
    case FusionVariant::bidirectional: return "bidirectional";
  }
  return "?";
}

inline FusionVariant fusion_variant_from(const std::string& s) {
  if (s == "dot_sum") return FusionVariant::dot_sum;
  if (s == "t2i_once") return FusionVariant::t2i_once;
  if (s == "bidirectional") return FusionVariant::bidirectional;
  throw ConfigError("unknown fusion variant: " + s);
}

struct FusionConfig {
  FusionVariant variant = FusionVariant::bidirectional;
  std::size_t embed_dim = 32;
  // Softmax denominator is sqrt(scale_d); defaults to the embed dim.
  double scale_d = 0.0;

  double effective_scale() const {
    return scale_d > 0.0 ? scale_d : static_cast<double>(embed_dim);
  }
};

// Post-attention transform: normalization, linear D x D, normalization.
struct MBlockParams {
  Tensor norm1_gamma, norm1_beta;
  Tensor lin_w, lin_b;
  Tensor norm2_gamma, norm2_beta;

  static MBlockParams init(std::size_t d, Rng& rng) {
    MBlockParams p;
    p.norm1_gamma = Tensor::ones({d}, true);
    p.norm1_beta = Tensor::zeros({d}, true);
    p.lin_w = Tensor::randn({d, d}, rng,
                            std::sqrt(2.0 / static_cast<double>(2 * d)), 0.0,
                            true);
    p.lin_b = Tensor::zeros({d}, true);
    p.norm2_gamma = Tensor::ones({d}, true);
    p.norm2_beta = Tensor::zeros({d}, true);
    return p;
  }

  static MBlockParams identity(std::size_t d) {
    MBlockParams p;
    p.norm1_gamma = Tensor::ones({d});
    p.norm1_beta = Tensor::zeros({d});
    p.lin_w = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) p.lin_w.set({i, i}, 1.0);
    p.lin_b = Tensor::zeros({d});
    p.norm2_gamma = Tensor::ones({d});
    p.norm2_beta = Tensor::zeros({d});
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named_params(
      const std::string& prefix) const {
    return {{prefix + ".norm1_gamma", norm1_gamma},
            {prefix + ".norm1_beta", norm1_beta},
            {prefix + ".lin_w", lin_w},
            {prefix + ".lin_b", lin_b},
            {prefix + ".norm2_gamma", norm2_gamma},
            {prefix + ".norm2_beta", norm2_beta}};
  }
};

// Q/K/V projections for both attention stages plus the M / M' blocks.
// dot_sum uses none of these; t2i_once uses only the unprimed set and m.
struct FusionParams {
  Tensor w_q, w_k, w_v;
  MBlockParams m;
  Tensor w_q2, w_k2, w_v2;
  MBlockParams m2;

  static FusionParams init(std::size_t d, Rng& rng) {
    const double std = std::sqrt(1.0 / static_cast<double>(d));
    FusionParams p;
    p.w_q = Tensor::randn({d, d}, rng, std, 0.0, true);
    p.w_k = Tensor::randn({d, d}, rng, std, 0.0, true);
    p.w_v = Tensor::randn({d, d}, rng, std, 0.0, true);
    p.m = MBlockParams::init(d, rng);
    p.w_q2 = Tensor::randn({d, d}, rng, std, 0.0, true);
    p.w_k2 = Tensor::randn({d, d}, rng, std, 0.0, true);
    p.w_v2 = Tensor::randn({d, d}, rng, std, 0.0, true);
    p.m2 = MBlockParams::init(d, rng);
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named_params(
      const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out = {
        {prefix + ".w_q", w_q}, {prefix + ".w_k", w_k}, {prefix + ".w_v", w_v}};
    for (auto& kv : m.named_params(prefix + ".m")) out.push_back(kv);
    out.emplace_back(prefix + ".w_q2", w_q2);
    out.emplace_back(prefix + ".w_k2", w_k2);
    out.emplace_back(prefix + ".w_v2", w_v2);
    for (auto& kv : m2.named_params(prefix + ".m2")) out.push_back(kv);
    return out;
  }
};

inline constexpr double kLayerNormEps = 1e-5;

inline Tensor m_block(const Tensor& x, const MBlockParams& p,
                      double eps = kLayerNormEps) {
  Tensor h = layer_norm(x, p.norm1_gamma, p.norm1_beta, eps);
  h = linear(h, p.lin_w, p.lin_b);
  return layer_norm(h, p.norm2_gamma, p.norm2_beta, eps);
}

// Single-head scaled dot-product cross-attention followed by the M block:
//   out = M(softmax(q_src Wq (kv_src Wk)^T / sqrt(d)) kv_src Wv)
// kv_mask (when non-empty) removes keys from the softmax entirely.
inline Tensor cross_attention(const Tensor& q_src, const Tensor& kv_src,
                              const Tensor& w_q, const Tensor& w_k,
                              const Tensor& w_v, const MBlockParams& m,
                              double scale_d,
                              const std::vector<std::uint8_t>& kv_mask = {}) {
  if (q_src.rank() != 2 || kv_src.rank() != 2 ||
      q_src.dim(1) != kv_src.dim(1)) {
    throw ShapeError("cross_attention: incompatible " +
                     shape_str(q_src.shape()) + " and " +
                     shape_str(kv_src.shape()));
  }
  Tensor q = matmul(q_src, w_q);
  Tensor k = matmul(kv_src, w_k);
  Tensor v = matmul(kv_src, w_v);
  Tensor scores = scale(matmul(q, transpose2d(k)), 1.0 / std::sqrt(scale_d));
  Tensor attn = softmax_rows(scores, kv_mask);
  return m_block(matmul(attn, v), m);
}

// Eqs-style two-stage fusion. Stage 1: text rows query image voxels,
// producing refined rows f_i' (one per token, padded rows included).
// Stage 2: image voxels query f_i', with padded token rows masked out of the
// keys, producing f_joint with the shape of f_i.
inline Tensor fuse_bidirectional(const Tensor& f_t, const Tensor& f_i,
                                 const FusionParams& p, const FusionConfig& cfg,
                                 const std::vector<std::uint8_t>& text_mask) {
  Tensor f_i_refined = cross_attention(f_t, f_i, p.w_q, p.w_k, p.w_v, p.m,
                                       cfg.effective_scale());
  return cross_attention(f_i, f_i_refined, p.w_q2, p.w_k2, p.w_v2, p.m2,
                         cfg.effective_scale(), text_mask);
}

// One-step ablation: image voxels query the text rows directly.
inline Tensor fuse_t2i_once(const Tensor& f_t, const Tensor& f_i,
                            const FusionParams& p, const FusionConfig& cfg,
                            const std::vector<std::uint8_t>& text_mask) {
  return cross_attention(f_i, f_t, p.w_q, p.w_k, p.w_v, p.m,
                         cfg.effective_scale(), text_mask);
}

// Parameter-free baseline: pooled text gates the image rows,
//   f_joint[v] = f_i[v] + f_i[v] * mean_masked(f_t).
inline Tensor fuse_dot_sum(const Tensor& f_t, const Tensor& f_i,
                           const std::vector<std::uint8_t>& text_mask) {
  Tensor pooled = masked_mean_rows(f_t, text_mask);
  return add(f_i, mul(f_i, pooled));
}

inline Tensor fuse(const Tensor& f_t, const Tensor& f_i, const FusionParams& p,
                   const FusionConfig& cfg,
                   const std::vector<std::uint8_t>& text_mask) {
  switch (cfg.variant) {
    case FusionVariant::dot_sum:
      return fuse_dot_sum(f_t, f_i, text_mask);
    case FusionVariant::t2i_once:
      return fuse_t2i_once(f_t, f_i, p, cfg, text_mask);
    case FusionVariant::bidirectional:
      return fuse_bidirectional(f_t, f_i, p, cfg, text_mask);
  }
  throw ContractError("fuse: bad variant");
}

}  // namespace textseg
