#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "textseg/errors.hpp"
#include "textseg/fusion.hpp"
#include "textseg/tensor.hpp"
#include "textseg/text.hpp"

namespace textseg {

// Forward mode: image_only bypasses fusion entirely (f_joint := f_i).
enum class FusionMode { image_only, dot_sum, t2i_once, bidirectional };

inline const char* fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::image_only: return "image_only";
    case FusionMode::dot_sum: return "dot_sum";
    case FusionMode::t2i_once: return "t2i_once";
    case FusionMode::bidirectional: return "bidirectional";
  }
  return "?";
}

inline FusionMode fusion_mode_from(const std::string& s) {
  if (s == "image_only") return FusionMode::image_only;
  if (s == "dot_sum") return FusionMode::dot_sum;
  if (s == "t2i_once") return FusionMode::t2i_once;
  if (s == "bidirectional") return FusionMode::bidirectional;
  throw ConfigError("unknown fusion mode: " + s);
}

struct SegModelConfig {
  std::size_t in_channels = 4;
  std::size_t num_regions = 3;
  std::size_t input_size = 32;   // cubic edge S
  std::size_t depth = 3;         // stride 2^depth to the bottleneck
  std::size_t embed_dim = 32;    // bottleneck channels D
  std::vector<std::size_t> channels;  // per level; empty = derived

  void validate() const {
    if (embed_dim == 0 || depth == 0) {
      throw ConfigError("segnet: depth and embed_dim must be positive");
    }
    if (input_size % (std::size_t(1) << depth) != 0) {
      throw ConfigError("segnet: input size " + std::to_string(input_size) +
                        " not divisible by 2^depth");
    }
    if (!channels.empty() && (channels.size() != depth ||
                              channels.back() != embed_dim)) {
      throw ConfigError(
          "segnet: channel schedule must have one entry per level, last == "
          "embed_dim");
    }
  }

  // Encoder output channels per level; the last equals embed_dim.
  std::vector<std::size_t> level_channels() const {
    if (!channels.empty()) return channels;
    std::vector<std::size_t> out(depth);
    for (std::size_t l = 0; l < depth; ++l) {
      out[l] = std::max<std::size_t>(embed_dim >> (depth - 1 - l), 4);
    }
    out[depth - 1] = embed_dim;
    return out;
  }

  std::size_t bottleneck_side() const { return input_size >> depth; }
  std::size_t bottleneck_voxels() const {
    const std::size_t s = bottleneck_side();
    return s * s * s;
  }
};

struct ConvLayer {
  Tensor w, b;
  std::size_t stride = 1, pad = 1;

  static ConvLayer init(std::size_t cin, std::size_t cout, std::size_t k,
                        std::size_t stride, std::size_t pad, Rng& rng) {
    ConvLayer l;
    const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k * k));
    l.w = Tensor::randn({cout, cin, k, k, k}, rng, std, 0.0, true);
    l.b = Tensor::zeros({cout}, true);
    l.stride = stride;
    l.pad = pad;
    return l;
  }
};

// Plain strided-conv encoder / nearest-upsample decoder with skip
// concatenation; the fusion block sits at the flattened bottleneck.
struct SegModel {
  SegModelConfig cfg;
  FusionMode mode = FusionMode::bidirectional;
  std::vector<ConvLayer> enc;  // depth stride-2 convs
  std::vector<ConvLayer> dec;  // depth stride-1 convs, bottom-up order
  ConvLayer head;              // 1x1x1 conv to region logits
  TextEncoderParams text;
  FusionParams fusion;

  FusionConfig fusion_config() const {
    FusionConfig fc;
    fc.embed_dim = cfg.embed_dim;
    fc.scale_d = static_cast<double>(cfg.embed_dim);
    switch (mode) {
      case FusionMode::dot_sum: fc.variant = FusionVariant::dot_sum; break;
      case FusionMode::t2i_once: fc.variant = FusionVariant::t2i_once; break;
      default: fc.variant = FusionVariant::bidirectional; break;
    }
    return fc;
  }

  static std::size_t dec_out_channels(const std::vector<std::size_t>& lc,
                                      std::size_t level) {
    return std::max<std::size_t>(lc[level > 0 ? level - 1 : 0] / 2, 4);
  }

  static SegModel init(const SegModelConfig& cfg,
                       const TextEncoderConfig& text_cfg, FusionMode mode,
                       Rng& rng) {
    cfg.validate();
    if (text_cfg.out_dim != cfg.embed_dim) {
      throw ConfigError("text encoder out_dim must equal model embed_dim");
    }
    SegModel m;
    m.cfg = cfg;
    m.mode = mode;
    const auto lc = cfg.level_channels();
    std::size_t cin = cfg.in_channels;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      m.enc.push_back(ConvLayer::init(cin, lc[l], 3, 2, 1, rng));
      cin = lc[l];
    }
    // decoder from the bottleneck up; level l consumes the level-l skip
    std::size_t up_ch = cfg.embed_dim;
    m.dec.resize(cfg.depth);
    for (std::size_t l = cfg.depth; l-- > 0;) {
      const std::size_t skip_ch = l == 0 ? cfg.in_channels : lc[l - 1];
      const std::size_t out_ch = dec_out_channels(lc, l);
      m.dec[l] = ConvLayer::init(up_ch + skip_ch, out_ch, 3, 1, 1, rng);
      up_ch = out_ch;
    }
    m.head = ConvLayer::init(up_ch, cfg.num_regions, 1, 1, 0, rng);
    m.text = TextEncoderParams::init(text_cfg, rng);
    m.fusion = FusionParams::init(cfg.embed_dim, rng);
    return m;
  }

  // Stable parameter ordering for optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t l = 0; l < enc.size(); ++l) {
      out.emplace_back("enc" + std::to_string(l) + ".w", enc[l].w);
      out.emplace_back("enc" + std::to_string(l) + ".b", enc[l].b);
    }
    for (std::size_t l = 0; l < dec.size(); ++l) {
      out.emplace_back("dec" + std::to_string(l) + ".w", dec[l].w);
      out.emplace_back("dec" + std::to_string(l) + ".b", dec[l].b);
    }
    out.emplace_back("head.w", head.w);
    out.emplace_back("head.b", head.b);
    for (auto& kv : text.named_params("text")) out.push_back(kv);
    for (auto& kv : fusion.named_params("fusion")) out.push_back(kv);
    return out;
  }
};

struct EncodeResult {
  Tensor f_i;                 // [B, N, D]
  std::vector<Tensor> skips;  // level 0 = input resolution
  std::size_t side = 0;       // bottleneck edge
};

inline EncodeResult encode(const SegModel& m, const Tensor& images) {
  if (images.rank() != 5 || images.dim(1) != m.cfg.in_channels ||
      images.dim(2) != m.cfg.input_size || images.dim(3) != m.cfg.input_size ||
      images.dim(4) != m.cfg.input_size) {
    throw ShapeError("encode: expected [B," +
                     std::to_string(m.cfg.in_channels) + "," +
                     std::to_string(m.cfg.input_size) + "^3], got " +
                     shape_str(images.shape()));
  }
  EncodeResult r;
  Tensor h = images;
  r.skips.push_back(h);
  for (std::size_t l = 0; l < m.enc.size(); ++l) {
    h = relu(conv3d(h, m.enc[l].w, m.enc[l].b, m.enc[l].stride, m.enc[l].pad));
    if (l + 1 < m.enc.size()) r.skips.push_back(h);
  }
  r.side = m.cfg.bottleneck_side();
  r.f_i = voxels_to_rows(h);
  return r;
}

inline Tensor decode(const SegModel& m, const Tensor& f_joint,
                     const std::vector<Tensor>& skips, std::size_t side) {
  if (f_joint.rank() != 3 || f_joint.dim(1) != side * side * side ||
      f_joint.dim(2) != m.cfg.embed_dim) {
    throw ShapeError("decode: f_joint must be [B," +
                     std::to_string(side * side * side) + "," +
                     std::to_string(m.cfg.embed_dim) + "], got " +
                     shape_str(f_joint.shape()));
  }
  Tensor h = rows_to_voxels(f_joint, side, side, side);
  for (std::size_t l = m.dec.size(); l-- > 0;) {
    h = upsample_nearest2x(h);
    h = concat(h, skips[l], 1);
    h = relu(conv3d(h, m.dec[l].w, m.dec[l].b, m.dec[l].stride, m.dec[l].pad));
  }
  return conv3d(h, m.head.w, m.head.b, 1, 0);
}

// encode -> encode_text -> fuse -> decode. tokens are ignored in image_only
// mode (the bypass contract).
inline Tensor forward(const SegModel& m, const Tensor& images,
                      const std::vector<TokenSequence>& tokens) {
  EncodeResult er = encode(m, images);
  const std::size_t batch = images.dim(0);
  Tensor f_joint;
  if (m.mode == FusionMode::image_only) {
    f_joint = er.f_i;
  } else {
    if (tokens.size() != batch) {
      throw ShapeError("forward: got " + std::to_string(tokens.size()) +
                       " token sequences for batch " + std::to_string(batch));
    }
    const FusionConfig fc = m.fusion_config();
    std::vector<Tensor> fused;
    fused.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      Tensor f_t = encode_text(tokens[b], m.text);
      Tensor f_i_b = batch_slice(er.f_i, b);
      fused.push_back(fuse(f_t, f_i_b, m.fusion, fc, tokens[b].mask_vector()));
    }
    f_joint = batch_stack(fused);
  }
  return decode(m, f_joint, er.skips, er.side);
}

// Soft Dice over per-region sigmoid probabilities:
//   1 - mean_{b,r} (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)
inline constexpr double kDiceEps = 1e-5;

inline Tensor soft_dice_loss(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape() || logits.rank() < 2) {
    throw ShapeError("soft_dice_loss: shape mismatch " +
                     shape_str(logits.shape()) + " vs " +
                     shape_str(targets.shape()));
  }
  const std::size_t rows = logits.dim(0) * logits.dim(1);
  const std::size_t vol = logits.numel() / rows;
  Tensor p = reshape(sigmoid(logits), {rows, vol});
  Tensor g = reshape(targets, {rows, vol});
  Tensor inter = row_sum(mul(p, g));
  Tensor sums = add(row_sum(p), row_sum(g));
  Tensor dice_per = div(add_scalar(scale(inter, 2.0), kDiceEps),
                        add_scalar(sums, kDiceEps));
  return sub(Tensor::scalar(1.0), mean_all(dice_per));
}

}  // namespace textseg
