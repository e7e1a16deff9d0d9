#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "textseg/fusion.hpp"
#include "textseg/grad_check.hpp"
#include "textseg/rng.hpp"
#include "textseg/segnet.hpp"
#include "textseg/tensor.hpp"
#include "textseg/text.hpp"

namespace textseg {

// Composite blocks evaluate losses of magnitude ~10-50, so the central
// difference carries roundoff noise of about |f|*u/eps ~ 1e-9. Entries with
// analytic gradients below kBlockMagFloor are therefore compared with an
// absolute tolerance; per-op checks keep the tighter 1e-6/1e-7 pair.
inline constexpr double kBlockMagFloor = 1e-5;
inline constexpr double kBlockAbsTol = 1e-8;

// Spot check: analytic gradients of the full model loss against central
// finite differences on a handful of randomly chosen parameter entries
// (checking every entry of every conv kernel would dominate the suite's
// runtime). Tolerance 1e-3; the composed graph is ~40 ops deep.
inline GradCheckReport full_model_spot_check(Rng& rng,
                                             std::size_t samples = 10,
                                             double eps = 1e-5,
                                             double tol = 1e-3) {
  SegModelConfig mcfg;
  mcfg.input_size = 8;
  mcfg.depth = 2;
  mcfg.embed_dim = 8;
  TextEncoderConfig tcfg;
  tcfg.vocab_size = 12;
  tcfg.embed_dim = 6;
  tcfg.hidden_dim = 6;
  tcfg.out_dim = 8;
  SegModel model = SegModel::init(mcfg, tcfg, FusionMode::bidirectional, rng);

  Tensor images = Tensor::randn({1, 4, 8, 8, 8}, rng, 0.5);
  Tensor targets = Tensor::zeros({1, 3, 8, 8, 8});
  for (double& v : targets.mutable_values())
    v = (rng.next_u64() & 1) ? 1.0 : 0.0;
  TokenSequence seq{};
  seq.ids.fill(kPadId);
  seq.mask.fill(0);
  const std::array<std::int32_t, 4> ids{2, 5, 7, 3};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    seq.ids[i] = ids[i];
    seq.mask[i] = 1;
  }
  seq.real_count = ids.size();

  auto fn = [&]() {
    return soft_dice_loss(forward(model, images, {seq}), targets);
  };

  auto params = model.named_params();
  for (auto& kv : params) kv.second.zero_grad();
  {
    Tape tape;
    tape.backward(fn());
  }
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : params) {
    analytic.push_back(t.has_grad() ? t.grad()
                                    : std::vector<double>(t.numel(), 0.0));
  }

  GradCheckReport rep;
  for (std::size_t k = 0; k < samples; ++k) {
    const std::size_t ti = rng.uniform_int(params.size());
    auto& [name, t] = params[ti];
    const std::size_t ei = rng.uniform_int(t.numel());
    auto& data = t.mutable_values();
    const double saved = data[ei];
    data[ei] = saved + eps;
    const double fp = fn().item();
    data[ei] = saved - eps;
    const double fm = fn().item();
    data[ei] = saved;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[ti][ei];
    const double mag = std::max(std::fabs(a), std::fabs(numeric));
    GradCheckEntry e;
    e.name = name + "[" + std::to_string(ei) + "]";
    e.checked = 1;
    if (mag < kBlockMagFloor) {
      e.max_abs_err = std::fabs(a - numeric);
      e.pass = e.max_abs_err < kBlockAbsTol;
    } else {
      e.max_rel_err = std::fabs(a - numeric) / mag;
      e.pass = e.max_rel_err < tol;
    }
    rep.worst_rel_err = std::max(rep.worst_rel_err, e.max_rel_err);
    rep.all_pass = rep.all_pass && e.pass;
    rep.params.push_back(std::move(e));
  }
  return rep;
}

// Finite-difference verification of every differentiable operation, the
// fusion blocks, the text MLP, the loss and a full-model spot check. Shared
// by the CLI `gradcheck` subcommand, the acceptance suite and the fault
// injection negative control.
inline GradCheckReport run_gradcheck_suite(bool include_full_model = true) {
  GradCheckReport suite;
  auto absorb = [&suite](const std::string& prefix,
                         const GradCheckReport& r) {
    for (auto e : r.params) {
      e.name = prefix + "." + e.name;
      suite.worst_rel_err = std::max(suite.worst_rel_err, e.max_rel_err);
      suite.all_pass = suite.all_pass && e.pass;
      suite.params.push_back(std::move(e));
    }
  };

  Rng rng(2024);

  // -- tensor-core ops ------------------------------------------------------
  {
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, 0.0, true);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0, 0.0, true);
    auto fn = [&]() { return sum_all(mul(matmul(a, b), matmul(a, b))); };
    absorb("matmul", grad_check(fn, {{"a", a}, {"b", b}}));
  }
  {
    Tensor a = Tensor::randn({2, 3}, rng, 1.0, 0.0, true);
    Tensor b = Tensor::randn({3}, rng, 1.0, 0.0, true);
    auto fn = [&]() {
      Tensor s = add(a, b);
      Tensor d = div(mul(s, sub(a, b)), add_scalar(mul(b, b), 1.0));
      return sum_all(d);
    };
    absorb("elementwise_broadcast", grad_check(fn, {{"a", a}, {"b", b}}));
  }
  {
    Tensor x = Tensor::randn({2, 5}, rng, 1.2, 0.1, true);
    auto fn = [&]() {
      return sum_all(add(gelu(x), add(relu(x), sigmoid(x))));
    };
    absorb("activations", grad_check(fn, {{"x", x}}, 1e-5, 1e-4));
  }
  {
    Tensor x = Tensor::randn({3, 4}, rng, 1.0, 0.0, true);
    auto fn = [&]() {
      Tensor y = softmax_rows(x);
      return sum_all(mul(y, y));
    };
    absorb("softmax_rows", grad_check(fn, {{"x", x}}));
  }
  {
    Tensor x = Tensor::randn({3, 4}, rng, 1.0, 0.0, true);
    std::vector<std::uint8_t> mask{1, 0, 1, 1};
    auto fn = [&]() {
      Tensor y = softmax_rows(x, mask);
      return sum_all(mul(y, y));
    };
    absorb("softmax_rows_masked", grad_check(fn, {{"x", x}}));
  }
  {
    Tensor x = Tensor::randn({3, 6}, rng, 1.0, 0.0, true);
    Tensor g = Tensor::randn({6}, rng, 0.5, 1.0, true);
    Tensor b = Tensor::randn({6}, rng, 0.5, 0.0, true);
    auto fn = [&]() {
      Tensor y = layer_norm(x, g, b, 1e-5);
      return sum_all(mul(y, y));
    };
    absorb("layer_norm", grad_check(fn, {{"x", x}, {"gamma", g}, {"beta", b}}));
  }
  {
    Tensor x = Tensor::randn({2, 3}, rng, 1.0, 0.0, true);
    Tensor w = Tensor::randn({3, 4}, rng, 1.0, 0.0, true);
    Tensor b = Tensor::randn({4}, rng, 1.0, 0.0, true);
    auto fn = [&]() { return sum_all(mul(linear(x, w, b), linear(x, w, b))); };
    absorb("linear", grad_check(fn, {{"x", x}, {"w", w}, {"b", b}}));
  }
  {
    Tensor x = Tensor::randn({1, 2, 4, 4, 4}, rng, 1.0, 0.0, true);
    Tensor w = Tensor::randn({3, 2, 3, 3, 3}, rng, 0.4, 0.0, true);
    Tensor b = Tensor::randn({3}, rng, 0.4, 0.0, true);
    auto fn = [&]() {
      Tensor y = conv3d(x, w, b, 2, 1);
      return sum_all(mul(y, y));
    };
    absorb("conv3d", grad_check(fn, {{"x", x}, {"w", w}, {"b", b}}));
  }
  {
    Tensor x = Tensor::randn({1, 2, 2, 2, 2}, rng, 1.0, 0.0, true);
    auto fn = [&]() {
      Tensor y = upsample_nearest2x(x);
      Tensor r = voxels_to_rows(y);
      return sum_all(mul(r, r));
    };
    absorb("upsample_and_rows", grad_check(fn, {{"x", x}}));
  }
  {
    Tensor t = Tensor::randn({5, 3}, rng, 1.0, 0.0, true);
    auto fn = [&]() {
      Tensor e = embedding_rows(t, {4, 0, 2, 2});
      return sum_all(mul(e, e));
    };
    absorb("embedding_rows", grad_check(fn, {{"table", t}}));
  }
  {
    Tensor a = Tensor::randn({2, 3}, rng, 1.0, 0.0, true);
    Tensor b = Tensor::randn({2, 2}, rng, 1.0, 0.0, true);
    auto fn = [&]() {
      Tensor c = concat(a, b, 1);
      Tensor r = reshape(c, {5, 2});
      return mean_all(mul(r, r));
    };
    absorb("concat_reshape", grad_check(fn, {{"a", a}, {"b", b}}));
  }
  {
    Tensor x = Tensor::randn({4, 3}, rng, 1.0, 0.0, true);
    std::vector<std::uint8_t> mask{1, 1, 0, 1};
    auto fn = [&]() {
      Tensor m = masked_mean_rows(x, mask);
      Tensor rs = row_sum(transpose2d(x));
      return sum_all(mul(m, add(m, rs)));
    };
    absorb("reductions", grad_check(fn, {{"x", x}}));
  }

  // -- m block and fusion variants -----------------------------------------
  {
    const std::size_t d = 4;
    MBlockParams m = MBlockParams::init(d, rng);
    Tensor x = Tensor::randn({3, d}, rng, 1.0, 0.0, true);
    auto fn = [&]() {
      Tensor y = m_block(x, m);
      return sum_all(mul(y, y));
    };
    auto params = m.named_params("m");
    params.emplace_back("x", x);
    absorb("m_block",
           grad_check(fn, params, 1e-5, 1e-4, kBlockAbsTol, kBlockMagFloor));
  }
  {
    const std::size_t d = 4;
    FusionParams fp = FusionParams::init(d, rng);
    Tensor f_t = Tensor::randn({5, d}, rng, 1.0, 0.0, true);
    Tensor f_i = Tensor::randn({8, d}, rng, 1.0, 0.0, true);
    std::vector<std::uint8_t> text_mask{1, 1, 1, 0, 0};
    for (auto variant : {FusionVariant::bidirectional, FusionVariant::t2i_once,
                         FusionVariant::dot_sum}) {
      FusionConfig cfg{variant, d, static_cast<double>(d)};
      auto fn = [&]() {
        Tensor out = fuse(f_t, f_i, fp, cfg, text_mask);
        return sum_all(mul(out, out));
      };
      auto params = fp.named_params("fusion");
      params.emplace_back("f_t", f_t);
      params.emplace_back("f_i", f_i);
      if (variant == FusionVariant::dot_sum) {
        // parameter-free; differentiate the inputs only
        params = {{"f_t", f_t}, {"f_i", f_i}};
      }
      absorb(fusion_variant_name(variant),
             grad_check(fn, params, 1e-5, 1e-4, kBlockAbsTol,
                        kBlockMagFloor));
    }
  }

  // -- text MLP --------------------------------------------------------------
  {
    TextEncoderConfig tcfg;
    tcfg.vocab_size = 7;
    tcfg.embed_dim = 5;
    tcfg.hidden_dim = 6;
    tcfg.out_dim = 4;
    TextEncoderParams tp = TextEncoderParams::init(tcfg, rng);
    TokenSequence seq{};
    seq.ids.fill(kPadId);
    seq.mask.fill(0);
    seq.ids[0] = 2;
    seq.ids[1] = 6;
    seq.ids[2] = 3;
    for (int i = 0; i < 3; ++i) seq.mask[i] = 1;
    seq.real_count = 3;
    auto fn = [&]() {
      Tensor f_t = encode_text(seq, tp);
      return sum_all(mul(f_t, f_t));
    };
    absorb("text_mlp", grad_check(fn, tp.named_params("text"), 1e-5, 1e-4,
                                  kBlockAbsTol, kBlockMagFloor));
  }

  // -- soft dice loss ---------------------------------------------------------
  {
    Tensor logits = Tensor::randn({1, 2, 2, 2, 2}, rng, 1.0, 0.0, true);
    Tensor targets = Tensor::zeros({1, 2, 2, 2, 2});
    for (std::size_t i = 0; i < targets.numel(); ++i)
      targets.mutable_values()[i] = (rng.next_u64() & 1) ? 1.0 : 0.0;
    auto fn = [&]() { return soft_dice_loss(logits, targets); };
    absorb("soft_dice_loss", grad_check(fn, {{"logits", logits}}, 1e-5, 1e-4,
                                        kBlockAbsTol, kBlockMagFloor));
  }

  // -- full model spot check ---------------------------------------------------
  if (include_full_model) {
    absorb("full_model", full_model_spot_check(rng));
  }

  return suite;
}

inline void print_gradcheck_report(const GradCheckReport& r, std::FILE* out) {
  for (const auto& e : r.params) {
    std::fprintf(out, "%-42s max_rel_err %.3e max_abs_err %.3e [%s]\n",
                 e.name.c_str(), e.max_rel_err, e.max_abs_err,
                 e.pass ? "pass" : "FAIL");
  }
  std::fprintf(out, "gradcheck: %zu parameter tensors, worst rel err %.3e, %s\n",
               r.params.size(), r.worst_rel_err,
               r.all_pass ? "all pass" : "FAILURES PRESENT");
}

}  // namespace textseg
