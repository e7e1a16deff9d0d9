#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "textseg/gradcheck_suite.hpp"
#include "textseg/optim.hpp"
#include "textseg/segnet.hpp"
#include "textseg/trainer.hpp"

using namespace textseg;

namespace {

SegModel tiny_model(FusionMode mode, std::uint64_t seed = 0,
                    std::size_t vocab = 16) {
  SegModelConfig mcfg;
  mcfg.input_size = 16;
  mcfg.depth = 2;
  mcfg.embed_dim = 8;
  TextEncoderConfig tcfg;
  tcfg.vocab_size = vocab;
  tcfg.embed_dim = 6;
  tcfg.hidden_dim = 6;
  tcfg.out_dim = 8;
  Rng rng(seed);
  return SegModel::init(mcfg, tcfg, mode, rng);
}

TokenSequence tokens_of(std::initializer_list<std::int32_t> ids) {
  TokenSequence s{};
  s.ids.fill(kPadId);
  s.mask.fill(0);
  std::size_t i = 0;
  for (auto id : ids) {
    s.ids[i] = id;
    s.mask[i] = 1;
    ++i;
  }
  s.real_count = i;
  return s;
}

}  // namespace

TEST_CASE("bottleneck arithmetic") {
  SECTION("desk scale: S=32, depth=3, D=32 -> N=64") {
    SegModelConfig cfg;
    cfg.input_size = 32;
    cfg.depth = 3;
    cfg.embed_dim = 32;
    cfg.validate();
    REQUIRE(cfg.bottleneck_side() == 4);
    REQUIRE(cfg.bottleneck_voxels() == 64);
  }
  SECTION("paper scale: S=128, depth=5 -> N=64 (128/32 per axis)") {
    SegModelConfig cfg;
    cfg.input_size = 128;
    cfg.depth = 5;
    cfg.embed_dim = 768;
    cfg.validate();
    REQUIRE(cfg.bottleneck_side() == 4);
    REQUIRE(cfg.bottleneck_voxels() == 64);
  }
  SECTION("indivisible size rejected") {
    SegModelConfig cfg;
    cfg.input_size = 20;
    cfg.depth = 3;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("encode shapes and gradient flow") {
  SegModel m = tiny_model(FusionMode::image_only, 3);
  Rng rng(5);
  Tensor images = Tensor::randn({2, 4, 16, 16, 16}, rng, 0.5);
  EncodeResult er = encode(m, images);
  REQUIRE(er.f_i.shape() == Shape{2, 64, 8});  // (16/4)^3 = 64 rows
  REQUIRE(er.skips.size() == 2);
  REQUIRE(er.skips[0].shape() == Shape{2, 4, 16, 16, 16});
  REQUIRE(er.skips[1].shape() == Shape{2, 4, 8, 8, 8});

  SECTION("gradients reach the first encoder conv") {
    m.enc[0].w.zero_grad();
    Tape tape;
    EncodeResult e2 = encode(m, images);
    tape.backward(sum_all(mul(e2.f_i, e2.f_i)));
    bool nonzero = false;
    for (double g : m.enc[0].w.grad()) nonzero = nonzero || g != 0.0;
    REQUIRE(nonzero);
  }
  SECTION("shape mismatch rejected") {
    REQUIRE_THROWS_AS(encode(m, Tensor::zeros({1, 4, 8, 8, 8})), ShapeError);
  }
}

TEST_CASE("forward contracts") {
  Rng rng(9);
  Tensor images = Tensor::randn({2, 4, 16, 16, 16}, rng, 0.5);
  std::vector<TokenSequence> toks{tokens_of({2, 3, 4}), tokens_of({5, 6})};
  std::vector<TokenSequence> other{tokens_of({7, 8, 9}), tokens_of({10})};

  SECTION("logits shape is B x 3 x S^3") {
    SegModel m = tiny_model(FusionMode::bidirectional, 1);
    Tensor logits = forward(m, images, toks);
    REQUIRE(logits.shape() == Shape{2, 3, 16, 16, 16});
  }
  SECTION("image_only ignores tokens entirely") {
    SegModel m = tiny_model(FusionMode::image_only, 1);
    Tensor a = forward(m, images, toks);
    Tensor b = forward(m, images, other);
    REQUIRE(a.values() == b.values());
  }
  SECTION("bidirectional responds to token changes") {
    SegModel m = tiny_model(FusionMode::bidirectional, 1);
    Tensor a = forward(m, images, toks);
    Tensor b = forward(m, images, other);
    double max_delta = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
      max_delta = std::max(max_delta,
                           std::fabs(a.values()[i] - b.values()[i]));
    REQUIRE(max_delta > 1e-8);
  }
  SECTION("deterministic under fixed params") {
    SegModel m = tiny_model(FusionMode::t2i_once, 2);
    Tensor a = forward(m, images, toks);
    Tensor b = forward(m, images, toks);
    REQUIRE(a.values() == b.values());
  }
}

TEST_CASE("soft_dice_loss") {
  SECTION("perfect confident prediction") {
    Tensor targets = Tensor::zeros({1, 3, 2, 2, 2});
    Rng rng(4);
    for (double& v : targets.mutable_values())
      v = (rng.next_u64() & 1) ? 1.0 : 0.0;
    Tensor logits = Tensor::zeros({1, 3, 2, 2, 2});
    for (std::size_t i = 0; i < logits.numel(); ++i)
      logits.mutable_values()[i] = targets.values()[i] > 0.5 ? 20.0 : -20.0;
    REQUIRE(soft_dice_loss(logits, targets).item() < 1e-3);
  }
  SECTION("uniform p=0.5 with half-full target matches closed form") {
    // per slice: inter = 0.5 * V/2, sum p = 0.5 V, sum g = V/2
    // dice = (0.5 V + eps) / (V + eps); loss = 1 - dice
    const std::size_t vol = 8;
    Tensor logits = Tensor::zeros({1, 1, 2, 2, 2});
    Tensor targets = Tensor::zeros({1, 1, 2, 2, 2});
    for (std::size_t i = 0; i < vol / 2; ++i)
      targets.mutable_values()[i] = 1.0;
    const double v = static_cast<double>(vol);
    const double expect = 1.0 - (0.5 * v + kDiceEps) / (v + kDiceEps);
    REQUIRE_THAT(soft_dice_loss(logits, targets).item(),
                 Catch::Matchers::WithinAbs(expect, 1e-12));
  }
  SECTION("loss stays in [0, 1] and differentiates") {
    Rng rng(6);
    Tensor logits = Tensor::randn({2, 3, 2, 2, 2}, rng, 2.0, 0.0, true);
    Tensor targets = Tensor::zeros({2, 3, 2, 2, 2});
    for (double& v : targets.mutable_values())
      v = (rng.next_u64() & 1) ? 1.0 : 0.0;
    const double l = soft_dice_loss(logits, targets).item();
    REQUIRE(l >= 0.0);
    REQUIRE(l <= 1.0);
    auto fn = [&]() { return soft_dice_loss(logits, targets); };
    REQUIRE(grad_check(fn, {{"logits", logits}}, 1e-5, 1e-4, 1e-8, 1e-5)
                .all_pass);
  }
  SECTION("shape mismatch") {
    REQUIRE_THROWS_AS(soft_dice_loss(Tensor::zeros({1, 3, 2, 2, 2}),
                                     Tensor::zeros({1, 3, 2, 2, 4})),
                      ShapeError);
  }
}

TEST_CASE("AdamW") {
  SECTION("zero gradients move parameters by weight decay only") {
    Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
    AdamWConfig cfg;
    cfg.weight_decay = 0.01;
    AdamW opt({{"p", p}}, cfg);
    opt.step(0.1);
    for (std::size_t i = 0; i < 3; ++i)
      REQUIRE_THAT(p.values()[i],
                   Catch::Matchers::WithinAbs(
                       std::vector<double>{1.0, -2.0, 0.5}[i] *
                           (1.0 - 0.1 * 0.01),
                       1e-15));
  }
  SECTION("descends a quadratic") {
    Tensor p = Tensor::from_data({2}, {3.0, -4.0}, true);
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt({{"p", p}}, cfg);
    for (int i = 0; i < 200; ++i) {
      {
        Tape tape;
        tape.backward(sum_all(mul(p, p)));
      }
      opt.step(0.05);
      opt.zero_grad();
    }
    REQUIRE(std::fabs(p.values()[0]) < 0.5);
    REQUIRE(std::fabs(p.values()[1]) < 0.5);
  }
  SECTION("non-finite parameters abort") {
    Tensor p = Tensor::from_data({1}, {1.0}, true);
    AdamW opt({{"p", p}}, AdamWConfig{});
    {
      Tape tape;
      Tensor loss = sum_all(mul(p, Tensor::scalar(1e308)));
      tape.backward(loss);
    }
    REQUIRE_THROWS_AS(opt.step(1e308), NumericError);
  }
}

TEST_CASE("warmup schedule") {
  // linear ramp over the first quarter, then flat
  const double base = 1.0;
  REQUIRE(warmup_lr(base, 0, 100, 0.25) == Catch::Approx(1.0 / 25.0));
  REQUIRE(warmup_lr(base, 12, 100, 0.25) == Catch::Approx(13.0 / 25.0));
  REQUIRE(warmup_lr(base, 24, 100, 0.25) == 1.0);
  REQUIRE(warmup_lr(base, 99, 100, 0.25) == 1.0);
}

TEST_CASE("train_step smoke run: loss strictly decreases over 50 steps") {
  SegModel m = tiny_model(FusionMode::bidirectional, 0);
  Rng rng(0);
  Tensor images = Tensor::randn({2, 4, 16, 16, 16}, rng, 0.3);
  Tensor targets = Tensor::zeros({2, 3, 16, 16, 16});
  {
    // blob-shaped targets, nested by construction, with matching image
    // contrast so the fixed batch is genuinely learnable
    auto& tv = targets.mutable_values();
    auto& iv = images.mutable_values();
    const std::size_t S = 16, S3 = S * S * S;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t z = 0; z < S; ++z)
        for (std::size_t y = 0; y < S; ++y)
          for (std::size_t x = 0; x < S; ++x) {
            const double dz = static_cast<double>(z) - 8.0 + 2.0 * b;
            const double dy = static_cast<double>(y) - 8.0;
            const double dx = static_cast<double>(x) - 6.0;
            const double r2 = dz * dz + dy * dy + dx * dx;
            const std::size_t v = (z * S + y) * S + x;
            if (r2 < 25.0) {
              tv[(b * 3 + 1) * S3 + v] = 1.0;  // WT
              for (std::size_t c = 0; c < 4; ++c)
                iv[(b * 4 + c) * S3 + v] += 0.4;
            }
            if (r2 < 12.0) tv[(b * 3 + 2) * S3 + v] = 1.0;  // TC
            if (r2 < 5.0) tv[(b * 3 + 0) * S3 + v] = 1.0;   // ET
          }
  }
  Batch batch;
  batch.images = images;
  batch.targets = targets;
  batch.tokens = {tokens_of({2, 3, 4}), tokens_of({5, 6, 7})};

  AdamWConfig ocfg;
  AdamW opt(m.named_params(), ocfg);
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i)
    losses.push_back(train_step(m, opt, batch, 1e-3));
  for (std::size_t i = 1; i < losses.size(); ++i) {
    INFO("step " << i);
    REQUIRE(losses[i] < losses[i - 1]);
  }

  SECTION("same seed reproduces the loss trajectory bitwise") {
    SegModel m2 = tiny_model(FusionMode::bidirectional, 0);
    AdamW opt2(m2.named_params(), ocfg);
    for (int i = 0; i < 10; ++i) {
      SegModel m3 = tiny_model(FusionMode::bidirectional, 0);
      (void)m3;
    }
    std::vector<double> l2;
    for (int i = 0; i < 50; ++i) l2.push_back(train_step(m2, opt2, batch, 1e-3));
    REQUIRE(l2 == losses);
  }
}

TEST_CASE("full gradient suite passes") {
  auto report = run_gradcheck_suite(true);
  for (const auto& e : report.params) {
    INFO(e.name << " rel " << e.max_rel_err << " abs " << e.max_abs_err);
    CHECK(e.pass);
  }
  REQUIRE(report.all_pass);
}
