#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "textseg/grad_check.hpp"
#include "textseg/text.hpp"

using namespace textseg;

TEST_CASE("parse_report extracts clauses") {
  auto rep = parse_report(
      "Location: left frontal lobe. "
      "Feature: hyperintense signal, discrete abnormal cluster.");
  REQUIRE(rep.location_terms == std::vector<std::string>{"left frontal lobe"});
  REQUIRE(rep.feature_terms ==
          std::vector<std::string>{"hyperintense signal",
                                   "discrete abnormal cluster"});
  REQUIRE(rep.sections.empty());
  REQUIRE(rep.warnings.empty());
}

TEST_CASE("parse_report location only carries a warning") {
  auto rep = parse_report("Location: right temporal lobe.");
  REQUIRE(rep.location_terms ==
          std::vector<std::string>{"right temporal lobe"});
  REQUIRE(rep.feature_terms.empty());
  REQUIRE_FALSE(rep.warnings.empty());
}

TEST_CASE("parse_report rejects unstructured text") {
  REQUIRE_THROWS_AS(parse_report("the patient presented with headaches."),
                    ParseError);
  REQUIRE_THROWS_AS(parse_report(""), ParseError);
  try {
    parse_report("free prose only. more prose.");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    REQUIRE(std::string(e.what()).find("position") != std::string::npos);
  }
}

TEST_CASE("parse_report keeps named sections and unknown sentences") {
  auto rep = parse_report(
      "Location: left parietal region. Feature: hypointense signal. "
      "Lesion: mass in the left parietal region. Edema: mild surrounding "
      "edema. Necrosis: no necrotic core. MassEffect: no midline shift. "
      "Cerebellum appears intact.");
  REQUIRE(rep.sections.lesion == "mass in the left parietal region");
  REQUIRE(rep.sections.edema == "mild surrounding edema");
  REQUIRE(rep.sections.necrosis == "no necrotic core");
  REQUIRE(rep.sections.mass_effect == "no midline shift");
  REQUIRE(rep.sections.other ==
          std::vector<std::string>{"cerebellum appears intact"});
}

TEST_CASE("render_template variants") {
  const std::string full_text =
      "Location: left frontal lobe. "
      "Feature: hyperintense signal, discrete abnormal cluster.";
  auto rep = parse_report(full_text);
  SECTION("full reproduces the input verbatim") {
    REQUIRE(render_template(rep, TemplateVariant::full) == full_text);
  }
  SECTION("location_only") {
    REQUIRE(render_template(rep, TemplateVariant::location_only) ==
            "Location: left frontal lobe.");
  }
  SECTION("feature_only") {
    REQUIRE(render_template(rep, TemplateVariant::feature_only) ==
            "Feature: hyperintense signal, discrete abnormal cluster.");
  }
  SECTION("location_only with empty location errors") {
    StructuredReport r;
    r.feature_terms = {"solid"};
    REQUIRE_THROWS_AS(render_template(r, TemplateVariant::location_only),
                      ContractError);
  }
  SECTION("raw requires sections") {
    REQUIRE_THROWS_AS(render_template(rep, TemplateVariant::raw),
                      ContractError);
  }
}

static StructuredReport random_report(Rng& rng) {
  static const std::vector<std::string> locs = {
      "left frontal lobe", "right temporal lobe", "left parietal region",
      "right occipital region", "left anterior superior region"};
  static const std::vector<std::string> feats = {
      "hyperintense signal", "hypointense signal", "heterogeneous texture",
      "homogeneous texture", "ring enhancing margin", "discrete cluster"};
  StructuredReport r;
  std::size_t nl = 1 + rng.uniform_int(2), nf = 1 + rng.uniform_int(3);
  for (std::size_t i = 0; i < nl; ++i)
    r.location_terms.push_back(locs[rng.uniform_int(locs.size())]);
  for (std::size_t i = 0; i < nf; ++i)
    r.feature_terms.push_back(feats[rng.uniform_int(feats.size())]);
  if (rng.next_u64() & 1) {
    r.sections.lesion = "mass centered in the " + r.location_terms[0];
    r.sections.edema = "surrounding edema with " + r.feature_terms[0];
    r.sections.necrosis = "central necrotic component";
    r.sections.mass_effect = "mild ventricular compression";
  }
  return r;
}

TEST_CASE("round-trip over 100 seeded reports") {
  Rng rng(99);
  for (int i = 0; i < 100; ++i) {
    StructuredReport r = random_report(rng);
    // full round-trip: parse(render(r, full)) == r
    std::string full = render_template(r, TemplateVariant::full);
    REQUIRE(parse_report(full) == r);
    // render(parse(x), same variant) == x for every renderable variant
    for (auto v : {TemplateVariant::full, TemplateVariant::location_only,
                   TemplateVariant::feature_only, TemplateVariant::raw}) {
      if (v == TemplateVariant::raw && r.sections.empty()) continue;
      std::string s = render_template(r, v);
      REQUIRE(render_template(parse_report(s), v) == s);
    }
  }
}

TEST_CASE("word_tokens and vocabulary") {
  auto toks = word_tokens("Location: Left frontal-lobe.");
  REQUIRE(toks ==
          std::vector<std::string>{"location", "left", "frontal", "lobe"});
  Vocabulary v = Vocabulary::build({"b a c", "a d"});
  // lexicographic: a b c d -> ids 2 3 4 5
  REQUIRE(v.id_of("a") == 2);
  REQUIRE(v.id_of("d") == 5);
  REQUIRE(v.id_of("zebra") == kUnkId);
  REQUIRE(v.size() == 6);
}

TEST_CASE("vocabulary file round-trip") {
  Vocabulary v = Vocabulary::build({"edema lesion mass", "signal lesion"});
  const std::string path = "vocab_test.txt";
  v.save(path);
  Vocabulary w = Vocabulary::load(path);
  REQUIRE(w.tokens() == v.tokens());
  REQUIRE(w.id_of("lesion") == v.id_of("lesion"));
  std::remove(path.c_str());
}

TEST_CASE("tokenize is total and fixed-length") {
  Vocabulary v = Vocabulary::build({"left frontal lobe mass"});
  SECTION("empty string -> all padding") {
    TokenSequence s = tokenize("", v);
    REQUIRE(s.real_count == 0);
    for (std::size_t i = 0; i < kTokenLen; ++i) {
      REQUIRE(s.ids[i] == kPadId);
      REQUIRE(s.mask[i] == 0);
    }
  }
  SECTION("3 known words") {
    TokenSequence s = tokenize("left frontal lobe", v);
    REQUIRE(s.real_count == 3);
    REQUIRE(s.mask[0] == 1);
    REQUIRE(s.mask[2] == 1);
    REQUIRE(s.mask[3] == 0);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(s.ids[i] != kUnkId);
    REQUIRE_FALSE(s.truncated);
  }
  SECTION("unknown words map to UNK") {
    TokenSequence s = tokenize("sphenoid wing", v);
    REQUIRE(s.ids[0] == kUnkId);
    REQUIRE(s.ids[1] == kUnkId);
  }
  SECTION("200 words truncate to 110") {
    std::string text;
    for (int i = 0; i < 200; ++i) text += "mass ";
    TokenSequence s = tokenize(text, v);
    REQUIRE(s.real_count == kTokenLen);
    REQUIRE(s.truncated);
    REQUIRE(s.mask[kTokenLen - 1] == 1);
  }
  SECTION("mask is a prefix of trues") {
    Rng rng(5);
    for (int it = 0; it < 20; ++it) {
      std::string text;
      for (std::size_t i = 0; i < rng.uniform_int(150); ++i) text += "lobe ";
      TokenSequence s = tokenize(text, v);
      bool in_pad = false;
      for (std::size_t i = 0; i < kTokenLen; ++i) {
        if (!s.mask[i]) in_pad = true;
        if (in_pad) REQUIRE(s.mask[i] == 0);
      }
    }
  }
}

TEST_CASE("encode_text") {
  Rng rng(12);
  TextEncoderConfig cfg;
  cfg.vocab_size = 10;
  cfg.embed_dim = 6;
  cfg.hidden_dim = 8;
  cfg.out_dim = 5;
  TextEncoderParams p = TextEncoderParams::init(cfg, rng);

  TokenSequence a{};
  a.ids.fill(kPadId);
  a.mask.fill(0);
  a.ids[0] = 3;
  a.ids[1] = 7;
  a.mask[0] = a.mask[1] = 1;
  a.real_count = 2;

  SECTION("output shape is kTokenLen x D") {
    Tensor f = encode_text(a, p);
    REQUIRE(f.shape() == Shape{kTokenLen, cfg.out_dim});
  }
  SECTION("identical up to padding -> identical real rows") {
    TokenSequence b = a;
    Tensor fa = encode_text(a, p);
    Tensor fb = encode_text(b, p);
    for (std::size_t i = 0; i < a.real_count; ++i)
      for (std::size_t j = 0; j < cfg.out_dim; ++j)
        REQUIRE(fa.at({i, j}) == fb.at({i, j}));
  }
  SECTION("id out of range") {
    TokenSequence bad = a;
    bad.ids[1] = 10;
    REQUIRE_THROWS_AS(encode_text(bad, p), ContractError);
  }
  SECTION("MLP grads vs finite differences") {
    auto fn = [&]() {
      Tensor f = encode_text(a, p);
      return sum_all(mul(f, f));
    };
    auto report = grad_check(fn, p.named_params("text"), 1e-5, 1e-4, 1e-8,
                             1e-5);
    REQUIRE(report.all_pass);
  }
  SECTION("frozen embedding mode") {
    TextEncoderConfig fcfg = cfg;
    fcfg.frozen_embedding = true;
    TextEncoderParams fp = TextEncoderParams::init(fcfg, rng);
    REQUIRE_FALSE(fp.embedding.requires_grad());
    Tape tape;
    Tensor f = encode_text(a, fp);
    tape.backward(sum_all(f));
    REQUIRE_FALSE(fp.embedding.has_grad());
    REQUIRE(fp.w1.has_grad());
  }
}
