#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "textseg/errors.hpp"
#include "textseg/tensor.hpp"

namespace textseg {

// ---------------------------------------------------------------------------
// Report grammar
//
// A report is a sequence of sentences terminated by '.'. Recognized clause
// prefixes (case-insensitive, before the first ':'):
//   "Location:"  comma-separated anatomical phrases
//   "Feature:"   comma-separated signal/feature phrases
//   "Lesion:" / "Edema:" / "Necrosis:" / "MassEffect:"  free-text sections
// Anything else is preserved verbatim as an extra section sentence. All
// content is normalized to lowercase with collapsed whitespace and no
// trailing periods inside phrases.
// ---------------------------------------------------------------------------

struct ReportSections {
  std::optional<std::string> lesion;
  std::optional<std::string> edema;
  std::optional<std::string> necrosis;
  std::optional<std::string> mass_effect;
  std::vector<std::string> other;

  bool empty() const {
    return !lesion && !edema && !necrosis && !mass_effect && other.empty();
  }
  bool operator==(const ReportSections&) const = default;
};

struct StructuredReport {
  std::vector<std::string> location_terms;
  std::vector<std::string> feature_terms;
  ReportSections sections;
  // Parse warnings; not part of the report identity.
  std::vector<std::string> warnings;

  bool operator==(const StructuredReport& o) const {
    return location_terms == o.location_terms &&
           feature_terms == o.feature_terms && sections == o.sections;
  }
};

enum class TemplateVariant { raw, location_only, feature_only, full };

inline const char* template_variant_name(TemplateVariant v) {
  switch (v) {
    case TemplateVariant::raw: return "raw";
    case TemplateVariant::location_only: return "location_only";
    case TemplateVariant::feature_only: return "feature_only";
    case TemplateVariant::full: return "full";
  }
  return "?";
}

inline TemplateVariant template_variant_from(const std::string& s) {
  if (s == "raw") return TemplateVariant::raw;
  if (s == "location_only") return TemplateVariant::location_only;
  if (s == "feature_only") return TemplateVariant::feature_only;
  if (s == "full") return TemplateVariant::full;
  throw ConfigError("unknown template variant: " + s);
}

namespace textdetail {

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Trim, lowercase, collapse runs of whitespace, strip trailing periods.
inline std::string normalize_phrase(const std::string& in) {
  std::string out;
  out.reserve(in.size());
  bool pending_space = false;
  for (char raw : in) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out += ' ';
      pending_space = false;
    }
    out += c;
  }
  while (!out.empty() && out.back() == '.') out.pop_back();
  return out;
}

inline std::vector<std::string> split_csv_phrases(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      std::string p = normalize_phrase(cur);
      if (!p.empty()) out.push_back(p);
      cur.clear();
    } else {
      cur += c;
    }
  }
  std::string p = normalize_phrase(cur);
  if (!p.empty()) out.push_back(p);
  return out;
}

// Alphabetic-only key for clause keyword matching ("MassEffect" -> "masseffect").
inline std::string keyword_key(const std::string& s) {
  std::string k;
  for (char c : s)
    if (std::isalpha(static_cast<unsigned char>(c)))
      k += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return k;
}

}  // namespace textdetail

// A report must carry some recognized structure: at least one Location or
// Feature clause, or one of the named sections (which is what the raw
// template variant round-trips through). Unrecognized sentences are kept,
// but a report made only of them is a parse error.
inline StructuredReport parse_report(const std::string& text) {
  if (text.empty()) throw ParseError("empty report", 0);
  StructuredReport rep;
  bool saw_location = false, saw_feature = false, saw_section = false;
  std::size_t first_unknown_pos = 0;
  bool have_unknown = false;

  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('.', pos);
    const std::size_t stop = end == std::string::npos ? text.size() : end;
    std::string sentence = text.substr(pos, stop - pos);
    const std::size_t sentence_pos = pos;
    pos = stop + 1;
    if (textdetail::normalize_phrase(sentence).empty()) continue;

    const std::size_t colon = sentence.find(':');
    std::string key = colon == std::string::npos
                          ? std::string()
                          : textdetail::keyword_key(sentence.substr(0, colon));
    std::string body =
        colon == std::string::npos ? sentence : sentence.substr(colon + 1);

    if (key == "location") {
      auto terms = textdetail::split_csv_phrases(body);
      rep.location_terms.insert(rep.location_terms.end(), terms.begin(),
                                terms.end());
      saw_location = true;
    } else if (key == "feature") {
      auto terms = textdetail::split_csv_phrases(body);
      rep.feature_terms.insert(rep.feature_terms.end(), terms.begin(),
                               terms.end());
      saw_feature = true;
    } else if (key == "lesion") {
      rep.sections.lesion = textdetail::normalize_phrase(body);
      saw_section = true;
    } else if (key == "edema") {
      rep.sections.edema = textdetail::normalize_phrase(body);
      saw_section = true;
    } else if (key == "necrosis") {
      rep.sections.necrosis = textdetail::normalize_phrase(body);
      saw_section = true;
    } else if (key == "masseffect") {
      rep.sections.mass_effect = textdetail::normalize_phrase(body);
      saw_section = true;
    } else {
      rep.sections.other.push_back(textdetail::normalize_phrase(sentence));
      if (!have_unknown) {
        have_unknown = true;
        first_unknown_pos = sentence_pos;
      }
    }
  }

  if (!saw_location && !saw_feature && !saw_section) {
    throw ParseError("missing both Location and Feature clauses",
                     have_unknown ? first_unknown_pos : text.size());
  }
  if (rep.feature_terms.empty()) rep.warnings.push_back("no feature terms");
  if (rep.location_terms.empty()) rep.warnings.push_back("no location terms");
  return rep;
}

inline std::string render_template(const StructuredReport& r,
                                   TemplateVariant variant) {
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ", ";
      s += v[i];
    }
    return s;
  };
  std::vector<std::string> sentences;
  auto add_sections = [&]() {
    if (r.sections.lesion) sentences.push_back("Lesion: " + *r.sections.lesion);
    if (r.sections.edema) sentences.push_back("Edema: " + *r.sections.edema);
    if (r.sections.necrosis)
      sentences.push_back("Necrosis: " + *r.sections.necrosis);
    if (r.sections.mass_effect)
      sentences.push_back("MassEffect: " + *r.sections.mass_effect);
    for (const auto& s : r.sections.other) sentences.push_back(s);
  };
  switch (variant) {
    case TemplateVariant::location_only:
      if (r.location_terms.empty()) {
        throw ContractError("location_only render with empty location_terms");
      }
      sentences.push_back("Location: " + join(r.location_terms));
      break;
    case TemplateVariant::feature_only:
      if (r.feature_terms.empty()) {
        throw ContractError("feature_only render with empty feature_terms");
      }
      sentences.push_back("Feature: " + join(r.feature_terms));
      break;
    case TemplateVariant::full:
      if (!r.location_terms.empty())
        sentences.push_back("Location: " + join(r.location_terms));
      if (!r.feature_terms.empty())
        sentences.push_back("Feature: " + join(r.feature_terms));
      add_sections();
      break;
    case TemplateVariant::raw:
      if (r.sections.empty()) {
        throw ContractError("raw render with no stored sections");
      }
      add_sections();
      break;
  }
  std::string out;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i) out += " ";
    out += sentences[i] + ".";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

inline constexpr std::size_t kTokenLen = 110;
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kReservedIds = 2;

struct TokenSequence {
  std::array<std::int32_t, kTokenLen> ids{};
  std::array<std::uint8_t, kTokenLen> mask{};
  std::size_t real_count = 0;
  bool truncated = false;

  std::vector<std::uint8_t> mask_vector() const {
    return std::vector<std::uint8_t>(mask.begin(), mask.end());
  }
};

// Lowercased word tokens; any non-alphanumeric byte separates tokens.
inline std::vector<std::string> word_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char raw : text) {
    const unsigned char u = static_cast<unsigned char>(raw);
    if (std::isalnum(u)) {
      cur += static_cast<char>(std::tolower(u));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// Token ids are assigned lexicographically over the corpus vocabulary so the
// mapping is independent of document order. PAD=0 and UNK=1 are reserved.
class Vocabulary {
 public:
  static Vocabulary build(const std::vector<std::string>& corpus) {
    std::vector<std::string> uniq;
    {
      std::unordered_map<std::string, bool> seen;
      for (const auto& doc : corpus)
        for (auto& tok : word_tokens(doc))
          if (!seen[tok]) {
            seen[tok] = true;
            uniq.push_back(tok);
          }
    }
    std::sort(uniq.begin(), uniq.end());
    Vocabulary v;
    v.tokens_ = std::move(uniq);
    v.rebuild_index();
    return v;
  }

  std::int32_t id_of(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnkId
                              : static_cast<std::int32_t>(it->second) +
                                    kReservedIds;
  }

  std::size_t size() const { return tokens_.size() + kReservedIds; }

  // File format: newline-separated tokens, line number == id - reserved.
  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write vocabulary: " + path);
    for (const auto& t : tokens_) f << t << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read vocabulary: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) v.tokens_.push_back(line);
    }
    v.rebuild_index();
    return v;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = i;
  }
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Fixed-length encoding: truncate beyond kTokenLen, pad with PAD, mask is a
// prefix of trues. Total: every string yields a valid TokenSequence.
inline TokenSequence tokenize(const std::string& text, const Vocabulary& v) {
  TokenSequence seq;
  seq.ids.fill(kPadId);
  seq.mask.fill(0);
  auto words = word_tokens(text);
  seq.truncated = words.size() > kTokenLen;
  seq.real_count = std::min(words.size(), kTokenLen);
  for (std::size_t i = 0; i < seq.real_count; ++i) {
    seq.ids[i] = v.id_of(words[i]);
    seq.mask[i] = 1;
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Text encoder: embedding table + two-layer MLP projection
// ---------------------------------------------------------------------------

struct TextEncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;   // embedding table width
  std::size_t hidden_dim = 32;  // MLP hidden width
  std::size_t out_dim = 32;     // model embed dim D
  bool frozen_embedding = false;
};

struct TextEncoderParams {
  Tensor embedding;  // [vocab x embed_dim]
  Tensor w1, b1;     // embed_dim -> hidden_dim
  Tensor w2, b2;     // hidden_dim -> out_dim

  static TextEncoderParams init(const TextEncoderConfig& cfg, Rng& rng) {
    auto glorot = [&](std::size_t fin, std::size_t fout) {
      return std::sqrt(2.0 / static_cast<double>(fin + fout));
    };
    TextEncoderParams p;
    p.embedding = Tensor::randn({cfg.vocab_size, cfg.embed_dim}, rng, 0.2, 0.0,
                                !cfg.frozen_embedding);
    p.w1 = Tensor::randn({cfg.embed_dim, cfg.hidden_dim}, rng,
                         glorot(cfg.embed_dim, cfg.hidden_dim), 0.0, true);
    p.b1 = Tensor::zeros({cfg.hidden_dim}, true);
    p.w2 = Tensor::randn({cfg.hidden_dim, cfg.out_dim}, rng,
                         glorot(cfg.hidden_dim, cfg.out_dim), 0.0, true);
    p.b2 = Tensor::zeros({cfg.out_dim}, true);
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named_params(
      const std::string& prefix) const {
    return {{prefix + ".embedding", embedding}, {prefix + ".w1", w1},
            {prefix + ".b1", b1},               {prefix + ".w2", w2},
            {prefix + ".b2", b2}};
  }
};

// f_t[i] = MLP(embedding[ids[i]]) for all kTokenLen rows; padded rows are
// computed too and must be excluded downstream via the sequence mask.
inline Tensor encode_text(const TokenSequence& seq,
                          const TextEncoderParams& p) {
  std::vector<std::int32_t> ids(seq.ids.begin(), seq.ids.end());
  Tensor e = embedding_rows(p.embedding, ids);
  Tensor h = gelu(linear(e, p.w1, p.b1));
  return linear(h, p.w2, p.b2);
}

}  // namespace textseg
