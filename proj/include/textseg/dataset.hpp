#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "textseg/errors.hpp"
#include "textseg/rng.hpp"
#include "textseg/text.hpp"
#include "textseg/volume_io.hpp"

#include <json.hpp>

namespace textseg {

// Region channel order used everywhere: 0 = ET, 1 = WT, 2 = TC, with the
// nesting WT >= TC >= ET voxelwise. Image channel order: 0 = flair-like
// (the attenuated channel), 1 = t2-like, 2 = t1gd-like, 3 = t1-like.
inline constexpr std::size_t kNumModalities = 4;
inline constexpr std::size_t kNumRegions = 3;
inline constexpr std::array<const char*, 4> kModalityFiles = {
    "flair.raw", "t2.raw", "t1gd.raw", "t1.raw"};

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ManifestCase {
  std::string id;
  std::array<std::string, kNumModalities> volumes;  // relative to manifest dir
  std::string labels;
  std::string report;
  std::string split;  // "train" | "val" | "test" | "" before assignment
};

struct DatasetManifest {
  std::string version = "1";
  std::array<double, 3> split_ratios = {0.0, 0.0, 0.0};
  std::uint64_t split_seed = 0;
  std::vector<ManifestCase> cases;

  void save(const std::string& path) const {
    nlohmann::ordered_json j;
    j["version"] = version;
    j["split_seed"] = split_seed;
    j["split_ratios"] = split_ratios;
    j["cases"] = nlohmann::ordered_json::array();
    for (const auto& c : cases) {
      nlohmann::ordered_json cj;
      cj["id"] = c.id;
      cj["volumes"] = c.volumes;
      cj["labels"] = c.labels;
      cj["report"] = c.report;
      cj["split"] = c.split;
      j["cases"].push_back(cj);
    }
    const std::string text = j.dump(2) + "\n";
    iodetail::write_file(path, text.data(), text.size());
  }

  // check_paths verifies that every referenced file resolves relative to the
  // manifest's directory.
  static DatasetManifest load(const std::string& path,
                              bool check_paths = true) {
    auto buf = iodetail::read_file(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(buf.begin(), buf.end());
    } catch (const std::exception& e) {
      throw IoError("corrupt manifest " + path + ": " + e.what());
    }
    DatasetManifest m;
    try {
      m.version = j.at("version").get<std::string>();
      m.split_seed = j.at("split_seed").get<std::uint64_t>();
      auto r = j.at("split_ratios").get<std::vector<double>>();
      if (r.size() != 3) throw IoError("split_ratios must have 3 entries");
      m.split_ratios = {r[0], r[1], r[2]};
      for (const auto& cj : j.at("cases")) {
        ManifestCase c;
        c.id = cj.at("id").get<std::string>();
        auto v = cj.at("volumes").get<std::vector<std::string>>();
        if (v.size() != kNumModalities) {
          throw IoError("case " + c.id + " must list 4 modality volumes");
        }
        for (std::size_t i = 0; i < kNumModalities; ++i) c.volumes[i] = v[i];
        c.labels = cj.at("labels").get<std::string>();
        c.report = cj.at("report").get<std::string>();
        c.split = cj.at("split").get<std::string>();
        m.cases.push_back(std::move(c));
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corrupt manifest " + path + ": " + e.what());
    }
    for (std::size_t i = 0; i < m.cases.size(); ++i)
      for (std::size_t k = i + 1; k < m.cases.size(); ++k)
        if (m.cases[i].id == m.cases[k].id)
          throw IoError("duplicate case id: " + m.cases[i].id);
    if (check_paths) {
      const auto root = std::filesystem::path(path).parent_path();
      auto check = [&](const std::string& rel) {
        if (!std::filesystem::exists(root / rel))
          throw IoError("manifest path not resolvable: " + rel);
      };
      for (const auto& c : m.cases) {
        for (const auto& v : c.volumes) check(v);
        check(c.labels);
        check(c.report);
      }
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// Split arithmetic: floor each ratio, then hand out the remainder in order
// of largest fractional part (ties resolved toward the earlier split).
// ---------------------------------------------------------------------------

inline std::array<std::size_t, 3> split_counts(
    std::size_t n, const std::array<double, 3>& ratios) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::fabs(sum - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1, got " +
                      std::to_string(sum));
  }
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = ratios[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (frac[a] != frac[b]) return frac[a] > frac[b];
    return a < b;
  });
  for (std::size_t i = 0; assigned < n; ++i) {
    ++counts[order[i % 3]];
    ++assigned;
  }
  return counts;
}

inline const char* split_name(std::size_t i) {
  static constexpr std::array<const char*, 3> names = {"train", "val", "test"};
  return names[i];
}

// Deterministic shuffle by seed, then contiguous assignment by counts.
inline void assign_splits(DatasetManifest& m,
                          const std::array<double, 3>& ratios,
                          std::uint64_t seed) {
  if (m.cases.size() < 3) {
    throw ContractError("need at least 3 cases to form train/val/test splits");
  }
  const auto counts = split_counts(m.cases.size(), ratios);
  std::vector<std::size_t> order(m.cases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::size_t pos = 0;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t k = 0; k < counts[s]; ++k)
      m.cases[order[pos++]].split = split_name(s);
  m.split_ratios = ratios;
  m.split_seed = seed;
}

// ---------------------------------------------------------------------------
// Synthetic text-volume generator
//
// Each case renders one (or more) nested-ellipsoid lesions (ET c TC c WT)
// into a fixed background "anatomy" whose smooth intensity ramps give
// convolutional features absolute-position information. Alongside the
// lesion, decoy blobs with the same per-channel appearance are placed in
// other octants; decoy polarity is random. The flair-like channel is the
// only one whose lesion contrast marks the labeled lesion exclusively, and
// that contrast is scaled by (1 - attenuation). With attenuation at 1 the
// images alone cannot tell the lesion from a same-polarity decoy; the
// report's octant phrase and polarity word carry that information.
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t cases = 100;
  std::size_t size = 32;
  int lesion_min = 1;
  int lesion_max = 1;
  double radius_min = 4.0;  // WT semi-axis range, voxels
  double radius_max = 7.0;
  double tc_scale = 0.65;
  double et_scale = 0.5;
  double noise = 0.05;
  double attenuation = 1.0;
  int decoys = 2;
  std::uint64_t seed = 0;
  std::array<double, 3> split_ratios = {0.6, 0.15, 0.25};

  // Feature vocabulary; index 0/1 of polarity_words maps to contrast
  // polarity +1/-1, texture and rim words switch the rendering modes.
  std::array<std::string, 2> polarity_words = {"hyperintense", "hypointense"};
  std::array<std::string, 2> texture_words = {"homogeneous", "heterogeneous"};
  std::array<std::string, 2> rim_words = {"solid", "ring-enhancing"};

  void validate() const {
    if (cases < 3) throw ConfigError("synth: need at least 3 cases");
    if (size < 16 || size % 8 != 0) {
      throw ConfigError("synth: size must be a multiple of 8 and >= 16");
    }
    if (lesion_min < 1 || lesion_max < lesion_min) {
      throw ConfigError("synth: bad lesion count range");
    }
    if (radius_min < 3.0 || radius_max < radius_min ||
        radius_max > static_cast<double>(size) / 2.0 - 4.0) {
      throw ConfigError("synth: bad radius range");
    }
    if (noise < 0.0 || attenuation < 0.0 || attenuation > 1.0) {
      throw ConfigError("synth: bad noise/attenuation");
    }
    if (decoys < 0 || lesion_max + decoys > 8) {
      throw ConfigError("synth: lesions + decoys must fit in 8 octants");
    }
  }
};

// Octant-location vocabulary. Axis convention (z, y, x) with phrases
// ordered x-word, y-word, z-word: x low = left, y low = anterior,
// z low = inferior.
inline std::string octant_phrase(bool x_high, bool y_high, bool z_high) {
  std::string s;
  s += x_high ? "right" : "left";
  s += y_high ? " posterior" : " anterior";
  s += z_high ? " superior" : " inferior";
  s += " region";
  return s;
}

inline std::size_t octant_index(bool x_high, bool y_high, bool z_high) {
  return (x_high ? 1u : 0u) | (y_high ? 2u : 0u) | (z_high ? 4u : 0u);
}

// In-memory generated case.
struct SynthCase {
  std::string id;
  std::size_t size = 0;
  std::vector<float> image;  // [4, S, S, S]
  std::array<std::vector<std::uint8_t>, 3> regions;  // ET, WT, TC
  std::string report;  // full-template rendering
  std::vector<std::size_t> lesion_octants;
};

namespace synthdetail {

struct Blob {
  double cz, cy, cx;
  double rz, ry, rx;  // WT semi-axes
  double polarity;    // +1 / -1
  bool heterogeneous;
  bool ring;
  std::size_t octant;
};

inline double noise_hash(std::uint64_t seed, std::uint64_t idx) {
  // deterministic per-voxel value in [-1, 1)
  return static_cast<double>(Rng::mix(seed, idx) >> 11) * 0x1.0p-53 * 2.0 -
         1.0;
}

// Membership of the nested regions for one blob, at a given shrink scale.
inline bool inside(const Blob& b, double z, double y, double x, double s) {
  const double dz = (z - b.cz) / (b.rz * s);
  const double dy = (y - b.cy) / (b.ry * s);
  const double dx = (x - b.cx) / (b.rx * s);
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

inline Blob sample_blob(const SynthConfig& cfg, Rng& rng, std::size_t octant) {
  Blob b;
  b.octant = octant;
  b.rz = rng.uniform(cfg.radius_min, cfg.radius_max);
  b.ry = rng.uniform(cfg.radius_min, cfg.radius_max);
  b.rx = rng.uniform(cfg.radius_min, cfg.radius_max);
  const double half = static_cast<double>(cfg.size) / 2.0;
  auto center = [&](bool high, double r) {
    const double lo = high ? half + r * 0.55 + 1.0 : r * 0.75 + 1.5;
    const double hi = high ? static_cast<double>(cfg.size) - r * 0.75 - 1.5
                           : half - r * 0.55 - 1.0;
    return rng.uniform(std::min(lo, hi - 0.5), std::max(hi, lo + 0.5));
  };
  b.cx = center(octant & 1, b.rx);
  b.cy = center(octant & 2, b.ry);
  b.cz = center(octant & 4, b.rz);
  b.polarity = 1.0;
  b.heterogeneous = false;
  b.ring = false;
  return b;
}

}  // namespace synthdetail

inline SynthCase make_synth_case(const SynthConfig& cfg,
                                 std::size_t case_index) {
  cfg.validate();
  Rng rng(Rng::mix(cfg.seed, case_index));
  const std::size_t S = cfg.size;
  const std::size_t S3 = S * S * S;

  SynthCase out;
  {
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "case%04zu", case_index);
    out.id = idbuf;
  }
  out.size = S;
  out.image.assign(kNumModalities * S3, 0.0f);
  for (auto& r : out.regions) r.assign(S3, 0);

  // case-level appearance words
  const std::size_t polarity_idx = rng.uniform_int(2);
  const double polarity = polarity_idx == 0 ? 1.0 : -1.0;
  const std::size_t texture_idx = rng.uniform_int(2);
  const std::size_t rim_idx = rng.uniform_int(2);

  // octants: lesions first, then decoys, all distinct
  const int n_lesions =
      cfg.lesion_min +
      static_cast<int>(rng.uniform_int(
          static_cast<std::uint64_t>(cfg.lesion_max - cfg.lesion_min + 1)));
  std::vector<std::size_t> octants(8);
  for (std::size_t i = 0; i < 8; ++i) octants[i] = i;
  rng.shuffle(octants);

  std::vector<synthdetail::Blob> lesions, decoys;
  for (int i = 0; i < n_lesions; ++i) {
    auto b = synthdetail::sample_blob(cfg, rng, octants[i]);
    b.polarity = polarity;
    b.heterogeneous = texture_idx == 1;
    b.ring = rim_idx == 1;
    lesions.push_back(b);
    out.lesion_octants.push_back(b.octant);
  }
  for (int i = 0; i < cfg.decoys; ++i) {
    auto b = synthdetail::sample_blob(cfg, rng,
                                      octants[static_cast<std::size_t>(
                                          n_lesions + i)]);
    b.polarity = rng.uniform_int(2) == 0 ? 1.0 : -1.0;
    b.heterogeneous = rng.uniform_int(2) == 1;
    b.ring = rng.uniform_int(2) == 1;
    decoys.push_back(b);
  }

  // per-case smooth background variation
  struct Wave {
    double a, fz, fy, fx, phase;
  };
  std::array<Wave, 3> waves;
  for (auto& w : waves) {
    w.a = rng.normal(0.0, 0.02);
    w.fz = 1.0 + static_cast<double>(rng.uniform_int(2));
    w.fy = 1.0 + static_cast<double>(rng.uniform_int(2));
    w.fx = 1.0 + static_cast<double>(rng.uniform_int(2));
    w.phase = rng.uniform(0.0, 6.283185307179586);
  }
  const std::uint64_t mottle_seed = rng.next_u64();
  const std::uint64_t noise_seed = rng.next_u64();

  // Per-channel additive contrast of one blob at one voxel. The flair-like
  // channel (0) responds only to labeled lesions, scaled by 1 - attenuation.
  auto blob_contrast = [&](const synthdetail::Blob& b, bool is_lesion,
                           std::size_t chan, double z, double y, double x,
                           std::size_t flat) -> double {
    if (!synthdetail::inside(b, z, y, x, 1.0)) return 0.0;
    const bool in_tc = synthdetail::inside(b, z, y, x, cfg.tc_scale);
    const bool in_et = synthdetail::inside(b, z, y, x, cfg.et_scale);
    const bool in_et_core =
        synthdetail::inside(b, z, y, x, cfg.et_scale * 0.6);
    double c = 0.0;
    switch (chan) {
      case 0:
        c = is_lesion ? 0.45 * (1.0 - cfg.attenuation) : 0.0;
        break;
      case 1:
        c = 0.30 + (in_tc ? 0.10 : 0.0);
        break;
      case 2:
        if (in_et) {
          c = b.ring ? (in_et_core ? 0.12 : 0.55) : 0.50;
        }
        if (in_tc) c += 0.08;
        break;
      case 3:
        c = -0.06 - (in_tc ? 0.22 : 0.0);
        break;
    }
    if (c != 0.0 && b.heterogeneous) {
      c *= 1.0 + 0.35 * synthdetail::noise_hash(mottle_seed, flat);
    }
    return c * b.polarity;
  };

  const double sd = static_cast<double>(S);
  for (std::size_t z = 0; z < S; ++z) {
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        const std::size_t flat = (z * S + y) * S + x;
        const double zr = (static_cast<double>(z) + 0.5) / sd;
        const double yr = (static_cast<double>(y) + 0.5) / sd;
        const double xr = (static_cast<double>(x) + 0.5) / sd;
        const double ez = (zr - 0.5) / 0.47, ey = (yr - 0.5) / 0.47,
                     ex = (xr - 0.5) / 0.47;
        const bool in_brain = ez * ez + ey * ey + ex * ex <= 1.0;

        // fixed anatomy: asymmetric ramps make absolute position readable
        double base = 0.05;
        if (in_brain) {
          base = 0.32 + 0.10 * xr + 0.14 * yr + 0.18 * zr +
                 0.04 * std::cos(6.283185307179586 * xr) *
                     std::cos(3.141592653589793 * yr + 0.7);
          for (const auto& w : waves)
            base += w.a * std::cos(3.141592653589793 *
                                       (w.fz * zr + w.fy * yr + w.fx * xr) +
                                   w.phase);
        }

        const double zc = static_cast<double>(z);
        const double yc = static_cast<double>(y);
        const double xc = static_cast<double>(x);
        for (std::size_t chan = 0; chan < kNumModalities; ++chan) {
          double v = base;
          for (const auto& b : lesions)
            v += blob_contrast(b, true, chan, zc, yc, xc, flat);
          for (const auto& b : decoys)
            v += blob_contrast(b, false, chan, zc, yc, xc, flat);
          v += cfg.noise *
               synthdetail::noise_hash(noise_seed, chan * S3 + flat);
          out.image[chan * S3 + flat] = static_cast<float>(v);
        }

        for (const auto& b : lesions) {
          if (synthdetail::inside(b, zc, yc, xc, 1.0)) {
            out.regions[1][flat] = 1;  // WT
            if (synthdetail::inside(b, zc, yc, xc, cfg.tc_scale))
              out.regions[2][flat] = 1;  // TC
            if (synthdetail::inside(b, zc, yc, xc, cfg.et_scale))
              out.regions[0][flat] = 1;  // ET
          }
        }
      }
    }
  }

  // report: structured clauses plus the four verbose sections
  StructuredReport rep;
  for (const auto& b : lesions) {
    rep.location_terms.push_back(
        octant_phrase(b.octant & 1, b.octant & 2, b.octant & 4));
  }
  rep.feature_terms = {cfg.polarity_words[polarity_idx] + " signal",
                       cfg.texture_words[texture_idx] + " texture",
                       cfg.rim_words[rim_idx] + " margin"};
  rep.sections.lesion = "a " + cfg.polarity_words[polarity_idx] +
                        " mass occupies the " + rep.location_terms[0];
  rep.sections.edema =
      "surrounding signal is " + cfg.texture_words[texture_idx] +
      " beyond the lesion core";
  rep.sections.necrosis =
      rim_idx == 1 ? std::string("central necrosis with a ring-enhancing margin")
                   : std::string("solid enhancement without central necrosis");
  rep.sections.mass_effect =
      std::string("mild midline shift toward the ") +
      ((lesions[0].octant & 1) ? "left" : "right");
  out.report = render_template(rep, TemplateVariant::full);
  return out;
}

// Writes a full dataset (volumes, labels, reports, manifest with splits)
// and returns the manifest. Layout: <out_dir>/manifest.json and
// <out_dir>/cases/<id>/{flair,t2,t1gd,t1,labels}.raw(+.json), report.txt.
inline DatasetManifest generate_synthetic(const SynthConfig& cfg,
                                          const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "cases", ec);
  if (ec) throw IoError("cannot create dataset directory: " + out_dir);

  DatasetManifest manifest;
  const std::size_t S = cfg.size;
  for (std::size_t i = 0; i < cfg.cases; ++i) {
    SynthCase sc = make_synth_case(cfg, i);
    const fs::path rel_dir = fs::path("cases") / sc.id;
    const fs::path abs_dir = fs::path(out_dir) / rel_dir;
    fs::create_directories(abs_dir, ec);
    if (ec) throw IoError("cannot create case directory: " + abs_dir.string());

    ManifestCase mc;
    mc.id = sc.id;
    const std::size_t S3 = S * S * S;
    for (std::size_t chan = 0; chan < kNumModalities; ++chan) {
      VolumeHeader h;
      h.shape = {S, S, S};
      h.dtype = "f32";
      std::vector<float> v(sc.image.begin() +
                               static_cast<std::ptrdiff_t>(chan * S3),
                           sc.image.begin() +
                               static_cast<std::ptrdiff_t>((chan + 1) * S3));
      const fs::path p = abs_dir / kModalityFiles[chan];
      write_volume(p.string(), h, v);
      mc.volumes[chan] = (rel_dir / kModalityFiles[chan]).generic_string();
    }
    {
      VolumeHeader h;
      h.shape = {kNumRegions, S, S, S};
      h.dtype = "u8";
      std::vector<std::uint8_t> labels;
      labels.reserve(kNumRegions * S3);
      for (const auto& r : sc.regions)
        labels.insert(labels.end(), r.begin(), r.end());
      const fs::path p = abs_dir / "labels.raw";
      write_volume(p.string(), h, labels);
      mc.labels = (rel_dir / "labels.raw").generic_string();
    }
    {
      const fs::path p = abs_dir / "report.txt";
      iodetail::write_file(p.string(), sc.report.data(), sc.report.size());
      mc.report = (rel_dir / "report.txt").generic_string();
    }
    manifest.cases.push_back(std::move(mc));
  }
  assign_splits(manifest, cfg.split_ratios, cfg.seed);
  manifest.save((fs::path(out_dir) / "manifest.json").string());
  return manifest;
}

// ---------------------------------------------------------------------------
// Case loading
// ---------------------------------------------------------------------------

struct VolumeSample {
  std::string id;
  std::size_t size = 0;
  std::vector<float> image;  // [4, S, S, S]
  std::array<std::vector<std::uint8_t>, 3> regions;  // ET, WT, TC
  std::string report;
};

inline void check_region_nesting(
    const std::array<std::vector<std::uint8_t>, 3>& regions,
    const std::string& context) {
  const auto& et = regions[0];
  const auto& wt = regions[1];
  const auto& tc = regions[2];
  for (std::size_t i = 0; i < wt.size(); ++i) {
    if ((et[i] && !tc[i]) || (tc[i] && !wt[i])) {
      throw IoError("region nesting violated (WT >= TC >= ET) in " + context);
    }
  }
}

// Loads one case, cross-checks headers, resamples to target_size when
// needed (trilinear images, nearest labels) and validates region nesting.
inline VolumeSample load_case(const std::string& manifest_dir,
                              const ManifestCase& mc,
                              std::size_t target_size) {
  namespace fs = std::filesystem;
  VolumeSample out;
  out.id = mc.id;
  out.size = target_size;
  const std::size_t T3 = target_size * target_size * target_size;
  out.image.reserve(kNumModalities * T3);

  std::size_t src_size = 0;
  for (std::size_t chan = 0; chan < kNumModalities; ++chan) {
    VolumeHeader h;
    auto v = read_volume_f32((fs::path(manifest_dir) / mc.volumes[chan])
                                 .string(),
                             h);
    if (h.shape.size() != 3 || h.shape[0] != h.shape[1] ||
        h.shape[0] != h.shape[2]) {
      throw IoError("case " + mc.id + ": modality volumes must be cubic");
    }
    if (chan == 0) {
      src_size = h.shape[0];
    } else if (h.shape[0] != src_size) {
      throw IoError("case " + mc.id + ": modality sizes disagree");
    }
    auto r = resample_trilinear(v, src_size, target_size);
    out.image.insert(out.image.end(), r.begin(), r.end());
  }

  {
    VolumeHeader h;
    auto labels =
        read_volume_u8((fs::path(manifest_dir) / mc.labels).string(), h);
    if (h.shape.size() != 4 || h.shape[0] != kNumRegions ||
        h.shape[1] != src_size || h.shape[2] != src_size ||
        h.shape[3] != src_size) {
      throw IoError("case " + mc.id + ": bad label volume shape");
    }
    const std::size_t S3 = src_size * src_size * src_size;
    for (std::size_t r = 0; r < kNumRegions; ++r) {
      std::vector<std::uint8_t> one(labels.begin() +
                                        static_cast<std::ptrdiff_t>(r * S3),
                                    labels.begin() +
                                        static_cast<std::ptrdiff_t>((r + 1) *
                                                                    S3));
      out.regions[r] = resample_nearest(one, src_size, target_size);
    }
    check_region_nesting(out.regions, "case " + mc.id);
  }

  out.report = [&] {
    auto buf =
        iodetail::read_file((fs::path(manifest_dir) / mc.report).string());
    return std::string(buf.begin(), buf.end());
  }();
  return out;
}

}  // namespace textseg
