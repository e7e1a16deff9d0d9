#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "textseg/errors.hpp"

#include <json.hpp>

namespace textseg {

// Binary segmentation mask on a regular grid, dims ordered (z, y, x).
struct BinaryMask {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::vector<std::uint8_t> v;

  std::size_t size() const { return dims[0] * dims[1] * dims[2]; }
  bool at(std::size_t z, std::size_t y, std::size_t x) const {
    return v[(z * dims[1] + y) * dims[2] + x] != 0;
  }
};

inline void check_same_dims(const BinaryMask& a, const BinaryMask& b,
                            const char* op) {
  if (a.dims != b.dims || a.v.size() != a.size() || b.v.size() != b.size()) {
    throw ShapeError(std::string(op) + ": mask dims mismatch [" +
                     std::to_string(a.dims[0]) + "x" +
                     std::to_string(a.dims[1]) + "x" +
                     std::to_string(a.dims[2]) + "] vs [" +
                     std::to_string(b.dims[0]) + "x" +
                     std::to_string(b.dims[1]) + "x" +
                     std::to_string(b.dims[2]) + "]");
  }
}

// Dice similarity coefficient 2|P n G| / (|P| + |G|); both empty -> 1.
inline double dice(const BinaryMask& pred, const BinaryMask& gt) {
  check_same_dims(pred, gt, "dice");
  std::size_t np = 0, ng = 0, ni = 0;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    const bool p = pred.v[i] != 0, g = gt.v[i] != 0;
    np += p;
    ng += g;
    ni += p && g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
}

namespace metricsdetail {

// Surface voxels under 6-connectivity: in the mask with at least one face
// neighbour outside it (out-of-bounds counts as background).
inline std::vector<std::size_t> boundary_indices(const BinaryMask& m) {
  std::vector<std::size_t> out;
  const std::size_t D = m.dims[0], H = m.dims[1], W = m.dims[2];
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        if (!m.at(z, y, x)) continue;
        const bool interior = z > 0 && z + 1 < D && y > 0 && y + 1 < H &&
                              x > 0 && x + 1 < W && m.at(z - 1, y, x) &&
                              m.at(z + 1, y, x) && m.at(z, y - 1, x) &&
                              m.at(z, y + 1, x) && m.at(z, y, x - 1) &&
                              m.at(z, y, x + 1);
        if (!interior) out.push_back((z * H + y) * W + x);
      }
  return out;
}

inline constexpr double kEdtInf = 1e30;

// One-dimensional squared distance transform (lower envelope of parabolas),
// with squared per-step weight w to honour anisotropic spacing.
inline void dt1d(const std::vector<double>& f, std::vector<double>& d,
                 std::vector<int>& v, std::vector<double>& zb, int n,
                 double w) {
  int k = 0;
  v[0] = 0;
  zb[0] = -kEdtInf;
  zb[1] = kEdtInf;
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + w * q * q) - (f[p] + w * p * p)) /
          (2.0 * w * (q - p));
      if (s <= zb[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    zb[k] = s;
    zb[k + 1] = kEdtInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (zb[k + 1] < q) ++k;
    d[q] = w * (q - v[k]) * (q - v[k]) + f[v[k]];
  }
}

// Exact squared Euclidean distance map to the seed set.
inline std::vector<double> squared_edt(const std::array<std::size_t, 3>& dims,
                                       const std::vector<std::size_t>& seeds,
                                       const std::array<double, 3>& spacing) {
  const std::size_t D = dims[0], H = dims[1], W = dims[2];
  std::vector<double> g(D * H * W, kEdtInf);
  for (std::size_t s : seeds) g[s] = 0.0;

  const std::size_t nmax = std::max({D, H, W});
  std::vector<double> f(nmax), d(nmax), zb(nmax + 1);
  std::vector<int> v(nmax);

  // along x
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y) {
      double* row = &g[(z * H + y) * W];
      for (std::size_t x = 0; x < W; ++x) f[x] = row[x];
      dt1d(f, d, v, zb, static_cast<int>(W), spacing[2] * spacing[2]);
      for (std::size_t x = 0; x < W; ++x) row[x] = d[x];
    }
  // along y
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t y = 0; y < H; ++y) f[y] = g[(z * H + y) * W + x];
      dt1d(f, d, v, zb, static_cast<int>(H), spacing[1] * spacing[1]);
      for (std::size_t y = 0; y < H; ++y) g[(z * H + y) * W + x] = d[y];
    }
  // along z
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t z = 0; z < D; ++z) f[z] = g[(z * H + y) * W + x];
      dt1d(f, d, v, zb, static_cast<int>(D), spacing[0] * spacing[0]);
      for (std::size_t z = 0; z < D; ++z) g[(z * H + y) * W + x] = d[z];
    }
  return g;
}

// Percentile with linear interpolation between order statistics:
// rank = q * (n - 1), result = v[lo] + frac * (v[lo+1] - v[lo]).
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (pos - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

}  // namespace metricsdetail

// Sentinel for the one-empty-mask case: the full volume diagonal, which
// strictly dominates any realizable surface distance.
inline double volume_diagonal(const std::array<std::size_t, 3>& dims,
                              const std::array<double, 3>& spacing) {
  const double dz = static_cast<double>(dims[0]) * spacing[0];
  const double dy = static_cast<double>(dims[1]) * spacing[1];
  const double dx = static_cast<double>(dims[2]) * spacing[2];
  return std::sqrt(dz * dz + dy * dy + dx * dx);
}

// 95th percentile of the symmetric surface-to-surface distance multiset
// (all nearest-surface distances from pred boundary to gt boundary and vice
// versa, pooled). Boundaries via 6-connectivity erosion. Conventions:
// both masks empty -> 0; exactly one empty -> volume diagonal sentinel.
inline double hd95(const BinaryMask& pred, const BinaryMask& gt,
                   const std::array<double, 3>& spacing = {1.0, 1.0, 1.0}) {
  check_same_dims(pred, gt, "hd95");
  auto bp = metricsdetail::boundary_indices(pred);
  auto bg = metricsdetail::boundary_indices(gt);
  if (bp.empty() && bg.empty()) return 0.0;
  if (bp.empty() != bg.empty()) return volume_diagonal(pred.dims, spacing);

  auto dist_p = metricsdetail::squared_edt(pred.dims, bg, spacing);
  auto dist_g = metricsdetail::squared_edt(pred.dims, bp, spacing);
  std::vector<double> ds;
  ds.reserve(bp.size() + bg.size());
  for (std::size_t i : bp) ds.push_back(std::sqrt(dist_p[i]));
  for (std::size_t i : bg) ds.push_back(std::sqrt(dist_g[i]));
  return metricsdetail::percentile(std::move(ds), 0.95);
}

// ---------------------------------------------------------------------------
// Per-case and aggregate reports
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, 3> kRegionNames = {"ET", "WT", "TC"};

struct RegionScores {
  double dice = 0.0;
  double hd95 = 0.0;
};

struct CaseMetrics {
  std::string case_id;
  std::array<RegionScores, 3> regions{};  // ordered (ET, WT, TC)
  RegionScores avg{};
};

// Region channels ordered (ET, WT, TC); predictions already binarized.
inline CaseMetrics evaluate_case(const std::array<BinaryMask, 3>& pred,
                                 const std::array<BinaryMask, 3>& gt,
                                 const std::array<double, 3>& spacing =
                                     {1.0, 1.0, 1.0},
                                 const std::string& case_id = "") {
  CaseMetrics out;
  out.case_id = case_id;
  for (std::size_t r = 0; r < 3; ++r) {
    out.regions[r].dice = dice(pred[r], gt[r]);
    out.regions[r].hd95 = hd95(pred[r], gt[r], spacing);
    out.avg.dice += out.regions[r].dice / 3.0;
    out.avg.hd95 += out.regions[r].hd95 / 3.0;
  }
  return out;
}

struct MetricsReport {
  std::vector<CaseMetrics> cases;
  std::array<RegionScores, 3> mean_regions{};
  RegionScores mean_avg{};

  static MetricsReport aggregate(std::vector<CaseMetrics> per_case) {
    MetricsReport rep;
    rep.cases = std::move(per_case);
    if (rep.cases.empty()) return rep;
    const double n = static_cast<double>(rep.cases.size());
    for (const auto& c : rep.cases)
      for (std::size_t r = 0; r < 3; ++r) {
        rep.mean_regions[r].dice += c.regions[r].dice / n;
        rep.mean_regions[r].hd95 += c.regions[r].hd95 / n;
      }
    for (std::size_t r = 0; r < 3; ++r) {
      rep.mean_avg.dice += rep.mean_regions[r].dice / 3.0;
      rep.mean_avg.hd95 += rep.mean_regions[r].hd95 / 3.0;
    }
    return rep;
  }
};

// One JSON record per case, fixed field order, then one "aggregate" record.
inline std::string metrics_jsonl(const MetricsReport& rep) {
  std::string out;
  auto scores_json = [](const std::array<RegionScores, 3>& rs,
                        const RegionScores& avg) {
    nlohmann::ordered_json d, h;
    for (std::size_t r = 0; r < 3; ++r) {
      d[kRegionNames[r]] = rs[r].dice;
      h[kRegionNames[r]] = rs[r].hd95;
    }
    d["Avg"] = avg.dice;
    h["Avg"] = avg.hd95;
    return std::pair(d, h);
  };
  for (const auto& c : rep.cases) {
    nlohmann::ordered_json j;
    j["record"] = "case";
    j["id"] = c.case_id;
    auto [d, h] = scores_json(c.regions, c.avg);
    j["dice"] = d;
    j["hd95"] = h;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json j;
  j["record"] = "aggregate";
  j["cases"] = rep.cases.size();
  auto [d, h] = scores_json(rep.mean_regions, rep.mean_avg);
  j["dice"] = d;
  j["hd95"] = h;
  out += j.dump() + "\n";
  return out;
}

// Fixed-width summary with the ET / WT / TC / Avg column structure.
inline std::string metrics_summary_table(const MetricsReport& rep) {
  char buf[160];
  std::string out = "metric        ET        WT        TC       Avg\n";
  std::snprintf(buf, sizeof(buf), "dice    %8.4f  %8.4f  %8.4f  %8.4f\n",
                rep.mean_regions[0].dice, rep.mean_regions[1].dice,
                rep.mean_regions[2].dice, rep.mean_avg.dice);
  out += buf;
  std::snprintf(buf, sizeof(buf), "hd95    %8.4f  %8.4f  %8.4f  %8.4f\n",
                rep.mean_regions[0].hd95, rep.mean_regions[1].hd95,
                rep.mean_regions[2].hd95, rep.mean_avg.hd95);
  out += buf;
  out += "cases   " + std::to_string(rep.cases.size()) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Two-sample t-tests
// ---------------------------------------------------------------------------

namespace metricsdetail {

// Continued-fraction evaluation of the incomplete beta function (modified
// Lentz). Converges to ~1e-14 for the arguments used here; the documented
// accuracy of the resulting p-values is 1e-8.
inline double betacf(double a, double b, double x) {
  constexpr double kFpMin = 1e-300;
  constexpr int kMaxIter = 500;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-14) break;
  }
  return h;
}

// Regularized incomplete beta I_x(a, b).
inline double betainc_reg(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                     a * std::log(x) + b * std::log(1.0 - x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return bt * betacf(a, b, x) / a;
  }
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

inline void mean_var(const std::vector<double>& s, double& mean,
                     double& var) {
  const double n = static_cast<double>(s.size());
  mean = 0.0;
  for (double v : s) mean += v;
  mean /= n;
  var = 0.0;
  for (double v : s) var += (v - mean) * (v - mean);
  var /= (n - 1.0);
}

}  // namespace metricsdetail

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
};

// Two-sided p for Student's t via the regularized incomplete beta:
// p = I_{df/(df+t^2)}(df/2, 1/2).
inline double t_two_sided_p(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  if (t == 0.0) return 1.0;
  return metricsdetail::betainc_reg(df / 2.0, 0.5, df / (df + t * t));
}

// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of
// freedom. Zero variance in both samples: equal means -> t = 0, p = 1;
// otherwise t = +/-inf, p = 0.
inline TTestResult welch_t_test(const std::vector<double>& a,
                                const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ContractError("welch_t_test: each sample needs >= 2 values");
  }
  double ma, va, mb, vb;
  metricsdetail::mean_var(a, ma, va);
  metricsdetail::mean_var(b, mb, vb);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  TTestResult r;
  if (sa + sb == 0.0) {
    r.df = na + nb - 2.0;
    if (ma == mb) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = ma > mb ? std::numeric_limits<double>::infinity()
                    : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) /
         (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  r.p = t_two_sided_p(r.t, r.df);
  return r;
}

// Pooled-variance (classic two-sample) t-test, df = na + nb - 2.
inline TTestResult pooled_t_test(const std::vector<double>& a,
                                 const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ContractError("pooled_t_test: each sample needs >= 2 values");
  }
  double ma, va, mb, vb;
  metricsdetail::mean_var(a, ma, va);
  metricsdetail::mean_var(b, mb, vb);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double sp2 =
      ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
  TTestResult r;
  r.df = na + nb - 2.0;
  const double se = std::sqrt(sp2 * (1.0 / na + 1.0 / nb));
  if (se == 0.0) {
    if (ma == mb) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = ma > mb ? std::numeric_limits<double>::infinity()
                    : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = (ma - mb) / se;
  r.p = t_two_sided_p(r.t, r.df);
  return r;
}

}  // namespace textseg
