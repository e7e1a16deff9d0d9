// Independent reference implementations used only by tests. These stay
// deliberately naive (explicit loops, no shared code with the library) so
// they can serve as oracles for the optimized / autodiff paths.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

namespace oracles {

// c[m x n] = a[m x k] . b[k x n], triple loop.
inline std::vector<double> matmul_ref(const std::vector<double>& a,
                                      const std::vector<double>& b,
                                      std::size_t m, std::size_t k,
                                      std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

inline std::vector<double> softmax_rows_ref(const std::vector<double>& x,
                                            std::size_t r, std::size_t c) {
  std::vector<double> y(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      y[i * c + j] = std::exp(x[i * c + j] - mx);
      sum += y[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] /= sum;
  }
  return y;
}

// Direct recomputation of (x - mean) / sqrt(var + eps) * gamma + beta per row.
inline std::vector<double> layer_norm_ref(const std::vector<double>& x,
                                          const std::vector<double>& gamma,
                                          const std::vector<double>& beta,
                                          std::size_t rows, std::size_t c,
                                          double eps) {
  std::vector<double> y(rows * c);
  for (std::size_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x[i * c + j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double d = x[i * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) {
      y[i * c + j] =
          gamma[j] * (x[i * c + j] - mean) / std::sqrt(var + eps) + beta[j];
    }
  }
  return y;
}

// Naive zero-padded strided 3-D convolution, written index-first so it shares
// no loop structure with the library implementation.
inline std::vector<double> conv3d_ref(
    const std::vector<double>& x, std::size_t B, std::size_t Ci, std::size_t D,
    std::size_t H, std::size_t W, const std::vector<double>& w, std::size_t Co,
    std::size_t K, const std::vector<double>& bias, std::size_t stride,
    std::size_t pad) {
  auto odim = [&](std::size_t in) { return (in + 2 * pad - K) / stride + 1; };
  const std::size_t OD = odim(D), OH = odim(H), OW = odim(W);
  std::vector<double> y(B * Co * OD * OH * OW, 0.0);
  auto xat = [&](std::size_t b, std::size_t c, long z, long yy,
                 long xx) -> double {
    if (z < 0 || yy < 0 || xx < 0 || z >= static_cast<long>(D) ||
        yy >= static_cast<long>(H) || xx >= static_cast<long>(W))
      return 0.0;
    return x[(((b * Ci + c) * D + z) * H + yy) * W + xx];
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t oz = 0; oz < OD; ++oz)
        for (std::size_t oy = 0; oy < OH; ++oy)
          for (std::size_t ox = 0; ox < OW; ++ox) {
            double acc = bias.empty() ? 0.0 : bias[co];
            for (std::size_t ci = 0; ci < Ci; ++ci)
              for (std::size_t kz = 0; kz < K; ++kz)
                for (std::size_t ky = 0; ky < K; ++ky)
                  for (std::size_t kx = 0; kx < K; ++kx)
                    acc += xat(b, ci,
                               static_cast<long>(oz * stride + kz) -
                                   static_cast<long>(pad),
                               static_cast<long>(oy * stride + ky) -
                                   static_cast<long>(pad),
                               static_cast<long>(ox * stride + kx) -
                                   static_cast<long>(pad)) *
                           w[(((co * Ci + ci) * K + kz) * K + ky) * K + kx];
            y[(((b * Co + co) * OD + oz) * OH + oy) * OW + ox] = acc;
          }
  return y;
}

// --- Fusion oracles ---------------------------------------------------------
// Step-by-step recomputation of the two-stage fusion with explicit loops.
// Deliberately shares no code with the library (naive softmax, inline
// layernorm).

struct MBlockRef {
  std::vector<double> g1, b1, w, b, g2, b2;  // norms and the D x D linear
};

inline std::vector<double> mm_ref(const std::vector<double>& a,
                                  const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  return matmul_ref(a, b, m, k, n);
}

inline std::vector<double> mblock_ref(const std::vector<double>& x,
                                      std::size_t rows, std::size_t d,
                                      const MBlockRef& p, double eps = 1e-5) {
  auto ln = [&](const std::vector<double>& in, const std::vector<double>& g,
                const std::vector<double>& be) {
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < rows; ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += in[i * d + j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double dd = in[i * d + j] - mean;
        var += dd * dd;
      }
      var /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j)
        out[i * d + j] =
            g[j] * (in[i * d + j] - mean) / std::sqrt(var + eps) + be[j];
    }
    return out;
  };
  std::vector<double> h = ln(x, p.g1, p.b1);
  std::vector<double> lin = mm_ref(h, p.w, rows, d, d);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) lin[i * d + j] += p.b[j];
  return ln(lin, p.g2, p.b2);
}

// softmax over each row restricted to unmasked columns (naive exp).
inline std::vector<double> masked_softmax_ref(
    const std::vector<double>& s, std::size_t rows, std::size_t cols,
    const std::vector<std::uint8_t>& mask) {
  std::vector<double> a(rows * cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!mask.empty() && !mask[j]) continue;
      a[i * cols + j] = std::exp(s[i * cols + j]);
      sum += a[i * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) a[i * cols + j] /= sum;
  }
  return a;
}

inline std::vector<double> cross_attention_ref(
    const std::vector<double>& q_src, std::size_t nq,
    const std::vector<double>& kv_src, std::size_t nk, std::size_t d,
    const std::vector<double>& wq, const std::vector<double>& wk,
    const std::vector<double>& wv, const MBlockRef& m, double scale_d,
    const std::vector<std::uint8_t>& kv_mask) {
  auto q = mm_ref(q_src, wq, nq, d, d);
  auto k = mm_ref(kv_src, wk, nk, d, d);
  auto v = mm_ref(kv_src, wv, nk, d, d);
  std::vector<double> s(nq * nk);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < nk; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < d; ++p) acc += q[i * d + p] * k[j * d + p];
      s[i * nk + j] = acc / std::sqrt(scale_d);
    }
  auto a = masked_softmax_ref(s, nq, nk, kv_mask);
  auto h = mm_ref(a, v, nq, nk, d);
  return mblock_ref(h, nq, d, m);
}

struct FusionRefParams {
  std::vector<double> wq, wk, wv;
  MBlockRef m;
  std::vector<double> wq2, wk2, wv2;
  MBlockRef m2;
};

inline std::vector<double> fuse_bidirectional_ref(
    const std::vector<double>& f_t, std::size_t T,
    const std::vector<double>& f_i, std::size_t N, std::size_t d,
    const FusionRefParams& p, double scale_d,
    const std::vector<std::uint8_t>& text_mask) {
  auto refined = cross_attention_ref(f_t, T, f_i, N, d, p.wq, p.wk, p.wv, p.m,
                                     scale_d, {});
  return cross_attention_ref(f_i, N, refined, T, d, p.wq2, p.wk2, p.wv2, p.m2,
                             scale_d, text_mask);
}

inline std::vector<double> fuse_t2i_once_ref(
    const std::vector<double>& f_t, std::size_t T,
    const std::vector<double>& f_i, std::size_t N, std::size_t d,
    const FusionRefParams& p, double scale_d,
    const std::vector<std::uint8_t>& text_mask) {
  return cross_attention_ref(f_i, N, f_t, T, d, p.wq, p.wk, p.wv, p.m, scale_d,
                             text_mask);
}

inline std::vector<double> fuse_dot_sum_ref(
    const std::vector<double>& f_t, std::size_t T,
    const std::vector<double>& f_i, std::size_t N, std::size_t d,
    const std::vector<std::uint8_t>& text_mask) {
  std::vector<double> pooled(d, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < T; ++i) {
    if (!text_mask[i]) continue;
    ++count;
    for (std::size_t j = 0; j < d; ++j) pooled[j] += f_t[i * d + j];
  }
  for (double& v : pooled) v /= static_cast<double>(count);
  std::vector<double> out(N * d);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = f_i[i * d + j] + f_i[i * d + j] * pooled[j];
  return out;
}

// --- Metric oracles -------------------------------------------------------

inline double dice_ref(const std::vector<std::uint8_t>& p,
                       const std::vector<std::uint8_t>& g) {
  std::size_t np = 0, ng = 0, ni = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    np += p[i] != 0;
    ng += g[i] != 0;
    ni += (p[i] != 0 && g[i] != 0);
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
}

// Boundary voxels: in the mask with at least one 6-neighbour outside (or at
// the volume edge).
inline std::vector<std::array<std::size_t, 3>> boundary_ref(
    const std::vector<std::uint8_t>& m, std::size_t D, std::size_t H,
    std::size_t W) {
  std::vector<std::array<std::size_t, 3>> out;
  auto at = [&](long z, long y, long x) -> bool {
    if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(D) ||
        y >= static_cast<long>(H) || x >= static_cast<long>(W))
      return false;
    return m[(static_cast<std::size_t>(z) * H + static_cast<std::size_t>(y)) *
                 W +
             static_cast<std::size_t>(x)] != 0;
  };
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        if (!at(static_cast<long>(z), static_cast<long>(y),
                static_cast<long>(x)))
          continue;
        const long zi = static_cast<long>(z), yi = static_cast<long>(y),
                   xi = static_cast<long>(x);
        if (!at(zi - 1, yi, xi) || !at(zi + 1, yi, xi) || !at(zi, yi - 1, xi) ||
            !at(zi, yi + 1, xi) || !at(zi, yi, xi - 1) || !at(zi, yi, xi + 1))
          out.push_back({z, y, x});
      }
  return out;
}

// Linear-interpolation percentile over a sorted copy.
inline double percentile_ref(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return 0.0;
  if (v.size() == 1) return v[0];
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

// Full O(n^2) symmetric 95th-percentile surface distance.
inline double hd95_ref(const std::vector<std::uint8_t>& p,
                       const std::vector<std::uint8_t>& g, std::size_t D,
                       std::size_t H, std::size_t W,
                       std::array<double, 3> spacing = {1.0, 1.0, 1.0}) {
  auto bp = boundary_ref(p, D, H, W);
  auto bg = boundary_ref(g, D, H, W);
  const bool pe = bp.empty(), ge = bg.empty();
  if (pe && ge) return 0.0;
  if (pe != ge) {
    return std::sqrt(spacing[0] * D * spacing[0] * D +
                     spacing[1] * H * spacing[1] * H +
                     spacing[2] * W * spacing[2] * W);
  }
  auto dist = [&](const std::array<std::size_t, 3>& a,
                  const std::array<std::size_t, 3>& b) {
    const double dz = (static_cast<double>(a[0]) - static_cast<double>(b[0])) *
                      spacing[0];
    const double dy = (static_cast<double>(a[1]) - static_cast<double>(b[1])) *
                      spacing[1];
    const double dx = (static_cast<double>(a[2]) - static_cast<double>(b[2])) *
                      spacing[2];
    return std::sqrt(dz * dz + dy * dy + dx * dx);
  };
  std::vector<double> ds;
  ds.reserve(bp.size() + bg.size());
  for (const auto& a : bp) {
    double best = dist(a, bg[0]);
    for (const auto& b : bg) best = std::min(best, dist(a, b));
    ds.push_back(best);
  }
  for (const auto& b : bg) {
    double best = dist(b, bp[0]);
    for (const auto& a : bp) best = std::min(best, dist(b, a));
    ds.push_back(best);
  }
  return percentile_ref(ds, 0.95);
}

// --- Statistics oracles ----------------------------------------------------

// Textbook Welch t statistic and Welch-Satterthwaite dof.
inline void welch_ref(const std::vector<double>& a,
                      const std::vector<double>& b, double& t, double& df) {
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  double ma = 0.0, mb = 0.0;
  for (double v : a) ma += v;
  for (double v : b) mb += v;
  ma /= na;
  mb /= nb;
  double va = 0.0, vb = 0.0;
  for (double v : a) va += (v - ma) * (v - ma);
  for (double v : b) vb += (v - mb) * (v - mb);
  va /= (na - 1.0);
  vb /= (nb - 1.0);
  const double sa = va / na, sb = vb / nb;
  t = (ma - mb) / std::sqrt(sa + sb);
  df = (sa + sb) * (sa + sb) /
       (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
}

// Two-sided p-value by adaptive Simpson quadrature of the t density.
inline double t_two_sided_p_ref(double t, double df) {
  const double at = std::fabs(t);
  // pdf of Student's t with df degrees of freedom
  const double logc = std::lgamma((df + 1.0) / 2.0) - std::lgamma(df / 2.0) -
                      0.5 * std::log(df * 3.14159265358979323846);
  auto pdf = [&](double x) {
    return std::exp(logc - (df + 1.0) / 2.0 * std::log1p(x * x / df));
  };
  std::function<double(double, double, double, double, double, int)> simpson =
      [&](double lo, double hi, double flo, double fhi, double whole,
          int depth) -> double {
    const double mid = 0.5 * (lo + hi);
    const double fmid = pdf(mid);
    const double left = (mid - lo) / 6.0 * (flo + 4.0 * pdf(0.5 * (lo + mid)) + fmid);
    const double right = (hi - mid) / 6.0 * (fmid + 4.0 * pdf(0.5 * (mid + hi)) + fhi);
    if (depth > 40 || std::fabs(left + right - whole) < 1e-13)
      return left + right;
    return simpson(lo, mid, flo, fmid, left, depth + 1) +
           simpson(mid, hi, fmid, fhi, right, depth + 1);
  };
  // integrate the central mass [-at, at] and subtract from 1
  const double flo = pdf(0.0), fhi = pdf(at);
  const double half =
      at == 0.0 ? 0.0
                : simpson(0.0, at, flo, fhi,
                          at / 6.0 * (flo + 4.0 * pdf(at / 2.0) + fhi), 0);
  double p = 1.0 - 2.0 * half;
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace oracles
