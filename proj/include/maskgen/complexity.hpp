// SPDX-License-Identifier: Apache-2.0
//
// Multiply-count models for global, windowed and sparse windowed attention,
// their instrumented counterparts, and the label-entropy redundancy metric.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskgen/numerics.hpp"

namespace maskgen {

using Count = std::uint64_t;

namespace detail {

inline Count checked_mul(Count a, Count b) {
  Count out = 0;
  if (__builtin_mul_overflow(a, b, &out)) throw std::overflow_error("multiply count overflows 64 bits");
  return out;
}

inline Count checked_add(Count a, Count b) {
  Count out = 0;
  if (__builtin_add_overflow(a, b, &out)) throw std::overflow_error("multiply count overflows 64 bits");
  return out;
}

inline Count checked_product(std::initializer_list<Count> factors) {
  Count out = 1;
  for (Count f : factors) out = checked_mul(out, f);
  return out;
}

inline void require_positive(std::initializer_list<Count> args) {
  for (Count a : args) {
    if (a == 0) throw std::invalid_argument("complexity arguments must be positive");
  }
}

inline void require_rho(double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in (0, 1]");
}

}  // namespace detail

/// Projection term shared by all three models: 4 h w C^2.
inline Count flops_projection(Count h, Count w, Count c) {
  detail::require_positive({h, w, c});
  return detail::checked_product({4, h, w, c, c});
}

/// 4 h w C^2 + 2 (h w)^2 C
inline Count flops_msa(Count h, Count w, Count c) {
  const Count hw = detail::checked_mul(h, w);
  return detail::checked_add(flops_projection(h, w, c), detail::checked_product({2, hw, hw, c}));
}

/// 4 h w C^2 + 2 M^2 h w, or 2 M^2 h w C with the Swin convention.
inline Count flops_wmsa(Count h, Count w, Count c, Count m, bool swin_convention = false) {
  detail::require_positive({m});
  Count attn = detail::checked_product({2, m, m, h, w});
  if (swin_convention) attn = detail::checked_mul(attn, c);
  return detail::checked_add(flops_projection(h, w, c), attn);
}

/// 4 h w C^2 + round(rho * 2 M^2 h w), C-scaled under the Swin convention.
inline Count flops_wssa(Count h, Count w, Count c, Count m, double rho, bool swin_convention = false) {
  detail::require_rho(rho);
  detail::require_positive({m});
  Count attn = detail::checked_product({2, m, m, h, w});
  if (swin_convention) attn = detail::checked_mul(attn, c);
  const auto scaled = static_cast<long double>(attn) * static_cast<long double>(rho);
  return detail::checked_add(flops_projection(h, w, c), static_cast<Count>(std::llround(scaled)));
}

enum class Mechanism { msa, wmsa, wssa };

inline std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::msa: return "msa";
    case Mechanism::wmsa: return "wmsa";
    case Mechanism::wssa: return "wssa";
  }
  return "?";
}

inline Mechanism parse_mechanism(const std::string& s) {
  if (s == "msa") return Mechanism::msa;
  if (s == "wmsa") return Mechanism::wmsa;
  if (s == "wssa") return Mechanism::wssa;
  throw std::invalid_argument("unknown attention mechanism '" + s + "'");
}

/// Keys kept per window by the sparse counting model: ceil(rho * M^2).
inline Count kept_keys(Count m, double rho) {
  detail::require_rho(rho);
  const auto k = static_cast<Count>(std::ceil(rho * static_cast<double>(m * m) - 1e-9));
  return std::clamp<Count>(k, 1, m * m);
}

struct FlopReport {
  Mechanism mechanism = Mechanism::msa;
  Count h = 0, w = 0, c = 0, m = 0;
  double rho = 1.0;
  bool swin_convention = false;
  Count analytic = 0;           // formula under the selected convention
  Count counted = 0;            // matmul multiplies observed by the counter (0 when not measured)
  Count counted_projection = 0;
  Count counted_attention = 0;
  bool measured = false;

  double ratio() const { return measured && analytic ? static_cast<double>(counted) / static_cast<double>(analytic) : 0.0; }
};

inline Count analytic_flops(Mechanism mech, Count h, Count w, Count c, Count m, double rho, bool swin_convention) {
  switch (mech) {
    case Mechanism::msa: return flops_msa(h, w, c);
    case Mechanism::wmsa: return flops_wmsa(h, w, c, m, swin_convention);
    case Mechanism::wssa: return flops_wssa(h, w, c, m, rho, swin_convention);
  }
  return 0;
}

namespace detail {

/// Rows of `x` ([n, c]) listed in `rows`, as a [rows.size(), c] tensor.
template <class T>
Tensor<T> take_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t c = x.shape().back();
  Tensor<T> out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

/// softmax(q k^T) v for one group; all multiplies go through matmul.
template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  return kernels::matmul(kernels::softmax_lastdim(kernels::matmul(q, k, true)), v);
}

}  // namespace detail

/// Runs single-head attention of the chosen kind on seeded random tokens
/// with the multiply counter enabled. Windowed kinds pad the grid up to a
/// multiple of M, so counts exceed the formulas when M does not divide h, w.
/// The sparse kind keeps the ceil(rho M^2) highest-scoring keys per window,
/// scored by a seeded random token mask.
inline FlopReport measure_attention_cost(Mechanism mech, Count h, Count w, Count c, Count m, double rho,
                                         bool swin_convention = false, std::uint64_t seed = 42) {
  detail::require_positive({h, w, c, m});
  detail::require_rho(rho);
  FlopReport r;
  r.mechanism = mech;
  r.h = h;
  r.w = w;
  r.c = c;
  r.m = m;
  r.rho = rho;
  r.swin_convention = swin_convention;
  r.analytic = analytic_flops(mech, h, w, c, m, rho, swin_convention);
  if (h * w > 4096) throw std::invalid_argument("measured attention cost is limited to h * w <= 4096");

  Rng rng(seed);
  const std::size_t n = h * w;
  const auto x = rng.normal_tensor<double>(Shape{n, c});
  const auto score = rng.uniform_tensor<double>(Shape{n}, 0, 1);
  std::vector<Tensor<double>> proj;
  for (int i = 0; i < 4; ++i) proj.push_back(rng.normal_tensor<double>(Shape{c, c}, 0.1));

  OpCounter counter;
  {
    CountingScope scope(counter);
    const auto q = kernels::matmul(x, proj[0]);
    const auto k = kernels::matmul(x, proj[1]);
    const auto v = kernels::matmul(x, proj[2]);
    r.counted_projection = counter.count();
    Tensor<double> out(Shape{n, c});
    if (mech == Mechanism::msa) {
      out = detail::attend(q, k, v);
    } else {
      const std::size_t hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
      const std::size_t keep = mech == Mechanism::wssa ? kept_keys(m, rho) : m * m;
      // Padded positions are zero tokens that still cost a row.
      auto padded = [&](const Tensor<double>& t) {
        Tensor<double> p(Shape{hp * wp, c});
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx)
            std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>((y * w + xx) * c), c,
                        p.data().begin() + static_cast<std::ptrdiff_t>((y * wp + xx) * c));
        return p;
      };
      const auto qp = padded(q), kp = padded(k), vp = padded(v);
      for (std::size_t wy = 0; wy < hp / m; ++wy)
        for (std::size_t wx = 0; wx < wp / m; ++wx) {
          std::vector<std::size_t> rows;
          for (std::size_t y = wy * m; y < (wy + 1) * m; ++y)
            for (std::size_t xx = wx * m; xx < (wx + 1) * m; ++xx) rows.push_back(y * wp + xx);
          std::vector<std::size_t> keys = rows;
          auto rank = [&](std::size_t row) {
            const std::size_t y = row / wp, xx = row % wp;
            return (y < h && xx < w) ? score[y * w + xx] : -1.0;
          };
          std::stable_sort(keys.begin(), keys.end(), [&](std::size_t a, std::size_t b) { return rank(a) > rank(b); });
          keys.resize(keep);
          const auto o = detail::attend(detail::take_rows(qp, rows), detail::take_rows(kp, keys),
                                        detail::take_rows(vp, keys));
          for (std::size_t i = 0; i < rows.size(); ++i) {
            const std::size_t y = rows[i] / wp, xx = rows[i] % wp;
            if (y < h && xx < w)
              std::copy_n(o.data().begin() + static_cast<std::ptrdiff_t>(i * c), c,
                          out.data().begin() + static_cast<std::ptrdiff_t>((y * w + xx) * c));
          }
        }
    }
    const Count before_out = counter.count();
    kernels::matmul(out, proj[3]);
    r.counted_attention = before_out - r.counted_projection;
    r.counted_projection += counter.count() - before_out;
  }
  r.counted = counter.count();
  r.measured = true;
  return r;
}

/// Report without running the counter.
inline FlopReport analytic_report(Mechanism mech, Count h, Count w, Count c, Count m, double rho,
                                  bool swin_convention = false) {
  FlopReport r;
  r.mechanism = mech;
  r.h = h;
  r.w = w;
  r.c = c;
  r.m = m;
  r.rho = rho;
  r.swin_convention = swin_convention;
  r.analytic = analytic_flops(mech, h, w, c, m, rho, swin_convention);
  return r;
}

/// 1234567 -> "1,234,567"
inline std::string group_thousands(Count v) {
  std::string digits = std::to_string(v);
  std::string out;
  const std::size_t lead = digits.size() % 3;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i != 0 && (i + 3 - lead) % 3 == 0) out.push_back(',');
    out.push_back(digits[i]);
  }
  return out;
}

inline std::string format_rho(double rho) {
  std::ostringstream os;
  os << rho;
  return os.str();
}

inline void write_flop_csv(std::ostream& os, std::span<const FlopReport> rows) {
  os << "mechanism,h,w,C,M,rho,analytic,counted,ratio\n";
  for (const auto& r : rows) {
    os << to_string(r.mechanism) << ',' << r.h << ',' << r.w << ',' << r.c << ',' << r.m << ',' << format_rho(r.rho)
       << ',' << r.analytic << ',';
    if (r.measured) {
      std::ostringstream ratio;
      ratio << std::setprecision(6) << std::fixed << r.ratio();
      os << r.counted << ',' << ratio.str();
    } else {
      os << ',';
    }
    os << '\n';
  }
}

inline void write_flop_table(std::ostream& os, std::span<const FlopReport> rows) {
  const std::vector<std::string> header{"mechanism", "h", "w", "C", "M", "rho", "analytic", "counted", "ratio"};
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& r : rows) {
    std::ostringstream ratio;
    if (r.measured) ratio << std::setprecision(6) << std::fixed << r.ratio();
    cells.push_back({to_string(r.mechanism), std::to_string(r.h), std::to_string(r.w), std::to_string(r.c),
                     std::to_string(r.m), format_rho(r.rho), group_thousands(r.analytic),
                     r.measured ? group_thousands(r.counted) : "-", r.measured ? ratio.str() : "-"});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      if (i) os << "  ";
      // Text columns left-aligned, numbers right-aligned.
      if (i == 0) os << std::left << std::setw(static_cast<int>(width[i])) << cells[r][i];
      else os << std::right << std::setw(static_cast<int>(width[i])) << cells[r][i];
    }
    os << '\n';
  }
}

/// Shannon entropy (natural log) of the empirical label distribution.
inline double label_entropy(std::span<const std::int64_t> labels) {
  if (labels.empty()) throw std::invalid_argument("entropy of an empty label map");
  std::map<std::int64_t, std::size_t> freq;
  for (auto l : labels) ++freq[l];
  double h = 0.0;
  const auto n = static_cast<double>(labels.size());
  for (const auto& [label, count] : freq) {
    const double p = static_cast<double>(count) / n;
    h -= p * std::log(p);
  }
  return h;
}

/// R = 1 - H(patch labels) / H(pixel labels), clamped to [0, 1]; 0 when the
/// pixel labels carry no entropy.
inline double redundancy_metric(std::span<const std::int64_t> patch_labels, std::span<const std::int64_t> pixel_labels) {
  const double hp = label_entropy(patch_labels);
  const double hx = label_entropy(pixel_labels);
  if (hx == 0.0) return 0.0;
  return std::clamp(1.0 - hp / hx, 0.0, 1.0);
}

/// Majority label of each patch x patch block of a height x width map (ties
/// go to the smaller label). Partial edge blocks vote with what they have.
inline std::vector<std::int64_t> majority_pool(std::span<const std::int64_t> labels, std::size_t height,
                                               std::size_t width, std::size_t patch) {
  if (labels.size() != height * width) throw DimensionError("label map size does not match its extents");
  if (patch == 0) throw std::invalid_argument("patch size must be positive");
  std::vector<std::int64_t> out;
  for (std::size_t py = 0; py < height; py += patch)
    for (std::size_t px = 0; px < width; px += patch) {
      std::map<std::int64_t, std::size_t> votes;
      for (std::size_t y = py; y < std::min(height, py + patch); ++y)
        for (std::size_t x = px; x < std::min(width, px + patch); ++x) ++votes[labels[y * width + x]];
      auto best = votes.begin();
      for (auto it = votes.begin(); it != votes.end(); ++it) {
        if (it->second > best->second) best = it;
      }
      out.push_back(best->first);
    }
  return out;
}

}  // namespace maskgen
