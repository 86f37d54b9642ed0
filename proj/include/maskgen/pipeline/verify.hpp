// SPDX-License-Identifier: Apache-2.0
//
// Self-contained verification suites run by the `gradcheck` and `selftest`
// subcommands.
#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "maskgen/coarse_stage.hpp"
#include "maskgen/complexity.hpp"
#include "maskgen/fine_stage.hpp"
#include "maskgen/losses.hpp"
#include "maskgen/pipeline/config.hpp"
#include "maskgen/pipeline/pgm.hpp"
#include "maskgen/pipeline/tensor_file.hpp"

namespace maskgen {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return true;
}

namespace detail {

inline Var<double> weighted_total(const Var<double>& v, const Tensor<double>& weights) {
  return sum_all(mul(v, Var<double>::constant(weights)));
}

inline Tensor<double> binary_target(Rng& rng, Shape s) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  return t;
}

inline SparseAttnParams<double> randomized_attention(std::size_t c, std::size_t heads, std::size_t ws, Rng& rng) {
  auto p = SparseAttnParams<double>::init(c, heads, ws, rng);
  for (auto* v : {&p.w_q, &p.w_k, &p.w_v}) *v = Var<double>::constant(rng.normal_tensor<double>(Shape{c, c}, 0.6));
  p.bias_table = Var<double>::constant(rng.normal_tensor<double>(p.bias_table.shape(), 0.5));
  p.alpha_scale = Var<double>::constant(Tensor<double>(Shape{1}, 0.8));
  return p;
}

inline CoarseParams<double> randomized_coarse(std::size_t c, std::size_t heads, Rng& rng) {
  auto p = CoarseParams<double>::init(c, 4, rng, heads);
  auto randomize = [&](Var<double>& v, double sd) { v = Var<double>::constant(rng.normal_tensor<double>(v.shape(), sd)); };
  randomize(p.layer_weights.logits, 1.0);
  for (auto* v : {&p.selector.w1, &p.selector.w2}) randomize(*v, 0.8);
  for (auto* v : {&p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.fuse_features, &p.fuse_attention}) randomize(*v, 0.7);
  return p;
}

}  // namespace detail

/// Finite-difference checks of every differentiable stage, in f64.
inline std::vector<CheckResult> gradient_suite(double tol = 1e-4, double eps = 1e-5, std::uint64_t seed = 42) {
  using detail::weighted_total;
  Rng rng(seed);
  std::vector<CheckResult> out;
  auto run = [&](const std::string& name, const ScalarFn& f, const Tensor<double>& x) {
    const auto r = grad_check(f, x, eps);
    std::ostringstream d;
    d << "max relative error " << r.max_rel_error;
    out.push_back({name, r.passed(tol), d.str()});
  };

  {
    const auto tau = Var<double>::constant(Tensor<double>(Shape{2, 1}, {0.4, 0.6}));
    const auto w = rng.normal_tensor<double>(Shape{2, 12});
    run("soft_select", [&](const Var<double>& s) { return weighted_total(soft_select(s, tau, 10.0), w); },
        rng.uniform_tensor<double>(Shape{2, 12}, 0, 1));
  }
  {
    const auto params = detail::randomized_coarse(4, 2, rng);
    const auto f = rng.normal_tensor<double>(Shape{1, 4, 3, 3});
    const auto s = rng.uniform_tensor<double>(Shape{1, 9}, 0, 1);
    auto objective = [&](const Var<double>& feats, const Var<double>& scores) {
      const auto o = guided_global_attention(feats, scores, params);
      return add(sum_all(o.mask), sum_all(o.features));
    };
    run("guided_global_attention (features)",
        [&](const Var<double>& v) { return objective(v, Var<double>::constant(s)); }, f);
    run("guided_global_attention (scores)",
        [&](const Var<double>& v) { return objective(Var<double>::constant(f), v); }, s);
  }
  {
    const auto p = detail::randomized_attention(8, 2, 6, rng);
    const auto m = Var<double>::constant(rng.uniform_tensor<double>(Shape{1, 36}, 0, 1));
    const auto w = rng.normal_tensor<double>(Shape{1, 36, 8});
    run("sparse_window_attention",
        [&](const Var<double>& x) { return weighted_total(sparse_window_attention(x, m, p), w); },
        rng.normal_tensor<double>(Shape{1, 36, 8}, 0.5));
  }
  {
    auto params = FineParams<double>::init(4, 2, 6, rng, 10.0, 2);
    for (auto& pass : params.block.passes) {
      pass.attention = detail::randomized_attention(4, 2, 6, rng);
      pass.mlp.fc2 = Var<double>::constant(rng.normal_tensor<double>(Shape{16, 4}, 0.3));
    }
    const auto mask = Var<double>::constant(rng.uniform_tensor<double>(Shape{1, 1, 4, 4}, 0, 1));
    run("fine_pass (8x8 token grid)",
        [&](const Var<double>& f) { return sum_all(fine_pass(f, mask, params, 12, 12).mask); },
        rng.normal_tensor<double>(Shape{1, 4, 4, 4}));
  }
  {
    const auto t = detail::binary_target(rng, Shape{4, 4});
    const auto p = rng.uniform_tensor<double>(Shape{4, 4}, 0.05, 0.95);
    run("focal_loss", [&](const Var<double>& x) { return focal_loss(x, t); }, p);
    run("bce_dice_loss", [&](const Var<double>& x) { return bce_dice_loss(x, t); }, p);
    const std::vector<std::int64_t> labels{0, 2, 255, 1, 1, 0, 2, 1};
    run("ce_label_smoothing", [&](const Var<double>& x) { return ce_label_smoothing(x, labels); },
        rng.normal_tensor<double>(Shape{2, 3, 2, 2}));
    const auto logits = Var<double>::constant(rng.normal_tensor<double>(Shape{2, 3, 2, 2}));
    run("total_loss",
        [&](const Var<double>& x) {
          return total_loss(focal_loss(x, t), bce_dice_loss(x, t), ce_label_smoothing(logits, labels));
        },
        p);
  }
  return out;
}

/// Structural and formula properties; cheap enough for every build.
inline std::vector<CheckResult> property_suite(std::uint64_t seed = 42) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  auto record = [&](const std::string& name, bool ok, std::string detail = {}) {
    out.push_back({name, ok, std::move(detail)});
  };

  {
    bool ok = true;
    for (int trial = 0; trial < 200 && ok; ++trial) {
      const std::size_t b = 1 + rng.next() % 2, h = 1 + rng.next() % 14, w = 1 + rng.next() % 14;
      const std::size_t c = 1 + rng.next() % 3, ws = 1 + rng.next() % 7;
      const auto x = Var<double>::constant(rng.normal_tensor<double>(Shape{b, h, w, c}));
      const auto parts = window_partition(x, ws);
      ok = window_reverse(parts.tokens, parts.layout).value() == x.value();
      const auto s = static_cast<std::int64_t>(rng.next() % std::min(h, w));
      ok = ok && cyclic_shift(cyclic_shift(x, s), -s).value() == x.value();
    }
    record("window partition and cyclic shift round-trips", ok);
  }
  {
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const auto y = kernels::softmax_lastdim(rng.normal_tensor<double>(Shape{3, 17}, 5.0));
      for (std::size_t r = 0; r < 3; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 17; ++j) s += y[r * 17 + j];
        worst = std::max(worst, std::abs(s - 1));
      }
    }
    std::ostringstream d;
    d << "worst deviation " << worst;
    record("softmax rows sum to one", worst <= 1e-9, d.str());
  }
  {
    bool ok = true;
    const auto tau = Var<double>::constant(Tensor<double>(Shape{1, 1}, 0.5));
    for (int i = 0; i < 2000 && ok; ++i) {
      const double a = rng.uniform(), b = rng.uniform();
      const auto m = soft_select(Var<double>::constant(Tensor<double>(Shape{1, 2}, {a, b})), tau, 10.0).value();
      ok = (a < b) ? m[0] <= m[1] : m[0] >= m[1];
      ok = ok && m[0] >= 0 && m[0] <= 1 && m[1] >= 0 && m[1] <= 1;
    }
    record("soft selection is monotone and bounded", ok);
  }
  {
    const bool ok = flops_msa(64, 64, 256) == 9'663'676'416u && flops_wmsa(64, 64, 256, 6) == 1'074'036'736u &&
                    flops_wssa(64, 64, 256, 6, 0.5) == 1'073'889'280u;
    record("complexity formulas at the encoder configuration", ok);
    const auto r = measure_attention_cost(Mechanism::msa, 8, 8, 8, 1, 1.0);
    record("counted global attention equals the formula", r.counted == r.analytic);
  }
  {
    bool ok = true;
    for (int rank = 1; rank <= 4 && ok; ++rank) {
      std::vector<std::size_t> dims(static_cast<std::size_t>(rank));
      for (auto& d : dims) d = 1 + rng.next() % 4;
      const Shape s{std::span<const std::size_t>(dims)};
      const auto f = rng.normal_tensor<float>(s);
      const auto d = rng.normal_tensor<double>(s);
      ok = std::get<Tensor<float>>(decode_tensor(encode_tensor(f))) == f &&
           std::get<Tensor<double>>(decode_tensor(encode_tensor(d))) == d;
    }
    record("GRCT round-trip", ok);
  }
  {
    const auto bytes = encode_pgm(Tensor<double>(Shape{2, 2}, {0, 0.5, 0.5, 1}));
    const std::string want = std::string("P5\n2 2\n255\n") + '\x00' + '\x80' + '\x80' + '\xFF';
    record("PGM encoding", std::string(bytes.begin(), bytes.end()) == want);
  }
  {
    PipelineConfig cfg;
    cfg.lambda_c = 0.1 + 1.0 / 3.0;
    cfg.layer_ids = {0, 5, 9};
    cfg.scenario = Scenario::random;
    record("config text round-trip", PipelineConfig::parse(cfg.to_text()) == cfg);
  }
  {
    const double focal = focal_loss(Var<double>::constant(Tensor<double>(Shape{1}, 0.3)), Tensor<double>(Shape{1}, 1.0)).item();
    record("focal loss single pixel", std::abs(focal - 0.25 * 0.49 * -std::log(0.3)) <= 1e-12);
    record("total loss weights", std::abs(total_loss(2.0, 0.5, 1.0) - 1.2) <= 1e-15);
  }
  return out;
}

}  // namespace maskgen
