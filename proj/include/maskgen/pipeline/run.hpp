// SPDX-License-Identifier: Apache-2.0
//
// End-to-end driver: coarse stage, fine pass, report.
#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "maskgen/coarse_stage.hpp"
#include "maskgen/complexity.hpp"
#include "maskgen/fine_stage.hpp"
#include "maskgen/pipeline/config.hpp"
#include "maskgen/pipeline/synth.hpp"

namespace maskgen {

inline std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.rank(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

/// Parameters of both stages, initialised from the config seed.
template <class T>
struct MaskModel {
  CoarseParams<T> coarse;
  FineParams<T> fine;

  static MaskModel init(const PipelineConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    Rng coarse_rng = root.split(11), fine_rng = root.split(12);
    MaskModel m;
    m.coarse = CoarseParams<T>::init(cfg.channels, cfg.layer_ids.size(), coarse_rng, cfg.heads, cfg.lambda_c,
                                     cfg.alpha_expand);
    m.fine = FineParams<T>::init(cfg.channels, cfg.heads, cfg.window, fine_rng, cfg.lambda_f, cfg.fine_scale,
                                 cfg.pairwise);
    for (auto& pass : m.fine.block.passes) {
      pass.attention.alpha_scale = Var<T>::constant(Tensor<T>(Shape{1}, static_cast<T>(cfg.alpha_scale)));
    }
    return m;
  }
};

struct ShapeLine {
  std::string label;
  std::string shape;
};

struct PipelineReport {
  std::uint64_t seed = 0;
  std::string dtype;
  std::vector<ShapeLine> shapes;
  std::vector<double> tau_coarse;
  std::vector<double> tau_fine;
  FlopReport coarse_msa, fine_wmsa, fine_wssa;
  Count counted_multiplies = 0;
  std::vector<std::string> warnings;
  std::optional<Block> block;
  double inside_mean = 0.0;   // mean M_f over the planted block, when there is one
  double outside_mean = 0.0;

  std::string to_text() const {
    std::ostringstream os;
    os << "seed: " << seed << "\n" << "dtype: " << dtype << "\n" << "shapes:\n";
    for (const auto& line : shapes) os << "  " << line.label << ": " << line.shape << "\n";
    auto taus = [&](const char* name, const std::vector<double>& v) {
      os << name << ":";
      for (double t : v) os << " " << detail::format_double(t);
      os << "\n";
    };
    taus("tau_coarse", tau_coarse);
    taus("tau_fine", tau_fine);
    os << "flops:\n";
    for (const FlopReport* r : {&coarse_msa, &fine_wmsa, &fine_wssa}) {
      os << "  " << to_string(r->mechanism) << " (" << r->h << "x" << r->w << ", C=" << r->c << ", M=" << r->m
         << ", rho=" << format_rho(r->rho) << "): " << group_thousands(r->analytic) << "\n";
    }
    os << "  counted multiplies (whole run): " << group_thousands(counted_multiplies) << "\n";
    if (block) {
      os << "planted block (coarse grid): y=" << block->y << " x=" << block->x << " h=" << block->h << " w=" << block->w
         << "\n";
      os << "fine mask mean inside block: " << detail::format_double(inside_mean) << "\n"
         << "fine mask mean outside block: " << detail::format_double(outside_mean) << "\n";
    }
    for (const auto& w : warnings) os << "warning: " << w << "\n";
    return os.str();
  }
};

template <class T>
struct PipelineResult {
  Tensor<T> coarse_features;  // F'
  Tensor<T> coarse_mask;      // M_c
  Tensor<T> fine_scores;
  Tensor<T> fine_mask;        // M_f
  PipelineReport report;
};

/// Mean of a B x 1 x H x W mask inside and outside `region` (in mask pixels).
template <class T>
std::pair<double, double> region_means(const Tensor<T>& mask, const Block& region) {
  const Shape& s = mask.shape();
  double in = 0, out = 0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t y = 0; y < s[2]; ++y)
      for (std::size_t x = 0; x < s[3]; ++x) {
        const double v = static_cast<double>(mask.at(b, 0, y, x));
        if (region.contains(y, x)) {
          in += v;
          ++n_in;
        } else {
          out += v;
          ++n_out;
        }
      }
  return {n_in ? in / static_cast<double>(n_in) : 0.0, n_out ? out / static_cast<double>(n_out) : 0.0};
}

namespace detail {

template <class T>
void check_inputs(const PipelineConfig& cfg, const Tensor<T>& features) {
  const Shape want{cfg.batch, cfg.channels, cfg.coarse_h, cfg.coarse_w};
  if (features.shape() != want) {
    throw DimensionError("features are " + shape_text(features.shape()) + ", config expects " + shape_text(want));
  }
}

inline std::vector<double> tau_values(const auto& var) {
  std::vector<double> out;
  for (auto v : var.value().data()) out.push_back(static_cast<double>(v));
  return out;
}

}  // namespace detail

/// Fine pass alone, from coarse features F' and the coarse mask.
template <class T>
FineOutput<T> run_fine_stage(const PipelineConfig& cfg, const MaskModel<T>& model, const Tensor<T>& features,
                             const Tensor<T>& coarse_mask) {
  detail::check_inputs(cfg, features);
  return fine_pass(Var<T>::constant(features), Var<T>::constant(coarse_mask), model.fine, cfg.out_h, cfg.out_w);
}

template <class T>
PipelineResult<T> run_pipeline(const PipelineConfig& cfg, const SynthInputs<T>& inputs) {
  cfg.validate();
  detail::check_inputs(cfg, inputs.features);
  if (inputs.stack.num_layers() != cfg.layer_ids.size()) {
    throw DimensionError("attention stack has " + std::to_string(inputs.stack.num_layers()) + " layers, config lists " +
                         std::to_string(cfg.layer_ids.size()));
  }
  if (inputs.stack.num_patches() != cfg.patches()) {
    throw DimensionError("attention stack covers " + std::to_string(inputs.stack.num_patches()) +
                         " patches, config grid has " + std::to_string(cfg.patches()));
  }

  PipelineResult<T> res;
  PipelineReport& rep = res.report;
  rep.seed = cfg.seed;
  rep.dtype = to_string(cfg.dtype);
  rep.warnings = inputs.stack.validate();
  rep.block = inputs.block;

  const MaskModel<T> model = MaskModel<T>::init(cfg);
  OpCounter counter;
  {
    CountingScope scope(counter);
    const auto coarse = run_coarse_stage(inputs.stack, Var<T>::constant(inputs.features), model.coarse);
    const auto fine = fine_pass(coarse.features, coarse.mask, model.fine, cfg.out_h, cfg.out_w);
    res.coarse_features = coarse.features.value();
    res.coarse_mask = coarse.mask.value();
    res.fine_scores = fine.scores.value();
    res.fine_mask = fine.mask.value();
    rep.tau_coarse = detail::tau_values(coarse.tau);
    rep.tau_fine = detail::tau_values(fine.tau);
    const Shape& tok = fine.token_shape;
    const std::size_t b = cfg.batch, c = cfg.channels;
    rep.shapes = {
        {"Input image (nominal)", shape_text(Shape{b, 3, cfg.out_h, cfg.out_w})},
        {"Encoder output", shape_text(inputs.features.shape())},
        {"Coarse patch tokens", shape_text(res.coarse_features.shape())},
        {"Soft coarse mask", shape_text(res.coarse_mask.shape())},
        {"Upsampled fine tokens", shape_text(Shape{tok[0], c, tok[1], tok[2]})},
        {"Sparse guidance mask", shape_text(res.fine_scores.shape())},
        {"Final fine logits", shape_text(res.fine_mask.shape())},
    };
  }
  rep.counted_multiplies = counter.count();
  if (inputs.block) {
    const Block px = inputs.block->rescaled(cfg.coarse_h, cfg.coarse_w, cfg.out_h, cfg.out_w);
    std::tie(rep.inside_mean, rep.outside_mean) = region_means(res.fine_mask, px);
  }
  const Count fh = cfg.fine_h(), fw = cfg.fine_w();
  rep.coarse_msa = analytic_report(Mechanism::msa, cfg.coarse_h, cfg.coarse_w, cfg.channels, 1, 1.0);
  rep.fine_wmsa = analytic_report(Mechanism::wmsa, fh, fw, cfg.channels, cfg.window, 1.0, cfg.swin_convention);
  rep.fine_wssa = analytic_report(Mechanism::wssa, fh, fw, cfg.channels, cfg.window, cfg.rho, cfg.swin_convention);
  return res;
}

}  // namespace maskgen
