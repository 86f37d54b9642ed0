// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic encoder outputs: a feature map and a class-token
// attention stack on the configured coarse grid.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "maskgen/coarse_stage.hpp"
#include "maskgen/pipeline/config.hpp"

namespace maskgen {

/// Axis-aligned rectangle on the coarse patch grid.
struct Block {
  std::size_t y = 0, x = 0, h = 0, w = 0;

  bool contains(std::size_t row, std::size_t col) const { return row >= y && row < y + h && col >= x && col < x + w; }

  /// Same rectangle on a grid of `rows` x `cols` covering the same image.
  Block rescaled(std::size_t grid_h, std::size_t grid_w, std::size_t rows, std::size_t cols) const {
    auto map = [](std::size_t v, std::size_t from, std::size_t to) { return v * to / from; };
    const std::size_t y0 = map(y, grid_h, rows), y1 = map(y + h, grid_h, rows);
    const std::size_t x0 = map(x, grid_w, cols), x1 = map(x + w, grid_w, cols);
    return Block{y0, x0, y1 - y0, x1 - x0};
  }

  friend bool operator==(const Block&, const Block&) = default;
};

template <class T>
struct SynthInputs {
  Tensor<T> features;  // B x C x H_c x W_c
  AttentionStack<T> stack;
  std::optional<Block> block;
};

/// Builds the inputs for `cfg.scenario`, seeded by `cfg.seed`.
///
/// Only the class-token row of each attention map carries signal; every
/// other row is uniform 1/N_tok. planted-block concentrates class-token
/// attention on a block_size square and gives its patches a shared bright
/// feature vector over low-amplitude noise.
template <class T>
SynthInputs<T> synth_inputs(const PipelineConfig& cfg) {
  cfg.validate();
  const std::size_t b = cfg.batch, c = cfg.channels, gh = cfg.coarse_h, gw = cfg.coarse_w;
  const std::size_t patches = gh * gw, tokens = patches + 1, heads = cfg.attn_heads;
  if (gh != gw) throw ConfigError("synthetic attention stacks need a square coarse grid");
  Rng root(cfg.seed);
  Rng layout_rng = root.split(1), attn_rng = root.split(2), feat_rng = root.split(3);

  SynthInputs<T> in;
  in.stack.cls_index = 0;
  in.stack.layer_ids = cfg.layer_ids;
  in.features = Tensor<T>(Shape{b, c, gh, gw});

  if (cfg.scenario == Scenario::planted_block) {
    const std::size_t side = cfg.block_size;
    const auto pick = [&](std::size_t extent) {
      return static_cast<std::size_t>(layout_rng.next() % (extent - side + 1));
    };
    const std::size_t y = pick(gh);
    in.block = Block{y, pick(gw), side, side};
  }

  std::vector<double> logits(patches);
  for (std::size_t l = 0; l < cfg.layer_ids.size(); ++l) {
    Tensor<T> layer(Shape{b, heads, tokens, tokens}, static_cast<T>(1.0 / static_cast<double>(tokens)));
    for (std::size_t s = 0; s < b; ++s) {
      for (std::size_t hd = 0; hd < heads; ++hd) {
        if (cfg.scenario == Scenario::uniform) continue;
        const double contrast = 2.5 + 0.5 * static_cast<double>(l);
        for (std::size_t p = 0; p < patches; ++p) {
          const bool inside = in.block && in.block->contains(p / gw, p % gw);
          logits[p] = cfg.scenario == Scenario::random ? attn_rng.normal()
                                                       : 0.5 * attn_rng.normal() + (inside ? contrast : 0.0);
        }
        // The class token keeps a small share of its own attention.
        const double peak = *std::max_element(logits.begin(), logits.end());
        double z = std::exp(-peak);
        for (double& v : logits) z += (v = std::exp(v - peak));
        T* row = &layer.at(s, hd, 0, 0);
        row[0] = static_cast<T>(std::exp(-peak) / z);
        for (std::size_t p = 0; p < patches; ++p) row[p + 1] = static_cast<T>(logits[p] / z);
      }
    }
    in.stack.layers.push_back(std::move(layer));
  }

  switch (cfg.scenario) {
    case Scenario::uniform:
      in.features.fill(T(1));
      break;
    case Scenario::random:
      in.features = feat_rng.normal_tensor<T>(in.features.shape());
      break;
    case Scenario::planted_block: {
      std::vector<double> bright(c);
      for (auto& v : bright) v = feat_rng.normal();
      for (std::size_t s = 0; s < b; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < gh; ++y)
            for (std::size_t x = 0; x < gw; ++x) {
              const double base = in.block->contains(y, x) ? bright[ch] : 0.0;
              in.features.at(s, ch, y, x) = static_cast<T>(base + 0.1 * feat_rng.normal());
            }
      break;
    }
  }
  return in;
}

}  // namespace maskgen
