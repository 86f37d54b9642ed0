// SPDX-License-Identifier: Apache-2.0
//
// Pipeline configuration and its flat `key = value` text form.
#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "maskgen/coarse_stage.hpp"
#include "maskgen/fine_stage.hpp"

namespace maskgen {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Dtype { f32, f64 };
enum class Scenario { uniform, planted_block, random };

inline std::string to_string(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }
inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::uniform: return "uniform";
    case Scenario::planted_block: return "planted-block";
    case Scenario::random: return "random";
  }
  return "?";
}
inline std::string to_string(AlphaExpand a) { return a == AlphaExpand::interp ? "interp" : "ones"; }
inline std::string to_string(PairwiseMode p) { return p == PairwiseMode::outer_product ? "outer-product" : "off"; }

inline Dtype parse_dtype(std::string_view s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw ConfigError("dtype must be f32 or f64, got '" + std::string(s) + "'");
}

inline Scenario parse_scenario(std::string_view s) {
  if (s == "uniform") return Scenario::uniform;
  if (s == "planted-block") return Scenario::planted_block;
  if (s == "random") return Scenario::random;
  throw ConfigError("unknown scenario '" + std::string(s) + "' (uniform, planted-block, random)");
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class N>
N parse_number(std::string_view key, std::string_view text) {
  N value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("invalid value '" + std::string(text) + "' for " + std::string(key));
  }
  return value;
}

inline std::size_t parse_extent(std::string_view key, std::string_view text) {
  const auto v = parse_number<std::size_t>(key, text);
  if (v == 0) throw ConfigError(std::string(key) + " must be at least 1");
  return v;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "on" || text == "1") return true;
  if (text == "false" || text == "off" || text == "0") return false;
  throw ConfigError("invalid boolean '" + std::string(text) + "' for " + std::string(key));
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

struct PipelineConfig {
  // Grid geometry.
  std::size_t coarse_h = 64;
  std::size_t coarse_w = 64;
  std::size_t fine_scale = 4;
  std::size_t out_h = 1024;
  std::size_t out_w = 1024;
  std::size_t channels = 256;
  std::size_t heads = 8;
  std::size_t window = 6;
  std::size_t batch = 1;
  // Gating.
  double lambda_c = 10.0;
  double lambda_f = 10.0;
  double alpha_scale = 1.0;
  std::vector<int> layer_ids{1, 4, 8, 11};
  AlphaExpand alpha_expand = AlphaExpand::interp;
  PairwiseMode pairwise = PairwiseMode::outer_product;
  // Run control.
  std::uint64_t seed = 42;
  Dtype dtype = Dtype::f32;
  Scenario scenario = Scenario::planted_block;
  std::size_t attn_heads = 2;  // heads of the synthetic attention stack
  std::size_t block_size = 16; // planted rectangle side, in coarse patches
  // Cost model.
  std::size_t flop_h = 64;
  std::size_t flop_w = 64;
  std::size_t flop_c = 256;
  std::size_t flop_m = 6;
  double rho = 0.5;
  bool swin_convention = false;

  std::size_t fine_h() const { return coarse_h * fine_scale; }
  std::size_t fine_w() const { return coarse_w * fine_scale; }
  std::size_t patches() const { return coarse_h * coarse_w; }

  void validate() const {
    if (channels % heads != 0) throw ConfigError("channels must be divisible by heads");
    if (layer_ids.empty()) throw ConfigError("layer_ids must name at least one layer");
    if (!(lambda_c > 0) || !(lambda_f > 0)) throw ConfigError("temperatures must be positive");
    if (alpha_scale < 0) throw ConfigError("alpha_scale must be non-negative");
    if (!(rho > 0 && rho <= 1)) throw ConfigError("rho must lie in (0, 1]");
    if (block_size > std::min(coarse_h, coarse_w)) throw ConfigError("block_size exceeds the coarse grid");
  }

  void set(std::string_view key, std::string_view raw) {
    using namespace detail;
    const std::string_view v = trim(raw);
    if (key == "coarse_h") coarse_h = parse_extent(key, v);
    else if (key == "coarse_w") coarse_w = parse_extent(key, v);
    else if (key == "fine_scale") fine_scale = parse_extent(key, v);
    else if (key == "out_h") out_h = parse_extent(key, v);
    else if (key == "out_w") out_w = parse_extent(key, v);
    else if (key == "channels") channels = parse_extent(key, v);
    else if (key == "heads") heads = parse_extent(key, v);
    else if (key == "window") window = parse_extent(key, v);
    else if (key == "batch") batch = parse_extent(key, v);
    else if (key == "lambda_c") lambda_c = parse_number<double>(key, v);
    else if (key == "lambda_f") lambda_f = parse_number<double>(key, v);
    else if (key == "alpha_scale") alpha_scale = parse_number<double>(key, v);
    else if (key == "layer_ids") layer_ids = parse_layers(v);
    else if (key == "alpha_expand") {
      if (v == "interp") alpha_expand = AlphaExpand::interp;
      else if (v == "ones") alpha_expand = AlphaExpand::ones;
      else throw ConfigError("alpha_expand must be interp or ones");
    } else if (key == "pairwise") {
      if (v == "outer-product") pairwise = PairwiseMode::outer_product;
      else if (v == "off") pairwise = PairwiseMode::off;
      else throw ConfigError("pairwise must be outer-product or off");
    } else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
    else if (key == "dtype") dtype = parse_dtype(v);
    else if (key == "scenario") scenario = parse_scenario(v);
    else if (key == "attn_heads") attn_heads = parse_extent(key, v);
    else if (key == "block_size") block_size = parse_extent(key, v);
    else if (key == "h") flop_h = parse_extent(key, v);
    else if (key == "w") flop_w = parse_extent(key, v);
    else if (key == "C") flop_c = parse_extent(key, v);
    else if (key == "M") flop_m = parse_extent(key, v);
    else if (key == "rho") rho = parse_number<double>(key, v);
    else if (key == "swin_convention") swin_convention = parse_bool(key, v);
    else throw ConfigError("unknown config key '" + std::string(key) + "'");
  }

  /// Applies "key=value".
  void apply_override(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
    set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  }

  static PipelineConfig parse(std::string_view text) {
    PipelineConfig cfg;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto end = std::min(text.find('\n', pos), text.size());
      std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
      }
      try {
        cfg.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
      } catch (const ConfigError& e) {
        throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
      }
      if (end == text.size()) break;
    }
    return cfg;
  }

  static PipelineConfig load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  std::string to_text() const {
    using detail::format_double;
    std::ostringstream os;
    std::string ids;
    for (std::size_t i = 0; i < layer_ids.size(); ++i) ids += (i ? "," : "") + std::to_string(layer_ids[i]);
    os << "coarse_h = " << coarse_h << "\n"
       << "coarse_w = " << coarse_w << "\n"
       << "fine_scale = " << fine_scale << "\n"
       << "out_h = " << out_h << "\n"
       << "out_w = " << out_w << "\n"
       << "channels = " << channels << "\n"
       << "heads = " << heads << "\n"
       << "window = " << window << "\n"
       << "batch = " << batch << "\n"
       << "lambda_c = " << format_double(lambda_c) << "\n"
       << "lambda_f = " << format_double(lambda_f) << "\n"
       << "alpha_scale = " << format_double(alpha_scale) << "\n"
       << "layer_ids = " << ids << "\n"
       << "alpha_expand = " << to_string(alpha_expand) << "\n"
       << "pairwise = " << to_string(pairwise) << "\n"
       << "seed = " << seed << "\n"
       << "dtype = " << to_string(dtype) << "\n"
       << "scenario = " << to_string(scenario) << "\n"
       << "attn_heads = " << attn_heads << "\n"
       << "block_size = " << block_size << "\n"
       << "h = " << flop_h << "\n"
       << "w = " << flop_w << "\n"
       << "C = " << flop_c << "\n"
       << "M = " << flop_m << "\n"
       << "rho = " << format_double(rho) << "\n"
       << "swin_convention = " << (swin_convention ? "true" : "false") << "\n";
    return os.str();
  }

  bool operator==(const PipelineConfig&) const = default;

 private:
  static std::vector<int> parse_layers(std::string_view v) {
    std::vector<int> ids;
    std::size_t pos = 0;
    while (pos <= v.size()) {
      const auto comma = std::min(v.find(',', pos), v.size());
      ids.push_back(detail::parse_number<int>("layer_ids", detail::trim(v.substr(pos, comma - pos))));
      pos = comma + 1;
    }
    return ids;
  }
};

}  // namespace maskgen
