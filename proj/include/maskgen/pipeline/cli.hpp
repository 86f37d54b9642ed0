// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 1 verification failure,
// 2 usage or I/O error.
#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "maskgen/losses.hpp"
#include "maskgen/pipeline/config.hpp"
#include "maskgen/pipeline/pgm.hpp"
#include "maskgen/pipeline/run.hpp"
#include "maskgen/pipeline/synth.hpp"
#include "maskgen/pipeline/tensor_file.hpp"
#include "maskgen/pipeline/verify.hpp"

namespace maskgen {

enum ExitCode : int { kExitOk = 0, kExitVerification = 1, kExitUsage = 2 };

/// Raised when a verification subcommand finds a failing check.
class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cli {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "maskgen-out";
  std::string dtype;
  std::vector<std::string> overrides;
  bool swin_convention = false;

  PipelineConfig resolve() const {
    PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : PipelineConfig::load(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    if (seed) cfg.seed = *seed;
    if (!dtype.empty()) cfg.dtype = parse_dtype(dtype);
    if (swin_convention) cfg.swin_convention = true;
    cfg.validate();
    return cfg;
  }

  std::string path(const std::string& name) const {
    std::filesystem::create_directories(out_dir);
    return (std::filesystem::path(out_dir) / name).string();
  }
};

template <class T>
void write_mask_outputs(const GlobalOptions& g, const std::string& stem, const Tensor<T>& mask, std::ostream& out) {
  write_tensor(g.path(stem + ".grct"), mask);
  const std::size_t batch = mask.dim(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::string name = batch == 1 ? stem + ".pgm" : stem + "_" + std::to_string(b) + ".pgm";
    export_pgm(mask_slice(mask, b), g.path(name));
  }
  out << "wrote " << g.path(stem + ".grct") << "\n";
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !(f << text)) throw TensorFileError("cannot write '" + path + "'");
}

template <class T>
int run_pipeline_command(const GlobalOptions& g, const PipelineConfig& cfg, std::ostream& out) {
  const auto inputs = synth_inputs<T>(cfg);
  const auto res = run_pipeline(cfg, inputs);
  const std::string report = res.report.to_text();
  out << report;
  write_text(g.path("config.txt"), cfg.to_text());
  write_text(g.path("report.txt"), report);
  write_tensor(g.path("coarse_features.grct"), res.coarse_features);
  write_mask_outputs(g, "coarse_mask", res.coarse_mask, out);
  write_mask_outputs(g, "fine_mask", res.fine_mask, out);
  return kExitOk;
}

template <class T>
int run_coarse_command(const GlobalOptions& g, const PipelineConfig& cfg, std::ostream& out) {
  const auto inputs = synth_inputs<T>(cfg);
  for (const auto& w : inputs.stack.validate()) out << "warning: " << w << "\n";
  const auto model = MaskModel<T>::init(cfg);
  const auto coarse = run_coarse_stage(inputs.stack, Var<T>::constant(inputs.features), model.coarse);
  out << "seed: " << cfg.seed << "\n"
      << "coarse features: " << shape_text(coarse.features.shape()) << "\n"
      << "coarse mask: " << shape_text(coarse.mask.shape()) << "\n"
      << "tau_coarse:";
  for (auto t : coarse.tau.value().data()) out << " " << detail::format_double(static_cast<double>(t));
  out << "\n";
  write_tensor(g.path("coarse_features.grct"), coarse.features.value());
  write_mask_outputs(g, "coarse_mask", coarse.mask.value(), out);
  return kExitOk;
}

template <class T>
int run_fine_command(const GlobalOptions& g, const PipelineConfig& cfg, const std::string& features_path,
                     const std::string& mask_path, std::ostream& out) {
  const auto model = MaskModel<T>::init(cfg);
  Tensor<T> features, mask;
  if (features_path.empty()) {
    const auto inputs = synth_inputs<T>(cfg);
    const auto coarse = run_coarse_stage(inputs.stack, Var<T>::constant(inputs.features), model.coarse);
    features = coarse.features.value();
    mask = coarse.mask.value();
  } else {
    features = read_tensor_as<T>(features_path);
    mask = read_tensor_as<T>(mask_path);
  }
  const auto fine = run_fine_stage(cfg, model, features, mask);
  out << "seed: " << cfg.seed << "\n"
      << "fine tokens: " << shape_text(fine.token_shape) << "\n"
      << "fine mask: " << shape_text(fine.mask.shape()) << "\n"
      << "tau_fine:";
  for (auto t : fine.tau.value().data()) out << " " << detail::format_double(static_cast<double>(t));
  out << "\n";
  write_mask_outputs(g, "fine_mask", fine.mask.value(), out);
  return kExitOk;
}

inline int run_flops_command(const PipelineConfig& cfg, const std::vector<double>& sweep, bool measure,
                             const std::string& csv_path, std::ostream& out) {
  const Count h = cfg.flop_h, w = cfg.flop_w, c = cfg.flop_c, m = cfg.flop_m;
  const bool swin = cfg.swin_convention;
  auto row = [&](Mechanism mech, double rho) {
    return measure ? measure_attention_cost(mech, h, w, c, m, rho, swin, cfg.seed)
                   : analytic_report(mech, h, w, c, m, rho, swin);
  };
  std::vector<FlopReport> rows{row(Mechanism::msa, 1.0), row(Mechanism::wmsa, 1.0), row(Mechanism::wssa, cfg.rho)};
  for (double rho : sweep) {
    if (rho != cfg.rho) rows.push_back(row(Mechanism::wssa, rho));
  }
  out << "convention: " << (swin ? "swin (2 M^2 h w C)" : "literal (2 M^2 h w)") << "\n";
  write_flop_table(out, rows);
  if (!csv_path.empty()) {
    std::ofstream f(csv_path, std::ios::binary | std::ios::trunc);
    if (!f) throw TensorFileError("cannot write '" + csv_path + "'");
    write_flop_csv(f, rows);
    out << "wrote " << csv_path << "\n";
  }
  return kExitOk;
}

inline int report_checks(const std::vector<CheckResult>& results, std::ostream& out) {
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) out << " (" << r.detail << ")";
    out << "\n";
  }
  if (!all_passed(results)) throw VerificationFailure("one or more checks failed");
  out << "all " << results.size() << " checks passed\n";
  return kExitOk;
}

struct LossInputs {
  std::string pred, target, logits, labels;
  double gamma = 2.0, alpha = 0.25, smoothing = 0.1;
  std::int64_t ignore_index = 255;
};

inline int run_losses_command(const LossInputs& in, std::ostream& out) {
  const auto pred = Var<double>::constant(read_tensor_as<double>(in.pred));
  const auto target = read_tensor_as<double>(in.target);
  const double focal = focal_loss(pred, target, FocalOptions{in.gamma, in.alpha, 1e-7}).item();
  const double bce = bce_loss(pred, target).item();
  const double dice = dice_loss(pred, target).item();
  const double bce_dice = bce_dice_loss(pred, target).item();
  out << std::setprecision(17);
  out << "focal: " << focal << "\n" << "bce: " << bce << "\n" << "dice: " << dice << "\n"
      << "bce_dice: " << bce_dice << "\n";
  if (!in.logits.empty()) {
    const auto logits = Var<double>::constant(read_tensor_as<double>(in.logits));
    const auto raw = read_tensor_as<double>(in.labels);
    std::vector<std::int64_t> labels;
    labels.reserve(raw.size());
    for (double v : raw.data()) {
      if (v != std::floor(v)) throw DimensionError("labels must be integral");
      labels.push_back(static_cast<std::int64_t>(v));
    }
    const double ce = ce_label_smoothing(logits, labels, SmoothingOptions{in.smoothing, in.ignore_index}).item();
    out << "ce_label_smoothing: " << ce << "\n" << "total: " << total_loss(focal, bce_dice, ce) << "\n";
  }
  return kExitOk;
}

}  // namespace cli

/// Parses argv and runs one subcommand. Help goes to `out`; diagnostics and
/// usage errors go to `err`.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Coarse-to-fine mask-prompt generator", "maskgen"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", "maskgen 1.0.0");

  cli::GlobalOptions g;
  app.add_option("--config", g.config_path, "Config file of key = value lines");
  app.add_option("--seed", g.seed, "Seed for inputs and parameter initialisation");
  app.add_option("--out-dir", g.out_dir, "Directory for output files")->capture_default_str();
  app.add_option("--dtype", g.dtype, "Storage type")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--set", g.overrides, "Override a config key (key=value), repeatable")->take_all();
  app.add_flag("--swin-convention", g.swin_convention, "Count window attention with the channel factor");

  auto* pipeline = app.add_subcommand("pipeline", "Run coarse and fine stages, write GRCT and PGM outputs");
  auto* coarse = app.add_subcommand("coarse", "Run the coarse stage only");
  auto* fine = app.add_subcommand("fine", "Run the fine stage from GRCT inputs (or synthesised coarse outputs)");
  std::string fine_features, fine_mask;
  auto* feat_opt = fine->add_option("--features", fine_features, "Coarse features F' (GRCT)")->check(CLI::ExistingFile);
  auto* mask_opt = fine->add_option("--mask", fine_mask, "Coarse mask (GRCT)")->check(CLI::ExistingFile);
  feat_opt->needs(mask_opt);
  mask_opt->needs(feat_opt);

  auto* flops = app.add_subcommand("flops", "Attention cost table for msa, wmsa and a wssa rho sweep");
  std::vector<double> sweep{0.25, 0.5, 0.75, 1.0};
  bool measure = false;
  std::string csv_path;
  flops->add_option("--sweep", sweep, "wssa rho values")->delimiter(',')->capture_default_str();
  flops->add_flag("--measure", measure, "Run the kernels with the multiply counter (h*w <= 4096)");
  flops->add_option("--csv", csv_path, "Also write the rows as CSV");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  double grad_tol = 1e-4, grad_eps = 1e-5;
  gradcheck->add_option("--tolerance", grad_tol, "Maximum relative error")->capture_default_str();
  gradcheck->add_option("--eps", grad_eps, "Finite-difference step")->capture_default_str();

  auto* selftest = app.add_subcommand("selftest", "Property suites");

  auto* losses = app.add_subcommand("losses", "Evaluate losses on GRCT tensors");
  cli::LossInputs loss_in;
  losses->add_option("--pred", loss_in.pred, "Predicted probabilities")->required()->check(CLI::ExistingFile);
  losses->add_option("--target", loss_in.target, "Binary targets")->required()->check(CLI::ExistingFile);
  auto* logits_opt = losses->add_option("--logits", loss_in.logits, "B x K x H x W logits")->check(CLI::ExistingFile);
  auto* labels_opt = losses->add_option("--labels", loss_in.labels, "Integer labels")->check(CLI::ExistingFile);
  logits_opt->needs(labels_opt);
  labels_opt->needs(logits_opt);
  losses->add_option("--gamma", loss_in.gamma)->capture_default_str();
  losses->add_option("--alpha", loss_in.alpha)->capture_default_str();
  losses->add_option("--smoothing", loss_in.smoothing)->capture_default_str();
  losses->add_option("--ignore-index", loss_in.ignore_index)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << "maskgen 1.0.0\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    const PipelineConfig cfg = g.resolve();
    const bool f64 = cfg.dtype == Dtype::f64;
    if (*pipeline) return f64 ? cli::run_pipeline_command<double>(g, cfg, out) : cli::run_pipeline_command<float>(g, cfg, out);
    if (*coarse) return f64 ? cli::run_coarse_command<double>(g, cfg, out) : cli::run_coarse_command<float>(g, cfg, out);
    if (*fine) {
      return f64 ? cli::run_fine_command<double>(g, cfg, fine_features, fine_mask, out)
                 : cli::run_fine_command<float>(g, cfg, fine_features, fine_mask, out);
    }
    if (*flops) return cli::run_flops_command(cfg, sweep, measure, csv_path, out);
    if (*gradcheck) return cli::report_checks(gradient_suite(grad_tol, grad_eps, cfg.seed), out);
    if (*selftest) return cli::report_checks(property_suite(cfg.seed), out);
    if (*losses) return cli::run_losses_command(loss_in, out);
  } catch (const VerificationFailure& e) {
    err << "verification failed: " << e.what() << "\n";
    return kExitVerification;
  } catch (const NumericError& e) {
    err << "verification failed: " << e.what() << "\n";
    return kExitVerification;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TensorFileError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace maskgen
