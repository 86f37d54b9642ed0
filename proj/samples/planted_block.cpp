// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale run on a planted-block scene: prints the report and writes the
// fine mask as a PGM next to the binary.
#include <iostream>

#include "maskgen/pipeline.hpp"

int main(int argc, char** argv) {
  maskgen::PipelineConfig cfg;
  cfg.coarse_h = cfg.coarse_w = 16;
  cfg.out_h = cfg.out_w = 256;
  cfg.channels = 32;
  cfg.heads = 4;
  cfg.block_size = 5;
  cfg.dtype = maskgen::Dtype::f64;
  if (argc > 1) cfg.seed = std::stoull(argv[1]);

  const auto inputs = maskgen::synth_inputs<double>(cfg);
  const auto result = maskgen::run_pipeline(cfg, inputs);
  std::cout << result.report.to_text();
  maskgen::export_pgm(result.fine_mask, "planted_block_fine_mask.pgm");
  std::cout << "wrote planted_block_fine_mask.pgm\n";
}
