// SPDX-License-Identifier: Apache-2.0
#include "maskgen/pipeline/cli.hpp"

int main(int argc, char** argv) { return maskgen::cli_main(argc, argv); }
