// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskgen/pipeline/cli.hpp"
#include "maskgen/pipeline/config.hpp"
#include "maskgen/pipeline/pgm.hpp"
#include "maskgen/pipeline/run.hpp"
#include "maskgen/pipeline/synth.hpp"
#include "maskgen/pipeline/tensor_file.hpp"
#include "maskgen/pipeline/verify.hpp"
