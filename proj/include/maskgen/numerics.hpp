// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskgen/numerics/autodiff.hpp"
#include "maskgen/numerics/grad_check.hpp"
#include "maskgen/numerics/kernels.hpp"
#include "maskgen/numerics/op_counter.hpp"
#include "maskgen/numerics/ops.hpp"
#include "maskgen/numerics/random.hpp"
#include "maskgen/numerics/tensor.hpp"
