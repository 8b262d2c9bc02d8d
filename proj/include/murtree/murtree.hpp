// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "murtree/autograd.hpp"
#include "murtree/cdm.hpp"
#include "murtree/config.hpp"
#include "murtree/decoder.hpp"
#include "murtree/grad_check.hpp"
#include "murtree/losses.hpp"
#include "murtree/model.hpp"
#include "murtree/mtf.hpp"
#include "murtree/ops.hpp"
#include "murtree/params.hpp"
#include "murtree/patch_grid.hpp"
#include "murtree/pgm.hpp"
#include "murtree/rng.hpp"
#include "murtree/surm.hpp"
#include "murtree/synth.hpp"
#include "murtree/tensor.hpp"
#include "murtree/train.hpp"
