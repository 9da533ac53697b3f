// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include "mohge/allocation.hpp"
#include "mohge/config.hpp"
#include "mohge/error.hpp"
#include "mohge/layer.hpp"
#include "mohge/losses.hpp"
#include "mohge/parallel.hpp"
#include "mohge/rng.hpp"
#include "mohge/routing.hpp"
#include "mohge/simulator.hpp"
#include "mohge/tensor.hpp"
#include "mohge/trace.hpp"
#include "mohge/weights_io.hpp"
