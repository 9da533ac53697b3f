// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

namespace gradcheck {

inline constexpr double kStep = 1e-4;
inline constexpr double kRelTol = 1e-4;
// Entries whose true gradient is ~0 are dominated by the O(h^2) truncation
// error of the central difference, so the comparison carries a small
// absolute floor.
inline constexpr double kAbsFloor = 1e-8;

inline double central_difference(double& param, const std::function<double()>& f) {
  const double saved = param;
  param = saved + kStep;
  const double up = f();
  param = saved - kStep;
  const double down = f();
  param = saved;
  return (up - down) / (2.0 * kStep);
}

inline bool close(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return std::abs(analytic - numeric) <= kRelTol * scale + kAbsFloor;
}

}  // namespace gradcheck
