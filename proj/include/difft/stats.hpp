#pragma once

#include <array>
#include <cstddef>
#include <span>

namespace difft {

/// count, std, min, max, Q1, Q2, Q3 -- the descriptive statistics shared by
/// the collector state and the condition graph's node features.
inline constexpr std::size_t kNumStats = 7;
using StatVector = std::array<double, kNumStats>;

/// Sample standard deviation (ddof = 1, zero for a single value); quartiles
/// use linear interpolation between order statistics.
StatVector describe(std::span<const double> values);

/// Linear-interpolation quantile of already sorted values, q in [0, 1].
double sorted_quantile(std::span<const double> sorted, double q);

/// Pearson correlation; 0 when either input is constant.
double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace difft
