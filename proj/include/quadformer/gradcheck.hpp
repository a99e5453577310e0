#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "quadformer/tensor.hpp"

namespace qf {

/// |a − b| / max(1, |a|, |b|)
double relative_error(double a, double b);

/// Central-difference check of a scalar function of one tensor. Compares the
/// tape gradient at `x` to (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h on every coordinate
/// and returns the largest relative error.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5);

struct GradCheckEntry {
  std::string name;
  std::size_t coords_checked = 0;
  double max_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_error() const;
};

/// Multi-input variant: `f` maps a list of (possibly tracked) tensors to a
/// scalar. Checks up to `max_coords` coordinates per input, chosen by a
/// seeded shuffle (all coordinates when the input is small enough).
GradCheckReport finite_diff_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<std::pair<std::string, Tensor>>& inputs, double h,
    std::size_t max_coords, std::uint64_t seed);

}  // namespace qf
