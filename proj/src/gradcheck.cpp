#include "quadformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace qf {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h) {
  auto report = finite_diff_check(
      [&f](const std::vector<Tensor>& in) { return f(in[0]); }, {{"x", x}}, h,
      std::numeric_limits<std::size_t>::max(), 0);
  return report.max_error();
}

double GradCheckReport::max_error() const {
  double e = 0.0;
  for (const auto& entry : entries) e = std::max(e, entry.max_error);
  return e;
}

GradCheckReport finite_diff_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<std::pair<std::string, Tensor>>& inputs, double h,
    std::size_t max_coords, std::uint64_t seed) {
  if (h < 1e-7 || h > 1e-3) throw ContractError("finite_diff_check: h must lie in [1e-7, 1e-3]");

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Tensor> tracked;
    tracked.reserve(inputs.size());
    for (const auto& [name, t] : inputs) tracked.push_back(tape.watch(t));
    Tensor y = f(tracked);
    tape.backward(y);
    for (const auto& t : tracked) analytic.push_back(tape.grad(t));
  }

  std::vector<Tensor> base;
  base.reserve(inputs.size());
  for (const auto& [name, t] : inputs) base.push_back(t.detach());

  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t n = base[k].size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    GradCheckEntry entry{inputs[k].first, coords.size(), 0.0};
    const Tensor original = base[k];
    for (std::size_t i : coords) {
      Tensor plus(original.shape(), std::vector<double>(original.values().begin(), original.values().end()));
      Tensor minus = Tensor(original.shape(), std::vector<double>(original.values().begin(), original.values().end()));
      plus.mutable_values()[i] += h;
      minus.mutable_values()[i] -= h;
      base[k] = plus;
      const double fp = f(base).item();
      base[k] = minus;
      const double fm = f(base).item();
      base[k] = original;
      const double numeric = (fp - fm) / (2.0 * h);
      entry.max_error = std::max(entry.max_error, relative_error(analytic[k][i], numeric));
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace qf
