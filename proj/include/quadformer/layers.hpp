#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "quadformer/ops.hpp"

namespace qf {

/// Callback used to enumerate named parameters of a weight tree.
using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

/// Seeded parameter initializer.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  /// Normal(0, σ) truncated to ±2σ.
  Tensor trunc_normal(Shape shape, double sigma = 0.02);
  /// Normal(0, sqrt(2 / fan_out)).
  Tensor he_normal(Shape shape, std::size_t fan_out);

 private:
  std::mt19937_64 rng_;
};

struct LinearWeights {
  Tensor w;  // [in×out]
  Tensor b;  // [out]

  static LinearWeights init(std::size_t in, std::size_t out, Initializer& init);
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct LayerNormWeights {
  Tensor gamma;
  Tensor beta;

  static LayerNormWeights init(std::size_t channels);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, 1e-6); }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct ConvWeights {
  Tensor w;  // [out×in×k×k]
  Tensor b;  // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;

  static ConvWeights init(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding, Initializer& init);
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, {stride, padding}); }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

/// Spatial extent of a token grid (tokens are row-major).
struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t tokens() const { return h * w; }
  bool operator==(const Grid&) const = default;
};

namespace detail {
template <typename Weights>
void visit_all(Weights& w, const ParamVisitor& f) {
  if constexpr (requires { w.visit(f); }) {
    w.visit(f);
  } else {
    w.visit(std::string{}, f);
  }
}
}  // namespace detail

/// (name, tensor) pairs of every parameter in visit order.
template <typename Weights>
std::vector<std::pair<std::string, Tensor>> collect_params(Weights w) {
  std::vector<std::pair<std::string, Tensor>> out;
  detail::visit_all(w, [&out](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

/// Copy of `w` whose parameters are replaced, in visit order, by `values`.
template <typename Weights>
Weights rebind_params(Weights w, std::span<const Tensor> values) {
  std::size_t i = 0;
  detail::visit_all(w, [&](const std::string& name, Tensor& t) {
    if (i >= values.size() || values[i].shape() != t.shape()) {
      throw ShapeError("rebind_params: mismatch at " + name);
    }
    t = values[i++];
  });
  if (i != values.size()) throw ShapeError("rebind_params: too many values");
  return w;
}

}  // namespace qf
