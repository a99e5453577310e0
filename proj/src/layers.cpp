#include "quadformer/layers.hpp"

#include <cmath>

namespace qf {

Tensor Initializer::trunc_normal(Shape shape, double sigma) {
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    do {
      x = dist(rng_);
    } while (std::abs(x) > 2.0 * sigma);
  }
  return Tensor(std::move(shape), std::move(v));
}

Tensor Initializer::he_normal(Shape shape, std::size_t fan_out) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_out)));
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng_);
  return Tensor(std::move(shape), std::move(v));
}

LinearWeights LinearWeights::init(std::size_t in, std::size_t out, Initializer& init) {
  return {init.trunc_normal({in, out}), Tensor(Shape{out})};
}

void LinearWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".w", w);
  f(prefix + ".b", b);
}

LayerNormWeights LayerNormWeights::init(std::size_t channels) {
  return {Tensor(Shape{channels}, 1.0), Tensor(Shape{channels})};
}

void LayerNormWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".gamma", gamma);
  f(prefix + ".beta", beta);
}

ConvWeights ConvWeights::init(std::size_t in, std::size_t out, std::size_t kernel,
                              std::size_t stride, std::size_t padding, Initializer& init) {
  ConvWeights c;
  c.w = init.he_normal({out, in, kernel, kernel}, kernel * kernel * out);
  c.b = Tensor(Shape{out});
  c.stride = stride;
  c.padding = padding;
  return c;
}

void ConvWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".w", w);
  f(prefix + ".b", b);
}

}  // namespace qf
