#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "quadformer/layers.hpp"

namespace qf {

struct DiscriminatorConfig {
  std::size_t in_channels = 2;
  std::vector<std::size_t> channels{8, 16, 32, 64, 1};
  double slope = 0.2;
};

/// Five 4×4 stride-2 convolutions with leaky ReLU in between.
struct DiscriminatorWeights {
  DiscriminatorConfig config;
  std::vector<ConvWeights> layers;

  static DiscriminatorWeights init(const DiscriminatorConfig& config, std::uint64_t seed);
  void visit(const ParamVisitor& f);
};

/// Patch logits [1 × H/32 × W/32] for softmax probabilities [C×H×W].
Tensor discriminator_forward(const Tensor& mask_probs, const DiscriminatorWeights& d);

struct SegLoss {
  Tensor value;
  bool empty = false;  // no valid pixel; value is 0
};

/// Cross-entropy of full-resolution logits against a class map, averaged
/// over valid pixels, with optional per-class weights.
SegLoss seg_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                          std::span<const std::uint8_t> valid = {},
                          std::span<const double> class_weights = {});

struct AdversarialLosses {
  Tensor d_loss;  // D step: M_s scored real, M_t fake (inputs detached)
  Tensor g_loss;  // G step: −E[log D(M_t)], pushing M_t toward real
};

AdversarialLosses adversarial_losses(const Tensor& probs_s, const Tensor& probs_t,
                                     const DiscriminatorWeights& d);

struct LossWeights {
  double beta1 = 0.1;  // target segmentation
  double beta2 = 1.0;  // adversarial (generator side)
};

Tensor total_loss(const Tensor& seg_s, const Tensor& seg_t, const Tensor& g_loss, LossWeights w = {});

/// Linear warm-up to `base` over `warmup` steps, then linear decay to zero at
/// `total`. Steps are 1-based. total == 0 means a constant rate.
struct LrSchedule {
  double base = 6e-5;
  std::size_t warmup = 0;
  std::size_t total = 0;

  double at(std::size_t step) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
};

/// Named parameters of a weight tree, in visit order.
struct ParamList {
  std::vector<std::string> names;
  std::vector<Tensor*> tensors;

  template <typename Weights>
  static ParamList of(Weights& w) {
    ParamList list;
    w.visit([&list](const std::string& name, Tensor& t) {
      list.names.push_back(name);
      list.tensors.push_back(&t);
    });
    return list;
  }
};

/// Decoupled-weight-decay Adam.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// One update with learning rate `lr`; grads[i] belongs to params.tensors[i].
  /// Throws NumericError naming the parameter on a non-finite gradient.
  void step(ParamList& params, const std::vector<std::vector<double>>& grads, double lr);

  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t s) { steps_ = s; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const AdamWConfig& config() const { return config_; }

 private:
  AdamWConfig config_;
  std::size_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace qf
