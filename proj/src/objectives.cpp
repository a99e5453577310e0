#include "quadformer/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace qf {

DiscriminatorWeights DiscriminatorWeights::init(const DiscriminatorConfig& config, std::uint64_t seed) {
  if (config.channels.empty()) throw ContractError("discriminator: no layers");
  Initializer init(seed);
  DiscriminatorWeights d;
  d.config = config;
  std::size_t in = config.in_channels;
  for (auto out : config.channels) {
    d.layers.push_back(ConvWeights::init(in, out, 4, 2, 1, init));
    in = out;
  }
  return d;
}

void DiscriminatorWeights::visit(const ParamVisitor& f) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit("disc.conv" + std::to_string(i), f);
}

Tensor discriminator_forward(const Tensor& mask_probs, const DiscriminatorWeights& d) {
  Tensor x = mask_probs;
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    x = d.layers[i](x);
    if (i + 1 < d.layers.size()) x = leaky_relu(x, d.config.slope);
  }
  return x;
}

SegLoss seg_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                          std::span<const std::uint8_t> valid, std::span<const double> class_weights) {
  SegLoss loss;
  loss.empty = !valid.empty() && std::none_of(valid.begin(), valid.end(), [](auto v) { return v != 0; });
  loss.value = softmax_cross_entropy(logits, labels, valid, class_weights);
  return loss;
}

AdversarialLosses adversarial_losses(const Tensor& probs_s, const Tensor& probs_t,
                                     const DiscriminatorWeights& d) {
  AdversarialLosses out;
  out.d_loss = add(bce_with_logits(discriminator_forward(probs_s.detach(), d), 1.0),
                   bce_with_logits(discriminator_forward(probs_t.detach(), d), 0.0));
  out.g_loss = bce_with_logits(discriminator_forward(probs_t, d), 1.0);
  return out;
}

Tensor total_loss(const Tensor& seg_s, const Tensor& seg_t, const Tensor& g_loss, LossWeights w) {
  return add(add(seg_s, scale(seg_t, w.beta1)), scale(g_loss, w.beta2));
}

double LrSchedule::at(std::size_t step) const {
  if (total == 0) return base;
  if (step == 0) step = 1;
  if (step >= total) return 0.0;
  if (warmup > 0 && step <= warmup) {
    return base * static_cast<double>(step) / static_cast<double>(warmup);
  }
  return base * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

void AdamW::step(ParamList& params, const std::vector<std::vector<double>>& grads, double lr) {
  if (grads.size() != params.tensors.size()) throw ContractError("AdamW: gradient count mismatch");
  for (std::size_t k = 0; k < grads.size(); ++k) {
    for (double g : grads[k]) {
      if (!std::isfinite(g)) throw NumericError("AdamW: non-finite gradient for " + params.names[k]);
    }
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    Tensor& p = *params.tensors[k];
    const auto& g = grads[k];
    if (g.size() != p.size()) throw ContractError("AdamW: gradient size mismatch for " + params.names[k]);
    auto& mo = moments_[params.names[k]];
    if (mo.m.size() != p.size()) {
      mo.m.assign(p.size(), 0.0);
      mo.v.assign(p.size(), 0.0);
    }
    auto pv = p.mutable_values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      pv[i] -= lr * config_.weight_decay * pv[i];
      mo.m[i] = config_.beta1 * mo.m[i] + (1.0 - config_.beta1) * g[i];
      mo.v[i] = config_.beta2 * mo.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      pv[i] -= lr * (mo.m[i] / c1) / (std::sqrt(mo.v[i] / c2) + config_.eps);
    }
  }
}

}  // namespace qf
