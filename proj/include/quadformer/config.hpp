#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quadformer/data.hpp"
#include "quadformer/model.hpp"
#include "quadformer/objectives.hpp"

namespace qf {

/// Every knob of warm-up, adaptation and evaluation. Serialized as
/// `key = value` lines; unknown keys are rejected on parse.
struct RunConfig {
  // model
  std::string encoder = "q0";  // q0 | micro
  std::size_t embed_dim = 64;
  bool extra_hidden = false;
  bool share_heads = true;
  bool share_cross_weights = true;

  // pseudo labels and prototypes
  double tau = 0.9;
  double temperature = 1.0;
  double ema_lambda = 0.9999;

  // losses
  double beta1 = 0.1;
  double beta2 = 1.0;
  bool class_weighting = true;
  double pl_weight = 10.0;

  // optimization
  double lr = 6e-5;
  double d_lr = 1e-4;
  double weight_decay = 0.01;
  std::size_t t_warm = 150;
  std::size_t warmup_iterations = 500;  // source-only stage
  std::size_t iterations = 4000;        // adaptation stage
  std::size_t batch = 2;
  std::uint64_t seed = 42;

  // augmentation
  std::size_t crop = 64;
  double flip = 0.5;
  double brightness = 0.1;
  double contrast = 0.2;
  double channel = 0.05;

  // ablation toggles
  bool self_training = true;
  bool adversarial = true;
  bool correction = true;
  bool source_cross = true;
  bool target_cross = true;

  // bookkeeping
  std::size_t source_holdout = 20;  // last source ids, never trained on
  std::size_t pair_side = 64;       // SSIM resolution for pairing
  std::size_t log_every = 50;
  std::size_t eval_every = 500;     // target-val IoU in the training log; 0 = off

  bool operator==(const RunConfig&) const = default;

  ModelConfig model() const;
  FeatureToggles toggles() const { return {source_cross, target_cross}; }
  AugmentOptions augment_options() const;
  LossWeights loss_weights() const { return {beta1, beta2}; }

  /// Throws ContractError on inconsistent values.
  void validate() const;

  std::string to_text() const;
  static RunConfig from_text(const std::string& text, const std::string& origin);
  static RunConfig from_file(const std::string& path);
  /// Applies `key=value` overrides in order (later ones win), validating once at the end.
  RunConfig with_overrides(const std::vector<std::string>& texts, const std::string& origin) const;
};

}  // namespace qf
