#pragma once

#include <array>
#include <optional>
#include <vector>

#include "quadformer/layers.hpp"

namespace qf {

struct DecoderConfig {
  std::size_t embed_dim = 64;  // C_e
  std::size_t num_classes = 2;
  /// Adds a C_e→C_e hidden layer between fuse and classify.
  bool extra_hidden = false;
  /// When false the target mask has its own fuse/classify weights.
  bool share_heads = true;

  void validate() const;
};

struct HeadWeights {
  LinearWeights fuse;  // 8·C_e → C_e
  std::optional<LinearWeights> hidden;
  LinearWeights classify;  // C_e → classes

  static HeadWeights init(const DecoderConfig& cfg, Initializer& init);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct DecoderWeights {
  DecoderConfig config;
  std::vector<LinearWeights> unify;  // one C_i → C_e map per stage
  HeadWeights source_head;
  std::optional<HeadWeights> target_head;

  static DecoderWeights init(const DecoderConfig& cfg, const std::vector<std::size_t>& stage_channels,
                             Initializer& init);
  const HeadWeights& head_for_target() const { return target_head ? *target_head : source_head; }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

/// Decoder output for one domain.
struct SegMask {
  Tensor logits;     // [classes × H/4 × W/4]
  Tensor augmented;  // [(H/4·W/4) × 8C_e] fuse input
  Grid grid;
};

/// Maps every stage of one branch to C_e channels, upsamples to the stage-1
/// grid and concatenates: φ of shape [(H/4·W/4) × 4C_e].
Tensor unify_and_upsample(std::span<const Tensor> stage_feats, std::span<const Grid> grids,
                          const DecoderWeights& w);

/// Concatenates (φ_a, φ_b) to 8C_e channels, fuses to C_e, classifies.
SegMask fuse_and_predict(const Tensor& phi_a, const Tensor& phi_b, Grid grid, const HeadWeights& head);

/// Per-pixel class probabilities at full resolution [classes × H × W].
Tensor full_resolution_probs(const SegMask& mask, std::size_t height, std::size_t width);

/// Bilinearly upsampled logits at full resolution.
Tensor full_resolution_logits(const SegMask& mask, std::size_t height, std::size_t width);

}  // namespace qf
