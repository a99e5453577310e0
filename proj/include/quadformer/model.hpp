#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quadformer/decoder.hpp"
#include "quadformer/encoder.hpp"

namespace qf {

struct ModelConfig {
  EncoderConfig encoder = EncoderConfig::q0();
  DecoderConfig decoder;
};

/// Which augmented representation each head consumes: with cross features
/// [φ_s, φ_{t−s}] / [φ_t, φ_{s−t}], without them [φ_s, φ_s] / [φ_t, φ_t].
struct FeatureToggles {
  bool source_cross = true;
  bool target_cross = true;
  bool any() const { return source_cross || target_cross; }
};

/// Encoder plus cross-domain decoder.
struct QuadFormer {
  EncoderWeights encoder;
  DecoderWeights decoder;

  static QuadFormer init(const ModelConfig& config, std::uint64_t seed);
  void visit(const ParamVisitor& f);
  /// Copies the source head into the target head when heads are not shared.
  void sync_target_head();
};

struct PairForward {
  std::vector<StageOutput> stages;
  Tensor phi_s, phi_t, phi_ts, phi_st;
  SegMask source;  // M_s
  SegMask target;  // M_t
};

/// Paired forward of (img_s, img_t).
PairForward forward_pair(const QuadFormer& model, const Tensor& img_s, const Tensor& img_t,
                         FeatureToggles toggles = {});

/// Single-image forward through the self-attention branch with [φ, φ];
/// `target_head` selects which decoder head classifies.
SegMask forward_single(const QuadFormer& model, const Tensor& img, bool target_head);

/// Target prediction without any source image: [φ_t, φ_t] on the target head.
SegMask infer_target_sourcefree(const QuadFormer& model, const Tensor& img_t);

}  // namespace qf
