#pragma once

#include <optional>
#include <vector>

#include "quadformer/layers.hpp"

namespace qf {

/// Per-stage hyperparameters of the hierarchical encoder.
struct StageConfig {
  std::size_t channels = 8;
  std::size_t depth = 1;
  std::size_t heads = 1;
  std::size_t reduction = 1;  // sequence-reduction ratio R for keys/values

  std::size_t head_dim() const { return channels / heads; }
};

struct EncoderConfig {
  std::size_t in_channels = 3;
  std::size_t mlp_ratio = 4;
  /// When false, the cross-attention branches own a second attention weight set.
  bool share_cross_weights = true;
  std::vector<StageConfig> stages;

  /// Desk-scale "Q0": C = [8,16,32,64], depths 1, heads [1,1,2,4], R = [8,4,2,1].
  static EncoderConfig q0();
  /// Tiny config for gradient checks: C = [4,8,8,8], heads [1,1,2,4], R = [2,1,1,1], ratio 2.
  static EncoderConfig micro();
  /// Throws ContractError on an inconsistent config.
  void validate() const;
  /// Spatial token grid of stage `i` (0-based) for an H×W image.
  Grid stage_grid(std::size_t i, std::size_t height, std::size_t width) const;
};

struct AttentionWeights {
  LinearWeights q, k, v, out;
  LinearWeights reduce;  // R²C → C projection after the spatial fold

  static AttentionWeights init(std::size_t channels, std::size_t reduction, Initializer& init);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct MixFfnWeights {
  LinearWeights fc1;
  Tensor dw_w;  // [hidden×3×3]
  Tensor dw_b;  // [hidden]
  LinearWeights fc2;

  static MixFfnWeights init(std::size_t channels, std::size_t hidden, Initializer& init);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

/// One quadruple block: a single weight set drives all four data paths.
struct BlockWeights {
  LayerNormWeights norm;
  AttentionWeights attn;
  std::optional<AttentionWeights> cross_attn;  // only when weights are not shared
  MixFfnWeights ffn;

  const AttentionWeights& cross() const { return cross_attn ? *cross_attn : attn; }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct StageWeights {
  ConvWeights embed;  // 4×4/4 patch embedding (stage 0) or 3×3/2 merge
  LayerNormWeights embed_norm;
  std::vector<BlockWeights> blocks;
  LayerNormWeights out_norm;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct EncoderWeights {
  EncoderConfig config;
  std::vector<StageWeights> stages;

  static EncoderWeights init(const EncoderConfig& config, Initializer& init);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

/// The four branch activations of one stage, each [tokens×C].
struct QuadFeatures {
  Tensor f_s;   // source-aware
  Tensor f_t;   // target-aware
  Tensor f_ts;  // target-aware source (queries t, keys/values s)
  Tensor f_st;  // source-aware target (queries s, keys/values t)
};

/// Output of one encoder stage.
struct StageOutput {
  QuadFeatures features;
  Grid grid;
};

/// Non-overlapping 4×4 patch projection of img[3×H×W] to [(H/4·W/4)×C₁],
/// followed by the embedding LayerNorm. H and W must be multiples of 32.
Tensor patch_embed(const Tensor& img, const StageWeights& stage);

/// Folds R×R cells of x[h·w × C] and projects back to C channels.
Tensor sequence_reduce(const Tensor& x, Grid grid, std::size_t reduction, const LinearWeights& proj);

/// Multi-head cross-attention: queries from `query`, keys and values from the
/// sequence-reduced `kv`. Output projection applied, no residual.
Tensor emca(const Tensor& query, const Tensor& kv, Grid grid, const AttentionWeights& w,
            std::size_t heads, std::size_t reduction);
/// Self-attention: emca(x, x).
Tensor emsa(const Tensor& x, Grid grid, const AttentionWeights& w, std::size_t heads,
            std::size_t reduction);

/// fc1 → depthwise 3×3 → GELU → fc2 on x[h·w × C]; no residual.
Tensor mix_ffn(const Tensor& x, Grid grid, const MixFfnWeights& w);

/// Self-attention block for a single stream (used by the single-image path).
Tensor self_block(const Tensor& x, Grid grid, const BlockWeights& w, const StageConfig& cfg);

/// All eight block updates. When `cross` is false the cross branches are
/// left empty.
QuadFeatures quad_block(const QuadFeatures& in, Grid grid, const BlockWeights& w,
                        const StageConfig& cfg, bool cross = true);

/// Overlapping 3×3 stride-2 merge of x[h·w × C_i] to [(h/2·w/2) × C_{i+1}],
/// followed by the embedding LayerNorm of the next stage.
Tensor patch_merge(const Tensor& x, Grid grid, const StageWeights& next);

/// Paired forward: per-stage quadruple features for (img_s, img_t).
std::vector<StageOutput> encoder_forward(const Tensor& img_s, const Tensor& img_t,
                                         const EncoderWeights& w, bool cross = true);

/// Single-stream forward (self branches only); matches the target-aware
/// branch of encoder_forward(img, img).
std::vector<Tensor> encoder_forward_single(const Tensor& img, const EncoderWeights& w,
                                           std::vector<Grid>* grids = nullptr);

}  // namespace qf
