#include "quadformer/decoder.hpp"

namespace qf {

void DecoderConfig::validate() const {
  if (num_classes < 2) throw ContractError("decoder config: num_classes must be >= 2");
  if (embed_dim == 0) throw ContractError("decoder config: embed_dim must be positive");
}

HeadWeights HeadWeights::init(const DecoderConfig& cfg, Initializer& init) {
  HeadWeights h;
  h.fuse = LinearWeights::init(8 * cfg.embed_dim, cfg.embed_dim, init);
  if (cfg.extra_hidden) h.hidden = LinearWeights::init(cfg.embed_dim, cfg.embed_dim, init);
  h.classify = LinearWeights::init(cfg.embed_dim, cfg.num_classes, init);
  return h;
}

void HeadWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  fuse.visit(prefix + ".fuse", f);
  if (hidden) hidden->visit(prefix + ".hidden", f);
  classify.visit(prefix + ".classify", f);
}

DecoderWeights DecoderWeights::init(const DecoderConfig& cfg,
                                    const std::vector<std::size_t>& stage_channels,
                                    Initializer& init) {
  cfg.validate();
  DecoderWeights d;
  d.config = cfg;
  for (auto c : stage_channels) d.unify.push_back(LinearWeights::init(c, cfg.embed_dim, init));
  d.source_head = HeadWeights::init(cfg, init);
  if (!cfg.share_heads) d.target_head = HeadWeights::init(cfg, init);
  return d;
}

void DecoderWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t i = 0; i < unify.size(); ++i) unify[i].visit(prefix + ".unify" + std::to_string(i), f);
  source_head.visit(prefix + ".head", f);
  if (target_head) target_head->visit(prefix + ".target_head", f);
}

Tensor unify_and_upsample(std::span<const Tensor> stage_feats, std::span<const Grid> grids,
                          const DecoderWeights& w) {
  if (stage_feats.size() != w.unify.size() || grids.size() != stage_feats.size()) {
    throw ShapeError("unify_and_upsample: expected " + std::to_string(w.unify.size()) +
                     " stages, got " + std::to_string(stage_feats.size()));
  }
  const Grid top = grids[0];
  std::vector<Tensor> parts;
  parts.reserve(stage_feats.size());
  for (std::size_t i = 0; i < stage_feats.size(); ++i) {
    Tensor y = w.unify[i](stage_feats[i]);
    if (grids[i] != top) {
      y = chw_to_tokens(upsample_bilinear(tokens_to_chw(y, grids[i].h, grids[i].w), top.h, top.w));
    }
    parts.push_back(std::move(y));
  }
  return concat_cols(parts);
}

SegMask fuse_and_predict(const Tensor& phi_a, const Tensor& phi_b, Grid grid, const HeadWeights& head) {
  if (phi_a.shape() != phi_b.shape()) {
    throw ShapeError("fuse_and_predict: " + to_string(phi_a.shape()) + " vs " + to_string(phi_b.shape()));
  }
  SegMask mask;
  mask.grid = grid;
  const std::array<Tensor, 2> parts{phi_a, phi_b};
  mask.augmented = concat_cols(parts);
  Tensor z = gelu(head.fuse(mask.augmented));
  if (head.hidden) z = gelu((*head.hidden)(z));
  mask.logits = tokens_to_chw(head.classify(z), grid.h, grid.w);
  return mask;
}

Tensor full_resolution_logits(const SegMask& mask, std::size_t height, std::size_t width) {
  return upsample_bilinear(mask.logits, height, width);
}

Tensor full_resolution_probs(const SegMask& mask, std::size_t height, std::size_t width) {
  return softmax_channels(full_resolution_logits(mask, height, width));
}

}  // namespace qf
