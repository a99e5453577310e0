#include "quadformer/model.hpp"

namespace qf {

QuadFormer QuadFormer::init(const ModelConfig& config, std::uint64_t seed) {
  Initializer init(seed);
  QuadFormer m;
  m.encoder = EncoderWeights::init(config.encoder, init);
  std::vector<std::size_t> channels;
  for (const auto& s : config.encoder.stages) channels.push_back(s.channels);
  m.decoder = DecoderWeights::init(config.decoder, channels, init);
  return m;
}

void QuadFormer::visit(const ParamVisitor& f) {
  encoder.visit("encoder", f);
  decoder.visit("decoder", f);
}

void QuadFormer::sync_target_head() {
  if (!decoder.target_head) return;
  HeadWeights copy = decoder.source_head;
  auto deep = [](Tensor& t) { t = Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end())); };
  copy.visit("", [&](const std::string&, Tensor& t) { deep(t); });
  decoder.target_head = std::move(copy);
}

namespace {

std::vector<Tensor> branch(const std::vector<StageOutput>& stages, Tensor QuadFeatures::*member) {
  std::vector<Tensor> out;
  out.reserve(stages.size());
  for (const auto& s : stages) out.push_back(s.features.*member);
  return out;
}

}  // namespace

PairForward forward_pair(const QuadFormer& model, const Tensor& img_s, const Tensor& img_t,
                         FeatureToggles toggles) {
  PairForward out;
  out.stages = encoder_forward(img_s, img_t, model.encoder, toggles.any());
  std::vector<Grid> grids;
  for (const auto& s : out.stages) grids.push_back(s.grid);
  out.phi_s = unify_and_upsample(branch(out.stages, &QuadFeatures::f_s), grids, model.decoder);
  out.phi_t = unify_and_upsample(branch(out.stages, &QuadFeatures::f_t), grids, model.decoder);
  if (toggles.source_cross) {
    out.phi_ts = unify_and_upsample(branch(out.stages, &QuadFeatures::f_ts), grids, model.decoder);
  }
  if (toggles.target_cross) {
    out.phi_st = unify_and_upsample(branch(out.stages, &QuadFeatures::f_st), grids, model.decoder);
  }
  const Grid top = grids.front();
  out.source = fuse_and_predict(out.phi_s, toggles.source_cross ? out.phi_ts : out.phi_s, top,
                                model.decoder.source_head);
  out.target = fuse_and_predict(out.phi_t, toggles.target_cross ? out.phi_st : out.phi_t, top,
                                model.decoder.head_for_target());
  return out;
}

SegMask forward_single(const QuadFormer& model, const Tensor& img, bool target_head) {
  std::vector<Grid> grids;
  const auto feats = encoder_forward_single(img, model.encoder, &grids);
  const Tensor phi = unify_and_upsample(feats, grids, model.decoder);
  return fuse_and_predict(phi, phi, grids.front(),
                          target_head ? model.decoder.head_for_target() : model.decoder.source_head);
}

SegMask infer_target_sourcefree(const QuadFormer& model, const Tensor& img_t) {
  return forward_single(model, img_t, true);
}

}  // namespace qf
