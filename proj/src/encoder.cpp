#include "quadformer/encoder.hpp"

namespace qf {

EncoderConfig EncoderConfig::q0() {
  EncoderConfig c;
  c.stages = {{8, 1, 1, 8}, {16, 1, 1, 4}, {32, 1, 2, 2}, {64, 1, 4, 1}};
  return c;
}

EncoderConfig EncoderConfig::micro() {
  EncoderConfig c;
  c.mlp_ratio = 2;
  c.stages = {{4, 1, 1, 2}, {8, 1, 1, 1}, {8, 1, 2, 1}, {8, 1, 4, 1}};
  return c;
}

void EncoderConfig::validate() const {
  if (stages.size() != 4) throw ContractError("encoder config: exactly 4 stages required");
  if (mlp_ratio == 0 || in_channels == 0) throw ContractError("encoder config: zero size");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.channels == 0 || s.heads == 0 || s.channels % s.heads != 0) {
      throw ContractError("encoder config: stage " + std::to_string(i) + " has " +
                          std::to_string(s.channels) + " channels for " + std::to_string(s.heads) +
                          " heads");
    }
    if (s.depth == 0 || s.reduction == 0) {
      throw ContractError("encoder config: stage " + std::to_string(i) + " needs depth and R >= 1");
    }
  }
}

Grid EncoderConfig::stage_grid(std::size_t i, std::size_t height, std::size_t width) const {
  const std::size_t div = std::size_t{4} << i;
  return {height / div, width / div};
}

AttentionWeights AttentionWeights::init(std::size_t channels, std::size_t reduction,
                                        Initializer& init) {
  AttentionWeights a;
  a.q = LinearWeights::init(channels, channels, init);
  a.k = LinearWeights::init(channels, channels, init);
  a.v = LinearWeights::init(channels, channels, init);
  a.out = LinearWeights::init(channels, channels, init);
  a.reduce = LinearWeights::init(reduction * reduction * channels, channels, init);
  return a;
}

void AttentionWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  q.visit(prefix + ".q", f);
  k.visit(prefix + ".k", f);
  v.visit(prefix + ".v", f);
  out.visit(prefix + ".out", f);
  reduce.visit(prefix + ".reduce", f);
}

MixFfnWeights MixFfnWeights::init(std::size_t channels, std::size_t hidden, Initializer& init) {
  MixFfnWeights m;
  m.fc1 = LinearWeights::init(channels, hidden, init);
  m.dw_w = init.he_normal({hidden, 3, 3}, 9);
  m.dw_b = Tensor(Shape{hidden});
  m.fc2 = LinearWeights::init(hidden, channels, init);
  return m;
}

void MixFfnWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  fc1.visit(prefix + ".fc1", f);
  f(prefix + ".dw.w", dw_w);
  f(prefix + ".dw.b", dw_b);
  fc2.visit(prefix + ".fc2", f);
}

void BlockWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  norm.visit(prefix + ".norm", f);
  attn.visit(prefix + ".attn", f);
  if (cross_attn) cross_attn->visit(prefix + ".cross_attn", f);
  ffn.visit(prefix + ".ffn", f);
}

void StageWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  embed.visit(prefix + ".embed", f);
  embed_norm.visit(prefix + ".embed_norm", f);
  for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].visit(prefix + ".block" + std::to_string(b), f);
  out_norm.visit(prefix + ".out_norm", f);
}

EncoderWeights EncoderWeights::init(const EncoderConfig& config, Initializer& init) {
  config.validate();
  EncoderWeights e;
  e.config = config;
  std::size_t in = config.in_channels;
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const auto& sc = config.stages[i];
    StageWeights s;
    s.embed = i == 0 ? ConvWeights::init(in, sc.channels, 4, 4, 0, init)
                     : ConvWeights::init(in, sc.channels, 3, 2, 1, init);
    s.embed_norm = LayerNormWeights::init(sc.channels);
    for (std::size_t b = 0; b < sc.depth; ++b) {
      BlockWeights bw;
      bw.norm = LayerNormWeights::init(sc.channels);
      bw.attn = AttentionWeights::init(sc.channels, sc.reduction, init);
      if (!config.share_cross_weights) bw.cross_attn = AttentionWeights::init(sc.channels, sc.reduction, init);
      bw.ffn = MixFfnWeights::init(sc.channels, sc.channels * config.mlp_ratio, init);
      s.blocks.push_back(std::move(bw));
    }
    s.out_norm = LayerNormWeights::init(sc.channels);
    e.stages.push_back(std::move(s));
    in = sc.channels;
  }
  return e;
}

void EncoderWeights::visit(const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t i = 0; i < stages.size(); ++i) stages[i].visit(prefix + ".stage" + std::to_string(i), f);
}

Tensor patch_embed(const Tensor& img, const StageWeights& stage) {
  if (img.rank() != 3 || img.dim(1) % 32 != 0 || img.dim(2) % 32 != 0 || img.dim(1) == 0 ||
      img.dim(2) == 0) {
    throw ShapeError("patch_embed: image " + to_string(img.shape()) +
                     " must be C×H×W with H and W multiples of 32");
  }
  return stage.embed_norm(chw_to_tokens(stage.embed(img)));
}

Tensor sequence_reduce(const Tensor& x, Grid grid, std::size_t reduction, const LinearWeights& proj) {
  return proj(space_to_depth(x, grid.h, grid.w, reduction));
}

Tensor emca(const Tensor& query, const Tensor& kv, Grid grid, const AttentionWeights& w,
            std::size_t heads, std::size_t reduction) {
  if (query.rank() != 2 || kv.rank() != 2 || query.dim(1) != kv.dim(1)) {
    throw ShapeError("emca: channel mismatch between " + to_string(query.shape()) + " and " +
                     to_string(kv.shape()));
  }
  const Tensor reduced = sequence_reduce(kv, grid, reduction, w.reduce);
  return w.out(attention(w.q(query), w.k(reduced), w.v(reduced), heads));
}

Tensor emsa(const Tensor& x, Grid grid, const AttentionWeights& w, std::size_t heads,
            std::size_t reduction) {
  return emca(x, x, grid, w, heads, reduction);
}

Tensor mix_ffn(const Tensor& x, Grid grid, const MixFfnWeights& w) {
  if (x.rank() != 2 || x.dim(0) != grid.tokens()) {
    throw ShapeError("mix_ffn: " + to_string(x.shape()) + " does not match grid " +
                     std::to_string(grid.h) + "x" + std::to_string(grid.w));
  }
  Tensor hidden = tokens_to_chw(w.fc1(x), grid.h, grid.w);
  hidden = gelu(depthwise_conv2d(hidden, w.dw_w, w.dw_b, {1, 1}));
  return w.fc2(chw_to_tokens(hidden));
}

Tensor self_block(const Tensor& x, Grid grid, const BlockWeights& w, const StageConfig& cfg) {
  const Tensor hat = add(emsa(w.norm(x), grid, w.attn, cfg.heads, cfg.reduction), x);
  return add(mix_ffn(hat, grid, w.ffn), hat);
}

QuadFeatures quad_block(const QuadFeatures& in, Grid grid, const BlockWeights& w,
                        const StageConfig& cfg, bool cross) {
  QuadFeatures out;
  const Tensor ln_s = w.norm(in.f_s);
  const Tensor ln_t = w.norm(in.f_t);
  const Tensor hat_s = add(emsa(ln_s, grid, w.attn, cfg.heads, cfg.reduction), in.f_s);
  const Tensor hat_t = add(emsa(ln_t, grid, w.attn, cfg.heads, cfg.reduction), in.f_t);
  out.f_s = add(mix_ffn(hat_s, grid, w.ffn), hat_s);
  out.f_t = add(mix_ffn(hat_t, grid, w.ffn), hat_t);
  if (!cross) return out;
  if (in.f_ts.shape() != in.f_s.shape() || in.f_st.shape() != in.f_s.shape() ||
      in.f_t.shape() != in.f_s.shape()) {
    throw ShapeError("quad_block: branch shapes differ");
  }
  // Cross branches keep their own previous activation as residual base.
  const Tensor hat_ts = add(emca(ln_t, ln_s, grid, w.cross(), cfg.heads, cfg.reduction), in.f_ts);
  const Tensor hat_st = add(emca(ln_s, ln_t, grid, w.cross(), cfg.heads, cfg.reduction), in.f_st);
  out.f_ts = add(mix_ffn(hat_ts, grid, w.ffn), hat_ts);
  out.f_st = add(mix_ffn(hat_st, grid, w.ffn), hat_st);
  return out;
}

Tensor patch_merge(const Tensor& x, Grid grid, const StageWeights& next) {
  if (grid.h % 2 != 0 || grid.w % 2 != 0) {
    throw ShapeError("patch_merge: odd grid " + std::to_string(grid.h) + "x" + std::to_string(grid.w));
  }
  return next.embed_norm(chw_to_tokens(next.embed(tokens_to_chw(x, grid.h, grid.w))));
}

std::vector<StageOutput> encoder_forward(const Tensor& img_s, const Tensor& img_t,
                                         const EncoderWeights& w, bool cross) {
  if (img_s.shape() != img_t.shape()) {
    throw ShapeError("encoder_forward: image sizes differ " + to_string(img_s.shape()) + " vs " +
                     to_string(img_t.shape()));
  }
  const auto& cfg = w.config;
  std::vector<StageOutput> outputs;
  QuadFeatures q;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& stage = w.stages[i];
    const Grid grid = cfg.stage_grid(i, img_s.dim(1), img_s.dim(2));
    if (i == 0) {
      q.f_s = patch_embed(img_s, stage);
      q.f_t = patch_embed(img_t, stage);
      if (cross) {
        q.f_ts = q.f_t;
        q.f_st = q.f_s;
      }
    } else {
      const Grid prev = outputs.back().grid;
      q.f_s = patch_merge(q.f_s, prev, stage);
      q.f_t = patch_merge(q.f_t, prev, stage);
      if (cross) {
        q.f_ts = patch_merge(q.f_ts, prev, stage);
        q.f_st = patch_merge(q.f_st, prev, stage);
      }
    }
    for (const auto& block : stage.blocks) q = quad_block(q, grid, block, cfg.stages[i], cross);
    q.f_s = stage.out_norm(q.f_s);
    q.f_t = stage.out_norm(q.f_t);
    if (cross) {
      q.f_ts = stage.out_norm(q.f_ts);
      q.f_st = stage.out_norm(q.f_st);
    }
    outputs.push_back({q, grid});
  }
  return outputs;
}

std::vector<Tensor> encoder_forward_single(const Tensor& img, const EncoderWeights& w,
                                           std::vector<Grid>* grids) {
  const auto& cfg = w.config;
  std::vector<Tensor> outputs;
  Tensor f;
  Grid prev;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& stage = w.stages[i];
    const Grid grid = cfg.stage_grid(i, img.dim(1), img.dim(2));
    f = i == 0 ? patch_embed(img, stage) : patch_merge(f, prev, stage);
    for (const auto& block : stage.blocks) f = self_block(f, grid, block, cfg.stages[i]);
    f = stage.out_norm(f);
    outputs.push_back(f);
    if (grids) grids->push_back(grid);
    prev = grid;
  }
  return outputs;
}

}  // namespace qf
