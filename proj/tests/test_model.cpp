#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "quadformer/gradcheck.hpp"
#include "quadformer/model.hpp"
#include "test_util.hpp"

namespace qf {
namespace {

using testing::naive_attention;
using testing::naive_linear;
using testing::random_tensor;
using testing::randomize;
using testing::to_vec;

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  if (a.shape() != b.shape()) return 1e300;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs_diff(const std::vector<double>& a, const Tensor& b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

AttentionWeights random_attention(std::size_t c, std::size_t r, std::uint64_t seed) {
  Initializer init(seed);
  auto w = AttentionWeights::init(c, r, init);
  randomize(w, seed + 1);
  return w;
}

std::vector<double> project(const std::vector<double>& x, std::size_t n, const LinearWeights& l) {
  return naive_linear(x, n, l.w.dim(0), l.w, l.b);
}

// Oracle for R = 1: out(attn(q(x_q), k(reduce(x_kv)), v(reduce(x_kv)))).
std::vector<double> oracle_cross(const Tensor& xq, const Tensor& xkv, const AttentionWeights& w,
                                 std::size_t heads) {
  const std::size_t c = xq.dim(1), nq = xq.dim(0), nk = xkv.dim(0);
  const auto red = project(to_vec(xkv), nk, w.reduce);
  const auto a = naive_attention(project(to_vec(xq), nq, w.q), project(red, nk, w.k),
                                 project(red, nk, w.v), nq, nk, c, heads);
  return project(a, nq, w.out);
}

LinearWeights identity_linear(std::size_t c) {
  Tensor w(Shape{c, c});
  for (std::size_t i = 0; i < c; ++i) w.mutable_values()[i * c + i] = 1.0;
  return {w, Tensor(Shape{c})};
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

QuadFormer random_model(const ModelConfig& cfg, std::uint64_t seed, double amp = 0.3) {
  auto m = QuadFormer::init(cfg, seed);
  randomize(m, seed + 7, amp);
  return m;
}

ModelConfig micro_model() {
  ModelConfig cfg;
  cfg.encoder = EncoderConfig::micro();
  cfg.decoder.embed_dim = 8;
  return cfg;
}

// ---------------------------------------------------------------- encoder parts

TEST(PatchEmbed, ShapesAndZeroImage) {
  Initializer init(1);
  auto enc = EncoderWeights::init(EncoderConfig::q0(), init);
  EXPECT_EQ(patch_embed(Tensor(Shape{3, 32, 32}), enc.stages[0]).shape(), (Shape{64, 8}));
  EXPECT_THROW(patch_embed(Tensor(Shape{3, 36, 32}), enc.stages[0]), ShapeError);
  const Tensor zero = patch_embed(Tensor(Shape{3, 32, 32}), enc.stages[0]);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
}

TEST(PatchEmbed, SinglePixelTouchesOneToken) {
  Initializer init(2);
  auto enc = EncoderWeights::init(EncoderConfig::q0(), init);
  Tensor img(Shape{3, 32, 32});
  img.mutable_values()[1 * 1024 + 13 * 32 + 22] = 1.0;
  const Tensor tokens = chw_to_tokens(enc.stages[0].embed(img));
  const std::size_t hot = (13 / 4) * 8 + 22 / 4;
  for (std::size_t t = 0; t < 64; ++t) {
    double norm = 0.0;
    for (std::size_t c = 0; c < 8; ++c) norm += std::abs(tokens[t * 8 + c]);
    if (t == hot) {
      EXPECT_GT(norm, 0.0);
    } else {
      EXPECT_EQ(norm, 0.0) << t;
    }
  }
}

TEST(SequenceReduce, IdentityShapeAndConstantField) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({64, 4}, rng);
  EXPECT_TRUE(bit_equal(sequence_reduce(x, {8, 8}, 1, identity_linear(4)), x));

  Initializer init(3);
  EXPECT_EQ(sequence_reduce(x, {8, 8}, 2, LinearWeights::init(16, 4, init)).shape(), (Shape{16, 4}));
  EXPECT_THROW(sequence_reduce(x, {8, 8}, 3, LinearWeights::init(36, 4, init)), ShapeError);

  // averaging over the R² folded copies preserves a constant field
  Tensor avg(Shape{16, 4});
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 4; ++c) avg.mutable_values()[(r * 4 + c) * 4 + c] = 0.25;
  }
  std::vector<double> field(64 * 4);
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t c = 0; c < 4; ++c) field[i * 4 + c] = 0.5 + static_cast<double>(c);
  }
  const Tensor red = sequence_reduce(Tensor(Shape{64, 4}, field), {8, 8}, 2, {avg, Tensor(Shape{4})});
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(red[i * 4 + c], 0.5 + static_cast<double>(c), 1e-15);
  }
}

TEST(Emsa, SingleTokenReturnsProjectedValue) {
  const auto w = random_attention(4, 1, 10);
  std::mt19937_64 rng(10);
  const Tensor x = random_tensor({1, 4}, rng);
  const auto red = project(to_vec(x), 1, w.reduce);
  const auto expected = project(project(red, 1, w.v), 1, w.out);
  EXPECT_LT(max_abs_diff(expected, emsa(x, {1, 1}, w, 1, 1)), 1e-14);
}

TEST(Emsa, ZeroValuesGiveZeroOutput) {
  auto w = random_attention(4, 1, 11);
  w.v = {Tensor(Shape{4, 4}), Tensor(Shape{4})};
  w.out.b = Tensor(Shape{4});
  std::mt19937_64 rng(11);
  const Tensor y = emsa(random_tensor({6, 4}, rng), {2, 3}, w, 2, 1);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Emsa, MatchesDenseOracle) {
  for (std::size_t heads : {1u, 2u}) {
    const auto w = random_attention(4, 1, 20 + heads);
    std::mt19937_64 rng(20 + heads);
    const Tensor x = random_tensor({3, 4}, rng, -2, 2);
    EXPECT_LT(max_abs_diff(oracle_cross(x, x, w, heads), emsa(x, {1, 3}, w, heads, 1)), 1e-12) << heads;
  }
}

TEST(Emsa, PermutationEquivariantAtUnitReduction) {
  const auto w = random_attention(4, 1, 30);
  std::mt19937_64 rng(30);
  const Tensor x = random_tensor({6, 4}, rng, -2, 2);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> px(24);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t c = 0; c < 4; ++c) px[i * 4 + c] = x[perm[i] * 4 + c];
  }
  const Tensor y = emsa(x, {2, 3}, w, 2, 1);
  const Tensor py = emsa(Tensor(Shape{6, 4}, px), {2, 3}, w, 2, 1);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(py[i * 4 + c], y[perm[i] * 4 + c], 1e-12);
  }
}

TEST(Emca, SameStreamEqualsSelfAttention) {
  const auto w = random_attention(8, 2, 40);
  std::mt19937_64 rng(40);
  const Tensor x = random_tensor({16, 8}, rng);
  EXPECT_TRUE(bit_equal(emca(x, x, {4, 4}, w, 2, 2), emsa(x, {4, 4}, w, 2, 2)));
}

TEST(Emca, SingleKeyGivesIdenticalRows) {
  const auto w = random_attention(4, 1, 41);
  std::mt19937_64 rng(41);
  const Tensor y = emca(random_tensor({5, 4}, rng), random_tensor({1, 4}, rng), {1, 1}, w, 2, 1);
  for (std::size_t i = 1; i < 5; ++i) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y[i * 4 + c], y[c]);
  }
}

TEST(Emca, MatchesDenseOracle) {
  const auto w = random_attention(4, 1, 42);
  std::mt19937_64 rng(42);
  const Tensor xq = random_tensor({3, 4}, rng, -2, 2);
  const Tensor xkv = random_tensor({3, 4}, rng, -2, 2);
  EXPECT_LT(max_abs_diff(oracle_cross(xq, xkv, w, 2), emca(xq, xkv, {1, 3}, w, 2, 1)), 1e-12);
  EXPECT_THROW(emca(xq, random_tensor({3, 8}, rng), {1, 3}, w, 2, 1), ShapeError);
}

TEST(MixFfn, ZeroInputAndHiddenWidth) {
  Initializer init(50);
  const auto w = MixFfnWeights::init(8, 32, init);
  EXPECT_EQ(w.fc1.w.shape(), (Shape{8, 32}));
  const Tensor y = mix_ffn(Tensor(Shape{16, 8}), {4, 4}, w);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
  auto enc = EncoderWeights::init(EncoderConfig::q0(), init);
  EXPECT_EQ(enc.stages[0].blocks[0].ffn.fc1.w.dim(1), 32u);
  EXPECT_THROW(mix_ffn(Tensor(Shape{15, 8}), {4, 4}, w), ShapeError);
}

// One hot token: the depthwise 3×3 spreads it to its neighbourhood, unlike a
// pure per-token MLP which would leave every other token at zero.
TEST(MixFfn, SingleTokenMixesNeighbourhood) {
  Initializer init(51);
  auto w = MixFfnWeights::init(4, 8, init);
  randomize(w, 52);
  w.fc1.b = Tensor(Shape{8});
  w.dw_b = Tensor(Shape{8});
  w.fc2.b = Tensor(Shape{4});
  std::mt19937_64 rng(51);
  const std::size_t y0 = 1, x0 = 2;
  Tensor x(Shape{16, 4});
  const Tensor hot = random_tensor({1, 4}, rng);
  for (std::size_t c = 0; c < 4; ++c) x.mutable_values()[(y0 * 4 + x0) * 4 + c] = hot[c];
  const auto h = project(to_vec(hot), 1, w.fc1);
  const Tensor y = mix_ffn(x, {4, 4}, w);
  std::size_t touched = 0;
  for (std::size_t yy = 0; yy < 4; ++yy) {
    for (std::size_t xx = 0; xx < 4; ++xx) {
      const long dy = long(y0) - long(yy) + 1, dx = long(x0) - long(xx) + 1;
      std::vector<double> expected(4, 0.0);
      if (dy >= 0 && dy < 3 && dx >= 0 && dx < 3) {
        std::vector<double> g(8);
        for (std::size_t k = 0; k < 8; ++k) g[k] = gelu_ref(w.dw_w[k * 9 + dy * 3 + dx] * h[k]);
        expected = project(g, 1, w.fc2);
        ++touched;
      }
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y[(yy * 4 + xx) * 4 + c], expected[c], 1e-14);
    }
  }
  EXPECT_EQ(touched, 9u);
}

StageConfig small_stage(std::size_t r) { return {4, 1, 2, r}; }

BlockWeights random_block(std::size_t c, std::size_t r, std::uint64_t seed) {
  Initializer init(seed);
  BlockWeights b;
  b.norm = LayerNormWeights::init(c);
  b.attn = AttentionWeights::init(c, r, init);
  b.ffn = MixFfnWeights::init(c, 2 * c, init);
  randomize(b, seed + 1);
  return b;
}

TEST(QuadBlock, IdenticalInputsGivePairwiseEqualBranches) {
  const auto w = random_block(4, 2, 60);
  std::mt19937_64 rng(60);
  const Tensor x = random_tensor({16, 4}, rng);
  const auto out = quad_block({x, x, x, x}, {4, 4}, w, small_stage(2));
  EXPECT_LT(max_abs_diff(out.f_s, out.f_ts), 1e-12);
  EXPECT_LT(max_abs_diff(out.f_t, out.f_st), 1e-12);
}

TEST(QuadBlock, ZeroOutputProjectionLeavesMixFfnPath) {
  auto w = random_block(4, 1, 61);
  w.attn.out = {Tensor(Shape{4, 4}), Tensor(Shape{4})};
  std::mt19937_64 rng(61);
  QuadFeatures in{random_tensor({4, 4}, rng), random_tensor({4, 4}, rng), random_tensor({4, 4}, rng),
                  random_tensor({4, 4}, rng)};
  const auto out = quad_block(in, {2, 2}, w, small_stage(1));
  auto path = [&](const Tensor& f) { return add(mix_ffn(f, {2, 2}, w.ffn), f); };
  EXPECT_LT(max_abs_diff(out.f_s, path(in.f_s)), 1e-14);
  EXPECT_LT(max_abs_diff(out.f_t, path(in.f_t)), 1e-14);
  EXPECT_LT(max_abs_diff(out.f_ts, path(in.f_ts)), 1e-14);
  EXPECT_LT(max_abs_diff(out.f_st, path(in.f_st)), 1e-14);
}

TEST(QuadBlock, CrossBranchesAttendToTheOtherDomain) {
  const auto w = random_block(4, 1, 62);
  std::mt19937_64 rng(62);
  QuadFeatures in{random_tensor({4, 4}, rng), random_tensor({4, 4}, rng), random_tensor({4, 4}, rng),
                  random_tensor({4, 4}, rng)};
  const auto out = quad_block(in, {2, 2}, w, small_stage(1));
  const Tensor ln_s = w.norm(in.f_s), ln_t = w.norm(in.f_t);
  // f_{t-s}: queries from t, keys/values from s, residual on previous f_{t-s}
  const Tensor hat_ts = add(Tensor(Shape{4, 4}, oracle_cross(ln_t, ln_s, w.attn, 2)), in.f_ts);
  const Tensor hat_st = add(Tensor(Shape{4, 4}, oracle_cross(ln_s, ln_t, w.attn, 2)), in.f_st);
  EXPECT_LT(max_abs_diff(out.f_ts, add(mix_ffn(hat_ts, {2, 2}, w.ffn), hat_ts)), 1e-12);
  EXPECT_LT(max_abs_diff(out.f_st, add(mix_ffn(hat_st, {2, 2}, w.ffn), hat_st)), 1e-12);
}

TEST(QuadBlock, GradientsMatchFiniteDifferences) {
  for (std::size_t r : {1u, 2u}) {
    const auto w = random_block(4, r, 63);
    std::mt19937_64 rng(63);
    std::vector<std::pair<std::string, Tensor>> inputs;
    for (const char* name : {"f_s", "f_t", "f_ts", "f_st"}) inputs.emplace_back(name, random_tensor({4, 4}, rng));
    for (auto& p : collect_params(w)) inputs.push_back(p);
    std::vector<Tensor> mix;
    for (int i = 0; i < 4; ++i) mix.push_back(random_tensor({4, 4}, rng));
    auto f = [&](const std::vector<Tensor>& in) {
      const auto bw = rebind_params(w, std::span<const Tensor>(in).subspan(4));
      const auto out = quad_block({in[0], in[1], in[2], in[3]}, {2, 2}, bw, small_stage(r));
      Tensor total = sum(mul(out.f_s, mix[0]));
      total = add(total, sum(mul(out.f_t, mix[1])));
      total = add(total, sum(mul(out.f_ts, mix[2])));
      return add(total, sum(mul(out.f_st, mix[3])));
    };
    const auto report = finite_diff_check(f, inputs, 1e-5, 64, 5);
    for (const auto& e : report.entries) EXPECT_LT(e.max_error, 1e-4) << e.name << " R=" << r;
  }
}

TEST(PatchMerge, ShapesZeroAndConstantField) {
  Initializer init(70);
  auto enc = EncoderWeights::init(EncoderConfig::q0(), init);
  std::mt19937_64 rng(70);
  const Tensor x = random_tensor({64, 8}, rng);
  EXPECT_EQ(patch_merge(x, {8, 8}, enc.stages[1]).shape(), (Shape{16, 16}));
  EXPECT_THROW(patch_merge(random_tensor({63, 8}, rng), {7, 9}, enc.stages[1]), ShapeError);

  StageWeights next = enc.stages[1];
  next.embed.w = Tensor(next.embed.w.shape());
  const Tensor zero = patch_merge(x, {8, 8}, next);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);

  // centre-tap kernel copies channels, so a constant field stays constant
  Tensor centre(Shape{8, 8, 3, 3});
  for (std::size_t c = 0; c < 8; ++c) centre.mutable_values()[((c * 8 + c) * 3 + 1) * 3 + 1] = 1.0;
  next.embed.w = centre;
  next.embed.b = Tensor(Shape{8});
  next = StageWeights{next.embed, LayerNormWeights::init(8), {}, LayerNormWeights::init(8)};
  std::vector<double> field(64 * 8);
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t c = 0; c < 8; ++c) field[i * 8 + c] = 0.1 * static_cast<double>(c * c);
  }
  const Tensor merged = patch_merge(Tensor(Shape{64, 8}, field), {8, 8}, next);
  for (std::size_t i = 1; i < 16; ++i) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(merged[i * 8 + c], merged[c], 1e-14);
  }
}

// ---------------------------------------------------------------- encoder

TEST(Encoder, ShapeChain) {
  const auto m = random_model({}, 80);
  std::mt19937_64 rng(80);
  for (std::size_t size : {32u, 64u}) {
    const Tensor img = random_tensor({3, size, size}, rng, 0, 1);
    const auto stages = encoder_forward(img, random_tensor({3, size, size}, rng, 0, 1), m.encoder);
    ASSERT_EQ(stages.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t side = size >> (i + 2);
      const Shape expect{side * side, m.encoder.config.stages[i].channels};
      EXPECT_EQ(stages[i].grid, (Grid{side, side}));
      EXPECT_EQ(stages[i].features.f_s.shape(), expect);
      EXPECT_EQ(stages[i].features.f_t.shape(), expect);
      EXPECT_EQ(stages[i].features.f_ts.shape(), expect);
      EXPECT_EQ(stages[i].features.f_st.shape(), expect);
    }
  }
  EXPECT_THROW(encoder_forward(Tensor(Shape{3, 32, 32}), Tensor(Shape{3, 64, 64}), m.encoder), ShapeError);
}

TEST(Encoder, CrossDegeneratesToSelf) {
  const auto m = random_model({}, 81);
  std::mt19937_64 rng(81);
  const Tensor img = random_tensor({3, 64, 64}, rng, 0, 1);
  for (const auto& s : encoder_forward(img, img, m.encoder)) {
    EXPECT_LT(max_abs_diff(s.features.f_ts, s.features.f_s), 1e-12);
    EXPECT_LT(max_abs_diff(s.features.f_st, s.features.f_t), 1e-12);
  }
}

TEST(Encoder, UnsharedCrossWeightsBreakDegeneracy) {
  ModelConfig cfg;
  cfg.encoder.share_cross_weights = false;
  const auto m = random_model(cfg, 82);
  std::size_t cross = 0;
  for (const auto& [name, t] : collect_params(m)) cross += name.find(".cross_attn.") != std::string::npos;
  EXPECT_EQ(cross, 4u * 10u);
  std::mt19937_64 rng(82);
  const Tensor img = random_tensor({3, 32, 32}, rng, 0, 1);
  EXPECT_GT(max_abs_diff(encoder_forward(img, img, m.encoder)[0].features.f_ts,
                         encoder_forward(img, img, m.encoder)[0].features.f_s),
            1e-6);
}

// Self-attention-only hierarchical forward written directly from loops.
std::vector<std::vector<double>> reference_self_forward(const Tensor& img, const EncoderWeights& w) {
  std::vector<std::vector<double>> out;
  Tensor chw = img;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& sc = w.config.stages[i];
    const auto& st = w.stages[i];
    chw = i == 0 ? conv2d(chw, st.embed.w, st.embed.b, {4, 0}) : conv2d(chw, st.embed.w, st.embed.b, {2, 1});
    const std::size_t c = sc.channels, h = chw.dim(1), wd = chw.dim(2), n = h * wd;
    std::vector<double> tok(n * c);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t k = 0; k < c; ++k) tok[t * c + k] = chw[k * n + t];
    }
    Tensor x = layer_norm(Tensor(Shape{n, c}, tok), st.embed_norm.gamma, st.embed_norm.beta, 1e-6);
    for (const auto& b : st.blocks) {
      const Tensor ln = layer_norm(x, b.norm.gamma, b.norm.beta, 1e-6);
      const Tensor folded = space_to_depth(ln, h, wd, sc.reduction);
      const std::size_t nk = folded.dim(0);
      const auto red = project(to_vec(folded), nk, b.attn.reduce);
      const auto a = naive_attention(project(to_vec(ln), n, b.attn.q), project(red, nk, b.attn.k),
                                     project(red, nk, b.attn.v), n, nk, c, sc.heads);
      auto hat = project(a, n, b.attn.out);
      for (std::size_t j = 0; j < hat.size(); ++j) hat[j] += x[j];
      const auto h1 = project(hat, n, b.ffn.fc1);
      const std::size_t hid = b.ffn.fc1.w.dim(1);
      std::vector<double> h1c(hid * n);
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t k = 0; k < hid; ++k) h1c[k * n + t] = h1[t * hid + k];
      }
      const Tensor conv = depthwise_conv2d(Tensor(Shape{hid, h, wd}, h1c), b.ffn.dw_w, b.ffn.dw_b, {1, 1});
      std::vector<double> g(n * hid);
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t k = 0; k < hid; ++k) g[t * hid + k] = gelu_ref(conv[k * n + t]);
      }
      auto y = project(g, n, b.ffn.fc2);
      for (std::size_t j = 0; j < y.size(); ++j) y[j] += hat[j];
      x = Tensor(Shape{n, c}, y);
    }
    x = layer_norm(x, st.out_norm.gamma, st.out_norm.beta, 1e-6);
    out.push_back(to_vec(x));
    std::vector<double> back(n * c);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t k = 0; k < c; ++k) back[k * n + t] = x[t * c + k];
    }
    chw = Tensor(Shape{c, h, wd}, back);
  }
  return out;
}

TEST(Encoder, SourceOnlyModeMatchesSelfAttentionReference) {
  const auto m = random_model({}, 83);
  std::mt19937_64 rng(83);
  const Tensor img = random_tensor({3, 64, 64}, rng, 0, 1);
  const auto ref = reference_self_forward(img, m.encoder);
  const auto quad = encoder_forward(img, img, m.encoder);
  const auto single = encoder_forward_single(img, m.encoder);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_LT(max_abs_diff(ref[i], quad[i].features.f_s), 1e-10) << i;
    EXPECT_LT(max_abs_diff(ref[i], quad[i].features.f_t), 1e-10) << i;
    EXPECT_LT(max_abs_diff(ref[i], single[i]), 1e-10) << i;
  }
}

TEST(Encoder, ConfigValidation) {
  auto cfg = EncoderConfig::q0();
  cfg.stages[2].heads = 3;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = EncoderConfig::q0();
  cfg.stages.pop_back();
  EXPECT_THROW(cfg.validate(), ContractError);
}

// ---------------------------------------------------------------- decoder

TEST(Decoder, UnifyZeroShapeAndConstant) {
  const auto m = QuadFormer::init({}, 90);
  const std::vector<Grid> grids{{8, 8}, {4, 4}, {2, 2}, {1, 1}};
  std::vector<Tensor> zero, constant;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t c = m.encoder.config.stages[i].channels;
    zero.emplace_back(Shape{grids[i].tokens(), c});
    std::vector<double> v(grids[i].tokens() * c);
    for (std::size_t t = 0; t < grids[i].tokens(); ++t) {
      for (std::size_t k = 0; k < c; ++k) v[t * c + k] = std::sin(double(k + i));
    }
    constant.emplace_back(Shape{grids[i].tokens(), c}, v);
  }
  const Tensor phi0 = unify_and_upsample(zero, grids, m.decoder);
  EXPECT_EQ(phi0.shape(), (Shape{64, 4 * 64}));
  for (double v : phi0.values()) EXPECT_EQ(v, 0.0);
  const Tensor phi = unify_and_upsample(constant, grids, m.decoder);
  for (std::size_t t = 1; t < 64; ++t) {
    for (std::size_t k = 0; k < 256; ++k) EXPECT_NEAR(phi[t * 256 + k], phi[k], 1e-14);
  }
  EXPECT_THROW(unify_and_upsample(std::span<const Tensor>(zero).first(3), std::span<const Grid>(grids).first(3),
                                  m.decoder),
               ShapeError);
}

TEST(Decoder, ZeroClassifierGivesUniformSoftmax) {
  auto m = random_model({}, 91);
  m.decoder.source_head.classify.w = Tensor(m.decoder.source_head.classify.w.shape());
  m.decoder.source_head.classify.b = Tensor(m.decoder.source_head.classify.b.shape());
  std::mt19937_64 rng(91);
  const Tensor img = random_tensor({3, 32, 32}, rng, 0, 1);
  const Tensor p = full_resolution_probs(forward_single(m, img, false), 32, 32);
  EXPECT_EQ(p.shape(), (Shape{2, 32, 32}));
  for (double v : p.values()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(Decoder, MaskSoftmaxNormalised) {
  const auto m = random_model({}, 92, 1.0);
  std::mt19937_64 rng(92);
  const Tensor p = full_resolution_probs(forward_single(m, random_tensor({3, 64, 32}, rng, 0, 1), true), 64, 32);
  for (std::size_t i = 0; i < 64 * 32; ++i) EXPECT_NEAR(p[i] + p[2048 + i], 1.0, 1e-9);
}

TEST(Decoder, FuseGradientMatchesFiniteDifferences) {
  DecoderConfig cfg;
  cfg.embed_dim = 4;
  cfg.extra_hidden = true;
  Initializer init(93);
  auto head = HeadWeights::init(cfg, init);
  randomize(head, 94);
  std::mt19937_64 rng(93);
  std::vector<std::pair<std::string, Tensor>> inputs{{"phi_a", random_tensor({4, 16}, rng)},
                                                     {"phi_b", random_tensor({4, 16}, rng)}};
  for (auto& p : collect_params(head)) inputs.push_back(p);
  const std::vector<std::uint8_t> labels{0, 1, 1, 0, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 0, 1};
  auto f = [&](const std::vector<Tensor>& in) {
    const auto h = rebind_params(head, std::span<const Tensor>(in).subspan(2));
    const auto mask = fuse_and_predict(in[0], in[1], {2, 2}, h);
    return softmax_cross_entropy(full_resolution_logits(mask, 4, 4), labels);
  };
  EXPECT_LT(finite_diff_check(f, inputs, 1e-5, 1000, 1).max_error(), 1e-6);
  EXPECT_THROW(fuse_and_predict(random_tensor({4, 16}, rng), random_tensor({4, 12}, rng), {2, 2}, head),
               ShapeError);
}

TEST(Decoder, HeadsReadTheirAugmentedPairs) {
  const auto m = random_model({}, 95);
  std::mt19937_64 rng(95);
  const auto out = forward_pair(m, random_tensor({3, 32, 32}, rng, 0, 1), random_tensor({3, 32, 32}, rng, 0, 1));
  const std::array<Tensor, 2> src{out.phi_s, out.phi_ts}, tgt{out.phi_t, out.phi_st};
  EXPECT_TRUE(bit_equal(out.source.augmented, concat_cols(src)));
  EXPECT_TRUE(bit_equal(out.target.augmented, concat_cols(tgt)));
  EXPECT_EQ(out.source.augmented.shape(), (Shape{64, 8 * 64}));
  EXPECT_EQ(out.target.logits.shape(), (Shape{2, 8, 8}));

  const auto plain = forward_pair(m, random_tensor({3, 32, 32}, rng, 0, 1), random_tensor({3, 32, 32}, rng, 0, 1),
                                  {false, false});
  const std::array<Tensor, 2> self{plain.phi_t, plain.phi_t};
  EXPECT_TRUE(bit_equal(plain.target.augmented, concat_cols(self)));
}

TEST(Decoder, SourceFreeEqualsPairedTargetHead) {
  for (bool share : {true, false}) {
    ModelConfig cfg;
    cfg.decoder.share_heads = share;
    const auto m = random_model(cfg, 96);
    std::mt19937_64 rng(96);
    const Tensor img = random_tensor({3, 64, 64}, rng, 0, 1);
    const auto free = infer_target_sourcefree(m, img);
    EXPECT_TRUE(bit_equal(free.logits, forward_pair(m, img, img).target.logits)) << share;
    EXPECT_TRUE(bit_equal(free.logits, infer_target_sourcefree(m, img).logits));
  }
}

TEST(Model, SyncTargetHeadCopiesValuesNotStorage) {
  ModelConfig cfg;
  cfg.decoder.share_heads = false;
  auto m = random_model(cfg, 97);
  m.sync_target_head();
  ASSERT_TRUE(m.decoder.target_head.has_value());
  EXPECT_TRUE(bit_equal(m.decoder.target_head->fuse.w, m.decoder.source_head.fuse.w));
  m.decoder.source_head.fuse.w.mutable_values()[0] += 1.0;
  EXPECT_FALSE(bit_equal(m.decoder.target_head->fuse.w, m.decoder.source_head.fuse.w));
}

TEST(Model, ParamNamesAreUniqueAndRebindRoundTrips) {
  const auto m = random_model(micro_model(), 98);
  const auto params = collect_params(m);
  std::vector<std::string> names;
  std::vector<Tensor> values;
  for (const auto& [n, t] : params) {
    names.push_back(n);
    values.push_back(t);
  }
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
  const auto back = rebind_params(m, values);
  EXPECT_TRUE(bit_equal(back.decoder.source_head.classify.w, m.decoder.source_head.classify.w));
  values.pop_back();
  EXPECT_THROW(rebind_params(m, values), ShapeError);
}

}  // namespace
}  // namespace qf
