#include "quadformer/verify.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "quadformer/adaptation.hpp"
#include "quadformer/gradcheck.hpp"
#include "quadformer/model.hpp"
#include "quadformer/objectives.hpp"
#include "quadformer/ops.hpp"

namespace qf {

namespace {

Tensor uniform_tensor(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

// Full objective on a tiny model: seg_s + β1·seg_t + β2·g over every parameter
// group, then the discriminator loss over D's own parameters (its inputs are
// detached, so the segmenter receives no gradient from it by design).
SuiteResult gradients() {
  SuiteResult r;
  ModelConfig mc;
  mc.encoder = EncoderConfig::micro();
  mc.decoder.embed_dim = 8;
  const QuadFormer model = QuadFormer::init(mc, 3);
  const DiscriminatorWeights disc = DiscriminatorWeights::init({}, 4);
  std::mt19937_64 rng(5);
  const Tensor img_s = uniform_tensor({3, 32, 32}, rng), img_t = uniform_tensor({3, 32, 32}, rng);
  std::vector<std::uint8_t> ys(32 * 32), yt(32 * 32), valid(32 * 32);
  for (std::size_t i = 0; i < ys.size(); ++i) {
    ys[i] = rng() % 4 == 0;
    yt[i] = rng() % 4 == 0;
    valid[i] = rng() % 3 != 0;
  }
  const std::vector<double> cw{1.0, 10.0};

  std::vector<std::pair<std::string, Tensor>> inputs = collect_params(model);
  const std::size_t n_model = inputs.size();
  for (auto& p : collect_params(disc)) inputs.emplace_back("disc/" + p.first, p.second);

  // scaled so that gradients are O(1) and a broken rule cannot hide under the absolute floor
  const double amplify = 100.0;
  auto objective = [&](const std::vector<Tensor>& in) {
    const auto m = rebind_params(model, std::span<const Tensor>(in).first(n_model));
    const auto d = rebind_params(disc, std::span<const Tensor>(in).subspan(n_model));
    const PairForward f = forward_pair(m, img_s, img_t);
    const Tensor ls = seg_cross_entropy(full_resolution_logits(f.source, 32, 32), ys, {}, cw).value;
    const Tensor lt = seg_cross_entropy(full_resolution_logits(f.target, 32, 32), yt, valid, cw).value;
    const auto adv = adversarial_losses(full_resolution_probs(f.source, 32, 32),
                                        full_resolution_probs(f.target, 32, 32), d);
    return scale(total_loss(ls, lt, adv.g_loss), amplify);
  };
  GradCheckReport report = finite_diff_check(objective, inputs, 1e-5, 4, 11);

  const PairForward fixed = forward_pair(model, img_s, img_t);
  const Tensor ps = full_resolution_probs(fixed.source, 32, 32), pt = full_resolution_probs(fixed.target, 32, 32);
  auto d_objective = [&](const std::vector<Tensor>& in) {
    return scale(adversarial_losses(ps, pt, rebind_params(disc, in)).d_loss, amplify);
  };
  const auto d_report = finite_diff_check(d_objective, collect_params(disc), 1e-5, 8, 12);
  for (auto e : d_report.entries) {
    e.name = "d_loss/" + e.name;
    report.entries.push_back(e);
  }

  double worst = 0.0;
  std::string worst_name;
  std::size_t coords = 0;
  for (const auto& e : report.entries) {
    coords += e.coords_checked;
    if (e.max_error > worst) {
      worst = e.max_error;
      worst_name = e.name;
    }
  }
  r.passed = worst < 1e-4;
  std::ostringstream o;
  o << report.entries.size() << " parameter groups, " << coords << " coordinates, max relative error " << worst
    << " (" << worst_name << ")";
  r.detail = o.str();
  return r;
}

SuiteResult shapes() {
  SuiteResult r;
  const QuadFormer model = QuadFormer::init(ModelConfig{}, 1);
  std::mt19937_64 rng(2);
  const Tensor a = uniform_tensor({3, 64, 64}, rng), b = uniform_tensor({3, 64, 64}, rng);
  const PairForward f = forward_pair(model, a, b);
  const std::size_t ce = model.decoder.config.embed_dim;
  const std::size_t expect[] = {256, 64, 16, 4};
  bool ok = f.stages.size() == 4;
  for (std::size_t i = 0; ok && i < 4; ++i) {
    ok = f.stages[i].features.f_s.dim(0) == expect[i] && f.stages[i].features.f_st.dim(0) == expect[i];
  }
  ok = ok && f.phi_s.shape() == Shape{256, 4 * ce} && f.phi_st.shape() == Shape{256, 4 * ce};
  ok = ok && f.source.augmented.shape() == Shape{256, 8 * ce} && f.target.logits.shape() == Shape{2, 16, 16};
  r.passed = ok;
  r.detail = "tokens 256/64/16/4, phi [256 x " + std::to_string(4 * ce) + "], fuse input [256 x " +
             std::to_string(8 * ce) + "]";
  return r;
}

SuiteResult degeneracy() {
  SuiteResult r;
  const QuadFormer model = QuadFormer::init(ModelConfig{}, 7);
  std::mt19937_64 rng(8);
  const Tensor img = uniform_tensor({3, 64, 64}, rng);
  const PairForward f = forward_pair(model, img, img);
  double worst = 0.0;
  for (const auto& s : f.stages) {
    worst = std::max(worst, max_abs_diff(s.features.f_ts, s.features.f_s));
    worst = std::max(worst, max_abs_diff(s.features.f_st, s.features.f_t));
  }
  const bool exact = bit_equal(infer_target_sourcefree(model, img).logits, f.target.logits);
  r.passed = worst <= 1e-12 && exact;
  r.detail = "max branch difference " + std::to_string(worst) + (exact ? ", source-free head identical" : ", source-free head differs");
  return r;
}

double ssim_direct(const GrayImage& a, const GrayImage& b, std::size_t win) {
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  std::size_t count = 0;
  const double n = static_cast<double>(win * win);
  for (std::size_t y = 0; y + win <= a.height; ++y) {
    for (std::size_t x = 0; x + win <= a.width; ++x) {
      double ma = 0, mb = 0;
      for (std::size_t i = 0; i < win; ++i) {
        for (std::size_t j = 0; j < win; ++j) {
          ma += a.pixels[(y + i) * a.width + x + j];
          mb += b.pixels[(y + i) * b.width + x + j];
        }
      }
      ma /= n;
      mb /= n;
      double va = 0, vb = 0, cov = 0;
      for (std::size_t i = 0; i < win; ++i) {
        for (std::size_t j = 0; j < win; ++j) {
          const double da = a.pixels[(y + i) * a.width + x + j] - ma, db = b.pixels[(y + i) * b.width + x + j] - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      }
      va /= n;
      vb /= n;
      cov /= n;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

SuiteResult ssim_oracle() {
  SuiteResult r;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  bool self_exact = true;
  for (int t = 0; t < 100; ++t) {
    GrayImage a{16, 16, std::vector<double>(256)}, b{16, 16, std::vector<double>(256)};
    for (auto& p : a.pixels) p = u(rng);
    for (std::size_t i = 0; i < 256; ++i) b.pixels[i] = std::clamp(a.pixels[i] * u(rng) + 0.3 * u(rng), 0.0, 1.0);
    worst = std::max(worst, std::abs(ssim(a, b) - ssim_direct(a, b, 8)));
    self_exact = self_exact && ssim(a, a) == 1.0;
  }
  r.passed = worst < 1e-9 && self_exact;
  r.detail = "max deviation " + std::to_string(worst) + (self_exact ? ", ssim(a,a) = 1" : ", ssim(a,a) != 1");
  return r;
}

SuiteResult ema_law() {
  SuiteResult r;
  PrototypeBank bank = PrototypeBank::zeros(1, 3);
  const std::vector<double> v{0.5, -2.0, 3.0};
  double worst = 0.0;
  for (std::size_t k = 1; k <= 10000; ++k) {
    ema_update(bank, 0, v);
    if (k % 1000 == 0) {
      const double f = 1.0 - std::pow(0.9999, static_cast<double>(k));
      for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, std::abs(bank.eta[0][i] - f * v[i]));
    }
  }
  r.passed = worst < 1e-9;
  r.detail = "max deviation " + std::to_string(worst) + " over 10000 updates";
  return r;
}

SuiteResult denoising() {
  SuiteResult r;
  std::mt19937_64 rng(12);
  std::normal_distribution<double> noise(0.0, 0.1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t h = 16, w = 16, n = h * w, d = 16;
  std::vector<double> centre(d);
  for (auto& c : centre) c = noise(rng) * 10.0;
  std::vector<double> feats(n * d), warm(2 * n);
  std::vector<std::uint8_t> truth(n), flipped(n);
  for (std::size_t i = 0; i < n; ++i) {
    truth[i] = u(rng) < 0.5;
    const double sign = truth[i] ? 1.0 : -1.0;
    for (std::size_t k = 0; k < d; ++k) feats[i * d + k] = sign * centre[k] + noise(rng);
    flipped[i] = u(rng) < 0.2;
    const double p_wrong = 0.55 + 0.25 * u(rng), p_right = 0.6 + 0.35 * u(rng);
    const double p1 = flipped[i] ? (truth[i] ? 1 - p_wrong : p_wrong) : (truth[i] ? p_right : 1 - p_right);
    warm[i] = 1 - p1;
    warm[n + i] = p1;
  }
  const Tensor f(Shape{n, d}, feats);
  const Tensor fn = l2_normalize_rows(f);
  PrototypeBank bank = PrototypeBank::zeros(2, d);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<double> wts(n);
    for (std::size_t i = 0; i < n; ++i) wts[i] = truth[i] == c ? 1.0 : 0.0;
    bank.eta[c] = *batch_prototype(fn, wts);
    bank.seen[c] = 1;
  }
  PseudoLabel label = make_pseudo_label(Tensor(Shape{2, h, w}, warm), 0.0);
  correct_pseudo_labels(label, f, {h, w}, bank, 1.0, 0.0);
  std::size_t flips = 0, recovered = 0;
  double norm = 0.0;
  const auto hard = label.hard();
  for (std::size_t i = 0; i < n; ++i) {
    norm = std::max(norm, std::abs(label.probs[i] + label.probs[n + i] - 1.0));
    if (flipped[i]) {
      ++flips;
      recovered += hard[i] == truth[i];
    }
  }
  const double rate = flips ? static_cast<double>(recovered) / static_cast<double>(flips) : 1.0;
  r.passed = rate >= 0.95 && norm < 1e-9;
  r.detail = std::to_string(recovered) + "/" + std::to_string(flips) + " noisy pixels recovered";
  return r;
}

SuiteResult pairing() {
  SuiteResult r;
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  bool ok = true;
  for (int trial = 0; trial < 10 && ok; ++trial) {
    std::vector<GrayImage> s(5), t(5);
    for (auto* set : {&s, &t}) {
      for (auto& g : *set) {
        g = {8, 8, std::vector<double>(64)};
        for (auto& p : g.pixels) p = u(rng);
      }
    }
    double sim[5][5];
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) sim[i][j] = ssim(s[i], t[j]);
    }
    std::vector<std::pair<std::size_t, std::size_t>> expect;
    auto add = [&](std::size_t a, std::size_t b) {
      for (const auto& p : expect) {
        if (p.first == a && p.second == b) return;
      }
      expect.emplace_back(a, b);
    };
    for (std::size_t i = 0; i < 5; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < 5; ++j) best = sim[i][j] > sim[i][best] ? j : best;
      add(i, best);
    }
    for (std::size_t j = 0; j < 5; ++j) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < 5; ++i) best = sim[i][j] > sim[best][j] ? i : best;
      add(best, j);
    }
    const PairSet got = pair_two_way(s, t);
    ok = got.pairs.size() == expect.size();
    for (std::size_t k = 0; ok && k < expect.size(); ++k) {
      ok = got.pairs[k].source == expect[k].first && got.pairs[k].target == expect[k].second;
    }
  }
  r.passed = ok;
  r.detail = "10 random 5x5 corpora against exhaustive search";
  return r;
}

}  // namespace

std::vector<SuiteResult> run_verification() {
  const std::pair<const char*, std::function<SuiteResult()>> suites[] = {
      {"gradients", gradients}, {"shape-chain", shapes}, {"cross-degeneracy", degeneracy},
      {"ssim-oracle", ssim_oracle}, {"ema-closed-form", ema_law}, {"label-correction", denoising},
      {"pairing", pairing}};
  std::vector<SuiteResult> out;
  for (const auto& [name, suite] : suites) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r;
    try {
      r = suite();
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("threw: ") + e.what();
    }
    r.name = name;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace qf
