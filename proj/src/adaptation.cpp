#include "quadformer/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include "quadformer/parallel.hpp"

namespace qf {

PrototypeBank PrototypeBank::zeros(std::size_t classes, std::size_t dim, double lambda) {
  PrototypeBank b;
  b.eta.assign(classes, std::vector<double>(dim, 0.0));
  b.counts.assign(classes, 0.0);
  b.seen.assign(classes, 0);
  b.lambda = lambda;
  return b;
}

bool PrototypeBank::initialized() const {
  return !seen.empty() && std::all_of(seen.begin(), seen.end(), [](auto s) { return s != 0; });
}

std::optional<std::vector<double>> batch_prototype(const Tensor& features, std::span<const double> weights) {
  if (features.rank() != 2 || features.dim(0) != weights.size()) {
    throw ShapeError("batch_prototype: features " + to_string(features.shape()) + " with " +
                     std::to_string(weights.size()) + " weights");
  }
  const std::size_t n = features.dim(0), d = features.dim(1);
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) return std::nullopt;
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    const double w = weights[i] / total;
    for (std::size_t k = 0; k < d; ++k) acc[k] += w * features[i * d + k];
  }
  return acc;
}

void ema_update(PrototypeBank& bank, std::size_t c, std::span<const double> eta_prime) {
  if (c >= bank.classes() || eta_prime.size() != bank.dim()) {
    throw ShapeError("ema_update: class " + std::to_string(c) + " with " + std::to_string(eta_prime.size()) +
                     " values for a bank of dim " + std::to_string(bank.dim()));
  }
  for (double v : eta_prime) {
    if (!std::isfinite(v)) throw NumericError("ema_update: non-finite centroid for class " + std::to_string(c));
  }
  auto& eta = bank.eta[c];
  for (std::size_t k = 0; k < eta.size(); ++k) eta[k] = bank.lambda * eta[k] + (1.0 - bank.lambda) * eta_prime[k];
  bank.counts[c] += 1.0;
  bank.seen[c] = 1;
}

Tensor l2_normalize_rows(const Tensor& features) {
  if (features.rank() != 2) throw ShapeError("l2_normalize_rows: " + to_string(features.shape()));
  const std::size_t n = features.dim(0), d = features.dim(1);
  std::vector<double> out(features.values().begin(), features.values().end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += out[i * d + k] * out[i * d + k];
    if (s == 0.0) continue;
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] *= inv;
  }
  return Tensor(features.shape(), std::move(out));
}

std::vector<double> prototype_weights(const Tensor& probs, std::size_t c) {
  if (probs.rank() < 2 || c >= probs.dim(0)) throw ShapeError("prototype_weights: " + to_string(probs.shape()));
  const std::size_t classes = probs.dim(0), n = probs.size() / classes;
  std::vector<double> w(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k) {
      if (probs[k * n + i] > probs[best * n + i]) best = k;
    }
    if (best == c) w[i] = probs[c * n + i];
  }
  return w;
}

PrototypeSeeder::PrototypeSeeder(std::size_t classes, std::size_t dim)
    : sums_(classes, std::vector<double>(dim, 0.0)), weights_(classes, 0.0) {}

void PrototypeSeeder::add(const Tensor& features, const Tensor& probs) {
  const std::size_t d = sums_.empty() ? 0 : sums_[0].size();
  if (features.rank() != 2 || features.dim(1) != d || probs.dim(0) != sums_.size() ||
      probs.size() / probs.dim(0) != features.dim(0)) {
    throw ShapeError("PrototypeSeeder: features " + to_string(features.shape()) + " with probs " +
                     to_string(probs.shape()));
  }
  for (std::size_t c = 0; c < sums_.size(); ++c) {
    const auto w = prototype_weights(probs, c);
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i] == 0.0) continue;
      weights_[c] += w[i];
      for (std::size_t k = 0; k < d; ++k) sums_[c][k] += w[i] * features[i * d + k];
    }
  }
}

PrototypeBank PrototypeSeeder::finish(double lambda) const {
  PrototypeBank bank = PrototypeBank::zeros(sums_.size(), sums_.empty() ? 0 : sums_[0].size(), lambda);
  for (std::size_t c = 0; c < sums_.size(); ++c) {
    if (!(weights_[c] > 0.0)) continue;
    for (std::size_t k = 0; k < sums_[c].size(); ++k) bank.eta[c][k] = sums_[c][k] / weights_[c];
    bank.counts[c] = weights_[c];
    bank.seen[c] = 1;
  }
  return bank;
}

Tensor area_downsample(const Tensor& x, std::size_t factor) {
  if (x.rank() != 3 || factor == 0 || x.dim(1) % factor != 0 || x.dim(2) % factor != 0) {
    throw ShapeError("area_downsample: " + to_string(x.shape()) + " by " + std::to_string(factor));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), oh = h / factor, ow = w / factor;
  std::vector<double> out(c * oh * ow, 0.0);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        out[(k * oh + y / factor) * ow + xx / factor] += x[(k * h + y) * w + xx] * inv;
      }
    }
  }
  return Tensor(Shape{c, oh, ow}, std::move(out));
}

Tensor prototype_affinity(const Tensor& features, const PrototypeBank& bank, double temperature) {
  if (!bank.initialized()) throw ContractError("prototype_affinity: prototype bank not initialized");
  if (features.rank() != 2 || features.dim(1) != bank.dim()) {
    throw ShapeError("prototype_affinity: features " + to_string(features.shape()) + " for bank dim " +
                     std::to_string(bank.dim()));
  }
  if (!(temperature > 0.0)) throw ContractError("prototype_affinity: temperature must be positive");
  const std::size_t n = features.dim(0), d = features.dim(1), classes = bank.classes();
  const Tensor f = l2_normalize_rows(features);
  std::vector<double> flat;
  for (const auto& e : bank.eta) flat.insert(flat.end(), e.begin(), e.end());
  const Tensor eta = l2_normalize_rows(Tensor(Shape{classes, d}, flat));
  std::vector<double> out(classes * n);
  std::vector<double> logit(classes);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = f[i * d + k] - eta[c * d + k];
        s += diff * diff;
      }
      logit[c] = -std::sqrt(s) / temperature;
      mx = std::max(mx, logit[c]);
    }
    double z = 0.0;
    for (auto& v : logit) z += (v = std::exp(v - mx));
    for (std::size_t c = 0; c < classes; ++c) out[c * n + i] = logit[c] / z;
  }
  return Tensor(Shape{classes, n}, std::move(out));
}

std::vector<std::uint8_t> PseudoLabel::hard() const {
  const std::size_t classes = probs.dim(0), n = probs.size() / classes;
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k) {
      if (probs[k * n + i] > probs[best * n + i]) best = k;
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

std::size_t PseudoLabel::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

std::vector<std::uint8_t> confident(const Tensor& probs, double tau) {
  const std::size_t classes = probs.dim(0), n = probs.size() / classes;
  std::vector<std::uint8_t> valid(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = probs[i];
    for (std::size_t k = 1; k < classes; ++k) best = std::max(best, probs[k * n + i]);
    valid[i] = best >= tau ? 1 : 0;
  }
  return valid;
}

PseudoLabel make_pseudo_label(const Tensor& probs, double tau) {
  if (probs.rank() != 3) throw ShapeError("make_pseudo_label: " + to_string(probs.shape()));
  PseudoLabel l;
  l.warm = probs.detach();
  l.probs = l.warm;
  l.valid = confident(probs, tau);
  return l;
}

PseudoLabelSet warmup_pseudo_labels(const QuadFormer& model, std::span<const Tensor> images, double tau) {
  PseudoLabelSet out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto mask = infer_target_sourcefree(model, images[i]);
    out[i] = make_pseudo_label(full_resolution_probs(mask, images[i].dim(1), images[i].dim(2)), tau);
  }
  return out;
}

void correct_pseudo_label(PseudoLabel& label, const Tensor& affinity, double tau) {
  const Tensor& warm = label.warm;
  if (affinity.rank() != 3 || affinity.dim(0) != warm.dim(0)) {
    throw ShapeError("correct_pseudo_label: affinity " + to_string(affinity.shape()) + " for labels " +
                     to_string(warm.shape()));
  }
  const Tensor k = (affinity.dim(1) == warm.dim(1) && affinity.dim(2) == warm.dim(2))
                       ? affinity
                       : upsample_bilinear(affinity, warm.dim(1), warm.dim(2));
  const std::size_t classes = warm.dim(0), n = warm.size() / classes;
  std::vector<double> out(warm.size());
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += (out[c * n + i] = k[c * n + i] * warm[c * n + i]);
    if (z > 0.0) {
      for (std::size_t c = 0; c < classes; ++c) out[c * n + i] /= z;
    } else {
      for (std::size_t c = 0; c < classes; ++c) out[c * n + i] = warm[c * n + i];
    }
  }
  label.probs = Tensor(warm.shape(), std::move(out));
  label.valid = confident(label.probs, tau);
  label.origin = LabelOrigin::kCorrected;
}

void correct_pseudo_labels(PseudoLabel& label, const Tensor& features, Grid grid, const PrototypeBank& bank,
                           double temperature, double tau) {
  const Tensor k = prototype_affinity(features, bank, temperature);
  correct_pseudo_label(label, k.with_shape({bank.classes(), grid.h, grid.w}), tau);
}

// ---------------------------------------------------------------- SSIM pairing

GrayImage to_gray(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("to_gray: expected 3×H×W, got " + to_string(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2), plane = h * w;
  GrayImage g{h, w, std::vector<double>(plane)};
  for (std::size_t i = 0; i < plane; ++i) {
    g.pixels[i] = 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i];
  }
  return g;
}

GrayImage downscale(const GrayImage& g, std::size_t side) {
  std::size_t f = 1;
  while (g.height / f > side || g.width / f > side) ++f;
  if (f == 1) return g;
  if (g.height % f != 0 || g.width % f != 0) {
    throw ShapeError("downscale: " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                     " is not an integer multiple of " + std::to_string(side));
  }
  Tensor t(Shape{1, g.height, g.width}, g.pixels);
  const Tensor d = area_downsample(t, f);
  return {g.height / f, g.width / f, std::vector<double>(d.values().begin(), d.values().end())};
}

namespace {

// Summed-area table with a zero first row and column.
std::vector<double> integral(std::size_t h, std::size_t w, auto&& value) {
  std::vector<double> s((h + 1) * (w + 1), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    double row = 0.0;
    for (std::size_t x = 0; x < w; ++x) {
      row += value(y * w + x);
      s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
    }
  }
  return s;
}

}  // namespace

double ssim(const GrayImage& a, const GrayImage& b, const SsimOptions& opt) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("ssim: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width));
  }
  const std::size_t h = a.height, w = a.width, win = opt.window;
  if (h < win || w < win) throw ShapeError("ssim: image smaller than the window");
  const auto& pa = a.pixels;
  const auto& pb = b.pixels;
  const auto sa = integral(h, w, [&](std::size_t i) { return pa[i]; });
  const auto sb = integral(h, w, [&](std::size_t i) { return pb[i]; });
  const auto saa = integral(h, w, [&](std::size_t i) { return pa[i] * pa[i]; });
  const auto sbb = integral(h, w, [&](std::size_t i) { return pb[i] * pb[i]; });
  const auto sab = integral(h, w, [&](std::size_t i) { return pa[i] * pb[i]; });
  const double c1 = (opt.k1 * opt.range) * (opt.k1 * opt.range);
  const double c2 = (opt.k2 * opt.range) * (opt.k2 * opt.range);
  const double n = static_cast<double>(win * win);
  const std::size_t stride = w + 1;
  auto box = [&](const std::vector<double>& s, std::size_t y, std::size_t x) {
    return s[(y + win) * stride + x + win] - s[y * stride + x + win] - s[(y + win) * stride + x] + s[y * stride + x];
  };
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + win <= h; ++y) {
    for (std::size_t x = 0; x + win <= w; ++x) {
      const double ma = box(sa, y, x) / n, mb = box(sb, y, x) / n;
      const double va = box(saa, y, x) / n - ma * ma;
      const double vb = box(sbb, y, x) / n - mb * mb;
      const double cov = box(sab, y, x) / n - ma * mb;
      total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

PairSet pair_two_way(std::span<const GrayImage> sources, std::span<const GrayImage> targets,
                     const SsimOptions& opt) {
  if (sources.empty() || targets.empty()) throw ContractError("pair_two_way: both corpora must be non-empty");
  const std::size_t ns = sources.size(), nt = targets.size();
  std::vector<double> sim(ns * nt);
  parallel_for(ns, 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      for (std::size_t t = 0; t < nt; ++t) sim[s * nt + t] = ssim(sources[s], targets[t], opt);
    }
  });
  PairSet out;
  auto contains = [&](std::size_t s, std::size_t t) {
    return std::any_of(out.pairs.begin(), out.pairs.end(), [&](const Pair& p) { return p.source == s && p.target == t; });
  };
  for (std::size_t s = 0; s < ns; ++s) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < nt; ++t) {
      if (sim[s * nt + t] > sim[s * nt + best]) best = t;
    }
    if (!contains(s, best)) out.pairs.push_back({s, best, sim[s * nt + best], PairOrigin::kSourceWay});
  }
  for (std::size_t t = 0; t < nt; ++t) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < ns; ++s) {
      if (sim[s * nt + t] > sim[best * nt + t]) best = s;
    }
    if (!contains(best, t)) out.pairs.push_back({best, t, sim[best * nt + t], PairOrigin::kTargetWay});
  }
  return out;
}

void write_pairs(const std::string& path, const PairSet& set, std::span<const std::string> source_paths,
                 std::span<const std::string> target_paths) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("write_pairs: cannot open " + path);
  const auto s_way = std::count_if(set.pairs.begin(), set.pairs.end(),
                                   [](const Pair& p) { return p.origin == PairOrigin::kSourceWay; });
  out << "# s_way=" << s_way << '\n';
  out << std::setprecision(17);
  for (const auto& p : set.pairs) {
    if (p.source >= source_paths.size() || p.target >= target_paths.size()) {
      throw ContractError("write_pairs: pair index out of range");
    }
    out << source_paths[p.source] << '\t' << target_paths[p.target] << '\t' << p.similarity << '\n';
  }
  if (!out) throw ContractError("write_pairs: write failed for " + path);
}

PairSet read_pairs(const std::string& path, std::span<const std::string> source_paths,
                   std::span<const std::string> target_paths) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("read_pairs: cannot open " + path);
  std::unordered_map<std::string, std::size_t> sid, tid;
  for (std::size_t i = 0; i < source_paths.size(); ++i) sid[source_paths[i]] = i;
  for (std::size_t i = 0; i < target_paths.size(); ++i) tid[target_paths[i]] = i;
  PairSet set;
  std::size_t s_way = std::numeric_limits<std::size_t>::max();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("s_way=");
      if (pos != std::string::npos) s_way = std::stoul(line.substr(pos + 6));
      continue;
    }
    std::istringstream fields(line);
    std::string s, t, v;
    if (!std::getline(fields, s, '\t') || !std::getline(fields, t, '\t') || !std::getline(fields, v)) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected three tab-separated fields");
    }
    const auto si = sid.find(s);
    const auto ti = tid.find(t);
    if (si == sid.end() || ti == tid.end()) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": unknown image path");
    }
    double sim = 0.0;
    try {
      sim = std::stod(v);
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": bad similarity '" + v + "'");
    }
    const auto origin = set.pairs.size() < s_way ? PairOrigin::kSourceWay : PairOrigin::kTargetWay;
    set.pairs.push_back({si->second, ti->second, sim, origin});
  }
  return set;
}

}  // namespace qf
