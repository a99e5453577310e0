#include "quadformer/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "quadformer/keyvalue.hpp"
#include "quadformer/ops.hpp"
#include "quadformer/parallel.hpp"

namespace qf {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- checkpoints

namespace {

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, std::span<const std::uint8_t> bytes) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ContractError("write failed for " + path);
}

void spit(const std::string& path, const std::string& text) {
  spit(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// Reads one '\n'-terminated header line starting at `pos`.
std::string header_line(std::span<const std::uint8_t> bytes, std::size_t& pos, const std::string& origin) {
  const std::size_t start = pos;
  while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
  if (pos >= bytes.size()) throw ParseError(origin + ": unterminated header line at byte " + std::to_string(start));
  std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
  ++pos;
  return line;
}

std::size_t parse_count(const std::string& s, const std::string& origin, std::size_t at) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ParseError(origin + ": expected a count, got '" + s + "' at byte " + std::to_string(at));
  }
  return v;
}

std::string after_prefix(const std::string& line, const std::string& prefix, const std::string& origin,
                         std::size_t at) {
  if (line.rfind(prefix, 0) != 0) {
    throw ParseError(origin + ": expected '" + prefix + "' at byte " + std::to_string(at));
  }
  return line.substr(prefix.size());
}

}  // namespace

const std::vector<double>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, v] : arrays) {
    if (n == name) return &v;
  }
  return nullptr;
}

std::vector<std::uint8_t> Checkpoint::encode() const {
  std::ostringstream h;
  h << "QFCKPT 1\n"
    << "stage " << stage << '\n'
    << "step " << step << '\n'
    << "config " << config_text.size() << '\n'
    << config_text << "arrays " << arrays.size() << '\n';
  for (const auto& [name, values] : arrays) {
    if (name.find_first_of(" \n") != std::string::npos) throw ContractError("checkpoint: bad array name " + name);
    h << name << ' ' << values.size() << '\n';
  }
  h << "data\n";
  const std::string header = h.str();
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (const auto& [name, values] : arrays) {
    for (double v : values) put_f64(out, v);
  }
  return out;
}

Checkpoint Checkpoint::decode(std::span<const std::uint8_t> bytes, const std::string& origin) {
  Checkpoint c;
  std::size_t pos = 0;
  if (header_line(bytes, pos, origin) != "QFCKPT 1") throw ParseError(origin + ": not a checkpoint (bad magic)");
  std::size_t at = pos;
  c.stage = after_prefix(header_line(bytes, pos, origin), "stage ", origin, at);
  at = pos;
  c.step = parse_count(after_prefix(header_line(bytes, pos, origin), "step ", origin, at), origin, at);
  at = pos;
  const std::size_t config_len =
      parse_count(after_prefix(header_line(bytes, pos, origin), "config ", origin, at), origin, at);
  if (config_len > bytes.size() - pos) throw ParseError(origin + ": truncated config at byte " + std::to_string(pos));
  c.config_text.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                       bytes.begin() + static_cast<std::ptrdiff_t>(pos + config_len));
  pos += config_len;
  at = pos;
  const std::size_t n = parse_count(after_prefix(header_line(bytes, pos, origin), "arrays ", origin, at), origin, at);
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    at = pos;
    const std::string line = header_line(bytes, pos, origin);
    const auto sp = line.rfind(' ');
    if (sp == std::string::npos || sp == 0) throw ParseError(origin + ": bad array entry at byte " + std::to_string(at));
    const std::size_t count = parse_count(line.substr(sp + 1), origin, at);
    if (count > (bytes.size() / 8)) throw ParseError(origin + ": array too large at byte " + std::to_string(at));
    c.arrays.emplace_back(line.substr(0, sp), std::vector<double>());
    sizes.push_back(count);
    total += count;
  }
  at = pos;
  if (header_line(bytes, pos, origin) != "data") throw ParseError(origin + ": expected 'data' at byte " + std::to_string(at));
  if (bytes.size() - pos != total * 8) {
    throw ParseError(origin + ": payload has " + std::to_string(bytes.size() - pos) + " bytes, manifest needs " +
                     std::to_string(total * 8));
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto& v = c.arrays[i].second;
    v.resize(sizes[i]);
    for (auto& x : v) {
      x = get_f64(bytes.data() + pos);
      pos += 8;
    }
  }
  return c;
}

void Checkpoint::write(const std::string& path) const { spit(path, encode()); }

Checkpoint Checkpoint::read(const std::string& path) { return decode(slurp(path), path); }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag),  static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace {

enum Tag : std::uint64_t { kModelInit = 1, kDiscInit, kWarmupStep, kAdaptStep };

template <typename Weights>
void save_params(Checkpoint& c, const std::string& prefix, const Weights& w) {
  for (const auto& [name, t] : collect_params(w)) {
    c.arrays.emplace_back(prefix + name, std::vector<double>(t.values().begin(), t.values().end()));
  }
}

template <typename Weights>
Weights load_params(const Checkpoint& c, const std::string& prefix, const Weights& w) {
  std::vector<Tensor> values;
  for (const auto& [name, t] : collect_params(w)) {
    const auto* v = c.find(prefix + name);
    if (!v) throw ParseError("checkpoint: missing parameter " + prefix + name);
    if (v->size() != t.size()) throw ParseError("checkpoint: size mismatch for " + prefix + name);
    values.emplace_back(t.shape(), *v);
  }
  return rebind_params(w, values);
}

void save_opt(Checkpoint& c, const std::string& prefix, const AdamW& opt) {
  c.arrays.emplace_back(prefix + "steps", std::vector<double>{static_cast<double>(opt.steps())});
  auto& moments = const_cast<AdamW&>(opt).moments();
  for (const auto& [name, m] : moments) {
    c.arrays.emplace_back(prefix + "m/" + name, m.m);
    c.arrays.emplace_back(prefix + "v/" + name, m.v);
  }
}

void load_opt(const Checkpoint& c, const std::string& prefix, AdamW& opt) {
  const auto* steps = c.find(prefix + "steps");
  if (!steps || steps->size() != 1) return;
  opt.set_steps(static_cast<std::size_t>((*steps)[0]));
  for (const auto& [name, values] : c.arrays) {
    if (name.rfind(prefix + "m/", 0) != 0) continue;
    const std::string param = name.substr(prefix.size() + 2);
    const auto* v = c.find(prefix + "v/" + param);
    if (!v) throw ParseError("checkpoint: missing second moment for " + param);
    opt.moments()[param] = Moments{values, *v};
  }
}

AdamW make_opt(const RunConfig& cfg) { return AdamW(AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay}); }

}  // namespace

TrainState TrainState::fresh(const RunConfig& config) {
  config.validate();
  TrainState s;
  s.config = config;
  s.model = QuadFormer::init(config.model(), derive_seed(config.seed, kModelInit));
  s.opt = make_opt(config);
  s.d_opt = make_opt(config);
  return s;
}

Checkpoint TrainState::checkpoint() const {
  Checkpoint c;
  c.stage = stage;
  c.step = step;
  c.config_text = config.to_text();
  save_params(c, "model/", model);
  save_opt(c, "opt/", opt);
  if (disc) {
    save_params(c, "disc/", *disc);
    save_opt(c, "dopt/", d_opt);
  }
  if (bank) {
    std::vector<double> eta;
    for (const auto& e : bank->eta) eta.insert(eta.end(), e.begin(), e.end());
    c.arrays.emplace_back("bank/shape", std::vector<double>{static_cast<double>(bank->classes()),
                                                           static_cast<double>(bank->dim()), bank->lambda});
    c.arrays.emplace_back("bank/eta", std::move(eta));
    c.arrays.emplace_back("bank/counts", bank->counts);
    c.arrays.emplace_back("bank/seen", std::vector<double>(bank->seen.begin(), bank->seen.end()));
  }
  return c;
}

TrainState TrainState::restore(const Checkpoint& ckpt) {
  return restore(ckpt, RunConfig::from_text(ckpt.config_text, "checkpoint config"));
}

TrainState TrainState::restore(const Checkpoint& ckpt, const RunConfig& config) {
  const RunConfig saved = RunConfig::from_text(ckpt.config_text, "checkpoint config");
  const ModelConfig a = saved.model(), b = config.model();
  if (saved.encoder != config.encoder || a.encoder.share_cross_weights != b.encoder.share_cross_weights ||
      a.decoder.embed_dim != b.decoder.embed_dim || a.decoder.extra_hidden != b.decoder.extra_hidden ||
      a.decoder.share_heads != b.decoder.share_heads) {
    throw ContractError("checkpoint architecture differs from the requested config");
  }
  TrainState s = fresh(config);
  s.stage = ckpt.stage;
  s.step = ckpt.step;
  s.model = load_params(ckpt, "model/", s.model);
  load_opt(ckpt, "opt/", s.opt);
  if (ckpt.find("disc/" + collect_params(DiscriminatorWeights::init({}, 0)).front().first)) {
    s.disc = load_params(ckpt, "disc/", DiscriminatorWeights::init({}, 0));
    load_opt(ckpt, "dopt/", s.d_opt);
  }
  if (const auto* shape = ckpt.find("bank/shape")) {
    const auto classes = static_cast<std::size_t>((*shape)[0]), dim = static_cast<std::size_t>((*shape)[1]);
    PrototypeBank bank = PrototypeBank::zeros(classes, dim, (*shape)[2]);
    const auto* eta = ckpt.find("bank/eta");
    const auto* counts = ckpt.find("bank/counts");
    const auto* seen = ckpt.find("bank/seen");
    if (!eta || !counts || !seen || eta->size() != classes * dim) throw ParseError("checkpoint: bad prototype bank");
    for (std::size_t c = 0; c < classes; ++c) {
      std::copy_n(eta->begin() + static_cast<std::ptrdiff_t>(c * dim), dim, bank.eta[c].begin());
      bank.counts[c] = (*counts)[c];
      bank.seen[c] = static_cast<std::uint8_t>((*seen)[c]);
    }
    s.bank = std::move(bank);
  }
  return s;
}

// ---------------------------------------------------------------- logs and reports

namespace {

std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

std::vector<std::uint8_t> argmax_classes(const Tensor& probs) {
  const std::size_t classes = probs.dim(0), n = probs.size() / classes;
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = probs[i];
    for (std::size_t c = 1; c < classes; ++c) {
      if (probs[c * n + i] > best) {
        best = probs[c * n + i];
        out[i] = static_cast<std::uint8_t>(c);
      }
    }
  }
  return out;
}

}  // namespace

std::string log_csv(const std::vector<LogRow>& rows) {
  std::ostringstream o;
  o << "step,l_seg_s,l_seg_t,d_loss,g_loss,lr,target_iou\n";
  for (const auto& r : rows) {
    o << r.step << ',' << cell(r.l_seg_s) << ',' << cell(r.l_seg_t) << ',' << cell(r.d_loss) << ','
      << cell(r.g_loss) << ',' << format_double(r.lr) << ',' << cell(r.target_iou) << '\n';
  }
  return o.str();
}

double EvalReport::mean_iou() const {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.iou;
  return s / static_cast<double>(rows.size());
}

std::string EvalReport::csv() const {
  std::ostringstream o;
  o << "id,intersection,union,iou\n";
  for (const auto& r : rows) o << r.id << ',' << r.intersection << ',' << r.union_ << ',' << format_double(r.iou) << '\n';
  o << "summary," << pooled.intersection << ',' << pooled.union_ << ',' << format_double(pooled.value()) << '\n';
  return o.str();
}

std::vector<std::uint8_t> predict(const QuadFormer& model, const Tensor& img, bool target) {
  const SegMask mask = target ? infer_target_sourcefree(model, img) : forward_single(model, img, false);
  return argmax_classes(full_resolution_probs(mask, img.dim(1), img.dim(2)));
}

EvalReport evaluate(const QuadFormer& model, const std::vector<Sample>& samples, bool target,
                    std::vector<std::vector<std::uint8_t>>* masks) {
  EvalReport report;
  std::vector<std::vector<std::uint8_t>> preds(samples.size());
  parallel_for(samples.size(), 1, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) preds[i] = predict(model, samples[i].image, target);
  });
  for (std::size_t i = 0; i < samples.size(); ++i) {
    IouCounter c;
    c.add(preds[i], samples[i].label);
    report.rows.push_back({samples[i].id, c.intersection, c.union_, c.value()});
    report.pooled.add(preds[i], samples[i].label);
  }
  if (masks) *masks = std::move(preds);
  return report;
}

// ---------------------------------------------------------------- stages

Benchmark load_benchmark(const std::string& root, const RunConfig& config, LoadWhat what) {
  DatasetLayout layout{root};
  Benchmark b;
  b.spec = DatasetSpec::from_file(layout.spec_path());
  if (config.source_holdout >= b.spec.source_count) {
    throw ContractError("source_holdout must leave at least one source training image");
  }
  const std::size_t n_src = b.spec.source_count - config.source_holdout;
  if (what.source) {
    b.source_train = load_samples(layout, "source", id_range(0, n_src));
    b.source_val = load_samples(layout, "source", id_range(n_src, config.source_holdout));
  }
  if (what.target_train) b.target_train = load_samples(layout, "target", id_range(0, b.spec.target_train), false);
  if (what.target_val) {
    b.target_val = load_samples(layout, "target", id_range(b.spec.target_train, b.spec.target_val));
  }
  return b;
}

namespace {

std::vector<double> class_weights(const RunConfig& cfg) {
  if (!cfg.class_weighting) return {};
  return {1.0, cfg.pl_weight};
}

// Parameter leaves of one weight tree on a tape, in visit order.
template <typename Weights>
struct Watched {
  std::vector<Tensor> leaves;
  Weights bound;

  Watched(Tape& tape, const Weights& w) {
    for (const auto& [name, t] : collect_params(w)) leaves.push_back(tape.watch(t));
    bound = rebind_params(w, leaves);
  }

  void accumulate(const Tape& tape, std::vector<std::vector<double>>& grads, double scale) const {
    if (grads.empty()) grads.resize(leaves.size());
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      const auto g = tape.grad(leaves[i]);
      auto& acc = grads[i];
      if (acc.empty()) acc.assign(g.size(), 0.0);
      for (std::size_t k = 0; k < g.size(); ++k) acc[k] += scale * g[k];
    }
  }
};

template <typename Weights>
void apply_step(AdamW& opt, Weights& w, const std::vector<std::vector<double>>& grads, double lr) {
  ParamList params = ParamList::of(w);
  opt.step(params, grads, lr);
}

std::vector<std::uint8_t> flip_map(std::span<const std::uint8_t> v, std::size_t h, std::size_t w) {
  std::vector<std::uint8_t> out(v.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = v[y * w + (w - 1 - x)];
  }
  return out;
}

Tensor flip_chw(const Tensor& t) {
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  std::vector<double> out(t.size());
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = t[(k * h + y) * w + (w - 1 - x)];
    }
  }
  return Tensor(t.shape(), std::move(out));
}

// Geometry-preserving augmentation used for adaptation pairs: optional flip
// plus photometric jitter, no crop, so pixels map back to stored labels.
struct PairAugment {
  Sample sample;
  bool flipped = false;
};

PairAugment augment_in_place(const Sample& s, std::mt19937_64& rng, const AugmentOptions& opt) {
  PairAugment out;
  out.flipped = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < opt.flip_probability;
  out.sample = photometric(out.flipped ? hflip(s) : s, rng, opt);
  return out;
}

double mean_loss(double sum, std::size_t n) { return sum / static_cast<double>(n); }

std::optional<double> maybe_eval(const TrainState& state, const std::vector<Sample>& target_val, std::size_t step,
                                 std::size_t last) {
  const std::size_t every = state.config.eval_every;
  if (every == 0 || target_val.empty()) return std::nullopt;
  if (step % every != 0 && step != last) return std::nullopt;
  return evaluate(state.model, target_val, true).pooled.value();
}

}  // namespace

void run_warmup(TrainState& state, const std::vector<Sample>& source_train, const std::vector<Sample>& target_val,
                const LogSink& log) {
  const RunConfig& cfg = state.config;
  if (source_train.empty()) throw ContractError("warmup: no source training images");
  if (state.stage != "warmup") throw ContractError("warmup: cannot continue a '" + state.stage + "' checkpoint");
  const LrSchedule schedule{cfg.lr, cfg.t_warm, cfg.warmup_iterations};
  const AugmentOptions aug = cfg.augment_options();
  const auto weights = class_weights(cfg);

  while (state.step < cfg.warmup_iterations) {
    const std::size_t step = ++state.step;
    const double lr = schedule.at(step);
    std::vector<std::vector<double>> grads;
    double seg = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      std::mt19937_64 rng(derive_seed(cfg.seed, kWarmupStep, step, b));
      const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, source_train.size() - 1)(rng);
      const Sample s = augment(source_train[pick], rng, aug);
      Tape tape;
      Watched<QuadFormer> m(tape, state.model);
      const SegMask out = forward_single(m.bound, s.image, false);
      const SegLoss loss = seg_cross_entropy(full_resolution_logits(out, s.height(), s.width()), s.label, {}, weights);
      seg += loss.value.item();
      if (loss.value.tracked()) tape.backward(loss.value);
      m.accumulate(tape, grads, 1.0 / static_cast<double>(cfg.batch));
    }
    apply_step(state.opt, state.model, grads, lr);
    if (log && (step % cfg.log_every == 0 || step == cfg.warmup_iterations)) {
      LogRow row;
      row.step = step;
      row.l_seg_s = mean_loss(seg, cfg.batch);
      row.lr = lr;
      row.target_iou = maybe_eval(state, target_val, step, cfg.warmup_iterations);
      log(row);
    }
  }
}

PrototypeBank seed_prototypes(const QuadFormer& model, const std::vector<Sample>& source_train,
                              const std::vector<Sample>& target_train, const PairSet& pairs,
                              FeatureToggles toggles, double lambda) {
  std::vector<std::size_t> partner(target_train.size(), source_train.size());
  for (const auto& p : pairs.pairs) {
    if (p.target < partner.size() && partner[p.target] == source_train.size()) partner[p.target] = p.source;
  }
  std::optional<PrototypeSeeder> seeder;
  for (std::size_t t = 0; t < target_train.size(); ++t) {
    if (partner[t] == source_train.size()) continue;
    const PairForward f = forward_pair(model, source_train[partner[t]].image, target_train[t].image, toggles);
    const Tensor feats = l2_normalize_rows(f.target.augmented);
    const std::size_t classes = f.target.logits.dim(0);
    if (!seeder) seeder.emplace(classes, feats.dim(1));
    const Tensor probs = softmax_channels(f.target.logits).with_shape({classes, feats.dim(0)});
    seeder->add(feats, probs);
  }
  if (!seeder) throw ContractError("seed_prototypes: no target image has a pair partner");
  // a class that never wins argmax stays unseen until the online updates reach it
  return seeder->finish(lambda);
}

void run_adapt(TrainState& state, const std::vector<Sample>& source_train, const std::vector<Sample>& target_train,
               PseudoLabelSet& labels, const PairSet& pairs, const std::vector<Sample>& target_val,
               const LogSink& log) {
  const RunConfig& cfg = state.config;
  if (pairs.pairs.empty()) throw ContractError("adapt: empty pair set");
  if (cfg.self_training && labels.size() != target_train.size()) {
    throw ContractError("adapt: " + std::to_string(labels.size()) + " pseudo labels for " +
                        std::to_string(target_train.size()) + " target images");
  }
  for (const auto& p : pairs.pairs) {
    if (p.source >= source_train.size() || p.target >= target_train.size()) {
      throw ContractError("adapt: pair index out of range");
    }
  }
  if (cfg.adversarial && !state.disc) {
    state.disc = DiscriminatorWeights::init({}, derive_seed(cfg.seed, kDiscInit));
  }
  if (cfg.correction && !state.bank) {
    state.bank = seed_prototypes(state.model, source_train, target_train, pairs, cfg.toggles(), cfg.ema_lambda);
  }

  const LrSchedule schedule{cfg.lr, cfg.t_warm, cfg.iterations};
  const LrSchedule d_schedule{cfg.d_lr, cfg.t_warm, cfg.iterations};
  const AugmentOptions aug = cfg.augment_options();
  const auto weights = class_weights(cfg);
  const FeatureToggles toggles = cfg.toggles();
  const Tensor zero = Tensor::scalar(0.0);

  while (state.step < cfg.iterations) {
    const std::size_t step = ++state.step;
    const double lr = schedule.at(step);
    std::vector<std::vector<double>> g_grads, d_grads;
    double seg_s = 0.0, seg_t = 0.0, d_sum = 0.0, g_sum = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      std::mt19937_64 rng(derive_seed(cfg.seed, kAdaptStep, step, b));
      const Pair& pair = pairs.pairs[std::uniform_int_distribution<std::size_t>(0, pairs.pairs.size() - 1)(rng)];
      const PairAugment src = augment_in_place(source_train[pair.source], rng, aug);
      const PairAugment tgt = augment_in_place(target_train[pair.target], rng, aug);
      const std::size_t h = tgt.sample.height(), w = tgt.sample.width();

      Tape tape;
      Watched<QuadFormer> m(tape, state.model);
      std::optional<Watched<DiscriminatorWeights>> d;
      if (cfg.adversarial) d.emplace(tape, *state.disc);

      const PairForward out = forward_pair(m.bound, src.sample.image, tgt.sample.image, toggles);
      const SegLoss ls = seg_cross_entropy(full_resolution_logits(out.source, h, w), src.sample.label, {}, weights);
      seg_s += ls.value.item();

      Tensor lt = zero;
      if (cfg.self_training) {
        PseudoLabel& label = labels[pair.target];
        if (cfg.correction) {
          // prototypes follow the current target predictions, then re-weight the warm labels
          PrototypeBank& bank = *state.bank;
          const Tensor feats = l2_normalize_rows(out.target.augmented.detach());
          const std::size_t classes = out.target.logits.dim(0);
          const Tensor probs = softmax_channels(out.target.logits.detach()).with_shape({classes, feats.dim(0)});
          for (std::size_t c = 0; c < classes; ++c) {
            const auto wts = prototype_weights(probs, c);
            if (const auto eta = batch_prototype(feats, wts)) ema_update(bank, c, *eta);
          }
          if (bank.initialized()) {
            const Grid g = out.target.grid;
            Tensor affinity = prototype_affinity(feats, bank, cfg.temperature).with_shape({classes, g.h, g.w});
            if (tgt.flipped) affinity = flip_chw(affinity);
            correct_pseudo_label(label, affinity, cfg.tau);
            label.origin = LabelOrigin::kCorrected;
          }
        }
        auto hard = label.hard();
        auto valid = label.valid;
        if (tgt.flipped) {
          hard = flip_map(hard, h, w);
          valid = flip_map(valid, h, w);
        }
        const SegLoss l = seg_cross_entropy(full_resolution_logits(out.target, h, w), hard, valid, weights);
        lt = l.value;
        seg_t += lt.item();
      }

      Tensor g_loss = zero;
      std::optional<Tensor> d_loss;
      if (cfg.adversarial) {
        const auto adv = adversarial_losses(full_resolution_probs(out.source, h, w),
                                            full_resolution_probs(out.target, h, w), d->bound);
        g_loss = adv.g_loss;
        d_loss = adv.d_loss;
        g_sum += g_loss.item();
        d_sum += d_loss->item();
      }

      const double inv = 1.0 / static_cast<double>(cfg.batch);
      const Tensor total = total_loss(ls.value, lt, g_loss, cfg.loss_weights());
      if (total.tracked()) tape.backward(total);
      m.accumulate(tape, g_grads, inv);
      if (d) {
        tape.zero_grad();
        tape.backward(*d_loss);
        d->accumulate(tape, d_grads, inv);
      }
    }
    apply_step(state.opt, state.model, g_grads, lr);
    if (cfg.adversarial) apply_step(state.d_opt, *state.disc, d_grads, d_schedule.at(step));

    if (log && (step % cfg.log_every == 0 || step == cfg.iterations)) {
      LogRow row;
      row.step = step;
      row.l_seg_s = mean_loss(seg_s, cfg.batch);
      if (cfg.self_training) row.l_seg_t = mean_loss(seg_t, cfg.batch);
      if (cfg.adversarial) {
        row.d_loss = mean_loss(d_sum, cfg.batch);
        row.g_loss = mean_loss(g_sum, cfg.batch);
      }
      row.lr = lr;
      row.target_iou = maybe_eval(state, target_val, step, cfg.iterations);
      log(row);
    }
  }
}

PairSet pair_samples(const std::vector<Sample>& sources, const std::vector<Sample>& targets, std::size_t side) {
  std::vector<GrayImage> s, t;
  for (const auto& x : sources) s.push_back(downscale(to_gray(x.image), side));
  for (const auto& x : targets) t.push_back(downscale(to_gray(x.image), side));
  return pair_two_way(s, t);
}

void write_pseudo_labels(const std::string& dir, const PseudoLabelSet& labels, const std::vector<Sample>& targets) {
  if (labels.size() != targets.size()) throw ContractError("write_pseudo_labels: count mismatch");
  fs::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& l = labels[i];
    const std::size_t h = l.probs.dim(1), w = l.probs.dim(2), n = h * w;
    std::snprintf(name, sizeof(name), "%04zu", targets[i].id);
    const auto hard = l.hard();
    write_pnm((fs::path(dir) / (std::string(name) + ".pgm")).string(), label_to_pnm(hard, h, w));
    std::vector<std::uint8_t> conf;
    conf.reserve(n * 8);
    for (std::size_t p = 0; p < n; ++p) put_f64(conf, l.probs[hard[p] * n + p]);
    spit((fs::path(dir) / (std::string(name) + ".conf")).string(), conf);
  }
}

PseudoLabelSet read_pseudo_labels(const std::string& dir, const std::vector<Sample>& targets, double tau,
                                  std::size_t classes) {
  PseudoLabelSet out;
  char name[32];
  for (const auto& t : targets) {
    std::snprintf(name, sizeof(name), "%04zu", t.id);
    const std::string pgm = (fs::path(dir) / (std::string(name) + ".pgm")).string();
    const std::string conf_path = (fs::path(dir) / (std::string(name) + ".conf")).string();
    const PnmImage img = read_pnm(pgm);
    const auto hard = pnm_to_label(img);
    const auto conf = slurp(conf_path);
    const std::size_t n = img.width * img.height;
    if (conf.size() != n * 8) throw ParseError(conf_path + ": expected " + std::to_string(n * 8) + " bytes");
    std::vector<double> probs(classes * n);
    for (std::size_t p = 0; p < n; ++p) {
      if (hard[p] >= classes) throw ParseError(pgm + ": class index out of range");
      const double c = get_f64(conf.data() + p * 8);
      if (!(c >= 0.0 && c <= 1.0)) throw ParseError(conf_path + ": confidence outside [0,1]");
      const double rest = classes > 1 ? (1.0 - c) / static_cast<double>(classes - 1) : 0.0;
      for (std::size_t k = 0; k < classes; ++k) probs[k * n + p] = k == hard[p] ? c : rest;
    }
    out.push_back(make_pseudo_label(Tensor(Shape{classes, img.height, img.width}, std::move(probs)), tau));
  }
  return out;
}

// ---------------------------------------------------------------- commands

namespace {

// relative to the dataset root so pair files survive a moved or differently spelled --data
std::vector<std::string> image_paths(const std::string& domain, const std::vector<Sample>& samples) {
  const DatasetLayout rel{""};
  std::vector<std::string> out;
  for (const auto& s : samples) out.push_back(rel.image_path(domain, s.id));
  return out;
}

LogSink collect(std::vector<LogRow>& rows) {
  return [&rows](const LogRow& r) {
    rows.push_back(r);
    std::cerr << "step " << r.step << " l_seg_s " << cell(r.l_seg_s);
    if (r.l_seg_t) std::cerr << " l_seg_t " << *r.l_seg_t;
    if (r.g_loss) std::cerr << " g " << *r.g_loss << " d " << *r.d_loss;
    if (r.target_iou) std::cerr << " target_iou " << *r.target_iou;
    std::cerr << '\n';
  };
}

}  // namespace

void cmd_generate(const DatasetSpec& spec, const std::string& out_dir) { write_dataset(spec, out_dir); }

void cmd_warmup(const RunConfig& config, const std::string& data_root, const WarmupPaths& paths) {
  config.validate();
  const Benchmark bench = load_benchmark(data_root, config, {true, true, config.eval_every > 0});
  TrainState state = paths.resume.empty() ? TrainState::fresh(config)
                                          : TrainState::restore(Checkpoint::read(paths.resume), config);
  std::vector<LogRow> rows;
  run_warmup(state, bench.source_train, bench.target_val, collect(rows));
  if (!config.share_heads) state.model.sync_target_head();
  state.checkpoint().write(paths.checkpoint);
  spit(paths.log(), log_csv(rows));
  std::vector<Tensor> images;
  for (const auto& t : bench.target_train) images.push_back(t.image);
  write_pseudo_labels(paths.pseudo_dir(), warmup_pseudo_labels(state.model, images, config.tau), bench.target_train);
}

void cmd_adapt(const RunConfig& config, const std::string& data_root, const AdaptPaths& paths) {
  config.validate();
  const Benchmark bench = load_benchmark(data_root, config, {true, true, config.eval_every > 0});
  const Checkpoint warm = Checkpoint::read(paths.warmup);
  if (warm.stage != "warmup") throw ContractError(paths.warmup + ": expected a warm-up checkpoint");
  TrainState state = TrainState::restore(warm, config);
  state.stage = "adapt";
  state.step = 0;
  state.opt = make_opt(config);

  DatasetLayout layout{data_root};
  PairSet pairs;
  if (!paths.pairs.empty()) {
    pairs = read_pairs(paths.pairs, image_paths("source", bench.source_train),
                       image_paths("target", bench.target_train));
  } else {
    pairs = pair_samples(bench.source_train, bench.target_train, config.pair_side);
  }
  PseudoLabelSet labels;
  if (config.self_training) {
    labels = read_pseudo_labels(paths.pseudo_dir(), bench.target_train, config.tau, config.model().decoder.num_classes);
  }
  std::vector<LogRow> rows;
  run_adapt(state, bench.source_train, bench.target_train, labels, pairs, bench.target_val, collect(rows));
  state.checkpoint().write(paths.checkpoint);
  spit(paths.log(), log_csv(rows));
}

EvalReport cmd_eval(const std::string& checkpoint, const std::string& data_root, const std::string& out_dir,
                    bool target) {
  const TrainState state = TrainState::restore(Checkpoint::read(checkpoint));
  const Benchmark bench = load_benchmark(data_root, state.config, {!target, false, target});
  const auto& samples = target ? bench.target_val : bench.source_val;
  std::vector<std::vector<std::uint8_t>> masks;
  const EvalReport report = evaluate(state.model, samples, target, &masks);
  const fs::path masks_dir = fs::path(out_dir) / "masks";
  fs::create_directories(masks_dir);
  char name[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof(name), "%04zu.pgm", samples[i].id);
    write_pnm((masks_dir / name).string(), label_to_pnm(masks[i], samples[i].height(), samples[i].width()));
  }
  spit((fs::path(out_dir) / "report.csv").string(), report.csv());
  return report;
}

PairSet cmd_pair(const RunConfig& config, const std::string& data_root, const std::string& out_file) {
  const Benchmark bench = load_benchmark(data_root, config, {true, true, false});
  const PairSet pairs = pair_samples(bench.source_train, bench.target_train, config.pair_side);
  DatasetLayout layout{data_root};
  const fs::path p(out_file);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_pairs(out_file, pairs, image_paths("source", bench.source_train),
              image_paths("target", bench.target_train));
  return pairs;
}

}  // namespace qf
