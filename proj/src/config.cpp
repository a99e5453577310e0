#include "quadformer/config.hpp"

#include <fstream>
#include <sstream>

#include "quadformer/keyvalue.hpp"

namespace qf {

namespace {

// One table drives both directions so the two can never drift apart.
template <typename Fn>
void fields(RunConfig& c, Fn&& f) {
  f("encoder", c.encoder);
  f("embed_dim", c.embed_dim);
  f("extra_hidden", c.extra_hidden);
  f("share_heads", c.share_heads);
  f("share_cross_weights", c.share_cross_weights);
  f("tau", c.tau);
  f("temperature", c.temperature);
  f("ema_lambda", c.ema_lambda);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("class_weighting", c.class_weighting);
  f("pl_weight", c.pl_weight);
  f("lr", c.lr);
  f("d_lr", c.d_lr);
  f("weight_decay", c.weight_decay);
  f("t_warm", c.t_warm);
  f("warmup_iterations", c.warmup_iterations);
  f("iterations", c.iterations);
  f("batch", c.batch);
  f("seed", c.seed);
  f("crop", c.crop);
  f("flip", c.flip);
  f("brightness", c.brightness);
  f("contrast", c.contrast);
  f("channel", c.channel);
  f("self_training", c.self_training);
  f("adversarial", c.adversarial);
  f("correction", c.correction);
  f("source_cross", c.source_cross);
  f("target_cross", c.target_cross);
  f("source_holdout", c.source_holdout);
  f("pair_side", c.pair_side);
  f("log_every", c.log_every);
  f("eval_every", c.eval_every);
}

std::string text_of(const std::string& v) { return v; }
std::string text_of(bool v) { return v ? "true" : "false"; }
std::string text_of(double v) { return format_double(v); }
std::string text_of(std::size_t v) { return std::to_string(v); }

void apply(RunConfig& c, const std::string& text, const std::string& origin) {
  KeyReader r(parse_key_values(text, origin), origin);
  fields(c, [&r](const char* key, auto& value) { r.get(key, value); });
  r.finish();
}

}  // namespace

ModelConfig RunConfig::model() const {
  ModelConfig m;
  if (encoder == "q0") {
    m.encoder = EncoderConfig::q0();
  } else if (encoder == "micro") {
    m.encoder = EncoderConfig::micro();
  } else {
    throw ContractError("unknown encoder preset '" + encoder + "' (expected q0 or micro)");
  }
  m.encoder.share_cross_weights = share_cross_weights;
  m.decoder.embed_dim = embed_dim;
  m.decoder.extra_hidden = extra_hidden;
  m.decoder.share_heads = share_heads;
  return m;
}

AugmentOptions RunConfig::augment_options() const {
  AugmentOptions a;
  a.crop = crop;
  a.flip_probability = flip;
  a.brightness = brightness;
  a.contrast = contrast;
  a.channel = channel;
  return a;
}

void RunConfig::validate() const {
  model();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ContractError("config: " + what);
  };
  require(embed_dim > 0, "embed_dim must be positive");
  require(tau >= 0.0 && tau <= 1.0, "tau must lie in [0,1]");
  require(temperature > 0.0, "temperature must be positive");
  require(ema_lambda >= 0.0 && ema_lambda < 1.0, "ema_lambda must lie in [0,1)");
  require(beta1 >= 0.0 && beta2 >= 0.0, "loss weights must be non-negative");
  require(pl_weight > 0.0, "pl_weight must be positive");
  require(lr > 0.0 && d_lr > 0.0, "learning rates must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(batch > 0, "batch must be positive");
  require(crop > 0 && crop % 32 == 0, "crop must be a positive multiple of 32");
  require(flip >= 0.0 && flip <= 1.0, "flip must lie in [0,1]");
  require(!correction || self_training, "correction requires self_training");
  require(pair_side >= 8, "pair_side must be at least the SSIM window");
  require(log_every > 0, "log_every must be positive");
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  RunConfig copy = *this;
  fields(copy, [&o](const char* key, const auto& value) { o << key << " = " << text_of(value) << '\n'; });
  return o.str();
}

RunConfig RunConfig::from_text(const std::string& text, const std::string& origin) {
  RunConfig c;
  apply(c, text, origin);
  c.validate();
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), path);
}

RunConfig RunConfig::with_overrides(const std::vector<std::string>& texts, const std::string& origin) const {
  RunConfig c = *this;
  for (const auto& t : texts) apply(c, t, origin + " " + t);
  c.validate();
  return c;
}

}  // namespace qf
