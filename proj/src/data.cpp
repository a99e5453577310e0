#include "quadformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <array>
#include <cstdio>
#include <numbers>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "quadformer/parallel.hpp"

namespace qf {

// ---------------------------------------------------------------- scenes

SceneSpec SceneSpec::source_default(std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  return s;
}

SceneSpec SceneSpec::target_default(std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  s.backgrounds = {Background::kNoise};
  s.bg_low = 0.15;
  s.bg_high = 0.45;
  s.tint = 0.08;
  s.line_relative = 0.2;
  s.pixel_noise = 0.03;
  s.texture = 0.15;
  return s;
}

void SceneSpec::validate() const {
  if (size == 0 || size % 32 != 0) throw ContractError("scene spec: size must be a positive multiple of 32");
  if (min_lines == 0 || max_lines < min_lines) throw ContractError("scene spec: need at least one line per image");
  if (min_width == 0 || max_width < min_width || max_width > 3) {
    throw ContractError("scene spec: line widths must lie in 1..3");
  }
  if (backgrounds.empty()) throw ContractError("scene spec: no background family");
  if (bg_low > bg_high || line_low > line_high) throw ContractError("scene spec: inverted range");
}

bool SceneSpec::same_geometry(const SceneSpec& o) const {
  return size == o.size && min_lines == o.min_lines && max_lines == o.max_lines && min_width == o.min_width &&
         max_width == o.max_width;
}

void rasterize_line(const LineGeometry& line, std::size_t h, std::size_t w, std::vector<std::uint8_t>& label) {
  const double dx = line.x1 - line.x0, dy = line.y1 - line.y0;
  const double length = std::hypot(dx, dy);
  const std::size_t steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(length)));
  const bool horizontal = std::abs(dx) >= std::abs(dy);
  for (std::size_t j = 0; j < line.width; ++j) {
    const double offset = static_cast<double>(j) - (static_cast<double>(line.width) - 1.0) / 2.0;
    for (std::size_t k = 0; k < steps; ++k) {
      const double t = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
      double x = line.x0 + t * dx, y = line.y0 + t * dy;
      (horizontal ? y : x) += offset;
      if (x < 0.0 || y < 0.0) continue;
      const auto px = static_cast<std::size_t>(x), py = static_cast<std::size_t>(y);
      if (px < w && py < h) label[py * w + px] = 1;
    }
  }
}

namespace {

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t tag, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(id),
                    static_cast<std::uint32_t>(id >> 32)};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Sum of bilinearly interpolated random lattices at cells of 16, 8 and 4 px.
std::vector<double> value_noise(std::size_t size, std::mt19937_64& rng) {
  std::vector<double> out(size * size, 0.0);
  const std::pair<std::size_t, double> octaves[] = {{16, 0.5}, {8, 0.3}, {4, 0.2}};
  for (const auto& [cell, amp] : octaves) {
    const std::size_t n = size / cell + 2;
    std::vector<double> lattice(n * n);
    for (auto& v : lattice) v = uniform(rng, 0.0, 1.0);
    for (std::size_t y = 0; y < size; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(cell);
      const auto iy = static_cast<std::size_t>(fy);
      const double ty = fy - static_cast<double>(iy);
      for (std::size_t x = 0; x < size; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(cell);
        const auto ix = static_cast<std::size_t>(fx);
        const double tx = fx - static_cast<double>(ix);
        const double top = lattice[iy * n + ix] * (1 - tx) + lattice[iy * n + ix + 1] * tx;
        const double bot = lattice[(iy + 1) * n + ix] * (1 - tx) + lattice[(iy + 1) * n + ix + 1] * tx;
        out[y * size + x] += amp * (top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

std::array<double, 3> colour(std::mt19937_64& rng, double lo, double hi, double tint) {
  const double b = uniform(rng, lo, hi);
  return {b + uniform(rng, -tint, tint), b + uniform(rng, -tint, tint), b + uniform(rng, -tint, tint)};
}

LineGeometry random_line(std::mt19937_64& rng, std::size_t size, std::size_t min_w, std::size_t max_w) {
  const double s = static_cast<double>(size);
  const bool horizontal = uniform(rng, 0.0, 1.0) < 0.5;
  const double a = uniform(rng, 0.0, s), b = uniform(rng, 0.0, s);
  const auto width = static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(min_w, max_w)(rng));
  return horizontal ? LineGeometry{0.0, a, s, b, width} : LineGeometry{a, 0.0, b, s, width};
}

}  // namespace

Sample generate_sample(const SceneSpec& spec, std::size_t id, std::uint64_t tag) {
  spec.validate();
  auto rng = sample_rng(spec.seed, tag, id);
  const std::size_t n = spec.size, plane = n * n;
  std::vector<double> img(3 * plane);

  const Background family =
      spec.backgrounds[std::uniform_int_distribution<std::size_t>(0, spec.backgrounds.size() - 1)(rng)];
  const auto c0 = colour(rng, spec.bg_low, spec.bg_high, spec.tint);
  switch (family) {
    case Background::kFlat:
      for (std::size_t k = 0; k < 3; ++k) std::fill_n(img.begin() + k * plane, plane, c0[k]);
      break;
    case Background::kGradient: {
      const auto c1 = colour(rng, spec.bg_low, spec.bg_high, spec.tint);
      const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      const double half = static_cast<double>(n) / 2.0;
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const double t = std::clamp(((static_cast<double>(x) + 0.5 - half) * std::cos(theta) +
                                       (static_cast<double>(y) + 0.5 - half) * std::sin(theta)) /
                                              static_cast<double>(n) + 0.5,
                                       0.0, 1.0);
          for (std::size_t k = 0; k < 3; ++k) img[k * plane + y * n + x] = c0[k] * (1 - t) + c1[k] * t;
        }
      }
      break;
    }
    case Background::kNoise: {
      const auto noise = value_noise(n, rng);
      for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t k = 0; k < 3; ++k) img[k * plane + i] = c0[k] + spec.texture * (noise[i] - 0.5);
      }
      break;
    }
  }

  std::vector<std::uint8_t> label(plane, 0);
  const std::size_t lines = std::uniform_int_distribution<std::size_t>(spec.min_lines, spec.max_lines)(rng);
  for (std::size_t l = 0; l < lines; ++l) {
    const LineGeometry line = random_line(rng, n, spec.min_width, spec.max_width);
    rasterize_line(line, n, n, label);
    std::array<double, 3> ink{};
    double delta = 0.0;
    if (spec.line_relative > 0.0) {
      delta = -spec.line_relative * uniform(rng, 0.7, 1.3);
    } else {
      ink = colour(rng, spec.line_low, spec.line_high, 0.02);
    }
    const double dx = line.x1 - line.x0, dy = line.y1 - line.y0;
    const bool horizontal = std::abs(dx) >= std::abs(dy);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double cx = static_cast<double>(x) + 0.5, cy = static_cast<double>(y) + 0.5;
        // distance along the minor axis, matching the label offsets
        const double dist = horizontal ? std::abs(cy - (line.y0 + (cx - line.x0) * dy / dx))
                                       : std::abs(cx - (line.x0 + (cy - line.y0) * dx / dy));
        const double alpha = std::clamp(static_cast<double>(line.width) / 2.0 + 0.5 - dist, 0.0, 1.0);
        if (alpha == 0.0) continue;
        for (std::size_t k = 0; k < 3; ++k) {
          double& p = img[k * plane + y * n + x];
          p = spec.line_relative > 0.0 ? p + alpha * delta : p * (1 - alpha) + ink[k] * alpha;
        }
      }
    }
  }

  if (spec.pixel_noise > 0.0) {
    std::normal_distribution<double> g(0.0, spec.pixel_noise);
    for (auto& p : img) p += g(rng);
  }
  for (auto& p : img) p = std::clamp(p, 0.0, 1.0);
  return {Tensor(Shape{3, n, n}, std::move(img)), std::move(label), id};
}

std::vector<Sample> generate_domain(const SceneSpec& spec, std::size_t n, std::size_t first_id, std::uint64_t tag) {
  spec.validate();
  std::vector<Sample> out(n);
  parallel_for(n, 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) out[i] = generate_sample(spec, first_id + i, tag);
  });
  return out;
}

// ---------------------------------------------------------------- augmentation

Sample hflip(const Sample& s) {
  const std::size_t h = s.height(), w = s.width(), plane = h * w;
  std::vector<double> img(3 * plane);
  const bool labelled = !s.label.empty();  // unlabeled target images carry no map
  std::vector<std::uint8_t> label(labelled ? plane : 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < 3; ++k) img[k * plane + y * w + x] = s.image[k * plane + y * w + (w - 1 - x)];
      if (labelled) label[y * w + x] = s.label[y * w + (w - 1 - x)];
    }
  }
  return {Tensor(s.image.shape(), std::move(img)), std::move(label), s.id};
}

Sample photometric(const Sample& s, std::mt19937_64& rng, const AugmentOptions& opt) {
  const double b = uniform(rng, -opt.brightness, opt.brightness);
  const double c = uniform(rng, 1.0 - opt.contrast, 1.0 + opt.contrast);
  std::array<double, 3> gain{};
  for (auto& g : gain) g = uniform(rng, 1.0 - opt.channel, 1.0 + opt.channel);
  const auto v = s.image.values();
  double mean = 0.0;
  for (double p : v) mean += p;
  mean /= static_cast<double>(v.size());
  const std::size_t plane = v.size() / 3;
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::clamp(((v[i] - mean) * c + mean + b) * gain[i / plane], 0.0, 1.0);
  }
  return {Tensor(s.image.shape(), std::move(out)), s.label, s.id};
}

CropWindow choose_crop(const Sample& s, std::mt19937_64& rng, const AugmentOptions& opt) {
  const std::size_t h = s.height(), w = s.width();
  if (opt.crop == 0 || opt.crop > h || opt.crop > w) {
    throw ContractError("choose_crop: crop " + std::to_string(opt.crop) + " exceeds image " + std::to_string(h) +
                        "x" + std::to_string(w));
  }
  CropWindow win{0, 0, opt.crop, 0};
  const std::size_t tries = std::max<std::size_t>(1, opt.crop_retries);
  for (std::size_t a = 0; a < tries; ++a) {
    if (s.label.empty() && a > 0) break;
    win.y = std::uniform_int_distribution<std::size_t>(0, h - opt.crop)(rng);
    win.x = std::uniform_int_distribution<std::size_t>(0, w - opt.crop)(rng);
    win.attempts = a + 1;
    if (s.label.empty()) break;
    for (std::size_t y = win.y; y < win.y + opt.crop; ++y) {
      for (std::size_t x = win.x; x < win.x + opt.crop; ++x) {
        if (s.label[y * w + x] != 0) return win;
      }
    }
  }
  return win;
}

Sample crop(const Sample& s, const CropWindow& win) {
  const std::size_t h = s.height(), w = s.width(), n = win.size;
  if (win.y + n > h || win.x + n > w) throw ContractError("crop: window outside image");
  if (n == h && n == w) return s;
  std::vector<double> img(3 * n * n);
  const bool labelled = !s.label.empty();
  std::vector<std::uint8_t> label(labelled ? n * n : 0);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      for (std::size_t k = 0; k < 3; ++k) img[(k * n + y) * n + x] = s.image[(k * h + win.y + y) * w + win.x + x];
      if (labelled) label[y * n + x] = s.label[(win.y + y) * w + win.x + x];
    }
  }
  return {Tensor(Shape{3, n, n}, std::move(img)), std::move(label), s.id};
}

Sample augment(const Sample& s, std::mt19937_64& rng, const AugmentOptions& opt) {
  Sample out = uniform(rng, 0.0, 1.0) < opt.flip_probability ? hflip(s) : s;
  out = photometric(out, rng, opt);
  return crop(out, choose_crop(out, rng, opt));
}

// ---------------------------------------------------------------- metrics

void IouCounter::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::uint8_t cls) {
  if (pred.size() != gt.size()) {
    throw ShapeError("iou: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                     std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls, g = gt[i] == cls;
    intersection += p && g;
    union_ += p || g;
  }
}

double IouCounter::value() const {
  return union_ == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(union_);
}

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::uint8_t cls) {
  IouCounter c;
  c.add(pred, gt, cls);
  return c.value();
}

// ---------------------------------------------------------------- PNM

namespace {

class PnmCursor {
 public:
  PnmCursor(std::span<const std::uint8_t> bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(origin_ + ": " + what + " at byte " + std::to_string(pos_));
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::uint64_t number(const char* field, std::uint64_t max) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) fail(std::string("unexpected end of header reading ") + field);
    if (bytes_[pos_] < '0' || bytes_[pos_] > '9') fail(std::string("expected ") + field);
    std::uint64_t v = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > max) fail(std::string(field) + " exceeds " + std::to_string(max));
      ++pos_;
    }
    return v;
  }

  std::size_t pos_ = 0;
  std::span<const std::uint8_t> bytes_;
  std::string origin_;
};

constexpr std::uint64_t kMaxDim = (std::uint64_t{1} << 31) - 1;

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

}  // namespace

PnmImage parse_pnm(std::span<const std::uint8_t> bytes, const std::string& origin) {
  PnmCursor cur(bytes, origin);
  if (bytes.size() < 2) cur.fail("file too short for a magic number");
  if (bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) cur.fail("expected magic P5 or P6");
  cur.pos_ = 2;
  PnmImage img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  if (cur.pos_ >= bytes.size() || !is_space(bytes[cur.pos_])) cur.fail("expected whitespace after magic");
  img.width = cur.number("width", kMaxDim);
  img.height = cur.number("height", kMaxDim);
  if (img.width == 0 || img.height == 0) cur.fail("zero image dimension");
  img.maxval = static_cast<std::uint32_t>(cur.number("maxval", 65535));
  if (img.maxval == 0) cur.fail("maxval must be at least 1");
  if (cur.pos_ >= bytes.size() || !is_space(bytes[cur.pos_])) cur.fail("expected single whitespace before raster");
  ++cur.pos_;

  const std::uint64_t bytes_per = img.maxval > 255 ? 2 : 1;
  const std::uint64_t per_row = static_cast<std::uint64_t>(img.width) * img.channels * bytes_per;
  const std::uint64_t remaining = bytes.size() - cur.pos_;
  if (per_row > remaining || img.height > remaining / per_row) {
    cur.fail("truncated raster: need " + std::to_string(per_row) + "x" + std::to_string(img.height) + " bytes, have " +
             std::to_string(remaining));
  }
  const std::size_t count = img.width * img.height * img.channels;
  img.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint16_t v = bytes[cur.pos_];
    if (bytes_per == 2) v = static_cast<std::uint16_t>((v << 8) | bytes[cur.pos_ + 1]);
    if (v > img.maxval) cur.fail("sample exceeds maxval");
    img.samples[i] = v;
    cur.pos_ += bytes_per;
  }
  return img;
}

std::vector<std::uint8_t> encode_pnm(const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3) throw ContractError("encode_pnm: channels must be 1 or 3");
  if (img.maxval == 0 || img.maxval > 65535) throw ContractError("encode_pnm: maxval out of range");
  if (img.samples.size() != img.width * img.height * img.channels) throw ShapeError("encode_pnm: sample count");
  const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n" + std::to_string(img.maxval) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (auto v : img.samples) {
    if (v > img.maxval) throw ContractError("encode_pnm: sample exceeds maxval");
    if (img.maxval > 255) out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

PnmImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_pnm(bytes, path);
}

void write_pnm(const std::string& path, const PnmImage& img) {
  const auto bytes = encode_pnm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ContractError("write failed for " + path);
}

Tensor pnm_to_tensor(const PnmImage& img) {
  const std::size_t plane = img.width * img.height;
  std::vector<double> v(3 * plane);
  const double scale = 1.0 / static_cast<double>(img.maxval);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      v[k * plane + i] = img.samples[i * img.channels + (img.channels == 3 ? k : 0)] * scale;
    }
  }
  return Tensor(Shape{3, img.height, img.width}, std::move(v));
}

PnmImage tensor_to_pnm(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("tensor_to_pnm: expected 3×H×W, got " + to_string(t.shape()));
  PnmImage img{t.dim(2), t.dim(1), 3, 255, {}};
  const std::size_t plane = img.width * img.height;
  img.samples.resize(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      img.samples[i * 3 + k] = static_cast<std::uint16_t>(std::lround(std::clamp(t[k * plane + i], 0.0, 1.0) * 255.0));
    }
  }
  return img;
}

PnmImage label_to_pnm(std::span<const std::uint8_t> label, std::size_t h, std::size_t w) {
  if (label.size() != h * w) throw ShapeError("label_to_pnm: size mismatch");
  return {w, h, 1, 255, std::vector<std::uint16_t>(label.begin(), label.end())};
}

std::vector<std::uint8_t> pnm_to_label(const PnmImage& img) {
  if (img.channels != 1 || img.maxval > 255) throw ContractError("pnm_to_label: expected 8-bit PGM");
  return {img.samples.begin(), img.samples.end()};
}

// ---------------------------------------------------------------- dataset

namespace {

std::string backgrounds_text(const std::vector<Background>& b) {
  std::string s;
  for (auto f : b) {
    if (!s.empty()) s += ",";
    s += f == Background::kFlat ? "flat" : f == Background::kGradient ? "gradient" : "noise";
  }
  return s;
}

std::vector<Background> parse_backgrounds(const std::string& text, const std::string& origin) {
  std::vector<Background> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    if (item == "flat") {
      out.push_back(Background::kFlat);
    } else if (item == "gradient") {
      out.push_back(Background::kGradient);
    } else if (item == "noise") {
      out.push_back(Background::kNoise);
    } else {
      throw ParseError(origin + ": unknown background family '" + item + "'");
    }
  }
  return out;
}

void appearance_out(std::ostringstream& o, const std::string& p, const SceneSpec& s) {
  o << p << ".backgrounds = " << backgrounds_text(s.backgrounds) << '\n'
    << p << ".bg_low = " << format_double(s.bg_low) << '\n'
    << p << ".bg_high = " << format_double(s.bg_high) << '\n'
    << p << ".tint = " << format_double(s.tint) << '\n'
    << p << ".line_low = " << format_double(s.line_low) << '\n'
    << p << ".line_high = " << format_double(s.line_high) << '\n'
    << p << ".line_relative = " << format_double(s.line_relative) << '\n'
    << p << ".pixel_noise = " << format_double(s.pixel_noise) << '\n'
    << p << ".texture = " << format_double(s.texture) << '\n';
}

void appearance_in(KeyReader& r, const std::string& p, SceneSpec& s, const std::string& origin) {
  std::string bg;
  r.get(p + ".backgrounds", bg);
  if (!bg.empty()) s.backgrounds = parse_backgrounds(bg, origin);
  r.get(p + ".bg_low", s.bg_low);
  r.get(p + ".bg_high", s.bg_high);
  r.get(p + ".tint", s.tint);
  r.get(p + ".line_low", s.line_low);
  r.get(p + ".line_high", s.line_high);
  r.get(p + ".line_relative", s.line_relative);
  r.get(p + ".pixel_noise", s.pixel_noise);
  r.get(p + ".texture", s.texture);
}

std::string four_digits(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04zu", id);
  return buf;
}

}  // namespace

std::string DatasetSpec::to_text() const {
  std::ostringstream o;
  o << "seed = " << seed << '\n'
    << "source_count = " << source_count << '\n'
    << "target_train = " << target_train << '\n'
    << "target_val = " << target_val << '\n'
    << "size = " << source.size << '\n'
    << "min_lines = " << source.min_lines << '\n'
    << "max_lines = " << source.max_lines << '\n'
    << "min_width = " << source.min_width << '\n'
    << "max_width = " << source.max_width << '\n';
  appearance_out(o, "source", source);
  appearance_out(o, "target", target);
  return o.str();
}

DatasetSpec DatasetSpec::from_text(const std::string& text, const std::string& origin) {
  KeyReader r(parse_key_values(text, origin), origin);
  DatasetSpec d;
  r.get("seed", d.seed);
  r.get("source_count", d.source_count);
  r.get("target_train", d.target_train);
  r.get("target_val", d.target_val);
  SceneSpec geo = d.source;
  r.get("size", geo.size);
  r.get("min_lines", geo.min_lines);
  r.get("max_lines", geo.max_lines);
  r.get("min_width", geo.min_width);
  r.get("max_width", geo.max_width);
  for (SceneSpec* s : {&d.source, &d.target}) {
    s->size = geo.size;
    s->min_lines = geo.min_lines;
    s->max_lines = geo.max_lines;
    s->min_width = geo.min_width;
    s->max_width = geo.max_width;
    s->seed = d.seed;
  }
  appearance_in(r, "source", d.source, origin);
  appearance_in(r, "target", d.target, origin);
  r.finish();
  d.source.validate();
  d.target.validate();
  if (d.source_count == 0 || d.target_train == 0) throw ContractError(origin + ": empty domain");
  return d;
}

DatasetSpec DatasetSpec::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), path);
}

std::string DatasetLayout::image_path(const std::string& domain, std::size_t id) const {
  return (std::filesystem::path(root) / domain / "images" / (four_digits(id) + ".ppm")).string();
}

std::string DatasetLayout::label_path(const std::string& domain, std::size_t id) const {
  return (std::filesystem::path(root) / domain / "labels" / (four_digits(id) + ".pgm")).string();
}

std::string DatasetLayout::spec_path() const { return (std::filesystem::path(root) / "spec.txt").string(); }

void write_dataset(const DatasetSpec& spec, const std::string& root) {
  DatasetLayout layout{root};
  for (const char* d : {"source", "target"}) {
    std::filesystem::create_directories(std::filesystem::path(root) / d / "images");
    std::filesystem::create_directories(std::filesystem::path(root) / d / "labels");
  }
  auto write = [&](const std::string& domain, const std::vector<Sample>& samples) {
    for (const auto& s : samples) {
      write_pnm(layout.image_path(domain, s.id), tensor_to_pnm(s.image));
      write_pnm(layout.label_path(domain, s.id), label_to_pnm(s.label, s.height(), s.width()));
    }
  };
  SceneSpec src = spec.source, tgt = spec.target;
  src.seed = tgt.seed = spec.seed;
  write("source", generate_domain(src, spec.source_count, 0, 1));
  write("target", generate_domain(tgt, spec.target_train + spec.target_val, 0, 2));
  std::ofstream out(layout.spec_path(), std::ios::binary);
  out << spec.to_text();
  if (!out) throw ContractError("cannot write " + layout.spec_path());
}

std::vector<Sample> load_samples(const DatasetLayout& layout, const std::string& domain,
                                 std::span<const std::size_t> ids, bool with_labels) {
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    Sample s;
    s.id = id;
    s.image = pnm_to_tensor(read_pnm(layout.image_path(domain, id)));
    if (with_labels) {
      s.label = pnm_to_label(read_pnm(layout.label_path(domain, id)));
      if (s.label.size() != s.height() * s.width()) throw ParseError(layout.label_path(domain, id) + ": size mismatch");
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::size_t> id_range(std::size_t first, std::size_t count) {
  std::vector<std::size_t> ids(count);
  for (std::size_t i = 0; i < count; ++i) ids[i] = first + i;
  return ids;
}

}  // namespace qf
