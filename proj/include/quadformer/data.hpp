#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "quadformer/keyvalue.hpp"
#include "quadformer/tensor.hpp"

namespace qf {

enum class Background { kFlat, kGradient, kNoise };

/// Procedural power-line scene parameters for one domain.
struct SceneSpec {
  std::size_t size = 64;  // square images, multiple of 32
  std::size_t min_lines = 1;
  std::size_t max_lines = 3;
  std::size_t min_width = 1;
  std::size_t max_width = 3;

  // domain-specific appearance
  std::vector<Background> backgrounds{Background::kFlat, Background::kGradient};
  double bg_low = 0.6;        // background brightness range
  double bg_high = 0.95;
  double tint = 0.05;         // per-channel colour spread of the background
  double line_low = 0.05;     // line brightness range (absolute)
  double line_high = 0.25;
  double line_relative = 0.0; // if > 0, lines are bg ± this offset instead
  double pixel_noise = 0.0;   // i.i.d. Gaussian σ added to every pixel
  double texture = 0.0;       // amplitude of the noise background

  std::uint64_t seed = 42;

  /// Bright flat/gradient backgrounds with dark crisp lines.
  static SceneSpec source_default(std::uint64_t seed = 42);
  /// Dim noise-textured backgrounds with low-contrast lines.
  static SceneSpec target_default(std::uint64_t seed = 42);

  /// Throws ContractError on an unusable spec (e.g. zero lines).
  void validate() const;
  /// Geometry fields only; appearance may differ between domains.
  bool same_geometry(const SceneSpec& other) const;
};

struct Sample {
  Tensor image;                     // [3×H×W] in [0,1]
  std::vector<std::uint8_t> label;  // H·W class indices
  std::size_t id = 0;

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
};

/// A straight line crossing the image between opposite borders.
struct LineGeometry {
  double x0, y0, x1, y1;
  std::size_t width;
};

/// Pixels covered by a line of integer width: the centre line (and
/// parallel offsets for width > 1) sampled at ceil(length) midpoints.
void rasterize_line(const LineGeometry& line, std::size_t h, std::size_t w, std::vector<std::uint8_t>& label);

/// Deterministic sample `id` of a domain; the rng stream derives from (seed, tag, id).
Sample generate_sample(const SceneSpec& spec, std::size_t id, std::uint64_t tag = 0);
std::vector<Sample> generate_domain(const SceneSpec& spec, std::size_t n, std::size_t first_id = 0,
                                    std::uint64_t tag = 0);

struct AugmentOptions {
  std::size_t crop = 64;
  double flip_probability = 0.5;
  double brightness = 0.1;     // additive, uniform ±
  double contrast = 0.2;       // multiplicative about the mean, uniform 1±
  double channel = 0.05;       // per-channel gain, uniform 1±
  std::size_t crop_retries = 8;
};

struct CropWindow {
  std::size_t y = 0, x = 0, size = 0;
  std::size_t attempts = 0;
};

/// Horizontal flip of image and label.
Sample hflip(const Sample& s);
/// Brightness/contrast/channel jitter on the image only, clamped to [0,1].
Sample photometric(const Sample& s, std::mt19937_64& rng, const AugmentOptions& opt);
/// Random crop window; retried until it holds a line pixel, up to `crop_retries` times.
CropWindow choose_crop(const Sample& s, std::mt19937_64& rng, const AugmentOptions& opt);
Sample crop(const Sample& s, const CropWindow& w);
Sample augment(const Sample& s, std::mt19937_64& rng, const AugmentOptions& opt = {});

/// |pred ∩ gt| / |pred ∪ gt| for class `cls`; 1.0 when the union is empty.
double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::uint8_t cls = 1);

/// Accumulates intersection and union over many images.
struct IouCounter {
  std::size_t intersection = 0;
  std::size_t union_ = 0;
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::uint8_t cls = 1);
  double value() const;
};

// ---------------------------------------------------------------- PNM

/// Binary PGM (1 channel) or PPM (3 channels), interleaved samples.
struct PnmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::uint32_t maxval = 255;
  std::vector<std::uint16_t> samples;
  bool operator==(const PnmImage&) const = default;
};

/// Throws ParseError with the byte offset of the first malformed field.
PnmImage parse_pnm(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
std::vector<std::uint8_t> encode_pnm(const PnmImage& img);
PnmImage read_pnm(const std::string& path);
void write_pnm(const std::string& path, const PnmImage& img);

/// Samples / maxval as [3×H×W] (PGM inputs are replicated to 3 channels).
Tensor pnm_to_tensor(const PnmImage& img);
/// Quantizes [3×H×W] in [0,1] to 8 bits by rounding (values clamped).
PnmImage tensor_to_pnm(const Tensor& img);
PnmImage label_to_pnm(std::span<const std::uint8_t> label, std::size_t h, std::size_t w);
std::vector<std::uint8_t> pnm_to_label(const PnmImage& img);

// ---------------------------------------------------------------- dataset

/// Everything `generate` needs; serialized as `spec.txt`.
struct DatasetSpec {
  SceneSpec source = SceneSpec::source_default();
  SceneSpec target = SceneSpec::target_default();
  std::size_t source_count = 200;
  std::size_t target_train = 200;
  std::size_t target_val = 50;
  std::uint64_t seed = 42;

  std::string to_text() const;
  static DatasetSpec from_text(const std::string& text, const std::string& origin);
  static DatasetSpec from_file(const std::string& path);
};

/// `<root>/{source,target}/{images,labels}/NNNN.{ppm,pgm}` paths.
struct DatasetLayout {
  std::string root;

  std::string image_path(const std::string& domain, std::size_t id) const;
  std::string label_path(const std::string& domain, std::size_t id) const;
  std::string spec_path() const;
};

/// Writes both domains plus `spec.txt`; creates missing directories.
void write_dataset(const DatasetSpec& spec, const std::string& root);

/// Loads samples `ids` of `domain` ("source" or "target").
std::vector<Sample> load_samples(const DatasetLayout& layout, const std::string& domain,
                                 std::span<const std::size_t> ids, bool with_labels = true);

std::vector<std::size_t> id_range(std::size_t first, std::size_t count);

}  // namespace qf
