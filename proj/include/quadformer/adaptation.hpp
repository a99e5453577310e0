#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "quadformer/model.hpp"

namespace qf {

/// Per-class EMA centroids η^c of augmented target features.
struct PrototypeBank {
  std::vector<std::vector<double>> eta;  // [classes][dim]
  std::vector<double> counts;            // accumulated weight per class
  std::vector<std::uint8_t> seen;        // class has a centroid
  double lambda = 0.9999;

  static PrototypeBank zeros(std::size_t classes, std::size_t dim, double lambda = 0.9999);
  std::size_t classes() const { return eta.size(); }
  std::size_t dim() const { return eta.empty() ? 0 : eta[0].size(); }
  /// Every class has a centroid.
  bool initialized() const;
};

/// Probability-weighted centroid Σ w·f / Σ w of rows of `features` [N×D].
/// Returns nullopt when the weights sum to zero (class absent from batch).
std::optional<std::vector<double>> batch_prototype(const Tensor& features, std::span<const double> weights);

/// η^c ← λη^c + (1−λ)η'. Throws NumericError on a non-finite η'.
void ema_update(PrototypeBank& bank, std::size_t c, std::span<const double> eta_prime);

/// Rows of `features` scaled to unit L2 norm (zero rows stay zero).
Tensor l2_normalize_rows(const Tensor& features);

/// Weights w(f,c) for the prototype of class c: p_c where argmax p == c, else 0.
/// `probs` is [C×N].
std::vector<double> prototype_weights(const Tensor& probs, std::size_t c);

/// Accumulates plain (non-EMA) centroids over a full pass to seed a bank.
class PrototypeSeeder {
 public:
  PrototypeSeeder(std::size_t classes, std::size_t dim);
  /// features [N×D] (already normalized), probs [C×N].
  void add(const Tensor& features, const Tensor& probs);
  PrototypeBank finish(double lambda) const;

 private:
  std::vector<std::vector<double>> sums_;
  std::vector<double> weights_;
};

/// Area-average of a [C×H×W] map by an integer factor.
Tensor area_downsample(const Tensor& x, std::size_t factor);

/// k(f,c) = softmax_c(−‖f − η̂^c‖ / T) with f and η^c L2-normalized; [C×N].
Tensor prototype_affinity(const Tensor& features, const PrototypeBank& bank, double temperature);

enum class LabelOrigin { kWarmup, kCorrected };

/// Soft pseudo labels of one target image.
struct PseudoLabel {
  Tensor warm;    // [C×H×W] fixed warm-up probabilities
  Tensor probs;   // [C×H×W] current probabilities
  std::vector<std::uint8_t> valid;  // max prob ≥ τ
  LabelOrigin origin = LabelOrigin::kWarmup;

  std::vector<std::uint8_t> hard() const;
  std::size_t valid_count() const;
};

using PseudoLabelSet = std::vector<PseudoLabel>;

/// Validity mask for probabilities [C×H×W] at threshold τ.
std::vector<std::uint8_t> confident(const Tensor& probs, double tau);

PseudoLabel make_pseudo_label(const Tensor& probs, double tau);

/// Source-free soft predictions of the warm-up model for every target image.
PseudoLabelSet warmup_pseudo_labels(const QuadFormer& model, std::span<const Tensor> images, double tau);

/// Reweights the FIXED warm-up probabilities by prototype affinity and
/// renormalizes. `affinity` is [C×h×w] at feature resolution and is
/// bilinearly resized to the label resolution. Throws ContractError when the
/// bank is not initialized.
void correct_pseudo_label(PseudoLabel& label, const Tensor& affinity, double tau);

/// Convenience: affinity from features [N×D] on `grid`, then correction.
void correct_pseudo_labels(PseudoLabel& label, const Tensor& features, Grid grid, const PrototypeBank& bank,
                           double temperature, double tau);

// ---------------------------------------------------------------- SSIM pairing

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
};

/// 0.299 R + 0.587 G + 0.114 B of img[3×H×W].
GrayImage to_gray(const Tensor& img);

/// Area-average to at most `side`×`side` (integer factors only).
GrayImage downscale(const GrayImage& g, std::size_t side);

struct SsimOptions {
  std::size_t window = 8;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

/// Mean SSIM over all window×window positions (stride 1, population moments).
double ssim(const GrayImage& a, const GrayImage& b, const SsimOptions& opt = {});

enum class PairOrigin { kSourceWay, kTargetWay };

struct Pair {
  std::size_t source = 0;
  std::size_t target = 0;
  double similarity = 0.0;
  PairOrigin origin = PairOrigin::kSourceWay;
  bool operator==(const Pair&) const = default;
};

struct PairSet {
  std::vector<Pair> pairs;
};

/// SSIM-best target for every source, SSIM-best source for every target,
/// union without duplicates (ties go to the lower index).
PairSet pair_two_way(std::span<const GrayImage> sources, std::span<const GrayImage> targets,
                     const SsimOptions& opt = {});

/// `source_path<TAB>target_path<TAB>ssim` lines after a `# s_way=<n>` header.
void write_pairs(const std::string& path, const PairSet& set, std::span<const std::string> source_paths,
                 std::span<const std::string> target_paths);
PairSet read_pairs(const std::string& path, std::span<const std::string> source_paths,
                   std::span<const std::string> target_paths);

}  // namespace qf
