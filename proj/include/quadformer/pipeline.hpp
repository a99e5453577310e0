#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "quadformer/adaptation.hpp"
#include "quadformer/config.hpp"
#include "quadformer/data.hpp"
#include "quadformer/model.hpp"
#include "quadformer/objectives.hpp"

namespace qf {

// ---------------------------------------------------------------- checkpoints

/// Named flat f64 arrays plus the config that produced them. On disk: a text
/// manifest starting with `QFCKPT 1`, then the arrays as little-endian f64.
struct Checkpoint {
  std::string stage;  // "warmup" or "adapt"
  std::size_t step = 0;
  std::string config_text;
  std::vector<std::pair<std::string, std::vector<double>>> arrays;

  const std::vector<double>* find(const std::string& name) const;
  std::vector<std::uint8_t> encode() const;
  static Checkpoint decode(std::span<const std::uint8_t> bytes, const std::string& origin);
  void write(const std::string& path) const;
  static Checkpoint read(const std::string& path);
};

/// Everything a training stage mutates.
struct TrainState {
  RunConfig config;
  std::string stage = "warmup";
  std::size_t step = 0;
  QuadFormer model;
  AdamW opt;
  std::optional<DiscriminatorWeights> disc;
  AdamW d_opt;
  std::optional<PrototypeBank> bank;

  static TrainState fresh(const RunConfig& config);
  Checkpoint checkpoint() const;
  /// Rebuilds the state; `config` must describe the same architecture.
  static TrainState restore(const Checkpoint& ckpt, const RunConfig& config);
  static TrainState restore(const Checkpoint& ckpt);
};

/// Deterministic 64-bit stream id from (seed, tag, a, b).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0, std::uint64_t b = 0);

// ---------------------------------------------------------------- logs and reports

struct LogRow {
  std::size_t step = 0;
  std::optional<double> l_seg_s, l_seg_t, d_loss, g_loss;
  double lr = 0.0;
  std::optional<double> target_iou;
};

std::string log_csv(const std::vector<LogRow>& rows);

struct EvalRow {
  std::size_t id = 0;
  std::size_t intersection = 0;
  std::size_t union_ = 0;
  double iou = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  IouCounter pooled;
  double mean_iou() const;
  /// One row per image, then a `summary` row with pooled counts and IoU.
  std::string csv() const;
};

/// Argmax class map at full resolution. Target predictions are source-free.
std::vector<std::uint8_t> predict(const QuadFormer& model, const Tensor& img, bool target);

EvalReport evaluate(const QuadFormer& model, const std::vector<Sample>& samples, bool target,
                    std::vector<std::vector<std::uint8_t>>* masks = nullptr);

// ---------------------------------------------------------------- stages

struct Benchmark {
  DatasetSpec spec;
  std::vector<Sample> source_train, source_val, target_train, target_val;
};

struct LoadWhat {
  bool source = true;
  bool target_train = true;
  bool target_val = true;
};

/// Splits a dataset root into train/val sets; target-train labels are never loaded.
Benchmark load_benchmark(const std::string& root, const RunConfig& config, LoadWhat what = {});

using LogSink = std::function<void(const LogRow&)>;

/// Source-only training from `state.step` up to `warmup_iterations`.
void run_warmup(TrainState& state, const std::vector<Sample>& source_train,
                const std::vector<Sample>& target_val, const LogSink& log);

/// Cross-domain retraining from a warm-up model. `labels[i]` belongs to
/// `target_train[i]`; pairs index into source_train/target_train.
void run_adapt(TrainState& state, const std::vector<Sample>& source_train,
               const std::vector<Sample>& target_train, PseudoLabelSet& labels, const PairSet& pairs,
               const std::vector<Sample>& target_val, const LogSink& log);

/// Prototype bank seeded by one pass over every target image with a partner.
PrototypeBank seed_prototypes(const QuadFormer& model, const std::vector<Sample>& source_train,
                              const std::vector<Sample>& target_train, const PairSet& pairs,
                              FeatureToggles toggles, double lambda);

PairSet pair_samples(const std::vector<Sample>& sources, const std::vector<Sample>& targets, std::size_t side);

/// `<dir>/NNNN.pgm` hard labels and `<dir>/NNNN.conf` little-endian f64 max-prob maps.
void write_pseudo_labels(const std::string& dir, const PseudoLabelSet& labels, const std::vector<Sample>& targets);
PseudoLabelSet read_pseudo_labels(const std::string& dir, const std::vector<Sample>& targets, double tau,
                                  std::size_t classes);

// ---------------------------------------------------------------- commands

struct WarmupPaths {
  std::string checkpoint;
  std::string resume;  // optional warm-up checkpoint to continue
  std::string pseudo_dir() const { return checkpoint + ".pseudo"; }
  std::string log() const { return checkpoint + ".log.csv"; }
};

struct AdaptPaths {
  std::string warmup;
  std::string checkpoint;
  std::string pairs;  // optional persisted PairSet
  std::string pseudo_dir() const { return warmup + ".pseudo"; }
  std::string log() const { return checkpoint + ".log.csv"; }
};

void cmd_generate(const DatasetSpec& spec, const std::string& out_dir);
void cmd_warmup(const RunConfig& config, const std::string& data_root, const WarmupPaths& paths);
void cmd_adapt(const RunConfig& config, const std::string& data_root, const AdaptPaths& paths);
/// Writes `<out_dir>/report.csv` and `<out_dir>/masks/NNNN.pgm`. Evaluating
/// the target domain touches only target files.
EvalReport cmd_eval(const std::string& checkpoint, const std::string& data_root, const std::string& out_dir,
                    bool target = true);
PairSet cmd_pair(const RunConfig& config, const std::string& data_root, const std::string& out_file);

}  // namespace qf
