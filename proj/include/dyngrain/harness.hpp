#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>

#include "dyngrain/config.hpp"
#include "dyngrain/grained_coding.hpp"

namespace dyngrain {

/// Training images: the synthetic generator or a directory of square PNGs.
/// Images and entropy maps are computed on first use and cached.
class Dataset {
 public:
  explicit Dataset(const RunConfig& cfg);

  std::int64_t size() const { return size_; }
  std::int64_t image_size() const { return side_; }
  const Tensor& image(std::int64_t i);
  std::int64_t label(std::int64_t i);
  const EntropyMap& entropy(std::int64_t i);
  /// [B, H, W, 3] stack of the given images.
  Tensor batch(std::span<const std::int64_t> indices);

 private:
  void load(std::int64_t i);

  RunConfig cfg_;
  std::int64_t size_ = 0;
  std::int64_t side_ = 0;
  std::vector<std::filesystem::path> files_;
  std::vector<std::optional<Tensor>> images_;
  std::vector<std::int64_t> labels_;
  std::vector<std::optional<EntropyMap>> entropy_;
};

/// Directory layout of a run.
struct RunPaths {
  std::filesystem::path root;
  explicit RunPaths(const RunConfig& cfg) : root(cfg.out_dir) {}
  std::filesystem::path stage(const std::string& name) const { return root / name; }
  std::filesystem::path thresholds() const { return root / "calibrate" / "thresholds.json"; }
};

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// OS after every step. No-op outside glibc.
void configure_allocator();

/// Hash of the library sources this binary was built from.
std::string code_hash();

struct CalibrationResult {
  EntropyThresholds thresholds;
  double realized_fine_fraction = 0.0;
  std::int64_t regions = 0;
};

/// Pools the entropy maps of the first calibration_images images, writes
/// calibrate/thresholds.json and a resolved config with thresholds filled in.
CalibrationResult calibrate(const RunConfig& cfg, std::ostream* log = nullptr);

/// Thresholds from the config, else from a previous calibrate stage.
EntropyThresholds load_thresholds(const RunConfig& cfg, const std::string& needed_by);

GrainMap ground_truth_map(Dataset& data, std::int64_t index, const EntropyThresholds& th);

struct TrainOptions {
  /// Stop (after checkpointing) once this many steps are done, simulating an
  /// interrupted run. Negative means run to completion.
  int stop_after = -1;
  /// Ignore any existing checkpoint and start from step 0.
  bool fresh = false;
  int log_every = 50;
  std::ostream* log = nullptr;
};

struct StageResult {
  std::string stage;
  std::filesystem::path dir;
  int first_step = 0;  // > 0 when resumed
  int steps_done = 0;
  /// Primary loss per step, including steps replayed from the log on resume.
  std::vector<double> losses;
  nlohmann::ordered_json extra;
};

StageResult train_dvae(const RunConfig& cfg, const TrainOptions& opts = {});
StageResult train_grain(const RunConfig& cfg, const TrainOptions& opts = {});
StageResult train_content(const RunConfig& cfg, const TrainOptions& opts = {});

/// Relative drop of the last-`window` mean against the first-`window` mean.
double loss_drop(std::span<const double> losses, std::size_t window = 50);
double mean_of(std::span<const double> v);

enum class GrainSource { kModel, kGroundTruth, kRandom, kFixed };
GrainSource parse_grain_source(const std::string& name);
std::string to_string(GrainSource s);

/// i.i.d. per-region granularities drawn with the configured ratios.
GrainMap random_grain_map(const RunConfig& cfg, Rng& rng);

struct SampleRequest {
  int count = 4;
  std::optional<std::int64_t> class_id;
  GrainSource source = GrainSource::kModel;
  std::filesystem::path fixed_file;  // JSON grain map for kFixed
  /// Defaults to <out_dir>/samples.
  std::filesystem::path out;
  bool use_ema = true;
  std::ostream* log = nullptr;
};

struct SampleResult {
  std::vector<GrainMap> grains;
  std::vector<Tensor> images;  // [H, W, 3]
  std::vector<std::filesystem::path> files;
};

SampleResult sample_pipeline(const RunConfig& cfg, const SampleRequest& req);

/// Reconstruction MSE of the trained DVAE on the first `count` images under
/// all-fine, all-coarse, entropy-derived and random maps.
std::map<std::string, double> dvae_grain_ablation(const RunConfig& cfg, std::int64_t count);

}  // namespace dyngrain
