#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dyngrain/content_model.hpp"
#include "dyngrain/dvae.hpp"
#include "dyngrain/grain_prior.hpp"
#include "dyngrain/synthetic.hpp"

namespace dyngrain {

/// Invalid configuration or a missing prerequisite artifact.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageOptions {
  int steps = 0;
  int batch = 1;
  AdamOptions adam;
  /// 0 disables intermediate checkpoints; the final step is always saved.
  int checkpoint_every = 0;

  nlohmann::ordered_json to_json() const;
  static StageOptions from_json(const nlohmann::ordered_json& j, const StageOptions& defaults);
};

/// Everything one run needs, echoed verbatim into every stage directory.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/toy";
  SyntheticSpec data;
  /// Directory of square PNGs used instead of synthetic data when non-empty.
  std::string corpus_dir;
  /// Images pooled for threshold calibration (a prefix of the dataset).
  std::int64_t calibration_images = 256;
  /// Target fraction per granularity, finest first.
  std::vector<double> ratios{0.5, 0.5};
  /// Filled by calibration; empty until then. Infinite cut points are
  /// written as the strings "inf" / "-inf".
  std::vector<double> thresholds;
  DvaeConfig dvae;
  GrainPriorConfig grain;
  ModelConfig model;
  StageOptions dvae_train;
  StageOptions grain_train;
  StageOptions content_train;
  double ema_decay = 0.9999;
  double class_dropout = 0.1;
  int diffusion_steps = 1000;
  int sample_steps = 250;
  double guidance = 1.0;
  double temperature = 1.0;

  /// Desk-scale defaults every other config is layered on.
  static RunConfig toy();
  /// Keys absent from `j` keep their toy defaults; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::ordered_json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;
  void validate() const;
  std::int64_t region_size() const { return dvae.ladder.coarsest(); }
  std::int64_t num_classes() const { return corpus_dir.empty() ? data.num_classes : 1; }
};

/// 64-bit FNV-1a of the config's canonical JSON, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);
std::string fnv1a_hex(std::string_view bytes);

}  // namespace dyngrain
