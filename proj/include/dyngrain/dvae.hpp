#pragma once

#include <json.hpp>
#include <vector>

#include "dyngrain/grained_coding.hpp"
#include "dyngrain/nn.hpp"

namespace dyngrain {

/// Downsampling factors f_1 < ... < f_k plus the latent channel count.
/// Factors must be powers of two so every level is reached by stride-2 steps.
struct FactorLadder {
  std::vector<int> factors{4, 8};
  std::int64_t latent_channels = 4;

  int levels() const { return static_cast<int>(factors.size()); }
  int finest() const { return factors.front(); }
  int coarsest() const { return factors.back(); }
  /// Throws unless the ladder is valid for an image of this size.
  void validate(std::int64_t height, std::int64_t width) const;
  void validate() const;
};

struct DvaeConfig {
  std::int64_t image_size = 64;
  FactorLadder ladder;
  std::int64_t base_channels = 32;
  int res_blocks = 2;
  /// Feed a one-hot grain map to the decoder alongside the mixture.
  bool decoder_grain_input = false;
  double kl_weight = 1e-6;

  nlohmann::ordered_json to_json() const;
  static DvaeConfig from_json(const nlohmann::ordered_json& j);
};

/// Per-level Gaussian posteriors, each [B, H/f_i, W/f_i, n_z].
struct HierarchicalLatents {
  std::vector<Tensor> mean;
  std::vector<Tensor> logvar;
};

/// z = mean + exp(logvar / 2) * eta. `deterministic` returns the mean.
Tensor reparameterize(const Tensor& mean, const Tensor& logvar, Rng& rng,
                      bool deterministic = false);

/// For every finest-grid cell, the flat row it reads from in the
/// concatenation [level 1 cells, level 2 cells, ...] of one sample.
std::vector<std::int64_t> mixture_sources(const GrainMap& grain, const FactorLadder& ladder,
                                          std::int64_t height, std::int64_t width);

/// Finest-grid latent where coarse regions hold their own code replicated
/// over their footprint. `levels[i]` is [B, H/f_i, W/f_i, n_z].
Tensor mix_latents(const std::vector<Tensor>& levels, std::span<const GrainMap> grains,
                   const FactorLadder& ladder);

/// Flat per-sample indices (into the same concatenation) of every latent
/// cell actually selected by the grain map.
std::vector<std::int64_t> used_cells(const GrainMap& grain, const FactorLadder& ladder,
                                     std::int64_t height, std::int64_t width);

/// Mean over used cells of 0.5 * sum_c (mu^2 + e^lv - 1 - lv).
Tensor kl_used_cells(const HierarchicalLatents& lat, std::span<const GrainMap> grains,
                     const FactorLadder& ladder);

/// MSE(image, recon) + kl_weight * KL over used cells.
Tensor dvae_loss(const Tensor& image, const Tensor& recon, const HierarchicalLatents& lat,
                 std::span<const GrainMap> grains, const FactorLadder& ladder, double kl_weight);

/// Nearest-neighbour upsampling of [B, H, W, C] by an integer factor.
Tensor upsample_nearest(const Tensor& x, std::int64_t factor);

/// One-hot grain channels at the finest latent resolution, [B, H/f_1, W/f_1, k].
Tensor grain_one_hot(std::span<const GrainMap> grains, const FactorLadder& ladder);

struct ResBlock {
  Conv2d conv1, conv2;
  ResBlock() = default;
  ResBlock(std::int64_t channels, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedParams& out) const;
};

class Dvae {
 public:
  Dvae(DvaeConfig cfg, Rng& rng);

  const DvaeConfig& config() const { return cfg_; }
  HierarchicalLatents encode(const Tensor& images) const;
  /// `grains` is only consulted when the decoder takes grain input.
  Tensor decode(const Tensor& mixture, std::span<const GrainMap> grains) const;
  NamedParams parameters() const;

 private:
  struct Level {
    std::vector<ResBlock> blocks;
    std::vector<Conv2d> down;
    Conv2d head;
  };
  struct UpStage {
    std::vector<ResBlock> blocks;
    Conv2d conv;  // applied after the 2x upsample
  };

  DvaeConfig cfg_;
  Conv2d stem_;
  std::vector<Conv2d> trunk_;
  std::vector<Level> levels_;
  Conv2d dec_in_;
  std::vector<UpStage> up_;
  Conv2d dec_out_;
};

}  // namespace dyngrain
