#pragma once

#include <json.hpp>
#include <optional>

#include "dyngrain/attention.hpp"
#include "dyngrain/grained_coding.hpp"

namespace dyngrain {

struct GrainPriorConfig {
  std::int64_t rows = 8;
  std::int64_t cols = 8;
  int levels = 2;
  std::int64_t hidden = 64;
  int depth = 2;
  std::int64_t heads = 4;
  std::int64_t mlp_ratio = 4;
  std::int64_t num_classes = 4;
  double class_dropout = 0.1;

  std::int64_t tokens() const { return rows * cols; }
  nlohmann::ordered_json to_json() const;
  static GrainPriorConfig from_json(const nlohmann::ordered_json& j);
  /// Named sizes: "toy" and "grain-s" (the DiT-S-sized prior).
  static GrainPriorConfig preset(const std::string& name);
};

/// Maps a grid of Gaussian noise tokens to per-region k-way grain logits.
class GrainPrior {
 public:
  GrainPrior(GrainPriorConfig cfg, Rng& rng);

  const GrainPriorConfig& config() const { return cfg_; }
  /// noise [B, N_p, d], classes (num_classes = unconditional) -> logits [B, N_p, k].
  Tensor forward(const Tensor& noise, std::span<const std::int64_t> classes) const;
  /// Fresh noise tokens for `batch` maps.
  Tensor draw_noise(std::int64_t batch, Rng& rng) const;
  NamedParams parameters() const;

 private:
  struct Block {
    Attention attn;
    Mlp mlp;
  };
  GrainPriorConfig cfg_;
  Linear token_in_;
  Tensor pos_embed_;
  Tensor class_embed_;  // [num_classes + 1, d], last row = null class
  std::vector<Block> blocks_;
  Linear head_;
};

/// Targets are grain indices (1..k) per region.
Tensor grain_ce_loss(const Tensor& logits, std::span<const GrainMap> targets);

/// Temperature 0: argmax with ties to the coarser index; otherwise a
/// categorical draw from softmax(logits / temperature). logits [N_p, k].
GrainMap sample_from_logits(std::span<const float> logits, std::int64_t rows, std::int64_t cols,
                            int levels, double temperature, Rng& rng);

GrainMap sample_grain_map(const GrainPrior& model, Rng& rng, std::optional<std::int64_t> class_id,
                          double temperature);

}  // namespace dyngrain
