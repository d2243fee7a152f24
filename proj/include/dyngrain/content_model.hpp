#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "dyngrain/attention.hpp"
#include "dyngrain/grained_coding.hpp"

namespace dyngrain {

/// Architecture of the multi-grained noise predictor (or, with
/// refine_layers = 0 and dynamic = false, of a plain single-patch DiT).
struct ModelConfig {
  std::string name = "toy";
  bool dynamic = true;
  int backbone_layers = 4;
  int refine_layers = 2;
  std::int64_t hidden = 128;
  std::int64_t heads = 4;
  std::int64_t mlp_ratio = 4;
  std::int64_t patch_large = 2;
  std::int64_t patch_small = 1;
  std::int64_t window = 4;
  std::int64_t latent_size = 16;  // fine grid side
  std::int64_t latent_channels = 4;
  std::int64_t num_classes = 4;
  int levels = 2;
  /// Output head also predicts a variance (DiT default), doubling channels.
  bool learn_sigma = false;
  std::int64_t frequency_dim = 256;

  int total_layers() const { return backbone_layers + refine_layers; }
  std::int64_t token_side() const { return latent_size / patch_large; }
  std::int64_t tokens() const { return token_side() * token_side(); }
  std::int64_t fine_cells() const { return latent_size * latent_size; }
  std::int64_t window_tokens() const { return window * window; }
  std::int64_t out_channels() const { return learn_sigma ? 2 * latent_channels : latent_channels; }
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::ordered_json& j);
  /// "toy", "dyn-b", "dyn-l", "dyn-xl", "dit-b2", "dit-b1", "dit-l2", ...
  static ModelConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

/// [B, H, W, C] -> [B, (H/P)(W/P), P*P*C], patch-major then row, col, channel.
Tensor patchify(const Tensor& z, std::int64_t patch);
Tensor unpatchify(const Tensor& tokens, std::int64_t patch, std::int64_t height, std::int64_t width,
                  std::int64_t channels);

/// Token order that groups an rows x cols grid into M x M windows, window-major.
std::vector<std::int64_t> window_order(std::int64_t rows, std::int64_t cols, std::int64_t window);
/// [B, rows*cols, d] -> [B * nW, M*M, d]
Tensor window_partition(const Tensor& x, std::int64_t rows, std::int64_t cols, std::int64_t window);
/// Inverse of window_partition.
Tensor window_reverse(const Tensor& windows, std::int64_t batch, std::int64_t rows,
                      std::int64_t cols, std::int64_t window);

/// Window attention: softmax(QK^T / sqrt(d_k) + B_r) V per window and head.
Tensor w_msa(const Tensor& windows, const Attention& attn, const Tensor& rel_bias);

/// Per-batch bookkeeping for splitting the fine grid between granularities.
/// Rows of the compact layout are [fine cells..., coarse regions...].
struct RoutingPlan {
  std::int64_t batch = 0;
  std::int64_t side = 0;      // fine grid side
  std::int64_t span = 0;      // fine cells per region side
  std::vector<std::int64_t> fine_cells;      // into [B * side * side]
  std::vector<std::int64_t> coarse_regions;  // into [B * regions]
  std::vector<std::int64_t> source;          // per fine-grid cell, row in the compact layout
  std::vector<int> write_count;              // per fine-grid cell

  static RoutingPlan build(std::span<const GrainMap> grains, std::int64_t side);
  std::int64_t regions_per_sample() const { return (side / span) * (side / span); }
};

/// eps1: coarse-head output at coarse regions [Nc, C]; eps2: fine-head
/// output at fine cells [Nf, C]. Either may be undefined when empty.
struct RoutedNoise {
  Tensor eps_coarse;
  Tensor eps_fine;
};

/// coarse [B, N, C] (one code per region) and fine [B, side, side, C].
RoutedNoise route(const Tensor& coarse, const Tensor& fine, const RoutingPlan& plan);

/// Fine-grid prediction: fine cells from eps_fine, coarse regions replicated.
Tensor combine(const Tensor& eps_coarse, const Tensor& eps_fine, const RoutingPlan& plan,
               std::int64_t channels);

/// alpha_i = 1 / (2^(k-i))^2 with i = 1 coarse ... k fine.
std::vector<double> granularity_weights(int levels);

/// sum_i alpha_i * mean over granularity-i cells of ||target - pred||^2.
/// Terms whose cell set is empty contribute nothing.
Tensor multi_grained_loss(const Tensor& target_coarse, const Tensor& pred_coarse,
                          const Tensor& target_fine, const Tensor& pred_fine);

struct AdaLnBlock {
  Attention attn;
  Mlp mlp;
  Linear modulation;  // d -> 6d, zero-initialised
  Tensor rel_bias;    // [N_w, N_w] for window blocks, undefined otherwise

  void collect(const std::string& prefix, NamedParams& out) const;
};

/// adaLN-Zero transformer block. With `window_rows` > 0 the attention runs
/// per window (tokens already in window order) with the learned bias.
Tensor adaln_block(const AdaLnBlock& blk, const Tensor& x, const Tensor& cond,
                   std::int64_t window_tokens = 0);

AdaLnBlock make_adaln_block(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio,
                            std::int64_t window_tokens, Rng& rng);

struct ContentOutput {
  Tensor eps;  // combined fine-grid prediction [B, side, side, C]
  Tensor eps_coarse;  // [Nc, C] at coarse regions
  Tensor eps_fine;    // [Nf, C] at fine cells, after refinement
  Tensor eps_fine_rough;  // [Nf, C] before refinement
  RoutingPlan plan;
};

class ContentModel {
 public:
  ContentModel(ModelConfig cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  ContentOutput forward(const Tensor& z_noised, std::span<const float> t,
                        std::span<const std::int64_t> classes,
                        std::span<const GrainMap> grains) const;
  NamedParams parameters() const;

  /// Exposed for tests of the individual stages.
  Tensor embed_condition(std::span<const float> t, std::span<const std::int64_t> classes,
                         const Tensor& grain_tokens) const;
  Tensor backbone(const Tensor& tokens, const Tensor& cond) const;
  Tensor refine(const Tensor& eps_fine_full, const Tensor& z_noised, const RoutingPlan& plan,
                const Tensor& cond) const;

 private:
  ModelConfig cfg_;
  Linear patch_embed_;
  Tensor pos_embed_;  // fixed sin-cos, not a parameter
  Tensor grain_embed_;
  Linear t_fc1_, t_fc2_;
  Tensor class_embed_;
  std::vector<AdaLnBlock> blocks_;
  Linear final_mod_;
  Linear coarse_head_, fine_head_;
  Linear refine_in_;
  Tensor refine_pos_;
  std::vector<AdaLnBlock> refine_blocks_;
  Linear refine_mod_;
  Linear refine_head_;
  std::vector<std::int64_t> window_perm_, window_inv_;
};

}  // namespace dyngrain
