#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dyngrain/ops.hpp"
#include "dyngrain/rng.hpp"

namespace dyngrain {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

std::int64_t count_parameters(const NamedParams& params);

enum class Init { kXavier, kZero, kNormal002 };

/// Creates a learnable tensor.
Tensor make_param(Shape shape, Init init, Rng& rng, std::int64_t fan_in = 0,
                  std::int64_t fan_out = 0);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, Init init = Init::kXavier);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, NamedParams& out) const;
  std::int64_t in_features() const { return weight.dim(0); }
  std::int64_t out_features() const { return weight.dim(1); }
};

struct Conv2d {
  Tensor weight;  // [k, k, in, out]
  Tensor bias;
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride, int padding, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// Sinusoidal embedding of (possibly fractional) timesteps, [B] -> [B, dim].
Tensor timestep_embedding(std::span<const float> t, std::int64_t dim, float max_period = 10000.0f);

/// Fixed 2-D sin-cos position table for a rows x cols grid, [rows*cols, dim].
Tensor sincos_pos_embed_2d(std::int64_t dim, std::int64_t rows, std::int64_t cols);

/// DiT's modulate: x * (1 + scale) + shift with per-sample [B, d] scale/shift
/// broadcast over the token axis of x [B, N, d].
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale);

/// Repeats a [B, d] tensor to [B, N, d].
Tensor repeat_tokens(const Tensor& v, std::int64_t n);

/// Writes params as a GFT1 list plus a JSON manifest echoing `config_json`.
void save_checkpoint(const std::filesystem::path& dir, const std::string& name,
                     const NamedParams& params, const std::string& config_json);
/// Loads values into `params` in place; names and shapes must match.
void load_checkpoint(const std::filesystem::path& dir, const std::string& name,
                     NamedParams& params);
/// The config echo stored alongside a checkpoint.
std::string checkpoint_config(const std::filesystem::path& dir, const std::string& name);

struct AdamOptions {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
  bool decoupled = true;  // AdamW when true
};

class Adam {
 public:
  Adam(NamedParams params, AdamOptions opts);
  void zero_grad();
  void step();
  std::int64_t steps() const { return t_; }
  AdamOptions& options() { return opts_; }
  /// Moment buffers, for checkpointing: [m..., v...].
  std::vector<Tensor> state() const;
  void load_state(const std::vector<Tensor>& state, std::int64_t steps);

 private:
  NamedParams params_;
  AdamOptions opts_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace dyngrain
