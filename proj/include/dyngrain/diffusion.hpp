#pragma once

#include <functional>
#include <optional>

#include "dyngrain/content_model.hpp"

namespace dyngrain {

struct DiffusionSchedule {
  int steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  /// Ascending timesteps visited by the sampler, first 0 and last steps - 1.
  std::vector<int> sample_steps;

  /// Linear betas from beta_start to beta_end inclusive, sampling on
  /// round(i * (T - 1) / (n - 1)) for i = 0 .. n - 1.
  static DiffusionSchedule linear(int steps = 1000, double beta_start = 1e-4,
                                  double beta_end = 2e-2, int sample_count = 250);
  void set_sample_count(int n);
};

/// A noised fine-grid latent together with the per-granularity noise that made it.
struct NoisedLatent {
  Tensor z_t;         // [B, side, side, C]
  Tensor eps;         // [B, side, side, C], coarse regions replicated
  Tensor eps_coarse;  // [Nc, C], undefined when no coarse regions
  Tensor eps_fine;    // [Nf, C], undefined when no fine cells
  RoutingPlan plan;
};

/// Gaussian noise drawn once per coarse region and once per fine cell, then
/// laid out on the fine grid.
NoisedLatent structured_noise(std::span<const GrainMap> grains, std::int64_t side,
                              std::int64_t channels, Rng& rng);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps with structured eps.
NoisedLatent q_sample(const Tensor& z0, std::span<const int> t, std::span<const GrainMap> grains,
                      const DiffusionSchedule& schedule, Rng& rng);

/// Noise predictor: (z_t, timesteps, classes, grains) -> eps, [B, side, side, C].
using Denoiser = std::function<Tensor(const Tensor&, std::span<const float>,
                                      std::span<const std::int64_t>, std::span<const GrainMap>)>;

Denoiser as_denoiser(const ContentModel& model);

/// eps_u + s (eps_c - eps_u), with eps_u from the null class. s == 1 runs
/// the conditional branch only.
Tensor guided_eps(const Denoiser& model, const Tensor& z_t, int t,
                  std::span<const std::int64_t> classes, std::span<const GrainMap> grains,
                  double guidance, std::int64_t null_class);

/// One strided ancestral step from t to t_prev (t_prev = -1 means the final
/// step to the data, which adds no noise).
Tensor p_sample_step(const Denoiser& model, const Tensor& z_t, int t, int t_prev,
                     std::span<const std::int64_t> classes, std::span<const GrainMap> grains,
                     const DiffusionSchedule& schedule, double guidance, std::int64_t null_class,
                     Rng& rng);

/// Called after each step with the remaining timestep and the current latent.
using SampleObserver = std::function<void(int, const Tensor&)>;

/// Runs the full strided chain from structured pure noise.
Tensor sample(const Denoiser& model, std::span<const GrainMap> grains,
              std::span<const std::int64_t> classes, std::int64_t side, std::int64_t channels,
              const DiffusionSchedule& schedule, double guidance, std::int64_t null_class, Rng& rng,
              const SampleObserver& observer = {});

/// Exponential moving average of a parameter set.
class Ema {
 public:
  Ema(const NamedParams& live, double decay = 0.9999);
  void update(const NamedParams& live);
  /// Exchanges live values with the shadow; calling twice restores both.
  void swap(const NamedParams& live);
  const NamedParams& shadow() const { return shadow_; }
  NamedParams& shadow() { return shadow_; }
  double decay() const { return decay_; }

 private:
  void check(const NamedParams& live) const;
  NamedParams shadow_;
  double decay_;
};

}  // namespace dyngrain
