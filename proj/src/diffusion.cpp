#include "dyngrain/diffusion.hpp"

#include <cmath>

namespace dyngrain {

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_start, double beta_end,
                                            int sample_count) {
  if (steps < 2) throw ValueError("a schedule needs at least two steps");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw ValueError("betas must satisfy 0 < start < end < 1");
  }
  DiffusionSchedule s;
  s.steps = steps;
  double abar = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double b = t == steps - 1 ? beta_end
                                    : beta_start + (beta_end - beta_start) * t / (steps - 1);
    s.betas.push_back(b);
    s.alphas.push_back(1.0 - b);
    abar *= 1.0 - b;
    s.alpha_bars.push_back(abar);
  }
  s.set_sample_count(sample_count);
  return s;
}

void DiffusionSchedule::set_sample_count(int n) {
  if (n < 2 || n > steps) {
    throw ValueError("sample count " + std::to_string(n) + " must lie in [2, " +
                     std::to_string(steps) + "]");
  }
  sample_steps.clear();
  for (int i = 0; i < n; ++i) {
    sample_steps.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (steps - 1) / (n - 1))));
  }
}

NoisedLatent structured_noise(std::span<const GrainMap> grains, std::int64_t side,
                              std::int64_t channels, Rng& rng) {
  NoisedLatent n;
  n.plan = RoutingPlan::build(grains, side);
  const auto nf = static_cast<std::int64_t>(n.plan.fine_cells.size());
  const auto nc = static_cast<std::int64_t>(n.plan.coarse_regions.size());
  if (nf > 0) n.eps_fine = randn({nf, channels}, rng);
  if (nc > 0) n.eps_coarse = randn({nc, channels}, rng);
  n.eps = combine(n.eps_coarse, n.eps_fine, n.plan, channels);
  return n;
}

NoisedLatent q_sample(const Tensor& z0, std::span<const int> t, std::span<const GrainMap> grains,
                      const DiffusionSchedule& schedule, Rng& rng) {
  if (z0.rank() != 4 || z0.dim(1) != z0.dim(2)) {
    throw ShapeError("q_sample expects a square [B, side, side, C] latent, got " + to_string(z0.shape()));
  }
  const std::int64_t b = z0.dim(0), cells = z0.numel() / b;
  if (static_cast<std::int64_t>(t.size()) != b) throw ShapeError("one timestep per sample required");
  for (int ti : t) {
    if (ti < 0 || ti >= schedule.steps) {
      throw ValueError("timestep " + std::to_string(ti) + " outside [0, " +
                       std::to_string(schedule.steps) + ")");
    }
  }
  NoisedLatent n = structured_noise(grains, z0.dim(1), z0.dim(3), rng);
  Tensor zt(z0.shape());
  auto out = zt.mutable_data();
  const auto x = z0.data(), e = n.eps.data();
  for (std::int64_t i = 0; i < b; ++i) {
    const double ab = schedule.alpha_bars[t[i]];
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    for (std::int64_t j = i * cells; j < (i + 1) * cells; ++j) {
      out[j] = static_cast<float>(a * x[j] + s * e[j]);
    }
  }
  n.z_t = zt;
  return n;
}

Denoiser as_denoiser(const ContentModel& model) {
  return [&model](const Tensor& z, std::span<const float> t, std::span<const std::int64_t> y,
                  std::span<const GrainMap> g) { return model.forward(z, t, y, g).eps; };
}

Tensor guided_eps(const Denoiser& model, const Tensor& z_t, int t,
                  std::span<const std::int64_t> classes, std::span<const GrainMap> grains,
                  double guidance, std::int64_t null_class) {
  const std::int64_t b = z_t.dim(0);
  if (guidance == 1.0) {
    const std::vector<float> ts(static_cast<std::size_t>(b), static_cast<float>(t));
    return model(z_t, ts, classes, grains);
  }
  // Conditional and unconditional halves share one batched call.
  const std::vector<float> ts(static_cast<std::size_t>(2 * b), static_cast<float>(t));
  std::vector<std::int64_t> ys(classes.begin(), classes.end());
  ys.resize(static_cast<std::size_t>(2 * b), null_class);
  std::vector<GrainMap> gs(grains.begin(), grains.end());
  gs.insert(gs.end(), grains.begin(), grains.end());
  const Tensor both = model(concat({z_t, z_t}, 0), ts, ys, gs);
  const auto d = both.data();
  const std::int64_t half = z_t.numel();
  Tensor out(z_t.shape());
  auto o = out.mutable_data();
  for (std::int64_t i = 0; i < half; ++i) {
    const double c = d[i], u = d[half + i];
    o[i] = static_cast<float>(u + guidance * (c - u));
  }
  return out;
}

Tensor p_sample_step(const Denoiser& model, const Tensor& z_t, int t, int t_prev,
                     std::span<const std::int64_t> classes, std::span<const GrainMap> grains,
                     const DiffusionSchedule& schedule, double guidance, std::int64_t null_class,
                     Rng& rng) {
  if (t < 0 || t >= schedule.steps || t_prev >= t || t_prev < -1) {
    throw ValueError("invalid sampling step pair (" + std::to_string(t) + " -> " +
                     std::to_string(t_prev) + ")");
  }
  NoGradGuard no_grad;
  const Tensor eps = guided_eps(model, z_t, t, classes, grains, guidance, null_class);
  const double ab = schedule.alpha_bars[t];
  const double ab_prev = t_prev >= 0 ? schedule.alpha_bars[t_prev] : 1.0;
  // Strided coefficients: the effective beta spans the skipped steps.
  const double beta = 1.0 - ab / ab_prev;
  const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double c_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
  const double var = t_prev >= 0 ? beta * (1.0 - ab_prev) / (1.0 - ab) : 0.0;

  Tensor noise;
  if (var > 0.0) noise = structured_noise(grains, z_t.dim(1), z_t.dim(3), rng).eps;
  Tensor out(z_t.shape());
  auto o = out.mutable_data();
  const auto x = z_t.data(), e = eps.data();
  const double sd = std::sqrt(var);
  for (std::int64_t i = 0; i < z_t.numel(); ++i) {
    const double x0 = (x[i] - std::sqrt(1.0 - ab) * e[i]) / std::sqrt(ab);
    double v = c_x0 * x0 + c_xt * x[i];
    if (var > 0.0) v += sd * noise[i];
    o[i] = static_cast<float>(v);
  }
  return out;
}

Tensor sample(const Denoiser& model, std::span<const GrainMap> grains,
              std::span<const std::int64_t> classes, std::int64_t side, std::int64_t channels,
              const DiffusionSchedule& schedule, double guidance, std::int64_t null_class, Rng& rng,
              const SampleObserver& observer) {
  if (classes.size() != grains.size()) throw ShapeError("one class per grain map required");
  Tensor z = structured_noise(grains, side, channels, rng).eps;
  const auto& steps = schedule.sample_steps;
  for (auto i = static_cast<std::ptrdiff_t>(steps.size()) - 1; i >= 0; --i) {
    const int t = steps[i];
    const int t_prev = i > 0 ? steps[i - 1] : -1;
    z = p_sample_step(model, z, t, t_prev, classes, grains, schedule, guidance, null_class, rng);
    if (observer) observer(t_prev, z);
  }
  return z;
}

Ema::Ema(const NamedParams& live, double decay) : decay_(decay) {
  if (decay < 0.0 || decay > 1.0) throw ValueError("EMA decay must lie in [0, 1]");
  for (const auto& [name, p] : live) shadow_.emplace_back(name, p.clone());
}

void Ema::check(const NamedParams& live) const {
  if (live.size() != shadow_.size()) throw ShapeError("EMA parameter count mismatch");
  for (std::size_t i = 0; i < live.size(); ++i) {
    if (live[i].first != shadow_[i].first || live[i].second.shape() != shadow_[i].second.shape()) {
      throw ShapeError("EMA parameter '" + live[i].first + "' does not match shadow '" +
                       shadow_[i].first + "'");
    }
  }
}

void Ema::update(const NamedParams& live) {
  check(live);
  for (std::size_t i = 0; i < live.size(); ++i) {
    auto s = shadow_[i].second.mutable_data();
    const auto l = live[i].second.data();
    for (std::size_t j = 0; j < s.size(); ++j) {
      s[j] = static_cast<float>(decay_ * s[j] + (1.0 - decay_) * l[j]);
    }
  }
}

void Ema::swap(const NamedParams& live) {
  check(live);
  for (std::size_t i = 0; i < live.size(); ++i) {
    Tensor lt = live[i].second;
    auto s = shadow_[i].second.mutable_data();
    auto l = lt.mutable_data();
    std::swap_ranges(s.begin(), s.end(), l.begin());
  }
}

}  // namespace dyngrain
