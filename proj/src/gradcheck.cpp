#include "dyngrain/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dyngrain/ops.hpp"
#include "dyngrain/rng.hpp"

namespace dyngrain {

namespace {
constexpr double kUnitRoundoff = 5.960464477539063e-08;  // 2^-24
}  // namespace

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, GradCheckOptions opts) {
  Tape::active().clear();
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  // Non-scalar outputs are contracted with fixed random weights; the numeric
  // side applies the same contraction in double so each output element's
  // difference is taken before any large sums can swamp it.
  Tensor out = fn(inputs);
  Tensor weights;
  if (out.numel() == 1) {
    weights = Tensor::ones(out.shape());
    backward(out);
  } else {
    Rng rng(opts.seed, stream_id("gradcheck"));
    weights = randn(out.shape(), rng);
    backward(sum(mul(out, weights)));
  }
  std::vector<std::vector<float>> analytic;
  double scale = 0.0;
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
    }
    for (float g : analytic.back()) scale = std::max(scale, static_cast<double>(std::abs(g)));
  }
  const double floor = opts.floor * std::max(scale, opts.min_scale);

  GradCheckResult res;
  NoGradGuard no_grad;
  const auto w = weights.data();
  auto eval = [&] { return fn(inputs); };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    const auto n = static_cast<std::int64_t>(data.size());
    std::int64_t stride = 1;
    if (opts.max_elements > 0 && n > opts.max_elements) stride = n / opts.max_elements;
    for (std::int64_t i = 0; i < n; i += stride) {
      const float orig = data[i];
      const float hi = orig + opts.step;
      const float lo = orig - opts.step;
      data[i] = hi;
      const Tensor up = eval();
      data[i] = lo;
      const Tensor down = eval();
      data[i] = orig;
      // The realised step after float rounding, not the nominal one.
      const double h = static_cast<double>(hi) - static_cast<double>(lo);
      double numeric = 0.0;
      double noise = 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double u = up.data()[j], d = down.data()[j], wj = w[j];
        numeric += wj * (u - d);
        const double ulp = kUnitRoundoff * std::max(std::abs(u), std::abs(d));
        noise += wj * wj * ulp * ulp;
      }
      numeric /= h;
      // Rounding in the f32 forward pass alone can move the quotient by about
      // this much; entries smaller than noise / tol are judged at that scale.
      const double noise_floor = opts.rounding_margin * std::sqrt(noise) / h / opts.tol;
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor, noise_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        std::ostringstream os;
        os << "input[" << k << "] elem " << i << ": analytic " << a << " vs numeric " << numeric;
        res.worst = os.str();
      }
    }
  }
  return res;
}

}  // namespace dyngrain
