#include "dyngrain/oracles.hpp"

#include <cmath>

namespace dyngrain::oracle {

EntropyMap naive_entropy_map(const Tensor& gray, std::int64_t s, double sigma) {
  const std::int64_t h = gray.dim(0), w = gray.dim(1);
  const std::int64_t p = s * s;
  EntropyMap em{h / s, w / s, {}};
  for (std::int64_t r = 0; r < em.rows; ++r) {
    for (std::int64_t c = 0; c < em.cols; ++c) {
      double entropy = 0.0;
      for (std::int64_t j = 0; j < p; ++j) {
        const double b = static_cast<double>(j) / static_cast<double>(p - 1);
        double acc = 0.0;
        for (std::int64_t y = 0; y < s; ++y) {
          for (std::int64_t x = 0; x < s; ++x) {
            const double v = gray[(r * s + y) * w + c * s + x];
            acc += std::exp(-0.5 * ((v - b) / sigma) * ((v - b) / sigma));
          }
        }
        const double pdf = acc / static_cast<double>(p);
        if (pdf > 0.0) entropy -= pdf * std::log(pdf);
      }
      em.values.push_back(entropy);
    }
  }
  return em;
}

}  // namespace dyngrain::oracle
