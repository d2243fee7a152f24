#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dyngrain/content_model.hpp"

namespace dyngrain {

/// 4hwC^2 + 2(hw)^2 C
std::uint64_t omega_msa(std::uint64_t h, std::uint64_t w, std::uint64_t c);
/// 4hwC^2 + 2 M^2 hwC; M must divide h and w.
std::uint64_t omega_wmsa(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t m);

/// Costs are counted in multiply-accumulates, the unit the Omega formulas
/// and the reference table use, at batch 1.
struct CostReport {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::map<std::string, std::uint64_t> breakdown;  // sums to flops
  std::map<std::string, std::uint64_t> param_breakdown;  // sums to params
};

/// Analytic parameter and compute count for the network a config describes.
/// Dynamic configs match ContentModel exactly; the others follow a plain DiT
/// (patch embed, adaLN-Zero blocks, final layer with learned variance).
CostReport model_cost(const ModelConfig& cfg);

struct ReferenceRow {
  std::string method;
  std::string preset;
  std::string layers;
  std::string patch;
  double params_m;
  double gflops;
  bool gated;  // part of the acceptance set
};

/// The published configuration comparison at latent 32x32x4.
std::vector<ReferenceRow> reference_rows();

struct RowCheck {
  ReferenceRow ref;
  CostReport cost;
  double params_error;  // relative
  double flops_error;
  bool params_ok;
  bool flops_ok;
};

RowCheck check_row(const ReferenceRow& row, double params_tol = 0.03, double flops_tol = 0.10);

struct AttentionMacs {
  std::uint64_t projections = 0;  // qkv + output projection
  std::uint64_t score = 0;        // Q K^T
  std::uint64_t value = 0;        // softmax(.) V
  std::uint64_t attention() const { return score + value; }
};

/// Runs one real window-attention forward on an h x w grid of width c under
/// the MAC counter and reports what it counted.
AttentionMacs measured_wmsa_macs(std::int64_t h, std::int64_t w, std::int64_t c, std::int64_t m,
                                 std::int64_t heads, std::uint64_t seed = 0);

}  // namespace dyngrain
