#include "dyngrain/perf.hpp"

#include <cmath>

namespace dyngrain {

std::uint64_t omega_msa(std::uint64_t h, std::uint64_t w, std::uint64_t c) {
  const std::uint64_t n = h * w;
  return 4 * n * c * c + 2 * n * n * c;
}

std::uint64_t omega_wmsa(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t m) {
  if (m == 0 || h % m != 0 || w % m != 0) {
    throw ValueError("window " + std::to_string(m) + " does not divide " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  const std::uint64_t n = h * w;
  return 4 * n * c * c + 2 * m * m * n * c;
}

namespace {

struct Tally {
  CostReport& r;
  void flops(const std::string& key, std::uint64_t v) {
    r.breakdown[key] += v;
    r.flops += v;
  }
  void params(const std::string& key, std::uint64_t v) {
    r.param_breakdown[key] += v;
    r.params += v;
  }
};

std::uint64_t block_params(std::uint64_t d, std::uint64_t ratio) {
  const std::uint64_t attn = 3 * d * d + 3 * d + d * d + d;
  const std::uint64_t mlp = 2 * ratio * d * d + ratio * d + d;
  return attn + mlp + 6 * d * d + 6 * d;
}

}  // namespace

CostReport model_cost(const ModelConfig& cfg) {
  cfg.validate();
  CostReport r;
  r.name = cfg.name;
  Tally t{r};
  const std::uint64_t d = cfg.hidden, c = cfg.latent_channels, ratio = cfg.mlp_ratio;
  const std::uint64_t p2 = cfg.patch_large * cfg.patch_large;
  const std::uint64_t side = cfg.token_side(), n = cfg.tokens();
  const std::uint64_t freq = cfg.frequency_dim;

  t.params("embed", p2 * c * d + d);
  t.params("embed", freq * d + d + d * d + d);
  t.params("embed", (cfg.num_classes + 1) * d);
  t.flops("patchify", n * p2 * c * d);
  t.flops("embed", freq * d + d * d);

  for (int i = 0; i < cfg.backbone_layers; ++i) {
    t.params("blocks", block_params(d, ratio));
    t.flops("adaln", 6 * d * d);
    t.flops("attention", omega_msa(side, side, d));
    t.flops("mlp", 2 * n * ratio * d * d);
  }

  if (!cfg.dynamic) {
    const std::uint64_t out = p2 * cfg.out_channels();
    t.params("heads", 2 * d * d + 2 * d + d * out + out);
    t.flops("adaln", 2 * d * d);
    t.flops("heads", n * d * out);
    return r;
  }

  // Router: shared final modulation, then a coarse and a fine head.
  t.params("embed", cfg.levels * d);
  t.params("heads", 2 * d * d + 2 * d + d * c + c + d * p2 * c + p2 * c);
  t.flops("adaln", 2 * d * d);
  t.flops("heads", n * d * c + n * d * p2 * c);

  const std::uint64_t cells = cfg.fine_cells(), fs = cfg.latent_size;
  const std::uint64_t nw = cfg.window_tokens();
  t.params("refine", 2 * c * d + d + cells * d);
  t.flops("patchify", cells * 2 * c * d);
  for (int i = 0; i < cfg.refine_layers; ++i) {
    t.params("refine", block_params(d, ratio) + nw * nw);
    t.flops("adaln", 6 * d * d);
    t.flops("attention", omega_wmsa(fs, fs, d, cfg.window));
    t.flops("mlp", 2 * cells * ratio * d * d);
  }
  t.params("heads", 2 * d * d + 2 * d + d * c + c);
  t.flops("adaln", 2 * d * d);
  t.flops("heads", cells * d * c);
  return r;
}

std::vector<ReferenceRow> reference_rows() {
  return {
      {"DiT", "dit-b2", "12", "2", 130, 23.01, true},
      {"DiT", "dit-b1", "12", "1", 130, 87.07, false},
      {"Dynamic", "dyn-b", "10+2", "2 & 1", 136, 35.93, true},
      {"DiT", "dit-l2", "24", "2", 458, 80.71, true},
      {"DiT", "dit-l1", "24", "1", 457, 309.51, false},
      {"Dynamic", "dyn-l", "20+4", "2 & 1", 467, 102.25, true},
      {"DiT", "dit-xl2", "28", "2", 675, 118.64, true},
      {"DiT", "dit-xl1", "28", "1", 674, 456.98, false},
      {"Dynamic", "dyn-xl", "22+6", "2 & 1", 687, 145.60, true},
  };
}

RowCheck check_row(const ReferenceRow& row, double params_tol, double flops_tol) {
  RowCheck out{row, model_cost(ModelConfig::preset(row.preset)), 0, 0, false, false};
  out.params_error = static_cast<double>(out.cost.params) / (row.params_m * 1e6) - 1.0;
  out.flops_error = static_cast<double>(out.cost.flops) / (row.gflops * 1e9) - 1.0;
  out.params_ok = std::abs(out.params_error) <= params_tol;
  out.flops_ok = std::abs(out.flops_error) <= flops_tol;
  return out;
}

AttentionMacs measured_wmsa_macs(std::int64_t h, std::int64_t w, std::int64_t c, std::int64_t m,
                                 std::int64_t heads, std::uint64_t seed) {
  Rng rng(seed, stream_id("measured-macs"));
  Attention attn(c, heads, rng);
  const Tensor x = randn({1, h * w, c}, rng);
  const Tensor bias({m * m, m * m});
  NoGradGuard no_grad;
  MacCounter counter;
  w_msa(window_partition(x, h, w, m), attn, bias);
  AttentionMacs out;
  out.projections = counter.count("attn.qkv") + counter.count("attn.proj");
  out.score = counter.count("attn.score");
  out.value = counter.count("attn.value");
  return out;
}

}  // namespace dyngrain
