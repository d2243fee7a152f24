#include <doctest.h>

#include <numeric>

#include "dyngrain/perf.hpp"

using namespace dyngrain;

TEST_CASE("omega formulas") {
  CHECK(omega_msa(1, 1, 1) == 6);
  CHECK(omega_msa(32, 32, 768) == 4026531840ULL);
  CHECK(omega_wmsa(32, 32, 768, 16) == 2818572288ULL);
  CHECK(omega_wmsa(32, 32, 768, 32) == omega_msa(32, 32, 768));
  CHECK(omega_wmsa(8, 8, 4, 8) == omega_msa(8, 8, 4));
  for (std::uint64_t m : {1, 2, 4, 8, 16, 32}) CHECK(omega_wmsa(32, 32, 64, m) <= omega_msa(32, 32, 64));
  // Doubling h: projection term doubles, attention term quadruples.
  const std::uint64_t h = 6, w = 5, c = 7;
  CHECK(omega_msa(2 * h, w, c) == 2 * 4 * h * w * c * c + 4 * 2 * (h * w) * (h * w) * c);
  CHECK_THROWS_AS(omega_wmsa(32, 32, 8, 5), ValueError);
  CHECK_THROWS_AS(omega_wmsa(32, 32, 8, 0), ValueError);
}

TEST_CASE("measured attention MACs match the formula terms") {
  struct Case {
    std::int64_t h, w, c, m, heads;
  };
  for (Case k : {Case{8, 8, 16, 4, 1}, Case{8, 8, 16, 8, 2}, Case{4, 8, 8, 2, 2}, Case{6, 6, 12, 3, 3},
                 Case{16, 16, 8, 4, 4}, Case{8, 4, 24, 4, 1}}) {
    auto got = measured_wmsa_macs(k.h, k.w, k.c, k.m, k.heads);
    const auto uh = static_cast<std::uint64_t>(k.h), uw = static_cast<std::uint64_t>(k.w);
    const auto uc = static_cast<std::uint64_t>(k.c), um = static_cast<std::uint64_t>(k.m);
    const std::uint64_t proj = 4 * uh * uw * uc * uc;
    CHECK(got.projections == proj);
    CHECK(got.attention() == omega_wmsa(uh, uw, uc, um) - proj);
    CHECK(got.score == got.value);
  }
  auto ex = measured_wmsa_macs(8, 8, 16, 4, 1);
  CHECK(ex.score == 16384);
  CHECK(ex.attention() == 32768);

  auto global = measured_wmsa_macs(8, 8, 16, 8, 2);
  CHECK(global.projections + global.attention() == omega_msa(8, 8, 16));

  auto wide = measured_wmsa_macs(8, 8, 32, 4, 1);
  CHECK(wide.attention() == 2 * ex.attention());
  CHECK(wide.projections == 4 * ex.projections);
}

TEST_CASE("analytic cost matches the constructed model") {
  ModelConfig small;
  small.backbone_layers = 2;
  small.refine_layers = 1;
  small.hidden = 32;
  small.heads = 2;
  small.latent_size = 8;
  small.window = 4;
  small.frequency_dim = 32;
  for (const ModelConfig& cfg : {ModelConfig::preset("toy"), small}) {
    Rng rng(1);
    ContentModel model(cfg, rng);
    auto cost = model_cost(cfg);
    CHECK(cost.params == static_cast<std::uint64_t>(count_parameters(model.parameters())));

    GrainMap g(cfg.token_side(), cfg.token_side(), 2);
    g.cells[0] = 1;
    const std::vector<GrainMap> grains{g};
    NoGradGuard ng;
    MacCounter counter;
    model.forward(randn({1, cfg.latent_size, cfg.latent_size, cfg.latent_channels}, rng),
                  std::vector<float>{5}, std::vector<std::int64_t>{1}, grains);
    CHECK(counter.total() == cost.flops);
    CHECK(counter.count_under("refine") > 0);
  }
}

TEST_CASE("cost breakdown sums to the totals") {
  for (const auto& name : ModelConfig::preset_names()) {
    auto cost = model_cost(ModelConfig::preset(name));
    std::uint64_t f = 0, p = 0;
    for (const auto& [k, v] : cost.breakdown) f += v;
    for (const auto& [k, v] : cost.param_breakdown) p += v;
    CHECK(f == cost.flops);
    CHECK(p == cost.params);
  }
}

TEST_CASE("reference configurations") {
  const auto rows = reference_rows();
  CHECK(std::count_if(rows.begin(), rows.end(), [](const ReferenceRow& r) { return r.gated; }) == 6);
  for (const auto& row : rows) {
    auto c = check_row(row);
    INFO(row.preset, " params ", c.params_error, " flops ", c.flops_error);
    CHECK(c.params_ok);
  }
  // Fixed-patch transformers reproduce to well under a percent.
  for (const char* p : {"dit-b2", "dit-l2", "dit-xl2"}) {
    auto c = check_row(*std::find_if(rows.begin(), rows.end(), [&](auto& r) { return r.preset == p; }));
    CHECK(std::abs(c.flops_error) < 0.001);
  }
  // Frozen analytic totals for the dynamic presets.
  CHECK(model_cost(ModelConfig::preset("dyn-b")).flops == 34488975360ULL);
  CHECK(model_cost(ModelConfig::preset("dyn-l")).flops == 120974475264ULL);
  CHECK(model_cost(ModelConfig::preset("dyn-xl")).flops == 194736144384ULL);
  CHECK(model_cost(ModelConfig::preset("dyn-b")).params == 132416792ULL);
}
