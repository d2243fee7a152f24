#include <doctest.h>

#include <cmath>

#include "dyngrain/content_model.hpp"
#include "dyngrain/gradcheck.hpp"

using namespace dyngrain;

namespace {

GrainMap random_map(Rng& rng, std::int64_t side) {
  GrainMap g(side, side, 1);
  for (auto& c : g.cells) c = 1 + static_cast<int>(rng.below(2));
  return g;
}

ModelConfig tiny() {
  ModelConfig c;
  c.backbone_layers = 1;
  c.refine_layers = 1;
  c.hidden = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.latent_size = 8;
  c.window = 4;
  c.num_classes = 3;
  c.frequency_dim = 16;
  return c;
}

void randomize(const NamedParams& params, Rng& rng, float scale = 0.2f) {
  for (auto& [name, p] : params) {
    Tensor t = p;
    for (auto& v : t.mutable_data()) v = rng.normal() * scale;
  }
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::int64_t analytic_params(const ModelConfig& c) {
  const std::int64_t d = c.hidden, ch = c.latent_channels, p2 = c.patch_large * c.patch_large;
  const std::int64_t block = 3 * d * d + 3 * d + d * d + d + 2 * c.mlp_ratio * d * d +
                             c.mlp_ratio * d + d + 6 * d * d + 6 * d;
  std::int64_t n = p2 * ch * d + d;                       // patch embed
  n += c.levels * d;                                      // grain embed
  n += c.frequency_dim * d + d + d * d + d;               // timestep MLP
  n += (c.num_classes + 1) * d;                           // class table with null
  n += c.backbone_layers * block;
  n += 2 * d * d + 2 * d + d * ch + ch + d * p2 * ch + p2 * ch;  // router
  n += 2 * ch * d + d + c.fine_cells() * d;
  n += c.refine_layers * (block + c.window_tokens() * c.window_tokens());
  n += 2 * d * d + 2 * d + d * ch + ch;
  return n;
}

}  // namespace

TEST_CASE("patchify token counts and round trip") {
  Rng rng(1);
  Tensor z = randn({2, 32, 32, 4}, rng);
  auto tok = patchify(z, 2);
  CHECK(tok.shape() == Shape{2, 256, 16});
  CHECK(patchify(z, 32).shape() == Shape{2, 1, 4096});
  CHECK(same(unpatchify(tok, 2, 32, 32, 4), z));
  // Token 1 is the patch at grid column 1: fine cells (0,2),(0,3),(1,2),(1,3).
  CHECK(tok[16 + 0] == z[(0 * 32 + 2) * 4]);
  CHECK(tok[16 + 12] == z[(1 * 32 + 3) * 4]);
  CHECK_THROWS_AS(patchify(z, 3), ShapeError);
  CHECK_THROWS_AS(patchify(Tensor({32, 32, 4}), 2), ShapeError);
}

TEST_CASE("adaLN-Zero block is the identity at init") {
  Rng rng(2);
  auto blk = make_adaln_block(16, 2, 4, 0, rng);
  Tensor x = randn({3, 5, 16}, rng), cond = randn({3, 16}, rng);
  CHECK(same(adaln_block(blk, x, cond), x));

  Rng init(3);
  ContentModel model(tiny(), init);
  Tensor tokens = randn({2, 16, 16}, rng);
  CHECK(same(model.backbone(tokens, randn({2, 16}, rng)), tokens));
}

TEST_CASE("adaLN block gradients on a 4-token block") {
  Rng rng(4);
  for (int trial = 0; trial < 3; ++trial) {
    auto blk = make_adaln_block(8, 2, 2, 0, rng);
    NamedParams p;
    blk.collect("b", p);
    randomize(p, rng, 0.3f);
    std::vector<Tensor> inputs{randn({1, 4, 8}, rng), randn({1, 8}, rng)};
    for (auto& [name, t] : p) inputs.push_back(t);
    auto res = grad_check(
        // Parameters share storage with `blk`, so perturbing the inputs reaches it.
        [&](const std::vector<Tensor>& v) { return sum(square(adaln_block(blk, v[0], v[1]))); },
        inputs);
    INFO(res.worst);
    CHECK(res.passed());
  }
}

TEST_CASE("batch composition does not change per-sample outputs") {
  Rng init(5);
  ContentModel model(tiny(), init);
  Rng rng(6);
  randomize(model.parameters(), rng);
  Tensor z = randn({3, 8, 8, 4}, rng);
  std::vector<float> t{10, 500, 999};
  std::vector<std::int64_t> y{0, 1, 3};
  std::vector<GrainMap> g{random_map(rng, 4), random_map(rng, 4), random_map(rng, 4)};
  NoGradGuard ng;
  auto all = model.forward(z, t, y, g).eps;
  auto one = model.forward(slice(z, 0, 1, 1), std::span(t).subspan(1, 1),
                           std::span(y).subspan(1, 1), std::span(g).subspan(1, 1))
                 .eps;
  for (std::int64_t i = 0; i < one.numel(); ++i) {
    CHECK(one[i] == doctest::Approx(all[one.numel() + i]).epsilon(1e-5));
  }
}

TEST_CASE("route and combine degenerate maps") {
  Rng rng(7);
  const std::int64_t side = 8;
  Tensor coarse = randn({2, 16, 4}, rng), fine = randn({2, side, side, 4}, rng);

  std::vector<GrainMap> all_fine(2, GrainMap(4, 4, 1)), all_coarse(2, GrainMap(4, 4, 2));
  auto pf = RoutingPlan::build(all_fine, side);
  auto rf = route(coarse, fine, pf);
  CHECK_FALSE(rf.eps_coarse.defined());
  CHECK(rf.eps_fine.shape() == Shape{128, 4});
  CHECK(same(combine(rf.eps_coarse, rf.eps_fine, pf, 4), fine));

  auto pc = RoutingPlan::build(all_coarse, side);
  auto rc = route(coarse, fine, pc);
  CHECK_FALSE(rc.eps_fine.defined());
  CHECK(rc.eps_coarse.shape() == Shape{32, 4});
  auto up = combine(rc.eps_coarse, rc.eps_fine, pc, 4);
  for (int b = 0; b < 2; ++b)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        for (int c = 0; c < 4; ++c)
          CHECK(up[((b * side + y) * side + x) * 4 + c] == coarse[(b * 16 + (y / 2) * 4 + x / 2) * 4 + c]);

  CHECK_THROWS_AS(route(Tensor({2, 15, 4}), fine, pf), ShapeError);
  CHECK_THROWS_AS(combine(Tensor({3, 4}), rf.eps_fine, pf, 4), ShapeError);
  CHECK_THROWS_AS(RoutingPlan::build(std::vector<GrainMap>{GrainMap(3, 3, 1)}, side), ShapeError);
}

TEST_CASE("route and combine partition random maps") {
  Rng rng(8);
  const std::int64_t side = 16;
  int failures = 0;
  for (int t = 0; t < 10000; ++t) {
    std::vector<GrainMap> g{random_map(rng, 8)};
    auto plan = RoutingPlan::build(g, side);
    const auto regions = static_cast<std::int64_t>(plan.coarse_regions.size()) +
                         static_cast<std::int64_t>(plan.fine_cells.size()) / 4;
    failures += regions != 64;
    std::vector<int> writes(side * side, 0);
    for (auto cell : plan.fine_cells) ++writes[cell];
    for (auto r : plan.coarse_regions)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) ++writes[((r / 8) * 2 + dy) * side + (r % 8) * 2 + dx];
    for (int w : writes) failures += w != 1;
    for (int w : plan.write_count) failures += w != 1;
  }
  CHECK(failures == 0);

  // Values land where the map says.
  std::vector<GrainMap> g{random_map(rng, 8)};
  auto plan = RoutingPlan::build(g, side);
  Tensor coarse = randn({1, 64, 2}, rng), fine = randn({1, side, side, 2}, rng);
  auto r = route(coarse, fine, plan);
  auto eps = combine(r.eps_coarse, r.eps_fine, plan, 2);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const int region = (y / 2) * 8 + x / 2;
      const float want = g[0].cells[region] == 1 ? fine[(y * side + x) * 2] : coarse[region * 2];
      CHECK(eps[(y * side + x) * 2] == want);
    }
}

TEST_CASE("window partition") {
  Rng rng(9);
  Tensor x = randn({2, 1024, 3}, rng);
  auto w = window_partition(x, 32, 32, 16);
  CHECK(w.shape() == Shape{8, 256, 3});
  CHECK(same(window_reverse(w, 2, 32, 32, 16), x));
  CHECK(window_partition(x, 32, 32, 32).shape() == Shape{2, 1024, 3});
  // Second window of the first image starts at grid (0, 16).
  CHECK(w[256 * 3] == x[16 * 3]);
  CHECK(w[(256 + 16) * 3] == x[(32 + 16) * 3]);
  CHECK_THROWS_AS(window_partition(x, 32, 32, 12), ShapeError);
}

TEST_CASE("window attention examples") {
  Rng rng(10);
  Attention attn(8, 2, rng);
  Tensor one = randn({1, 1, 8}, rng);
  auto out = w_msa(one, attn, Tensor({1, 1}));
  auto v = slice(attn.qkv(one), 2, 16, 8);
  auto want = attn.proj(v);
  for (int i = 0; i < 8; ++i) CHECK(out[i] == doctest::Approx(want[i]).epsilon(1e-5));

  // A huge bias at (j, c) makes token j copy the value of token c.
  Tensor x = randn({1, 4, 8}, rng);
  Tensor bias({4, 4});
  bias.mutable_data()[1 * 4 + 3] = 1e6f;
  auto sat = w_msa(x, attn, bias);
  Tensor lone = slice(x, 1, 3, 1);
  auto copied = attn.proj(slice(attn.qkv(lone), 2, 16, 8));
  for (int i = 0; i < 8; ++i) CHECK(sat[8 + i] == doctest::Approx(copied[i]).epsilon(1e-4));

  CHECK_THROWS_AS(w_msa(x, attn, Tensor({3, 3})), ShapeError);

  for (int trial = 0; trial < 3; ++trial) {
    Tensor xs = randn({2, 4, 8}, rng);
    auto res = grad_check(
        [&](const std::vector<Tensor>& in) { return sum(square(w_msa(xs, attn, in[0]))); },
        {randn({4, 4}, rng)});
    INFO(res.worst);
    CHECK(res.passed());
  }
}

TEST_CASE("window attention is local") {
  Rng rng(11);
  Attention attn(8, 2, rng);
  Tensor bias = randn({16, 16}, rng);
  Tensor grid = randn({1, 64, 8}, rng);
  auto base = window_reverse(w_msa(window_partition(grid, 8, 8, 4), attn, bias), 1, 8, 8, 4);
  Tensor changed = grid.clone();
  changed.mutable_data()[(0 * 8 + 1) * 8 + 3] += 5.0f;  // cell (0, 1), window 0
  auto out = window_reverse(w_msa(window_partition(changed, 8, 8, 4), attn, bias), 1, 8, 8, 4);
  bool inside_changed = false, outside_same = true;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 8; ++c) {
        const auto i = (y * 8 + x) * 8 + c;
        if (y < 4 && x < 4) {
          inside_changed |= out[i] != base[i];
        } else {
          outside_same &= out[i] == base[i];
        }
      }
  CHECK(inside_changed);
  CHECK(outside_same);
}

TEST_CASE("refine residual identity and masking") {
  Rng init(12);
  ContentModel model(tiny(), init);
  Rng rng(13);
  Tensor z = randn({2, 8, 8, 4}, rng);
  std::vector<float> t{3, 700};
  std::vector<std::int64_t> y{1, 2};
  std::vector<GrainMap> g{random_map(rng, 4), random_map(rng, 4)};
  NoGradGuard ng;
  auto out = model.forward(z, t, y, g);
  CHECK(same(out.eps_fine, out.eps_fine_rough));
  CHECK(out.eps.shape() == Shape{2, 8, 8, 4});
  for (float v : out.eps.data()) CHECK(v == 0.0f);

  randomize(model.parameters(), rng);
  auto trained = model.forward(z, t, y, g);
  CHECK_FALSE(same(trained.eps_fine, trained.eps_fine_rough));
  for (float v : trained.eps.data()) CHECK(std::isfinite(v));
  auto again = model.forward(z, t, y, g);
  CHECK(same(again.eps, trained.eps));

  // All-coarse: refinement has nothing to touch.
  std::vector<GrainMap> coarse(2, GrainMap(4, 4, 2));
  auto oc = model.forward(z, t, y, coarse);
  CHECK_FALSE(oc.eps_fine.defined());

  // Zero vs random content at coarse cells of the refine input.
  const auto& plan = trained.plan;
  Tensor cond = randn({2, 16}, rng);
  Tensor zeros_at_coarse({2, 8, 8, 4}), noisy_at_coarse({2, 8, 8, 4});
  std::vector<bool> is_fine(2 * 64, false);
  for (auto cell : plan.fine_cells) is_fine[cell] = true;
  for (int cell = 0; cell < 128; ++cell)
    for (int c = 0; c < 4; ++c) {
      const float v = rng.normal();
      zeros_at_coarse.mutable_data()[cell * 4 + c] = is_fine[cell] ? v : 0.0f;
      noisy_at_coarse.mutable_data()[cell * 4 + c] = is_fine[cell] ? v : rng.normal();
    }
  auto ra = model.refine(zeros_at_coarse, z, plan, cond);
  auto rb = model.refine(noisy_at_coarse, z, plan, cond);
  auto fa = gather(reshape(ra, {-1, 4}), 0, plan.fine_cells);
  auto fb = gather(reshape(rb, {-1, 4}), 0, plan.fine_cells);
  CHECK_FALSE(same(fa, fb));
}

TEST_CASE("granularity weights") {
  CHECK(granularity_weights(2) == std::vector<double>{0.25, 1.0});
  CHECK(granularity_weights(3) == std::vector<double>{1.0 / 16, 0.25, 1.0});
}

TEST_CASE("multi-grained loss") {
  Rng rng(14);
  Tensor tc = randn({3, 4}, rng), tf = randn({8, 4}, rng);
  CHECK(multi_grained_loss(tc, tc, tf, tf).item() == 0.0f);
  Tensor pc = add_scalar(tc, 1.0f);
  CHECK(multi_grained_loss(tc, pc, Tensor(), Tensor()).item() == doctest::Approx(1.0));
  CHECK(multi_grained_loss(Tensor(), Tensor(), tf, add_scalar(tf, 1.0f)).item() == doctest::Approx(4.0));
  CHECK_THROWS_AS(multi_grained_loss(tc, Tensor(), tf, tf), ValueError);
  CHECK_THROWS_AS(multi_grained_loss(tc, pc, tf, Tensor({7, 4})), ShapeError);

  // 4-region toy: 2 coarse regions, 2 fine regions of 4 cells each.
  for (int trial = 0; trial < 3; ++trial) {
    Tensor a = randn({2, 4}, rng), b = randn({8, 4}, rng);
    auto res = grad_check(
        [&](const std::vector<Tensor>& v) { return multi_grained_loss(a, v[0], b, v[1]); },
        {randn({2, 4}, rng), randn({8, 4}, rng)});
    INFO(res.worst);
    CHECK(res.passed());
  }
}

TEST_CASE("content model gradients reach routing heads, B_r and adaLN") {
  Rng init(15);
  ModelConfig cfg = tiny();
  cfg.latent_size = 4;
  cfg.window = 2;
  cfg.hidden = 8;
  ContentModel model(cfg, init);
  Rng rng(16);
  randomize(model.parameters(), rng, 0.3f);
  Tensor z = randn({1, 4, 4, 4}, rng);
  std::vector<float> t{250};
  std::vector<std::int64_t> y{1};
  for (const char* wanted : {"router.coarse.weight", "router.fine.weight", "refine.blocks.0.rel_bias",
                             "refine.blocks.0.adaLN.weight", "blocks.0.adaLN.weight"}) {
    std::vector<GrainMap> g{random_map(rng, 2)};
    g[0].cells[0] = 1;
    g[0].cells[3] = 2;
    Tensor target = randn({1, 4, 4, 4}, rng);
    Tensor param;
    for (auto& [name, p] : model.parameters())
      if (name == wanted) param = p;
    REQUIRE(param.defined());
    auto res = grad_check(
        [&](const std::vector<Tensor>&) {
          return mse(model.forward(z, t, y, g).eps, target);
        },
        {param});
    INFO(wanted, " ", res.worst);
    CHECK(res.passed());
  }
}

TEST_CASE("content model parameters receive gradients") {
  Rng init(17);
  ContentModel model(tiny(), init);
  Rng rng(18);
  randomize(model.parameters(), rng);
  std::vector<GrainMap> g{random_map(rng, 4), random_map(rng, 4)};
  g[0].cells[0] = 1;
  g[1].cells[0] = 2;
  auto out = model.forward(randn({2, 8, 8, 4}, rng), std::vector<float>{1, 2},
                           std::vector<std::int64_t>{0, 3}, g);
  backward(mse(out.eps, Tensor({2, 8, 8, 4}, 0.5f)));
  for (auto& [name, p] : model.parameters()) {
    INFO(name);
    if (name.rfind("y_embed", 0) == 0) continue;
    CHECK(p.has_grad());
  }
}

TEST_CASE("presets and config manifest") {
  auto b = ModelConfig::preset("dyn-b");
  CHECK(b.hidden == 768);
  CHECK(b.heads == 12);
  CHECK(b.backbone_layers == 10);
  CHECK(b.refine_layers == 2);
  CHECK(b.total_layers() == 12);
  CHECK(b.window == 16);
  CHECK(b.latent_size == 32);
  CHECK(b.patch_large == 2);
  CHECK(b.patch_small == 1);
  CHECK(b.tokens() == 256);
  CHECK_NOTHROW(b.validate());
  CHECK(ModelConfig::preset("dyn-l").total_layers() == 24);
  CHECK(ModelConfig::preset("dyn-xl").total_layers() == 28);
  CHECK(ModelConfig::preset("dit-xl2").backbone_layers == 28);
  CHECK_THROWS_AS(ModelConfig::preset("nope"), ValueError);

  for (const auto& name : ModelConfig::preset_names()) {
    auto cfg = ModelConfig::preset(name);
    CHECK_NOTHROW(cfg.validate());
    const std::string text = cfg.to_json().dump(2);
    CHECK(ModelConfig::from_json(nlohmann::ordered_json::parse(text)).to_json().dump(2) == text);
  }

  ModelConfig bad = tiny();
  bad.window = 3;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = tiny();
  bad.patch_large = 3;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  Rng rng(19);
  CHECK_THROWS_AS(ContentModel(ModelConfig::preset("dit-b2"), rng), ValueError);
}

TEST_CASE("toy parameter count matches the analytic count") {
  Rng rng(20);
  for (const ModelConfig& cfg : {ModelConfig::preset("toy"), tiny()}) {
    ContentModel model(cfg, rng);
    CHECK(count_parameters(model.parameters()) == analytic_params(cfg));
  }
}
