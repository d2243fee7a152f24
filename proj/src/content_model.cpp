#include "dyngrain/content_model.hpp"

#include <cmath>
#include <stdexcept>

namespace dyngrain {

namespace {

struct PresetSpec {
  const char* name;
  bool dynamic;
  int backbone;
  int refine;
  std::int64_t hidden;
  std::int64_t heads;
  std::int64_t patch;
};

constexpr PresetSpec kPresets[] = {
    {"dit-b2", false, 12, 0, 768, 12, 2},  {"dit-b1", false, 12, 0, 768, 12, 1},
    {"dyn-b", true, 10, 2, 768, 12, 2},    {"dit-l2", false, 24, 0, 1024, 16, 2},
    {"dit-l1", false, 24, 0, 1024, 16, 1}, {"dyn-l", true, 20, 4, 1024, 16, 2},
    {"dit-xl2", false, 28, 0, 1152, 16, 2}, {"dit-xl1", false, 28, 0, 1152, 16, 1},
    {"dyn-xl", true, 22, 6, 1152, 16, 2},
};

// Splits a [B, k*d] modulation vector into k chunks of [B, d].
std::vector<Tensor> chunks(const Tensor& m, int k) {
  const std::int64_t d = m.dim(1) / k;
  std::vector<Tensor> out;
  for (int i = 0; i < k; ++i) out.push_back(slice(m, 1, i * d, d));
  return out;
}

Tensor gate(const Tensor& g, const Tensor& y) { return mul(repeat_tokens(g, y.dim(1)), y); }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [this](const std::string& why) {
    throw ValueError("model config '" + name + "': " + why);
  };
  if (backbone_layers < 1) fail("needs at least one backbone layer");
  if (refine_layers < 0) fail("negative refine layer count");
  if (hidden <= 0 || heads <= 0 || hidden % heads != 0) fail("hidden width must split into heads");
  if (latent_size % patch_large != 0) fail("patch size must divide the latent grid");
  if (hidden % 4 != 0) fail("hidden width must be divisible by 4 for 2-D position tables");
  if (!dynamic) {
    if (refine_layers != 0) fail("a non-dynamic model has no refine layers");
    return;
  }
  if (levels != 2) fail("only two granularities are supported");
  if (patch_small != 1 || patch_large < 2) fail("dynamic models use patch sizes P_L >= 2 and 1");
  if (window <= 0 || latent_size % window != 0) fail("window must divide the fine grid");
  if (learn_sigma) fail("the dynamic model predicts noise only");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  return {{"name", name},
          {"dynamic", dynamic},
          {"backbone_layers", backbone_layers},
          {"refine_layers", refine_layers},
          {"hidden", hidden},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"patch_large", patch_large},
          {"patch_small", patch_small},
          {"window", window},
          {"latent_size", latent_size},
          {"latent_channels", latent_channels},
          {"num_classes", num_classes},
          {"levels", levels},
          {"learn_sigma", learn_sigma},
          {"frequency_dim", frequency_dim}};
}

ModelConfig ModelConfig::from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
  c.name = j.value("name", c.name);
  c.dynamic = j.value("dynamic", c.dynamic);
  c.backbone_layers = j.value("backbone_layers", c.backbone_layers);
  c.refine_layers = j.value("refine_layers", c.refine_layers);
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.patch_large = j.value("patch_large", c.patch_large);
  c.patch_small = j.value("patch_small", c.patch_small);
  c.window = j.value("window", c.window);
  c.latent_size = j.value("latent_size", c.latent_size);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.levels = j.value("levels", c.levels);
  c.learn_sigma = j.value("learn_sigma", c.learn_sigma);
  c.frequency_dim = j.value("frequency_dim", c.frequency_dim);
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "toy") return ModelConfig{};
  for (const auto& p : kPresets) {
    if (name != p.name) continue;
    ModelConfig c;
    c.name = p.name;
    c.dynamic = p.dynamic;
    c.backbone_layers = p.backbone;
    c.refine_layers = p.refine;
    c.hidden = p.hidden;
    c.heads = p.heads;
    c.patch_large = p.patch;
    c.patch_small = p.dynamic ? 1 : p.patch;
    c.window = 16;
    c.latent_size = 32;
    c.num_classes = 1000;
    c.learn_sigma = !p.dynamic;
    return c;
  }
  throw ValueError("unknown model preset '" + name + "'");
}

std::vector<std::string> ModelConfig::preset_names() {
  std::vector<std::string> out{"toy"};
  for (const auto& p : kPresets) out.emplace_back(p.name);
  return out;
}

Tensor patchify(const Tensor& z, std::int64_t p) {
  if (z.rank() != 4) throw ShapeError("patchify expects [B, H, W, C], got " + to_string(z.shape()));
  const std::int64_t b = z.dim(0), h = z.dim(1), w = z.dim(2), c = z.dim(3);
  if (p <= 0 || h % p != 0 || w % p != 0) {
    throw ShapeError("patch " + std::to_string(p) + " does not divide grid " + to_string(z.shape()));
  }
  Tensor x = reshape(z, {b, h / p, p, w / p, p, c});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {b, (h / p) * (w / p), p * p * c});
}

Tensor unpatchify(const Tensor& tokens, std::int64_t p, std::int64_t h, std::int64_t w,
                  std::int64_t c) {
  const std::int64_t b = tokens.dim(0);
  if (tokens.dim(1) != (h / p) * (w / p) || tokens.dim(2) != p * p * c) {
    throw ShapeError("tokens " + to_string(tokens.shape()) + " do not unpatchify to " +
                     std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c));
  }
  Tensor x = reshape(tokens, {b, h / p, w / p, p, p, c});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {b, h, w, c});
}

std::vector<std::int64_t> window_order(std::int64_t rows, std::int64_t cols, std::int64_t m) {
  if (m <= 0 || rows % m != 0 || cols % m != 0) {
    throw ShapeError("window " + std::to_string(m) + " does not divide grid " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(rows * cols));
  for (std::int64_t wy = 0; wy < rows / m; ++wy)
    for (std::int64_t wx = 0; wx < cols / m; ++wx)
      for (std::int64_t iy = 0; iy < m; ++iy)
        for (std::int64_t ix = 0; ix < m; ++ix) order.push_back((wy * m + iy) * cols + wx * m + ix);
  return order;
}

Tensor window_partition(const Tensor& x, std::int64_t rows, std::int64_t cols, std::int64_t m) {
  if (x.rank() != 3 || x.dim(1) != rows * cols) {
    throw ShapeError("window partition expects [B, " + std::to_string(rows * cols) + ", d], got " +
                     to_string(x.shape()));
  }
  const auto order = window_order(rows, cols, m);
  return reshape(gather(x, 1, order), {-1, m * m, x.dim(2)});
}

Tensor window_reverse(const Tensor& windows, std::int64_t batch, std::int64_t rows,
                      std::int64_t cols, std::int64_t m) {
  const auto order = window_order(rows, cols, m);
  std::vector<std::int64_t> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = static_cast<std::int64_t>(i);
  return gather(reshape(windows, {batch, rows * cols, windows.dim(2)}), 1, inverse);
}

Tensor w_msa(const Tensor& windows, const Attention& attn, const Tensor& rel_bias) {
  const std::int64_t n = windows.dim(1);
  if (rel_bias.shape() != Shape{n, n}) {
    throw ShapeError("relative position bias " + to_string(rel_bias.shape()) + " does not match " +
                     std::to_string(n) + "-token windows");
  }
  return attn(windows, &rel_bias);
}

RoutingPlan RoutingPlan::build(std::span<const GrainMap> grains, std::int64_t side) {
  if (grains.empty()) throw ShapeError("routing needs at least one grain map");
  RoutingPlan plan;
  plan.batch = static_cast<std::int64_t>(grains.size());
  plan.side = side;
  const GrainMap& g0 = grains.front();
  if (g0.rows != g0.cols || g0.rows == 0 || side % g0.rows != 0) {
    throw ShapeError("grain map " + std::to_string(g0.rows) + "x" + std::to_string(g0.cols) +
                     " does not tile a " + std::to_string(side) + "-cell grid");
  }
  plan.span = side / g0.rows;
  const std::int64_t cells = side * side, regions = g0.count();
  plan.source.assign(static_cast<std::size_t>(plan.batch * cells), -1);
  plan.write_count.assign(plan.source.size(), 0);

  auto footprint = [&](std::int64_t b, std::int64_t region, auto&& visit) {
    const std::int64_t r = region / g0.cols, c = region % g0.cols;
    for (std::int64_t dy = 0; dy < plan.span; ++dy)
      for (std::int64_t dx = 0; dx < plan.span; ++dx)
        visit(b * cells + (r * plan.span + dy) * side + c * plan.span + dx);
  };
  for (std::int64_t b = 0; b < plan.batch; ++b) {
    const GrainMap& g = grains[b];
    if (g.rows != g0.rows || g.cols != g0.cols) throw ShapeError("grain maps differ in size");
    for (std::int64_t region = 0; region < regions; ++region) {
      const int level = g.cells[region];
      if (level == 1) {
        footprint(b, region, [&](std::int64_t cell) {
          plan.source[cell] = static_cast<std::int64_t>(plan.fine_cells.size());
          ++plan.write_count[cell];
          plan.fine_cells.push_back(cell);
        });
      } else if (level != 2) {
        throw ValueError("grain index " + std::to_string(level) + " is not 1 (fine) or 2 (coarse)");
      }
    }
  }
  const auto nf = static_cast<std::int64_t>(plan.fine_cells.size());
  for (std::int64_t b = 0; b < plan.batch; ++b) {
    for (std::int64_t region = 0; region < regions; ++region) {
      if (grains[b].cells[region] != 2) continue;
      const std::int64_t row = nf + static_cast<std::int64_t>(plan.coarse_regions.size());
      plan.coarse_regions.push_back(b * regions + region);
      footprint(b, region, [&](std::int64_t cell) {
        plan.source[cell] = row;
        ++plan.write_count[cell];
      });
    }
  }
  for (int n : plan.write_count) {
    if (n != 1) throw std::logic_error("routing plan writes a fine-grid cell " + std::to_string(n) + " times");
  }
  return plan;
}

RoutedNoise route(const Tensor& coarse, const Tensor& fine, const RoutingPlan& plan) {
  const std::int64_t c = fine.dim(-1);
  if (coarse.dim(0) != plan.batch || coarse.dim(1) != plan.regions_per_sample()) {
    throw ShapeError("router got " + to_string(coarse.shape()) + " coarse tokens for " +
                     std::to_string(plan.regions_per_sample()) + " regions per sample");
  }
  if (fine.shape() != Shape{plan.batch, plan.side, plan.side, c}) {
    throw ShapeError("fine prediction " + to_string(fine.shape()) + " does not cover the grid");
  }
  RoutedNoise out;
  if (!plan.coarse_regions.empty()) {
    out.eps_coarse = gather(reshape(coarse, {-1, c}), 0, plan.coarse_regions);
  }
  if (!plan.fine_cells.empty()) out.eps_fine = gather(reshape(fine, {-1, c}), 0, plan.fine_cells);
  return out;
}

Tensor combine(const Tensor& eps_coarse, const Tensor& eps_fine, const RoutingPlan& plan,
               std::int64_t channels) {
  const auto nf = static_cast<std::int64_t>(plan.fine_cells.size());
  const auto nc = static_cast<std::int64_t>(plan.coarse_regions.size());
  if ((nf > 0) != eps_fine.defined() || (eps_fine.defined() && eps_fine.shape() != Shape{nf, channels})) {
    throw ShapeError("fine noise does not match the routing plan");
  }
  if ((nc > 0) != eps_coarse.defined() ||
      (eps_coarse.defined() && eps_coarse.shape() != Shape{nc, channels})) {
    throw ShapeError("coarse noise does not match the routing plan");
  }
  Tensor compact;
  if (nf > 0 && nc > 0) {
    compact = concat({eps_fine, eps_coarse}, 0);
  } else {
    compact = nf > 0 ? eps_fine : eps_coarse;
  }
  return reshape(gather(compact, 0, plan.source), {plan.batch, plan.side, plan.side, channels});
}

std::vector<double> granularity_weights(int levels) {
  std::vector<double> a;
  for (int i = 1; i <= levels; ++i) {
    const double s = std::ldexp(1.0, levels - i);
    a.push_back(1.0 / (s * s));
  }
  return a;
}

Tensor multi_grained_loss(const Tensor& target_coarse, const Tensor& pred_coarse,
                          const Tensor& target_fine, const Tensor& pred_fine) {
  const auto alpha = granularity_weights(2);
  Tensor total;
  auto term = [&](const Tensor& t, const Tensor& p, double a) {
    if (t.defined() != p.defined()) throw ValueError("missing cells for one granularity");
    if (!t.defined()) return;
    if (t.shape() != p.shape()) {
      throw ShapeError("target " + to_string(t.shape()) + " vs prediction " + to_string(p.shape()));
    }
    Tensor v = mul_scalar(mean(sum(square(sub(t, p)), -1)), static_cast<float>(a));
    total = total.defined() ? add(total, v) : v;
  };
  term(target_coarse, pred_coarse, alpha[0]);
  term(target_fine, pred_fine, alpha[1]);
  if (!total.defined()) throw ValueError("multi-grained loss with no cells");
  return total;
}

void AdaLnBlock::collect(const std::string& prefix, NamedParams& out) const {
  attn.collect(prefix + ".attn", out);
  mlp.collect(prefix + ".mlp", out);
  modulation.collect(prefix + ".adaLN", out);
  if (rel_bias.defined()) out.emplace_back(prefix + ".rel_bias", rel_bias);
}

AdaLnBlock make_adaln_block(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio,
                            std::int64_t window_tokens, Rng& rng) {
  AdaLnBlock b{Attention(dim, heads, rng), Mlp(dim, mlp_ratio * dim, rng),
               Linear(dim, 6 * dim, rng, Init::kZero), Tensor()};
  if (window_tokens > 0) b.rel_bias = make_param({window_tokens, window_tokens}, Init::kZero, rng);
  return b;
}

Tensor adaln_block(const AdaLnBlock& blk, const Tensor& x, const Tensor& cond,
                   std::int64_t window_tokens) {
  const auto m = chunks(blk.modulation(silu(cond)), 6);
  Tensor h = modulate(layer_norm(x), m[0], m[1]);
  if (window_tokens > 0) {
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    h = reshape(w_msa(reshape(h, {-1, window_tokens, d}), blk.attn, blk.rel_bias), {b, n, d});
  } else {
    h = blk.attn(h);
  }
  Tensor out = add(x, gate(m[2], h));
  return add(out, gate(m[5], blk.mlp(modulate(layer_norm(out), m[3], m[4]))));
}

ContentModel::ContentModel(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (!cfg_.dynamic) {
    throw ValueError("preset '" + cfg_.name + "' is a cost-model reference and cannot be built");
  }
  const std::int64_t d = cfg_.hidden, c = cfg_.latent_channels, pl = cfg_.patch_large;
  patch_embed_ = Linear(pl * pl * c, d, rng);
  pos_embed_ = sincos_pos_embed_2d(d, cfg_.token_side(), cfg_.token_side());
  grain_embed_ = make_param({cfg_.levels, d}, Init::kNormal002, rng);
  t_fc1_ = Linear(cfg_.frequency_dim, d, rng, Init::kNormal002);
  t_fc2_ = Linear(d, d, rng, Init::kNormal002);
  class_embed_ = make_param({cfg_.num_classes + 1, d}, Init::kNormal002, rng);
  for (int i = 0; i < cfg_.backbone_layers; ++i) {
    blocks_.push_back(make_adaln_block(d, cfg_.heads, cfg_.mlp_ratio, 0, rng));
  }
  final_mod_ = Linear(d, 2 * d, rng, Init::kZero);
  coarse_head_ = Linear(d, c, rng, Init::kZero);
  fine_head_ = Linear(d, pl * pl * c, rng, Init::kZero);

  refine_in_ = Linear(2 * c, d, rng);
  refine_pos_ = make_param({cfg_.fine_cells(), d}, Init::kNormal002, rng);
  for (int i = 0; i < cfg_.refine_layers; ++i) {
    refine_blocks_.push_back(make_adaln_block(d, cfg_.heads, cfg_.mlp_ratio, cfg_.window_tokens(), rng));
  }
  refine_mod_ = Linear(d, 2 * d, rng, Init::kZero);
  refine_head_ = Linear(d, c, rng, Init::kZero);

  window_perm_ = window_order(cfg_.latent_size, cfg_.latent_size, cfg_.window);
  window_inv_.resize(window_perm_.size());
  for (std::size_t i = 0; i < window_perm_.size(); ++i) {
    window_inv_[window_perm_[i]] = static_cast<std::int64_t>(i);
  }
}

Tensor ContentModel::embed_condition(std::span<const float> t,
                                     std::span<const std::int64_t> classes,
                                     const Tensor& grain_tokens) const {
  Tensor te = t_fc2_(silu(t_fc1_(timestep_embedding(t, cfg_.frequency_dim))));
  Tensor ye = gather(class_embed_, 0, classes);
  return add(add(te, ye), mean(grain_tokens, 1));
}

Tensor ContentModel::backbone(const Tensor& tokens, const Tensor& cond) const {
  MacTag tag("backbone");
  Tensor x = tokens;
  for (const auto& blk : blocks_) x = adaln_block(blk, x, cond);
  return x;
}

Tensor ContentModel::refine(const Tensor& eps_fine_full, const Tensor& z_noised,
                            const RoutingPlan& plan, const Tensor& cond) const {
  MacTag tag("refine");
  const std::int64_t b = plan.batch, c = cfg_.latent_channels, cells = cfg_.fine_cells();
  Tensor x = reshape(concat({eps_fine_full, z_noised}, 3), {b, cells, 2 * c});
  x = add(refine_in_(x), refine_pos_);
  x = gather(x, 1, window_perm_);
  for (const auto& blk : refine_blocks_) x = adaln_block(blk, x, cond, cfg_.window_tokens());
  const auto m = chunks(refine_mod_(silu(cond)), 2);
  Tensor r = refine_head_(modulate(layer_norm(x), m[0], m[1]));
  r = gather(r, 1, window_inv_);
  return reshape(r, {b, cfg_.latent_size, cfg_.latent_size, c});
}

ContentOutput ContentModel::forward(const Tensor& z_noised, std::span<const float> t,
                                    std::span<const std::int64_t> classes,
                                    std::span<const GrainMap> grains) const {
  const std::int64_t b = z_noised.dim(0), side = cfg_.latent_size, c = cfg_.latent_channels;
  if (z_noised.shape() != Shape{b, side, side, c}) {
    throw ShapeError("content model expects [B, " + std::to_string(side) + ", " +
                     std::to_string(side) + ", " + std::to_string(c) + "], got " +
                     to_string(z_noised.shape()));
  }
  if (static_cast<std::int64_t>(t.size()) != b || static_cast<std::int64_t>(classes.size()) != b) {
    throw ShapeError("one timestep and one class per sample required");
  }
  for (auto y : classes) {
    if (y < 0 || y > cfg_.num_classes) throw ValueError("class id out of range");
  }
  for (const auto& g : grains) {
    if (g.rows != cfg_.token_side() || g.cols != cfg_.token_side()) {
      throw ShapeError("grain map must align with the " + std::to_string(cfg_.token_side()) +
                       "x" + std::to_string(cfg_.token_side()) + " token grid");
    }
  }
  ContentOutput out;
  out.plan = RoutingPlan::build(grains, side);
  const RoutingPlan& plan = out.plan;

  std::vector<std::int64_t> levels;
  levels.reserve(static_cast<std::size_t>(b * cfg_.tokens()));
  for (const auto& g : grains)
    for (int v : g.cells) levels.push_back(v - 1);
  const Tensor grain_tokens = reshape(gather(grain_embed_, 0, levels), {b, cfg_.tokens(), cfg_.hidden});

  Tensor tokens;
  {
    MacTag tag("patchify");
    tokens = patch_embed_(patchify(z_noised, cfg_.patch_large));
  }
  tokens = add(add(tokens, pos_embed_), grain_tokens);
  const Tensor cond = embed_condition(t, classes, grain_tokens);
  const Tensor x = backbone(tokens, cond);

  Tensor coarse, fine;
  {
    MacTag tag("router");
    const auto m = chunks(final_mod_(silu(cond)), 2);
    const Tensor h = modulate(layer_norm(x), m[0], m[1]);
    coarse = coarse_head_(h);
    fine = unpatchify(fine_head_(h), cfg_.patch_large, side, side, c);
  }
  const RoutedNoise rough = route(coarse, fine, plan);
  out.eps_coarse = rough.eps_coarse;
  out.eps_fine_rough = rough.eps_fine;

  if (!plan.fine_cells.empty()) {
    Tensor fine_final = fine;
    if (!refine_blocks_.empty()) {
      Tensor mask({b, side, side, c});
      auto md = mask.mutable_data();
      for (auto cell : plan.fine_cells) std::fill_n(md.begin() + cell * c, c, 1.0f);
      fine_final = add(fine, refine(mul(fine, mask), z_noised, plan, cond));
    }
    out.eps_fine = gather(reshape(fine_final, {-1, c}), 0, plan.fine_cells);
  }
  out.eps = combine(out.eps_coarse, out.eps_fine, plan, c);
  return out;
}

NamedParams ContentModel::parameters() const {
  NamedParams p;
  patch_embed_.collect("patch_embed", p);
  p.emplace_back("grain_embed", grain_embed_);
  t_fc1_.collect("t_embed.fc1", p);
  t_fc2_.collect("t_embed.fc2", p);
  p.emplace_back("y_embed", class_embed_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("blocks." + std::to_string(i), p);
  final_mod_.collect("router.adaLN", p);
  coarse_head_.collect("router.coarse", p);
  fine_head_.collect("router.fine", p);
  refine_in_.collect("refine.embed", p);
  p.emplace_back("refine.pos_embed", refine_pos_);
  for (std::size_t i = 0; i < refine_blocks_.size(); ++i) {
    refine_blocks_[i].collect("refine.blocks." + std::to_string(i), p);
  }
  refine_mod_.collect("refine.adaLN", p);
  refine_head_.collect("refine.head", p);
  return p;
}

}  // namespace dyngrain
