#include "dyngrain/dvae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

namespace dyngrain {

namespace {

int log2_exact(int v) { return std::countr_zero(static_cast<unsigned>(v)); }

std::int64_t level_cells(const FactorLadder& ladder, int level, std::int64_t h, std::int64_t w) {
  const int f = ladder.factors[level];
  return (h / f) * (w / f);
}

// Offsets of each level inside the per-sample concatenation of all levels.
std::vector<std::int64_t> level_offsets(const FactorLadder& ladder, std::int64_t h,
                                        std::int64_t w) {
  std::vector<std::int64_t> off(ladder.factors.size() + 1, 0);
  for (int l = 0; l < ladder.levels(); ++l) off[l + 1] = off[l] + level_cells(ladder, l, h, w);
  return off;
}

void check_grains(std::span<const GrainMap> grains, std::int64_t batch, const FactorLadder& ladder,
                  std::int64_t h, std::int64_t w) {
  if (static_cast<std::int64_t>(grains.size()) != batch) {
    throw ShapeError("got " + std::to_string(grains.size()) + " grain maps for a batch of " +
                     std::to_string(batch));
  }
  for (const auto& g : grains) {
    if (g.rows != h / ladder.coarsest() || g.cols != w / ladder.coarsest()) {
      throw ShapeError("grain map " + std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                       " does not match the region grid of a " + std::to_string(h) + "x" +
                       std::to_string(w) + " image");
    }
    for (int v : g.cells) {
      if (v < 1 || v > ladder.levels()) throw ValueError("grain index out of range");
    }
  }
}

// Concatenates per-level [B, h_i, w_i, C] tensors into [B * sum_i h_i w_i, C].
Tensor flatten_levels(const std::vector<Tensor>& levels) {
  const std::int64_t b = levels.front().dim(0), c = levels.front().dim(3);
  std::vector<Tensor> flat;
  for (const auto& t : levels) flat.push_back(reshape(t, {b, -1, c}));
  return reshape(concat(flat, 1), {-1, c});
}

}  // namespace

void FactorLadder::validate() const {
  if (factors.size() < 2) throw ValueError("factor ladder needs at least two levels");
  for (std::size_t i = 0; i < factors.size(); ++i) {
    const int f = factors[i];
    if (f < 2 || !std::has_single_bit(static_cast<unsigned>(f))) {
      throw ValueError("factors must be powers of two >= 2, got " + std::to_string(f));
    }
    if (i > 0 && f <= factors[i - 1]) throw ValueError("factors must be strictly increasing");
  }
  if (latent_channels <= 0) throw ValueError("latent channel count must be positive");
}

void FactorLadder::validate(std::int64_t height, std::int64_t width) const {
  validate();
  if (height % coarsest() != 0 || width % coarsest() != 0) {
    throw ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by factor " + std::to_string(coarsest()));
  }
}

nlohmann::ordered_json DvaeConfig::to_json() const {
  return {{"image_size", image_size},
          {"factors", ladder.factors},
          {"latent_channels", ladder.latent_channels},
          {"base_channels", base_channels},
          {"res_blocks", res_blocks},
          {"decoder_grain_input", decoder_grain_input},
          {"kl_weight", kl_weight}};
}

DvaeConfig DvaeConfig::from_json(const nlohmann::ordered_json& j) {
  DvaeConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.ladder.factors = j.value("factors", c.ladder.factors);
  c.ladder.latent_channels = j.value("latent_channels", c.ladder.latent_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.res_blocks = j.value("res_blocks", c.res_blocks);
  c.decoder_grain_input = j.value("decoder_grain_input", c.decoder_grain_input);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  return c;
}

Tensor reparameterize(const Tensor& mean, const Tensor& logvar, Rng& rng, bool deterministic) {
  if (mean.shape() != logvar.shape()) {
    throw ShapeError("mean " + to_string(mean.shape()) + " and logvar " +
                     to_string(logvar.shape()) + " differ");
  }
  if (deterministic) return mean;
  return add(mean, mul(exp(mul_scalar(logvar, 0.5f)), randn(mean.shape(), rng)));
}

std::vector<std::int64_t> mixture_sources(const GrainMap& grain, const FactorLadder& ladder,
                                          std::int64_t h, std::int64_t w) {
  const auto off = level_offsets(ladder, h, w);
  const std::int64_t fh = h / ladder.finest(), fw = w / ladder.finest();
  const std::int64_t span = ladder.coarsest() / ladder.finest();
  std::vector<std::int64_t> src(static_cast<std::size_t>(fh * fw));
  for (std::int64_t y = 0; y < fh; ++y) {
    for (std::int64_t x = 0; x < fw; ++x) {
      const int level = grain.at(y / span, x / span) - 1;
      const std::int64_t ratio = ladder.factors[level] / ladder.finest();
      const std::int64_t lw = w / ladder.factors[level];
      src[y * fw + x] = off[level] + (y / ratio) * lw + x / ratio;
    }
  }
  return src;
}

Tensor mix_latents(const std::vector<Tensor>& levels, std::span<const GrainMap> grains,
                   const FactorLadder& ladder) {
  if (static_cast<int>(levels.size()) != ladder.levels()) {
    throw ShapeError("expected " + std::to_string(ladder.levels()) + " latent levels, got " +
                     std::to_string(levels.size()));
  }
  const std::int64_t b = levels[0].dim(0), c = levels[0].dim(3);
  const std::int64_t h = levels[0].dim(1) * ladder.finest(), w = levels[0].dim(2) * ladder.finest();
  for (int l = 0; l < ladder.levels(); ++l) {
    const Shape expect{b, h / ladder.factors[l], w / ladder.factors[l], c};
    if (levels[l].shape() != expect) {
      throw ShapeError("latent level " + std::to_string(l + 1) + " has shape " +
                       to_string(levels[l].shape()) + ", expected " + to_string(expect));
    }
  }
  check_grains(grains, b, ladder, h, w);
  const std::int64_t per_sample = level_offsets(ladder, h, w).back();
  std::vector<std::int64_t> index;
  for (std::int64_t i = 0; i < b; ++i) {
    for (auto s : mixture_sources(grains[i], ladder, h, w)) index.push_back(i * per_sample + s);
  }
  return reshape(gather(flatten_levels(levels), 0, index),
                 {b, h / ladder.finest(), w / ladder.finest(), c});
}

std::vector<std::int64_t> used_cells(const GrainMap& grain, const FactorLadder& ladder,
                                     std::int64_t h, std::int64_t w) {
  const auto off = level_offsets(ladder, h, w);
  std::vector<std::int64_t> out;
  for (int l = 0; l < ladder.levels(); ++l) {
    const std::int64_t lh = h / ladder.factors[l], lw = w / ladder.factors[l];
    const std::int64_t per_region = ladder.coarsest() / ladder.factors[l];
    for (std::int64_t y = 0; y < lh; ++y) {
      for (std::int64_t x = 0; x < lw; ++x) {
        if (grain.at(y / per_region, x / per_region) == l + 1) out.push_back(off[l] + y * lw + x);
      }
    }
  }
  return out;
}

Tensor kl_used_cells(const HierarchicalLatents& lat, std::span<const GrainMap> grains,
                     const FactorLadder& ladder) {
  const std::int64_t b = lat.mean[0].dim(0);
  const std::int64_t h = lat.mean[0].dim(1) * ladder.finest();
  const std::int64_t w = lat.mean[0].dim(2) * ladder.finest();
  check_grains(grains, b, ladder, h, w);
  const std::int64_t per_sample = level_offsets(ladder, h, w).back();
  std::vector<std::int64_t> index;
  for (std::int64_t i = 0; i < b; ++i) {
    for (auto s : used_cells(grains[i], ladder, h, w)) index.push_back(i * per_sample + s);
  }
  const Tensor mu = gather(flatten_levels(lat.mean), 0, index);
  const Tensor lv = gather(flatten_levels(lat.logvar), 0, index);
  const Tensor per_elem = add_scalar(sub(add(square(mu), exp(lv)), lv), -1.0f);
  return mean(mul_scalar(sum(per_elem, 1), 0.5f));
}

Tensor dvae_loss(const Tensor& image, const Tensor& recon, const HierarchicalLatents& lat,
                 std::span<const GrainMap> grains, const FactorLadder& ladder, double kl_weight) {
  Tensor rec = mse(image, recon);
  if (kl_weight == 0.0) return rec;
  return add(rec, mul_scalar(kl_used_cells(lat, grains, ladder), static_cast<float>(kl_weight)));
}

Tensor upsample_nearest(const Tensor& x, std::int64_t factor) {
  if (factor == 1) return x;
  std::vector<std::int64_t> rows, cols;
  for (std::int64_t i = 0; i < x.dim(1) * factor; ++i) rows.push_back(i / factor);
  for (std::int64_t i = 0; i < x.dim(2) * factor; ++i) cols.push_back(i / factor);
  return gather(gather(x, 1, rows), 2, cols);
}

Tensor grain_one_hot(std::span<const GrainMap> grains, const FactorLadder& ladder) {
  const auto b = static_cast<std::int64_t>(grains.size());
  const std::int64_t span = ladder.coarsest() / ladder.finest();
  const std::int64_t fh = grains[0].rows * span, fw = grains[0].cols * span;
  const int k = ladder.levels();
  Tensor out({b, fh, fw, k});
  auto o = out.mutable_data();
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t y = 0; y < fh; ++y) {
      for (std::int64_t x = 0; x < fw; ++x) {
        const int level = grains[i].at(y / span, x / span);
        o[((i * fh + y) * fw + x) * k + level - 1] = 1.0f;
      }
    }
  }
  return out;
}

ResBlock::ResBlock(std::int64_t channels, Rng& rng)
    : conv1(channels, channels, 3, 1, 1, rng), conv2(channels, channels, 3, 1, 1, rng) {}

Tensor ResBlock::operator()(const Tensor& x) const {
  return add(x, conv2(silu(conv1(silu(x)))));
}

void ResBlock::collect(const std::string& prefix, NamedParams& out) const {
  conv1.collect(prefix + ".conv1", out);
  conv2.collect(prefix + ".conv2", out);
}

Dvae::Dvae(DvaeConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  const auto& ladder = cfg_.ladder;
  ladder.validate(cfg_.image_size, cfg_.image_size);
  const std::int64_t c0 = cfg_.base_channels, c1 = 2 * c0, nz = ladder.latent_channels;

  stem_ = Conv2d(3, c0, 3, 1, 1, rng);
  for (int i = 0; i + 1 < log2_exact(ladder.finest()); ++i) trunk_.emplace_back(c0, c0, 3, 2, 1, rng);

  std::int64_t ch = c0;
  int prev = ladder.finest() / 2;
  for (int f : ladder.factors) {
    Level lv;
    for (int r = 0; r < cfg_.res_blocks; ++r) lv.blocks.emplace_back(ch, rng);
    for (int s = 0; s < log2_exact(f / prev); ++s) {
      lv.down.emplace_back(s == 0 ? ch : c1, c1, 3, 2, 1, rng);
    }
    lv.head = Conv2d(c1, 2 * nz, 1, 1, 0, rng);
    levels_.push_back(std::move(lv));
    ch = c1;
    prev = f;
  }

  const std::int64_t in_ch = nz + (cfg_.decoder_grain_input ? ladder.levels() : 0);
  dec_in_ = Conv2d(in_ch, c1, 3, 1, 1, rng);
  ch = c1;
  for (int s = 0; s < log2_exact(ladder.finest()); ++s) {
    UpStage st;
    for (int r = 0; r < cfg_.res_blocks; ++r) st.blocks.emplace_back(ch, rng);
    const std::int64_t next = std::max<std::int64_t>(ch / 2, 8);
    st.conv = Conv2d(ch, next, 3, 1, 1, rng);
    up_.push_back(std::move(st));
    ch = next;
  }
  dec_out_ = Conv2d(ch, 3, 3, 1, 1, rng);
}

HierarchicalLatents Dvae::encode(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(3) != 3) {
    throw ShapeError("encoder expects [B, H, W, 3] images, got " + to_string(images.shape()));
  }
  cfg_.ladder.validate(images.dim(1), images.dim(2));
  const std::int64_t nz = cfg_.ladder.latent_channels;
  Tensor h = silu(stem_(images));
  for (const auto& c : trunk_) h = silu(c(h));
  HierarchicalLatents out;
  for (const auto& lv : levels_) {
    for (const auto& b : lv.blocks) h = b(h);
    for (const auto& d : lv.down) h = silu(d(h));
    Tensor stats = lv.head(h);
    out.mean.push_back(slice(stats, 3, 0, nz));
    out.logvar.push_back(slice(stats, 3, nz, nz));
  }
  return out;
}

Tensor Dvae::decode(const Tensor& mixture, std::span<const GrainMap> grains) const {
  Tensor h = mixture;
  if (cfg_.decoder_grain_input) {
    check_grains(grains, mixture.dim(0), cfg_.ladder, mixture.dim(1) * cfg_.ladder.finest(),
                 mixture.dim(2) * cfg_.ladder.finest());
    h = concat({h, grain_one_hot(grains, cfg_.ladder)}, 3);
  }
  h = dec_in_(h);
  for (const auto& st : up_) {
    for (const auto& b : st.blocks) h = b(h);
    h = silu(st.conv(upsample_nearest(h, 2)));
  }
  return dec_out_(h);
}

NamedParams Dvae::parameters() const {
  NamedParams p;
  stem_.collect("enc.stem", p);
  for (std::size_t i = 0; i < trunk_.size(); ++i) trunk_[i].collect("enc.trunk" + std::to_string(i), p);
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const std::string pre = "enc.level" + std::to_string(l + 1);
    for (std::size_t r = 0; r < levels_[l].blocks.size(); ++r) {
      levels_[l].blocks[r].collect(pre + ".res" + std::to_string(r), p);
    }
    for (std::size_t d = 0; d < levels_[l].down.size(); ++d) {
      levels_[l].down[d].collect(pre + ".down" + std::to_string(d), p);
    }
    levels_[l].head.collect(pre + ".head", p);
  }
  dec_in_.collect("dec.in", p);
  for (std::size_t s = 0; s < up_.size(); ++s) {
    const std::string pre = "dec.up" + std::to_string(s);
    for (std::size_t r = 0; r < up_[s].blocks.size(); ++r) {
      up_[s].blocks[r].collect(pre + ".res" + std::to_string(r), p);
    }
    up_[s].conv.collect(pre + ".conv", p);
  }
  dec_out_.collect("dec.out", p);
  return p;
}

}  // namespace dyngrain
