#include "dyngrain/grain_prior.hpp"

#include <cmath>

namespace dyngrain {

nlohmann::ordered_json GrainPriorConfig::to_json() const {
  return {{"rows", rows},       {"cols", cols},           {"levels", levels},
          {"hidden", hidden},   {"depth", depth},         {"heads", heads},
          {"mlp_ratio", mlp_ratio}, {"num_classes", num_classes}, {"class_dropout", class_dropout}};
}

GrainPriorConfig GrainPriorConfig::from_json(const nlohmann::ordered_json& j) {
  GrainPriorConfig c;
  c.rows = j.value("rows", c.rows);
  c.cols = j.value("cols", c.cols);
  c.levels = j.value("levels", c.levels);
  c.hidden = j.value("hidden", c.hidden);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.class_dropout = j.value("class_dropout", c.class_dropout);
  return c;
}

GrainPriorConfig GrainPriorConfig::preset(const std::string& name) {
  GrainPriorConfig c;
  if (name == "toy") return c;
  if (name == "grain-s") {
    c.rows = c.cols = 16;
    c.hidden = 384;
    c.depth = 12;
    c.heads = 6;
    c.num_classes = 1000;
    return c;
  }
  throw ValueError("unknown grain prior preset '" + name + "'");
}

GrainPrior::GrainPrior(GrainPriorConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  const std::int64_t d = cfg_.hidden;
  token_in_ = Linear(d, d, rng);
  pos_embed_ = make_param({cfg_.tokens(), d}, Init::kNormal002, rng);
  class_embed_ = make_param({cfg_.num_classes + 1, d}, Init::kZero, rng);
  for (int i = 0; i < cfg_.depth; ++i) {
    blocks_.push_back({Attention(d, cfg_.heads, rng), Mlp(d, cfg_.mlp_ratio * d, rng)});
  }
  head_ = Linear(d, cfg_.levels, rng);
}

Tensor GrainPrior::forward(const Tensor& noise, std::span<const std::int64_t> classes) const {
  const std::int64_t b = noise.dim(0), d = cfg_.hidden;
  if (noise.rank() != 3 || noise.dim(1) != cfg_.tokens() || noise.dim(2) != d) {
    throw ShapeError("grain prior expects noise [B, " + std::to_string(cfg_.tokens()) + ", " +
                     std::to_string(d) + "], got " + to_string(noise.shape()));
  }
  if (static_cast<std::int64_t>(classes.size()) != b) {
    throw ShapeError("one class id per sample required");
  }
  for (auto c : classes) {
    if (c < 0 || c > cfg_.num_classes) throw ValueError("class id out of range");
  }
  Tensor x = add(token_in_(noise), pos_embed_);
  x = add(x, repeat_tokens(gather(class_embed_, 0, classes), cfg_.tokens()));
  for (const auto& blk : blocks_) {
    x = add(x, blk.attn(layer_norm(x)));
    x = add(x, blk.mlp(layer_norm(x)));
  }
  return head_(layer_norm(x));
}

Tensor GrainPrior::draw_noise(std::int64_t batch, Rng& rng) const {
  return randn({batch, cfg_.tokens(), cfg_.hidden}, rng);
}

NamedParams GrainPrior::parameters() const {
  NamedParams p;
  token_in_.collect("token_in", p);
  p.emplace_back("pos_embed", pos_embed_);
  p.emplace_back("class_embed", class_embed_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string pre = "blocks." + std::to_string(i);
    blocks_[i].attn.collect(pre + ".attn", p);
    blocks_[i].mlp.collect(pre + ".mlp", p);
  }
  head_.collect("head", p);
  return p;
}

Tensor grain_ce_loss(const Tensor& logits, std::span<const GrainMap> targets) {
  if (logits.rank() != 3) throw ShapeError("logits must be [B, N, k], got " + to_string(logits.shape()));
  const std::int64_t b = logits.dim(0), n = logits.dim(1), k = logits.dim(2);
  if (static_cast<std::int64_t>(targets.size()) != b) {
    throw ShapeError("got " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(b) + " logit maps");
  }
  std::vector<std::int64_t> pick;
  pick.reserve(static_cast<std::size_t>(b * n));
  for (std::int64_t i = 0; i < b; ++i) {
    if (targets[i].count() != n) {
      throw ShapeError("target grain map has " + std::to_string(targets[i].count()) +
                       " regions, logits have " + std::to_string(n));
    }
    for (std::int64_t r = 0; r < n; ++r) {
      const int level = targets[i].cells[r];
      if (level < 1 || level > k) throw ValueError("target grain index out of range");
      pick.push_back((i * n + r) * k + level - 1);
    }
  }
  const Tensor logp = reshape(log_softmax(logits, -1), {b * n * k});
  return neg(mean(gather(logp, 0, pick)));
}

GrainMap sample_from_logits(std::span<const float> logits, std::int64_t rows, std::int64_t cols,
                            int levels, double temperature, Rng& rng) {
  if (temperature < 0.0) throw ValueError("temperature must be nonnegative");
  if (static_cast<std::int64_t>(logits.size()) != rows * cols * levels) {
    throw ShapeError("logit count does not match the region grid");
  }
  GrainMap g(rows, cols, levels);
  std::vector<double> p(static_cast<std::size_t>(levels));
  for (std::int64_t r = 0; r < rows * cols; ++r) {
    const float* row = logits.data() + r * levels;
    if (temperature == 0.0) {
      int best = 0;
      for (int l = 1; l < levels; ++l) {
        if (row[l] >= row[best]) best = l;  // ties move to the coarser index
      }
      g.cells[r] = best + 1;
      continue;
    }
    double mx = row[0];
    for (int l = 1; l < levels; ++l) mx = std::max(mx, static_cast<double>(row[l]));
    double total = 0.0;
    for (int l = 0; l < levels; ++l) {
      p[l] = std::exp((row[l] - mx) / temperature);
      total += p[l];
    }
    double u = rng.uniform() * total;
    int pick = levels - 1;
    for (int l = 0; l < levels; ++l) {
      if (u < p[l]) {
        pick = l;
        break;
      }
      u -= p[l];
    }
    g.cells[r] = pick + 1;
  }
  return g;
}

GrainMap sample_grain_map(const GrainPrior& model, Rng& rng, std::optional<std::int64_t> class_id,
                          double temperature) {
  if (temperature < 0.0) throw ValueError("temperature must be nonnegative");
  const auto& cfg = model.config();
  NoGradGuard no_grad;
  const std::int64_t cls = class_id.value_or(cfg.num_classes);
  const Tensor logits = model.forward(model.draw_noise(1, rng), std::span(&cls, 1));
  return sample_from_logits(logits.data(), cfg.rows, cfg.cols, cfg.levels, temperature, rng);
}

}  // namespace dyngrain
