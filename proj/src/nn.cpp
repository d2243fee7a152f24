#include "dyngrain/nn.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "dyngrain/gft.hpp"

namespace dyngrain {

std::int64_t count_parameters(const NamedParams& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

Tensor make_param(Shape shape, Init init, Rng& rng, std::int64_t fan_in, std::int64_t fan_out) {
  Tensor t(std::move(shape));
  switch (init) {
    case Init::kZero:
      break;
    case Init::kXavier: {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : t.mutable_data()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
      break;
    }
    case Init::kNormal002:
      for (auto& v : t.mutable_data()) v = 0.02f * rng.normal();
      break;
  }
  t.set_requires_grad(true);
  return t;
}

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, Init init) {
  weight = make_param({in, out}, init, rng, in, out);
  bias = make_param({out}, Init::kZero, rng);
}

void Linear::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Conv2d::Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride_, int padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
  const std::int64_t fan_in = in * kernel * kernel;
  weight = make_param({kernel, kernel, in, out}, Init::kXavier, rng, fan_in, out * kernel * kernel);
  bias = make_param({out}, Init::kZero, rng);
}

void Conv2d::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Tensor timestep_embedding(std::span<const float> t, std::int64_t dim, float max_period) {
  const std::int64_t half = dim / 2;
  const auto b = static_cast<std::int64_t>(t.size());
  Tensor out({b, dim});
  auto o = out.mutable_data();
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t k = 0; k < half; ++k) {
      const double freq =
          std::exp(-std::log(static_cast<double>(max_period)) * static_cast<double>(k) / half);
      const double arg = static_cast<double>(t[i]) * freq;
      o[i * dim + k] = static_cast<float>(std::cos(arg));
      o[i * dim + half + k] = static_cast<float>(std::sin(arg));
    }
  }
  return out;
}

Tensor sincos_pos_embed_2d(std::int64_t dim, std::int64_t rows, std::int64_t cols) {
  if (dim % 4 != 0) throw ShapeError("2-D sin-cos embedding needs dim divisible by 4");
  const std::int64_t quarter = dim / 4;
  Tensor out({rows * cols, dim});
  auto o = out.mutable_data();
  auto fill = [&](std::int64_t token, std::int64_t offset, double pos) {
    for (std::int64_t k = 0; k < quarter; ++k) {
      const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
      o[token * dim + offset + k] = static_cast<float>(std::sin(pos * omega));
      o[token * dim + offset + quarter + k] = static_cast<float>(std::cos(pos * omega));
    }
  };
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      const std::int64_t token = r * cols + c;
      fill(token, 0, static_cast<double>(c));
      fill(token, 2 * quarter, static_cast<double>(r));
    }
  }
  return out;
}

Tensor repeat_tokens(const Tensor& v, std::int64_t n) {
  const std::int64_t b = v.dim(0), d = v.dim(-1);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n), 0);
  return gather(reshape(v, {b, 1, d}), 1, idx);
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
  const std::int64_t n = x.dim(1);
  return add(mul(x, add_scalar(repeat_tokens(scale, n), 1.0f)), repeat_tokens(shift, n));
}

void save_checkpoint(const std::filesystem::path& dir, const std::string& name,
                     const NamedParams& params, const std::string& config_json) {
  std::filesystem::create_directories(dir);
  std::vector<Tensor> ts;
  nlohmann::ordered_json manifest;
  manifest["format"] = "GFT1";
  manifest["config"] = nlohmann::ordered_json::parse(config_json);
  auto& list = manifest["parameters"];
  list = nlohmann::ordered_json::array();
  for (const auto& [pname, t] : params) {
    ts.push_back(t);
    list.push_back({{"name", pname}, {"shape", t.shape()}});
  }
  save_gft_list(dir / (name + ".gft"), ts);
  std::ofstream(dir / (name + ".json")) << manifest.dump(2) << '\n';
}

void load_checkpoint(const std::filesystem::path& dir, const std::string& name,
                     NamedParams& params) {
  std::ifstream js(dir / (name + ".json"));
  if (!js) throw FormatError("missing checkpoint manifest " + (dir / (name + ".json")).string());
  const auto manifest = nlohmann::ordered_json::parse(js);
  const auto& list = manifest.at("parameters");
  auto ts = load_gft_list(dir / (name + ".gft"));
  if (ts.size() != params.size() || list.size() != params.size()) {
    throw FormatError("checkpoint " + name + " has " + std::to_string(ts.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [pname, t] = params[i];
    if (list[i].at("name").get<std::string>() != pname || ts[i].shape() != t.shape()) {
      throw FormatError("checkpoint entry " + list[i].at("name").get<std::string>() + " " +
                        to_string(ts[i].shape()) + " does not match " + pname + " " +
                        to_string(t.shape()));
    }
    std::copy(ts[i].data().begin(), ts[i].data().end(), t.mutable_data().begin());
  }
}

std::string checkpoint_config(const std::filesystem::path& dir, const std::string& name) {
  std::ifstream js(dir / (name + ".json"));
  if (!js) throw FormatError("missing checkpoint manifest " + (dir / (name + ".json")).string());
  return nlohmann::ordered_json::parse(js).at("config").dump();
}

Adam::Adam(NamedParams params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
    v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(opts_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(opts_.beta2), static_cast<double>(t_));
  const float step_size = static_cast<float>(opts_.lr / bc1);
  const float bc2_sqrt = static_cast<float>(std::sqrt(bc2));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    auto& t = params_[p].second;
    if (!t.has_grad()) continue;
    auto w = t.mutable_data();
    auto g = t.grad();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      float gi = g[i];
      if (!opts_.decoupled && opts_.weight_decay != 0.0f) gi += opts_.weight_decay * w[i];
      m[i] = opts_.beta1 * m[i] + (1.0f - opts_.beta1) * gi;
      v[i] = opts_.beta2 * v[i] + (1.0f - opts_.beta2) * gi * gi;
      if (opts_.decoupled && opts_.weight_decay != 0.0f) w[i] -= opts_.lr * opts_.weight_decay * w[i];
      w[i] -= step_size * m[i] / (std::sqrt(v[i]) / bc2_sqrt + opts_.eps);
    }
  }
}

std::vector<Tensor> Adam::state() const {
  std::vector<Tensor> out;
  for (std::size_t p = 0; p < params_.size(); ++p) {
    out.emplace_back(params_[p].second.shape(), m_[p]);
  }
  for (std::size_t p = 0; p < params_.size(); ++p) {
    out.emplace_back(params_[p].second.shape(), v_[p]);
  }
  return out;
}

void Adam::load_state(const std::vector<Tensor>& state, std::int64_t steps) {
  if (state.size() != 2 * params_.size()) throw FormatError("optimizer state size mismatch");
  for (std::size_t p = 0; p < params_.size(); ++p) {
    m_[p].assign(state[p].data().begin(), state[p].data().end());
    v_[p].assign(state[params_.size() + p].data().begin(), state[params_.size() + p].data().end());
  }
  t_ = steps;
}

}  // namespace dyngrain
