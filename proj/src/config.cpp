#include "dyngrain/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

namespace dyngrain {

namespace {

using Json = nlohmann::ordered_json;

void reject_unknown(const Json& j, const Json& known, const std::string& where,
                    std::initializer_list<const char*> extra = {}) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> allowed(extra.begin(), extra.end());
  for (const auto& [k, v] : known.items()) allowed.insert(k);
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

Json threshold_json(double t) {
  if (std::isinf(t)) return t > 0 ? "inf" : "-inf";
  return t;
}

double threshold_from(const Json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw ConfigError("threshold '" + s + "' is not a number");
  }
  return j.get<double>();
}

}  // namespace

Json StageOptions::to_json() const {
  return {{"steps", steps},
          {"batch", batch},
          {"lr", adam.lr},
          {"beta1", adam.beta1},
          {"beta2", adam.beta2},
          {"eps", adam.eps},
          {"weight_decay", adam.weight_decay},
          {"decoupled", adam.decoupled},
          {"checkpoint_every", checkpoint_every}};
}

StageOptions StageOptions::from_json(const Json& j, const StageOptions& d) {
  reject_unknown(j, d.to_json(), "stage options");
  StageOptions s = d;
  s.steps = j.value("steps", d.steps);
  s.batch = j.value("batch", d.batch);
  s.adam.lr = j.value("lr", d.adam.lr);
  s.adam.beta1 = j.value("beta1", d.adam.beta1);
  s.adam.beta2 = j.value("beta2", d.adam.beta2);
  s.adam.eps = j.value("eps", d.adam.eps);
  s.adam.weight_decay = j.value("weight_decay", d.adam.weight_decay);
  s.adam.decoupled = j.value("decoupled", d.adam.decoupled);
  s.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  return s;
}

RunConfig RunConfig::toy() {
  RunConfig c;
  // DVAE: plain Adam with beta1 = 0.5. The large-batch learning rate rule
  // is far too small for a few hundred steps, so the toy run uses 1e-3.
  c.dvae_train.steps = 500;
  c.dvae_train.batch = 8;
  c.dvae_train.adam = {1e-3f, 0.5f, 0.9f, 1e-8f, 0.0f, false};
  c.dvae_train.checkpoint_every = 100;

  c.grain_train.steps = 300;
  c.grain_train.batch = 16;
  c.grain_train.adam = {1e-3f, 0.9f, 0.999f, 1e-8f, 0.01f, true};
  c.grain_train.checkpoint_every = 100;

  c.content_train.steps = 1000;
  c.content_train.batch = 8;
  c.content_train.adam = {3e-4f, 0.9f, 0.999f, 1e-8f, 0.01f, true};
  c.content_train.checkpoint_every = 250;

  c.ema_decay = 0.995;
  return c;
}

Json RunConfig::to_json() const {
  Json th = Json::array();
  for (double t : thresholds) th.push_back(threshold_json(t));
  return {{"seed", seed},
          {"out_dir", out_dir},
          {"data", data.to_json()},
          {"corpus_dir", corpus_dir},
          {"calibration_images", calibration_images},
          {"ratios", ratios},
          {"thresholds", th},
          {"dvae", dvae.to_json()},
          {"grain", grain.to_json()},
          {"model", model.to_json()},
          {"dvae_train", dvae_train.to_json()},
          {"grain_train", grain_train.to_json()},
          {"content_train", content_train.to_json()},
          {"ema_decay", ema_decay},
          {"class_dropout", class_dropout},
          {"diffusion_steps", diffusion_steps},
          {"sample_steps", sample_steps},
          {"guidance", guidance},
          {"temperature", temperature}};
}

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c = toy();
  const Json known = c.to_json();
  reject_unknown(j, known, "run config");
  try {
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    if (j.contains("data")) {
      reject_unknown(j["data"], known["data"], "data");
      c.data = SyntheticSpec::from_json(j["data"]);
    }
    c.corpus_dir = j.value("corpus_dir", c.corpus_dir);
    c.calibration_images = j.value("calibration_images", c.calibration_images);
    c.ratios = j.value("ratios", c.ratios);
    if (j.contains("thresholds")) {
      c.thresholds.clear();
      for (const auto& t : j["thresholds"]) c.thresholds.push_back(threshold_from(t));
    }
    if (j.contains("dvae")) {
      reject_unknown(j["dvae"], known["dvae"], "dvae");
      c.dvae = DvaeConfig::from_json(j["dvae"]);
    }
    if (j.contains("grain")) {
      reject_unknown(j["grain"], known["grain"], "grain");
      c.grain = GrainPriorConfig::from_json(j["grain"]);
    }
    if (j.contains("model")) {
      reject_unknown(j["model"], known["model"], "model", {"preset"});
      c.model = ModelConfig::from_json(j["model"]);
    }
    if (j.contains("dvae_train")) c.dvae_train = StageOptions::from_json(j["dvae_train"], c.dvae_train);
    if (j.contains("grain_train")) c.grain_train = StageOptions::from_json(j["grain_train"], c.grain_train);
    if (j.contains("content_train")) {
      c.content_train = StageOptions::from_json(j["content_train"], c.content_train);
    }
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.class_dropout = j.value("class_dropout", c.class_dropout);
    c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
    c.sample_steps = j.value("sample_steps", c.sample_steps);
    c.guidance = j.value("guidance", c.guidance);
    c.temperature = j.value("temperature", c.temperature);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  // A stage manifest carries the full config it ran with.
  if (j.contains("stage") && j.contains("config")) return from_json(j["config"]);
  return from_json(j);
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  try {
    data.validate();
    dvae.ladder.validate(dvae.image_size, dvae.image_size);
    model.validate();
    GrainRatios{ratios}.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  const auto& ladder = dvae.ladder;
  const auto side = dvae.image_size;
  if (corpus_dir.empty()) need(data.image_size == side, "data.image_size must equal dvae.image_size");
  need(model.dynamic, "only dynamic content models are trainable");
  need(model.levels == ladder.levels() && grain.levels == ladder.levels(),
       "model.levels and grain.levels must equal the number of DVAE factors");
  need(ladder.levels() == 2, "the content model routes exactly two granularities");
  need(model.latent_size == side / ladder.finest(),
       "model.latent_size must be image_size / finest factor (" + std::to_string(side / ladder.finest()) + ")");
  need(model.latent_channels == ladder.latent_channels, "model.latent_channels must equal dvae.latent_channels");
  need(model.patch_large == ladder.coarsest() / ladder.finest(),
       "model.patch_large must equal coarsest / finest factor");
  need(grain.rows == side / region_size() && grain.cols == side / region_size(),
       "grain.rows and grain.cols must be image_size / coarsest factor");
  need(model.num_classes == num_classes() && grain.num_classes == num_classes(),
       "model.num_classes and grain.num_classes must equal the dataset class count (" +
           std::to_string(num_classes()) + ")");
  need(static_cast<int>(ratios.size()) == ladder.levels(), "ratios needs one entry per granularity");
  need(thresholds.empty() || static_cast<int>(thresholds.size()) == ladder.levels(),
       "thresholds needs one entry per granularity");
  need(calibration_images > 0, "calibration_images must be positive");
  for (const auto* s : {&dvae_train, &grain_train, &content_train}) {
    need(s->steps >= 0 && s->batch >= 1 && s->checkpoint_every >= 0, "stage steps/batch out of range");
    need(s->adam.lr > 0, "learning rate must be positive");
  }
  need(ema_decay >= 0 && ema_decay < 1, "ema_decay must lie in [0, 1)");
  need(class_dropout >= 0 && class_dropout <= 1, "class_dropout must lie in [0, 1]");
  need(diffusion_steps >= 2 && sample_steps >= 2 && sample_steps <= diffusion_steps,
       "need 2 <= sample_steps <= diffusion_steps");
  need(temperature >= 0, "temperature must be non-negative");
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const RunConfig& cfg) { return fnv1a_hex(cfg.to_json().dump()); }

}  // namespace dyngrain
