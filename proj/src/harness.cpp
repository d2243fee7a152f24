#include "dyngrain/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dyngrain/diffusion.hpp"
#include "dyngrain/dvae.hpp"
#include "dyngrain/gft.hpp"
#include "dyngrain/grain_prior.hpp"
#include "dyngrain/io.hpp"
#include "dyngrain/synthetic.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#ifndef DYNGRAIN_CODE_HASH
#define DYNGRAIN_CODE_HASH "unknown"
#endif

namespace dyngrain {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------- dataset

Dataset::Dataset(const RunConfig& cfg) : cfg_(cfg), side_(cfg.dvae.image_size) {
  if (cfg.corpus_dir.empty()) {
    size_ = cfg.data.count;
  } else {
    if (!fs::is_directory(cfg.corpus_dir)) throw ConfigError("corpus_dir " + cfg.corpus_dir + " is not a directory");
    for (const auto& e : fs::directory_iterator(cfg.corpus_dir)) {
      if (e.is_regular_file() && e.path().extension() == ".png") files_.push_back(e.path());
    }
    std::sort(files_.begin(), files_.end());
    if (files_.empty()) throw ConfigError("corpus_dir " + cfg.corpus_dir + " holds no .png files");
    size_ = static_cast<std::int64_t>(files_.size());
  }
  if (size_ <= 0) throw ConfigError("dataset is empty");
  images_.resize(size_);
  labels_.assign(size_, 0);
  entropy_.resize(size_);
}

void Dataset::load(std::int64_t i) {
  if (i < 0 || i >= size_) throw ValueError("dataset index " + std::to_string(i) + " out of range");
  if (images_[i]) return;
  if (files_.empty()) {
    auto s = generate_synthetic(cfg_.data, i);
    images_[i] = std::move(s.image);
    labels_[i] = s.label;
  } else {
    Tensor img = read_png(files_[i]);
    if (img.dim(0) != side_ || img.dim(1) != side_) {
      throw ConfigError(files_[i].string() + " is " + to_string(img.shape()) + ", expected " +
                        std::to_string(side_) + "x" + std::to_string(side_));
    }
    images_[i] = std::move(img);
  }
}

const Tensor& Dataset::image(std::int64_t i) {
  load(i);
  return *images_[i];
}

std::int64_t Dataset::label(std::int64_t i) {
  load(i);
  return labels_[i];
}

const EntropyMap& Dataset::entropy(std::int64_t i) {
  if (!entropy_[i]) entropy_[i] = entropy_map(to_grayscale(image(i)), cfg_.region_size());
  return *entropy_[i];
}

Tensor Dataset::batch(std::span<const std::int64_t> indices) {
  const std::int64_t per = side_ * side_ * 3;
  Tensor out({static_cast<std::int64_t>(indices.size()), side_, side_, 3});
  auto dst = out.mutable_data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = image(indices[b]);
    std::copy_n(img.data().begin(), per, dst.begin() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

// ------------------------------------------------------------ calibration

std::string code_hash() { return DYNGRAIN_CODE_HASH; }

void configure_allocator() {
#if defined(__GLIBC__)
  // Large activations would otherwise be mmapped and unmapped on every op,
  // paying page faults each time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

namespace {

Json thresholds_json(const EntropyThresholds& th) {
  RunConfig tmp;
  tmp.thresholds = th.t;
  return tmp.to_json()["thresholds"];
}

void require(const fs::path& p, const std::string& stage, const std::string& needed_by) {
  if (!fs::exists(p)) {
    throw ConfigError(needed_by + " needs stage '" + stage + "' to have run first (missing " + p.string() + ")");
  }
}

}  // namespace

CalibrationResult calibrate(const RunConfig& cfg, std::ostream* log) {
  cfg.validate();
  Dataset data(cfg);
  const std::int64_t n = std::min(cfg.calibration_images, data.size());
  std::vector<EntropyMap> maps;
  maps.reserve(n);
  for (std::int64_t i = 0; i < n; ++i) maps.push_back(data.entropy(i));

  CalibrationResult res;
  res.thresholds = calibrate_thresholds(maps, GrainRatios{cfg.ratios});
  std::int64_t fine = 0;
  for (const auto& em : maps) {
    const GrainMap g = assign_grain_map(em, res.thresholds);
    fine += g.count_level(1);
    res.regions += g.count();
  }
  res.realized_fine_fraction = static_cast<double>(fine) / static_cast<double>(res.regions);

  const RunPaths paths(cfg);
  fs::create_directories(paths.stage("calibrate"));
  RunConfig resolved = cfg;
  resolved.thresholds = res.thresholds.t;
  write_json(paths.thresholds(), {{"thresholds", thresholds_json(res.thresholds)},
                                  {"ratios", cfg.ratios},
                                  {"images", n},
                                  {"regions", res.regions},
                                  {"realized_fine_fraction", res.realized_fine_fraction}});
  write_json(paths.root / "config.json", resolved.to_json());
  if (log) {
    *log << "calibrate: " << res.regions << " regions from " << n << " images, fine fraction "
         << res.realized_fine_fraction << "\n";
  }
  return res;
}

EntropyThresholds load_thresholds(const RunConfig& cfg, const std::string& needed_by) {
  if (!cfg.thresholds.empty()) return {cfg.thresholds};
  const RunPaths paths(cfg);
  require(paths.thresholds(), "calibrate", needed_by);
  RunConfig tmp = cfg;
  tmp.thresholds.clear();
  Json j = tmp.to_json();
  j["thresholds"] = read_json(paths.thresholds()).at("thresholds");
  return {RunConfig::from_json(j).thresholds};
}

GrainMap ground_truth_map(Dataset& data, std::int64_t index, const EntropyThresholds& th) {
  return assign_grain_map(data.entropy(index), th);
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double loss_drop(std::span<const double> losses, std::size_t window) {
  if (losses.size() < window) window = losses.size();
  if (window == 0) return 0.0;
  const double first = mean_of(losses.first(window));
  const double last = mean_of(losses.last(window));
  return (first - last) / first;
}

// ---------------------------------------------------------------- training

namespace {

std::string format_loss(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

// Owns the stage directory: metrics log, checkpoints, resume and manifest.
class StageRunner {
 public:
  StageRunner(const RunConfig& cfg, std::string name, std::string primary, const TrainOptions& opts)
      : cfg_(cfg), name_(std::move(name)), primary_(std::move(primary)), opts_(opts) {
    dir_ = RunPaths(cfg).stage(name_);
    fs::create_directories(dir_);
    write_json(dir_ / "config.json", cfg_.to_json());
  }

  const fs::path& dir() const { return dir_; }
  std::vector<double>& losses() { return losses_; }

  /// Returns the number of steps already done.
  int resume(NamedParams& params, Adam& opt, Ema* ema) {
    const fs::path state = dir_ / "state.json";
    int done = 0;
    std::vector<std::string> kept;
    if (!opts_.fresh && fs::exists(state)) {
      const Json s = read_json(state);
      if (s.value("config_hash", "") != config_hash(cfg_)) {
        throw ConfigError(name_ + ": checkpoint in " + dir_.string() +
                          " was written with a different config; pass a fresh output directory");
      }
      done = s.at("step").get<int>();
      load_checkpoint(dir_, "model", params);
      opt.load_state(load_gft_list(dir_ / "optimizer.gft"), s.at("optimizer_steps").get<std::int64_t>());
      if (ema) load_checkpoint(dir_, "ema", ema->shadow());

      std::ifstream is(dir_ / "metrics.csv");
      std::string line;
      std::getline(is, line);
      while (std::getline(is, line)) {
        const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) continue;
        if (std::stoi(line.substr(0, c1)) >= done) break;
        kept.push_back(line);
        if (line.substr(c2 + 1) == primary_) {
          losses_.push_back(std::strtof(line.substr(c1 + 1, c2 - c1 - 1).c_str(), nullptr));
        }
      }
    }
    csv_.open(dir_ / "metrics.csv", std::ios::trunc);
    csv_ << "step,loss,component\n";
    for (const auto& l : kept) csv_ << l << '\n';
    csv_.flush();
    first_ = done;
    return done;
  }

  void record(int step, float value, const std::string& component) {
    csv_ << step << ',' << format_loss(value) << ',' << component << '\n';
    if (component == primary_) losses_.push_back(value);
  }

  void progress(int step, int total) {
    if (!opts_.log || opts_.log_every <= 0) return;
    if ((step + 1) % opts_.log_every == 0 || step + 1 == total) {
      const std::size_t w = std::min<std::size_t>(losses_.size(), static_cast<std::size_t>(opts_.log_every));
      *opts_.log << name_ << " step " << step + 1 << "/" << total << " " << primary_ << " "
                 << mean_of(std::span<const double>(losses_).last(w)) << "\n";
      opts_.log->flush();
    }
  }

  void checkpoint(int done, const NamedParams& params, const Adam& opt, const Ema* ema) {
    csv_.flush();
    const std::string echo = cfg_.to_json().dump();
    save_checkpoint(dir_, "model", params, echo);
    save_gft_list(dir_ / "optimizer.gft", opt.state());
    if (ema) save_checkpoint(dir_, "ema", ema->shadow(), echo);
    write_json(dir_ / "state.json",
               {{"step", done}, {"optimizer_steps", opt.steps()}, {"config_hash", config_hash(cfg_)}});
  }

  bool should_checkpoint(int done, int total) const {
    return done == total || (cfg_every() > 0 && done % cfg_every() == 0) || done == opts_.stop_after;
  }
  bool should_stop(int done) const { return opts_.stop_after >= 0 && done >= opts_.stop_after; }

  StageResult finish(int done, Json extra) {
    csv_.flush();
    StageResult r{name_, dir_, first_, done, losses_, std::move(extra)};
    const std::size_t w = std::min<std::size_t>(50, losses_.size());
    Json m = {{"stage", name_},
              {"config", cfg_.to_json()},
              {"config_hash", config_hash(cfg_)},
              {"seed", cfg_.seed},
              {"code_hash", code_hash()},
              {"steps_done", done},
              {"resumed_from", first_},
              {"first_window_mean", mean_of(std::span<const double>(losses_).first(w))},
              {"last_window_mean", mean_of(std::span<const double>(losses_).last(w))},
              {"loss_drop", loss_drop(losses_)},
              {"metrics", r.extra}};
    write_json(dir_ / "manifest.json", m);
    return r;
  }

  Rng step_rng(int step) const {
    return Rng(cfg_.seed, stream_id(name_.c_str()) + static_cast<std::uint64_t>(step));
  }

 private:
  int cfg_every() const {
    if (name_ == "train-dvae") return cfg_.dvae_train.checkpoint_every;
    if (name_ == "train-grain") return cfg_.grain_train.checkpoint_every;
    return cfg_.content_train.checkpoint_every;
  }

  RunConfig cfg_;
  std::string name_, primary_;
  TrainOptions opts_;
  fs::path dir_;
  std::ofstream csv_;
  std::vector<double> losses_;
  int first_ = 0;
};

std::vector<std::int64_t> draw_indices(Rng& rng, std::int64_t batch, std::int64_t size) {
  std::vector<std::int64_t> idx(batch);
  for (auto& i : idx) i = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(size)));
  return idx;
}

std::vector<GrainMap> maps_for(Dataset& data, std::span<const std::int64_t> idx, const EntropyThresholds& th) {
  std::vector<GrainMap> g;
  g.reserve(idx.size());
  for (auto i : idx) g.push_back(ground_truth_map(data, i, th));
  return g;
}

// Labels with condition dropout: each is replaced by the null class with
// probability `p`.
std::vector<std::int64_t> drop_classes(Dataset& data, std::span<const std::int64_t> idx, double p,
                                       std::int64_t null_class, Rng& rng) {
  std::vector<std::int64_t> c(idx.size());
  for (std::size_t b = 0; b < idx.size(); ++b) {
    c[b] = data.label(idx[b]);
    if (rng.uniform() < p) c[b] = null_class;
  }
  return c;
}

RunConfig with_thresholds(const RunConfig& cfg, const EntropyThresholds& th) {
  RunConfig c = cfg;
  c.thresholds = th.t;
  return c;
}

Dvae load_dvae(const RunConfig& cfg, const std::string& needed_by) {
  const fs::path dir = RunPaths(cfg).stage("train-dvae");
  require(dir / "model.gft", "train-dvae", needed_by);
  Rng init(cfg.seed, stream_id("init-dvae"));
  Dvae dvae(cfg.dvae, init);
  NamedParams p = dvae.parameters();
  load_checkpoint(dir, "model", p);
  return dvae;
}

}  // namespace

StageResult train_dvae(const RunConfig& in, const TrainOptions& opts) {
  in.validate();
  const EntropyThresholds th = load_thresholds(in, "train-dvae");
  const RunConfig cfg = with_thresholds(in, th);
  Dataset data(cfg);
  Rng init(cfg.seed, stream_id("init-dvae"));
  Dvae dvae(cfg.dvae, init);
  NamedParams params = dvae.parameters();
  Adam opt(params, cfg.dvae_train.adam);

  StageRunner run(cfg, "train-dvae", "total", opts);
  const int total = cfg.dvae_train.steps;
  int step = run.resume(params, opt, nullptr);
  const auto& ladder = cfg.dvae.ladder;
  for (; step < total && !run.should_stop(step); ++step) {
    Rng rng = run.step_rng(step);
    const auto idx = draw_indices(rng, cfg.dvae_train.batch, data.size());
    const Tensor images = data.batch(idx);
    const auto grains = maps_for(data, idx, th);

    opt.zero_grad();
    const HierarchicalLatents lat = dvae.encode(images);
    std::vector<Tensor> z;
    for (std::size_t l = 0; l < lat.mean.size(); ++l) z.push_back(reparameterize(lat.mean[l], lat.logvar[l], rng));
    const Tensor recon = dvae.decode(mix_latents(z, grains, ladder), grains);
    const Tensor loss = dvae_loss(images, recon, lat, grains, ladder, cfg.dvae.kl_weight);
    float kl;
    {
      NoGradGuard ng;
      kl = kl_used_cells(lat, grains, ladder).item();
    }
    backward(loss);
    opt.step();

    run.record(step, loss.item(), "total");
    run.record(step, kl, "kl");
    run.progress(step, total);
    if (run.should_checkpoint(step + 1, total)) run.checkpoint(step + 1, params, opt, nullptr);
  }
  return run.finish(step, {{"parameters", count_parameters(params)}});
}

StageResult train_grain(const RunConfig& in, const TrainOptions& opts) {
  in.validate();
  const EntropyThresholds th = load_thresholds(in, "train-grain");
  const RunConfig cfg = with_thresholds(in, th);
  Dataset data(cfg);
  Rng init(cfg.seed, stream_id("init-grain"));
  const GrainPriorConfig& gcfg = cfg.grain;
  GrainPrior prior(gcfg, init);
  NamedParams params = prior.parameters();
  Adam opt(params, cfg.grain_train.adam);

  StageRunner run(cfg, "train-grain", "ce", opts);
  const int total = cfg.grain_train.steps;
  int step = run.resume(params, opt, nullptr);
  const std::int64_t null_class = gcfg.num_classes;
  for (; step < total && !run.should_stop(step); ++step) {
    Rng rng = run.step_rng(step);
    const auto idx = draw_indices(rng, cfg.grain_train.batch, data.size());
    const auto targets = maps_for(data, idx, th);
    const auto classes = drop_classes(data, idx, gcfg.class_dropout, null_class, rng);
    const Tensor noise = prior.draw_noise(cfg.grain_train.batch, rng);

    opt.zero_grad();
    const Tensor loss = grain_ce_loss(prior.forward(noise, classes), targets);
    backward(loss);
    opt.step();

    run.record(step, loss.item(), "ce");
    run.progress(step, total);
    if (run.should_checkpoint(step + 1, total)) run.checkpoint(step + 1, params, opt, nullptr);
  }

  Json extra = {{"parameters", count_parameters(params)}};
  if (step == total) {
    // Fine fraction of sampled maps against the corpus it was trained on.
    NoGradGuard ng;
    double corpus = 0.0;
    for (std::int64_t i = 0; i < data.size(); ++i) corpus += ground_truth_map(data, i, th).fine_fraction();
    corpus /= static_cast<double>(data.size());
    Rng rng(cfg.seed, stream_id("grain-eval"));
    constexpr int kMaps = 128;
    double sampled = 0.0;
    for (int s = 0; s < kMaps; ++s) {
      const auto cls = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(gcfg.num_classes)));
      sampled += sample_grain_map(prior, rng, cls, cfg.temperature).fine_fraction();
    }
    extra["corpus_fine_fraction"] = corpus;
    extra["sampled_fine_fraction"] = sampled / kMaps;
    extra["sampled_maps"] = kMaps;
  }
  return run.finish(step, extra);
}

namespace {

struct LatentSet {
  Tensor latents;  // [N, side, side, C], unscaled
  std::vector<GrainMap> grains;
  double scale = 1.0;
};

// Deterministic (posterior mean) latent mixture of every training image.
LatentSet encode_dataset(const Dvae& dvae, Dataset& data, const EntropyThresholds& th) {
  NoGradGuard ng;
  LatentSet s;
  std::vector<Tensor> chunks;
  constexpr std::int64_t kChunk = 16;
  for (std::int64_t lo = 0; lo < data.size(); lo += kChunk) {
    std::vector<std::int64_t> idx(std::min(kChunk, data.size() - lo));
    std::iota(idx.begin(), idx.end(), lo);
    const auto g = maps_for(data, idx, th);
    const HierarchicalLatents lat = dvae.encode(data.batch(idx));
    chunks.push_back(mix_latents(lat.mean, g, dvae.config().ladder));
    s.grains.insert(s.grains.end(), g.begin(), g.end());
  }
  s.latents = concat(chunks, 0);
  double sum = 0.0, sq = 0.0;
  for (float v : s.latents.data()) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(s.latents.numel());
  const double var = sq / n - (sum / n) * (sum / n);
  s.scale = var > 0 ? 1.0 / std::sqrt(var) : 1.0;
  return s;
}

}  // namespace

StageResult train_content(const RunConfig& in, const TrainOptions& opts) {
  in.validate();
  const EntropyThresholds th = load_thresholds(in, "train-content");
  const RunConfig cfg = with_thresholds(in, th);
  const Dvae dvae = load_dvae(cfg, "train-content");
  Dataset data(cfg);
  const LatentSet set = encode_dataset(dvae, data, th);

  Rng init(cfg.seed, stream_id("init-content"));
  ContentModel model(cfg.model, init);
  NamedParams params = model.parameters();
  Adam opt(params, cfg.content_train.adam);
  Ema ema(params, cfg.ema_decay);
  const DiffusionSchedule schedule = DiffusionSchedule::linear(cfg.diffusion_steps, 1e-4, 2e-2, cfg.sample_steps);

  StageRunner run(cfg, "train-content", "total", opts);
  write_json(run.dir() / "latent.json", {{"scale", set.scale}, {"images", data.size()}});
  const int total = cfg.content_train.steps;
  int step = run.resume(params, opt, &ema);
  const std::int64_t null_class = cfg.model.num_classes;
  for (; step < total && !run.should_stop(step); ++step) {
    Rng rng = run.step_rng(step);
    const auto idx = draw_indices(rng, cfg.content_train.batch, data.size());
    std::vector<GrainMap> grains;
    for (auto i : idx) grains.push_back(set.grains[i]);
    const auto classes = drop_classes(data, idx, cfg.class_dropout, null_class, rng);
    std::vector<int> t(idx.size());
    for (auto& v : t) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.steps)));
    const Tensor z0 = mul_scalar(gather(set.latents, 0, idx), static_cast<float>(set.scale));
    const NoisedLatent noised = q_sample(z0, t, grains, schedule, rng);
    const std::vector<float> tf(t.begin(), t.end());

    opt.zero_grad();
    const ContentOutput out = model.forward(noised.z_t, tf, classes, grains);
    const Tensor loss = multi_grained_loss(noised.eps_coarse, out.eps_coarse, noised.eps_fine, out.eps_fine);
    backward(loss);
    opt.step();
    ema.update(params);

    run.record(step, loss.item(), "total");
    run.progress(step, total);
    if (run.should_checkpoint(step + 1, total)) run.checkpoint(step + 1, params, opt, &ema);
  }
  return run.finish(step, {{"parameters", count_parameters(params)}, {"latent_scale", set.scale}});
}

// ---------------------------------------------------------------- sampling

GrainSource parse_grain_source(const std::string& name) {
  if (name == "model") return GrainSource::kModel;
  if (name == "ground-truth") return GrainSource::kGroundTruth;
  if (name == "random") return GrainSource::kRandom;
  if (name == "fixed") return GrainSource::kFixed;
  throw ConfigError("unknown grain source '" + name + "' (model, ground-truth, random, fixed)");
}

std::string to_string(GrainSource s) {
  switch (s) {
    case GrainSource::kModel: return "model";
    case GrainSource::kGroundTruth: return "ground-truth";
    case GrainSource::kRandom: return "random";
    case GrainSource::kFixed: return "fixed";
  }
  return "?";
}

GrainMap random_grain_map(const RunConfig& cfg, Rng& rng) {
  GrainMap g(cfg.grain.rows, cfg.grain.cols, 1);
  for (int& c : g.cells) {
    double u = rng.uniform(), acc = 0.0;
    c = static_cast<int>(cfg.ratios.size());
    for (std::size_t i = 0; i < cfg.ratios.size(); ++i) {
      acc += cfg.ratios[i];
      if (u < acc) {
        c = static_cast<int>(i) + 1;
        break;
      }
    }
  }
  return g;
}

namespace {

GrainMap read_fixed_map(const RunConfig& cfg, const fs::path& file) {
  if (file.empty()) throw ConfigError("the fixed grain source needs a grain map file");
  GrainMap g;
  try {
    g = grain_map_from_json(read_json(file));
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  if (g.rows != cfg.grain.rows || g.cols != cfg.grain.cols) {
    throw ConfigError(file.string() + " is " + std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                      ", the run uses " + std::to_string(cfg.grain.rows) + "x" + std::to_string(cfg.grain.cols));
  }
  for (int c : g.cells) {
    if (c > cfg.dvae.ladder.levels()) throw ConfigError(file.string() + " holds grain index " + std::to_string(c));
  }
  return g;
}

}  // namespace

SampleResult sample_pipeline(const RunConfig& in, const SampleRequest& req) {
  SampleResult res;
  if (req.count <= 0) return res;
  in.validate();
  const RunPaths paths(in);
  const fs::path content_dir = paths.stage("train-content");
  const std::string ckpt = req.use_ema ? "ema" : "model";
  require(content_dir / (ckpt + ".gft"), "train-content", "sample");
  const Dvae dvae = load_dvae(in, "sample");

  Rng init(in.seed, stream_id("init-content"));
  ContentModel model(in.model, init);
  NamedParams mp = model.parameters();
  load_checkpoint(content_dir, ckpt, mp);
  const double scale = read_json(content_dir / "latent.json").at("scale").get<double>();

  std::optional<GrainPrior> prior;
  std::optional<Dataset> data;
  std::optional<EntropyThresholds> th;
  GrainMap fixed;
  switch (req.source) {
    case GrainSource::kModel: {
      const fs::path dir = paths.stage("train-grain");
      require(dir / "model.gft", "train-grain", "sample");
      Rng gi(in.seed, stream_id("init-grain"));
      prior.emplace(in.grain, gi);
      NamedParams gp = prior->parameters();
      load_checkpoint(dir, "model", gp);
      break;
    }
    case GrainSource::kGroundTruth:
      th = load_thresholds(in, "sample");
      data.emplace(in);
      break;
    case GrainSource::kFixed:
      fixed = read_fixed_map(in, req.fixed_file);
      break;
    case GrainSource::kRandom:
      break;
  }

  const std::int64_t k = in.model.num_classes;
  if (req.class_id && (*req.class_id < 0 || *req.class_id >= k)) {
    throw ConfigError("class id " + std::to_string(*req.class_id) + " outside [0, " + std::to_string(k) + ")");
  }
  Rng rng(in.seed, stream_id("sample"));
  std::vector<std::int64_t> classes(req.count);
  for (int i = 0; i < req.count; ++i) {
    if (req.source == GrainSource::kGroundTruth) {
      const std::int64_t src = i % data->size();
      res.grains.push_back(ground_truth_map(*data, src, *th));
      classes[i] = req.class_id.value_or(data->label(src));
      continue;
    }
    classes[i] = req.class_id ? *req.class_id
                              : static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(k)));
    switch (req.source) {
      case GrainSource::kModel: res.grains.push_back(sample_grain_map(*prior, rng, classes[i], in.temperature)); break;
      case GrainSource::kRandom: res.grains.push_back(random_grain_map(in, rng)); break;
      default: res.grains.push_back(fixed); break;
    }
  }

  const fs::path out = req.out.empty() ? paths.root / "samples" : req.out;
  fs::create_directories(out);
  const DiffusionSchedule schedule = DiffusionSchedule::linear(in.diffusion_steps, 1e-4, 2e-2, in.sample_steps);
  const Denoiser eps = as_denoiser(model);
  const std::int64_t side = in.model.latent_size, channels = in.model.latent_channels, px = in.dvae.image_size;
  constexpr int kChunk = 8;
  NoGradGuard ng;
  for (int lo = 0; lo < req.count; lo += kChunk) {
    const int n = std::min(kChunk, req.count - lo);
    const std::span<const GrainMap> g(res.grains.data() + lo, n);
    const std::span<const std::int64_t> c(classes.data() + lo, n);
    const Tensor z = sample(eps, g, c, side, channels, schedule, in.guidance, k, rng);
    const Tensor images = dvae.decode(mul_scalar(z, static_cast<float>(1.0 / scale)), g);
    for (int b = 0; b < n; ++b) {
      const int i = lo + b;
      Tensor img = reshape(slice(images, 0, b, 1), {px, px, 3}).clone();
      const Tensor heat = render_grain_map(res.grains[i], px, px);
      const std::string stem = std::to_string(i);
      write_png(out / ("sample_" + stem + ".png"), img);
      write_png(out / ("grain_" + stem + ".png"), heat);
      write_png(out / ("pair_" + stem + ".png"), side_by_side(img, heat));
      write_json(out / ("grain_" + stem + ".json"), grain_map_to_json(res.grains[i]));
      res.files.push_back(out / ("sample_" + stem + ".png"));
      res.images.push_back(std::move(img));
    }
    if (req.log) *req.log << "sample: " << lo + n << "/" << req.count << " images\n";
  }

  Json fine = Json::array();
  for (const auto& g : res.grains) fine.push_back(g.fine_fraction());
  write_json(out / "manifest.json", {{"source", to_string(req.source)},
                                     {"count", req.count},
                                     {"classes", classes},
                                     {"fine_fraction", fine},
                                     {"checkpoint", ckpt},
                                     {"config", in.to_json()},
                                     {"config_hash", config_hash(in)},
                                     {"seed", in.seed},
                                     {"code_hash", code_hash()}});
  return res;
}

std::map<std::string, double> dvae_grain_ablation(const RunConfig& cfg, std::int64_t count) {
  const EntropyThresholds th = load_thresholds(cfg, "dvae ablation");
  const Dvae dvae = load_dvae(cfg, "dvae ablation");
  Dataset data(cfg);
  count = std::min(count, data.size());
  std::vector<std::int64_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  const auto& ladder = cfg.dvae.ladder;

  NoGradGuard ng;
  const Tensor images = data.batch(idx);
  const HierarchicalLatents lat = dvae.encode(images);
  Rng rng(cfg.seed, stream_id("ablation"));
  std::map<std::string, std::vector<GrainMap>> variants;
  for (auto i : idx) {
    variants["all-fine"].emplace_back(cfg.grain.rows, cfg.grain.cols, 1);
    variants["all-coarse"].emplace_back(cfg.grain.rows, cfg.grain.cols, ladder.levels());
    variants["dynamic"].push_back(ground_truth_map(data, i, th));
    variants["random"].push_back(random_grain_map(cfg, rng));
  }
  std::map<std::string, double> out;
  for (const auto& [name, grains] : variants) {
    const Tensor recon = dvae.decode(mix_latents(lat.mean, grains, ladder), grains);
    out[name] = mse(images, recon).item();
  }
  return out;
}

}  // namespace dyngrain
