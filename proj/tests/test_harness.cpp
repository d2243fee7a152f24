#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "dyngrain/gft.hpp"
#include "dyngrain/harness.hpp"
#include "dyngrain/io.hpp"
#include "dyngrain/synthetic.hpp"

using namespace dyngrain;
namespace fs = std::filesystem;

namespace {

// Seconds-scale run: 32 px images, a two-block content model, a handful of steps.
RunConfig tiny_run(const std::string& name) {
  RunConfig c = RunConfig::toy();
  c.out_dir = (fs::temp_directory_path() / "dyngrain_tests" / name).string();
  fs::remove_all(c.out_dir);
  c.data.image_size = 32;
  c.data.count = 12;
  c.calibration_images = 12;
  c.dvae.image_size = 32;
  c.dvae.base_channels = 8;
  c.dvae.res_blocks = 1;
  c.grain.rows = c.grain.cols = 4;
  c.grain.hidden = 16;
  c.grain.depth = 1;
  c.grain.heads = 2;
  c.model.latent_size = 8;
  c.model.hidden = 16;
  c.model.heads = 2;
  c.model.backbone_layers = 1;
  c.model.refine_layers = 1;
  c.model.frequency_dim = 16;
  for (auto* s : {&c.dvae_train, &c.grain_train, &c.content_train}) {
    s->steps = 6;
    s->batch = 2;
    s->checkpoint_every = 3;
  }
  c.diffusion_steps = 20;
  c.sample_steps = 4;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("synthetic images are pure, clamped and textured where expected") {
  SyntheticSpec spec;
  auto a = generate_synthetic(spec, 7), b = generate_synthetic(spec, 7);
  CHECK(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
  CHECK(a.label == b.label);
  CHECK(a.image.shape() == Shape{64, 64, 3});
  CHECK_THROWS_AS(generate_synthetic(spec, spec.count), ValueError);

  double textured = 0, background = 0;
  int nt = 0, nb = 0;
  for (int i = 0; i < 20; ++i) {
    auto img = generate_synthetic(spec, i);
    for (float v : img.image.data()) REQUIRE((v >= 0.0f && v <= 1.0f));
    CHECK((img.label >= 0 && img.label < spec.num_classes));
    const auto mask = synthetic_texture_mask(spec, i);
    const auto em = entropy_map(to_grayscale(img.image), 8);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        int covered = 0;
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) covered += mask[(r * 8 + y) * 64 + c * 8 + x];
        if (covered == 64) {
          textured += em.at(r, c);
          ++nt;
        } else if (covered == 0) {
          background += em.at(r, c);
          ++nb;
        }
      }
  }
  REQUIRE(nt > 0);
  REQUIRE(nb > 0);
  CHECK(textured / nt > background / nb);
}

TEST_CASE("PNG round trip and grain heatmaps") {
  const fs::path dir = fs::temp_directory_path() / "dyngrain_tests" / "png";
  fs::create_directories(dir);
  Rng rng(1);
  Tensor img = rand_uniform({5, 7, 3}, rng);
  write_png(dir / "a.png", img);
  Tensor back = read_png(dir / "a.png");
  REQUIRE(back.shape() == img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i) CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);
  CHECK_THROWS_AS(read_png(dir / "missing.png"), FormatError);

  GrainMap g(2, 2, 1);
  g.at(1, 0) = 2;
  Tensor heat = render_grain_map(g, 8, 8);
  CHECK(heat[0] != heat[(4 * 8) * 3]);   // fine vs coarse colour
  CHECK(heat[0] == heat[(3 * 8 + 7) * 3]);  // same region
  CHECK(grain_map_from_json(grain_map_to_json(g)) == g);
  CHECK(side_by_side(heat, heat).shape() == Shape{8, 18, 3});
}

TEST_CASE("run config layering, validation and hashing") {
  RunConfig toy = RunConfig::toy();
  auto j = toy.to_json();
  RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json().dump() == j.dump());
  CHECK(config_hash(back) == config_hash(toy));

  auto partial = nlohmann::ordered_json::parse(R"({"seed": 9, "content_train": {"lr": 0.001}})");
  RunConfig p = RunConfig::from_json(partial);
  CHECK(p.seed == 9);
  CHECK(p.content_train.adam.lr == doctest::Approx(1e-3));
  CHECK(p.content_train.steps == toy.content_train.steps);
  CHECK(config_hash(p) != config_hash(toy));

  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::ordered_json::parse(R"({"sede": 1})")), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::ordered_json::parse(R"({"model": {"latent_size": 8}})")),
                  ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::ordered_json::parse(R"({"ratios": [0.7, 0.7]})")), ConfigError);

  RunConfig inf = toy;
  inf.thresholds = {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  CHECK(RunConfig::from_json(inf.to_json()).thresholds == inf.thresholds);
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
}

TEST_CASE("random grain source realises the requested ratio") {
  RunConfig cfg = RunConfig::toy();
  Rng rng(3);
  double total = 0;
  for (int i = 0; i < 100; ++i) total += random_grain_map(cfg, rng).fine_fraction();
  CHECK(std::abs(total / 100 - 0.5) <= 0.05);
  CHECK(parse_grain_source("ground-truth") == GrainSource::kGroundTruth);
  CHECK_THROWS_AS(parse_grain_source("oracle"), ConfigError);
}

TEST_CASE("stages enforce their prerequisites") {
  RunConfig cfg = tiny_run("prereq");
  try {
    train_content(cfg);
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'calibrate'") != std::string::npos);
  }
  calibrate(cfg);
  try {
    train_content(cfg);
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'train-dvae'") != std::string::npos);
  }
  CHECK_THROWS_AS(sample_pipeline(cfg, SampleRequest{}), ConfigError);

  SampleRequest none;
  none.count = 0;
  none.out = fs::path(cfg.out_dir) / "nothing";
  CHECK(sample_pipeline(cfg, none).files.empty());
  CHECK_FALSE(fs::exists(none.out));
}

TEST_CASE("tiny pipeline: resume determinism, manifests and sampling") {
  RunConfig cfg = tiny_run("pipeline");
  auto cal = calibrate(cfg);
  CHECK(cal.regions == 12 * 16);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "config.json"));

  const auto full = train_dvae(cfg);
  CHECK(full.steps_done == 6);
  const std::string full_log = slurp(full.dir / "metrics.csv");
  CHECK(full_log.rfind("step,loss,component\n", 0) == 0);

  // Interrupted at step 3, then resumed: identical log.
  RunConfig other = cfg;
  other.out_dir = cfg.out_dir + "_resumed";
  fs::remove_all(other.out_dir);
  fs::create_directories(fs::path(other.out_dir) / "calibrate");
  fs::copy_file(fs::path(cfg.out_dir) / "calibrate" / "thresholds.json",
                fs::path(other.out_dir) / "calibrate" / "thresholds.json");
  TrainOptions stop;
  stop.stop_after = 3;
  CHECK(train_dvae(other, stop).steps_done == 3);
  const auto resumed = train_dvae(other);
  CHECK(resumed.first_step == 3);
  CHECK(resumed.losses == full.losses);
  CHECK(slurp(resumed.dir / "metrics.csv") == full_log);

  // A rerun from the stage manifest reproduces the log bit for bit.
  RunConfig again = RunConfig::load(full.dir / "manifest.json");
  again.out_dir = cfg.out_dir + "_rerun";
  fs::remove_all(again.out_dir);
  const auto rerun = train_dvae(again);
  CHECK(slurp(rerun.dir / "metrics.csv") == full_log);
  const auto manifest = read_json(full.dir / "manifest.json");
  CHECK(manifest.at("config_hash").get<std::string>() == config_hash(RunConfig::load(full.dir / "manifest.json")));
  CHECK(manifest.at("code_hash").get<std::string>() == code_hash());

  const auto grain = train_grain(cfg);
  CHECK(grain.extra.contains("sampled_fine_fraction"));
  const auto content = train_content(cfg);
  CHECK(content.steps_done == 6);
  for (double l : content.losses) CHECK(std::isfinite(l));

  // Fixed grain source: the heatmap equals the rendered input file.
  GrainMap fixed(4, 4, 1);
  fixed.at(0, 0) = fixed.at(2, 3) = 2;
  const fs::path map_file = fs::path(cfg.out_dir) / "fixed.json";
  write_json(map_file, grain_map_to_json(fixed));
  SampleRequest req;
  req.count = 2;
  req.source = GrainSource::kFixed;
  req.fixed_file = map_file;
  const auto res = sample_pipeline(cfg, req);
  REQUIRE(res.files.size() == 2);
  const fs::path ref = fs::path(cfg.out_dir) / "reference.png";
  write_png(ref, render_grain_map(fixed, 32, 32));
  const Tensor want = read_png(ref);
  const Tensor got = read_png(res.files[0].parent_path() / "grain_0.png");
  CHECK(std::equal(got.data().begin(), got.data().end(), want.data().begin(), want.data().end()));
  for (const auto& img : res.images)
    for (float v : img.data()) CHECK(std::isfinite(v));

  for (auto source : {GrainSource::kModel, GrainSource::kGroundTruth, GrainSource::kRandom}) {
    SampleRequest r;
    r.count = 1;
    r.source = source;
    r.out = fs::path(cfg.out_dir) / ("samples_" + to_string(source));
    CHECK(sample_pipeline(cfg, r).files.size() == 1);
  }
  SampleRequest bad = req;
  bad.fixed_file = fs::path(cfg.out_dir) / "absent.json";
  CHECK_THROWS_AS(sample_pipeline(cfg, bad), ConfigError);
}

TEST_CASE("batch size one runs every stage") {
  RunConfig cfg = tiny_run("batch1");
  for (auto* s : {&cfg.dvae_train, &cfg.grain_train, &cfg.content_train}) {
    s->batch = 1;
    s->steps = 2;
  }
  calibrate(cfg);
  CHECK(train_dvae(cfg).steps_done == 2);
  CHECK(train_grain(cfg).steps_done == 2);
  CHECK(train_content(cfg).steps_done == 2);
}
