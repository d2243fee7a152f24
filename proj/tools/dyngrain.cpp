#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdlib>
#include <iomanip>
#include <iostream>

#include "dyngrain/acceptance.hpp"
#include "dyngrain/harness.hpp"
#include "dyngrain/io.hpp"
#include "dyngrain/perf.hpp"
#include "dyngrain/synthetic.hpp"

using namespace dyngrain;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "Run config JSON or a stage manifest (default: toy preset)");
  cmd->add_option("-o,--out", c.out, "Output directory (overrides the config and DYNGRAIN_OUT_DIR)");
  cmd->add_option("--seed", c.seed, "Seed override");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig::toy() : RunConfig::load(c.config);
  if (!c.out.empty()) {
    cfg.out_dir = c.out;
  } else if (const char* env = std::getenv("DYNGRAIN_OUT_DIR"); env && *env) {
    cfg.out_dir = env;
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void apply_threads() {
  const char* env = std::getenv("DYNGRAIN_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("DYNGRAIN_THREADS must be a positive integer, got '") + env + "'");
  Eigen::setNbThreads(static_cast<int>(n));
}

void print_stage(const StageResult& r) {
  std::cout << r.stage << ": " << r.steps_done << " steps";
  if (r.first_step > 0) std::cout << " (resumed at " << r.first_step << ")";
  std::cout << ", loss drop " << std::fixed << std::setprecision(1) << loss_drop(r.losses) * 100 << "%\n"
            << "  outputs in " << r.dir.string() << "\n";
  std::cout.unsetf(std::ios::fixed);
  for (const auto& [k, v] : r.extra.items()) std::cout << "  " << k << ": " << v.dump() << "\n";
}

void print_tables(std::ostream& os, const std::vector<RowCheck>& rows) {
  os << std::left << std::setw(9) << "method" << std::setw(9) << "preset" << std::setw(8) << "layers"
     << std::setw(6) << "patch" << std::right << std::setw(11) << "params(M)" << std::setw(9) << "ref" << std::setw(8)
     << "err%" << std::setw(11) << "GFLOPs" << std::setw(9) << "ref" << std::setw(8) << "err%" << "  gated\n";
  os << std::fixed;
  for (const auto& c : rows) {
    os << std::left << std::setw(9) << c.ref.method << std::setw(9) << c.ref.preset << std::setw(8) << c.ref.layers
       << std::setw(6) << c.ref.patch << std::right << std::setprecision(2) << std::setw(11) << c.cost.params / 1e6
       << std::setw(9) << c.ref.params_m << std::setw(8) << c.params_error * 100 << std::setw(11) << c.cost.flops / 1e9
       << std::setw(9) << c.ref.gflops << std::setw(8) << c.flops_error * 100 << "  "
       << (c.ref.gated ? (c.params_ok && c.flops_ok ? "ok" : "OUT") : "-") << "\n";
  }
  os.unsetf(std::ios::fixed);
}

int run(int argc, char** argv) {
  CLI::App app{"Dynamic-grain latent diffusion toolkit"};
  app.require_subcommand(1);

  Common common;
  auto* cal = app.add_subcommand("calibrate", "Calibrate entropy thresholds on the dataset");
  add_common(cal, common);

  TrainOptions topts;
  topts.log = &std::cerr;
  auto add_train = [&](const char* name, const char* help) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, common);
    cmd->add_flag("--fresh", topts.fresh, "Ignore existing checkpoints");
    cmd->add_option("--stop-after", topts.stop_after, "Stop after this many steps (checkpointed)");
    cmd->add_option("--log-every", topts.log_every, "Progress interval in steps");
    return cmd;
  };
  auto* tdvae = add_train("train-dvae", "Train the dynamic VAE");
  auto* tgrain = add_train("train-grain", "Train the grain-map prior");
  auto* tcontent = add_train("train-content", "Train the content model");

  SampleRequest req;
  req.log = &std::cerr;
  std::string source = "model", sample_out;
  std::optional<std::int64_t> class_id;
  bool no_ema = false;
  auto* samp = app.add_subcommand("sample", "Generate images with grain heatmaps");
  add_common(samp, common);
  samp->add_option("-n,--count", req.count, "Number of images")->check(CLI::NonNegativeNumber);
  samp->add_option("--class", class_id, "Class id (default: random per image)");
  samp->add_option("--grain-source", source, "model | ground-truth | random | fixed");
  samp->add_option("--grain-file", req.fixed_file, "Grain map JSON for --grain-source fixed");
  samp->add_option("--samples-dir", sample_out, "Where to write PNGs (default <out>/samples)");
  samp->add_flag("--no-ema", no_ema, "Use the live weights instead of the EMA");

  std::string analyze_json;
  std::int64_t ablation = 0;
  auto* ana = app.add_subcommand("analyze", "Parameter and FLOP counts of the reference configurations");
  add_common(ana, common);
  ana->add_option("--json", analyze_json, "Also write the table as JSON");
  ana->add_option("--dvae-ablation", ablation, "Reconstruction MSE per grain-map type on N images of a trained run");

  std::string suite = "fast", report, work_dir = "verify_run";
  auto* ver = app.add_subcommand("verify", "Run acceptance suites");
  ver->add_option("suite", suite, "Suite: " + [] {
    std::string s;
    for (const auto& n : suite_names()) s += (s.empty() ? "" : ", ") + n;
    return s;
  }());
  ver->add_option("--report", report, "Write a JSON report");
  ver->add_option("--work-dir", work_dir, "Scratch directory for the end-to-end suite");

  std::string data_out = "synthetic";
  std::int64_t data_count = -1;
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as PNGs");
  add_common(gen, common);
  gen->add_option("--data-dir", data_out, "Destination directory");
  gen->add_option("--count", data_count, "Number of images (default: the config's count)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  apply_threads();

  if (cal->parsed()) {
    const auto r = calibrate(resolve(common), &std::cerr);
    std::cout << "thresholds:";
    for (double t : r.thresholds.t) std::cout << " " << t;
    std::cout << "\nrealised fine fraction " << r.realized_fine_fraction << " over " << r.regions << " regions\n";
  } else if (tdvae->parsed()) {
    print_stage(train_dvae(resolve(common), topts));
  } else if (tgrain->parsed()) {
    print_stage(train_grain(resolve(common), topts));
  } else if (tcontent->parsed()) {
    print_stage(train_content(resolve(common), topts));
  } else if (samp->parsed()) {
    req.source = parse_grain_source(source);
    req.class_id = class_id;
    req.use_ema = !no_ema;
    if (!sample_out.empty()) req.out = sample_out;
    const auto res = sample_pipeline(resolve(common), req);
    for (std::size_t i = 0; i < res.files.size(); ++i) {
      std::cout << res.files[i].string() << "  fine fraction " << res.grains[i].fine_fraction() << "\n";
    }
  } else if (ana->parsed()) {
    std::vector<RowCheck> rows;
    for (const auto& ref : reference_rows()) rows.push_back(check_row(ref));
    print_tables(std::cout, rows);
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& c : rows) {
      j.push_back({{"method", c.ref.method}, {"preset", c.ref.preset}, {"params", c.cost.params},
                   {"params_ref_m", c.ref.params_m}, {"params_error", c.params_error}, {"macs", c.cost.flops},
                   {"gflops_ref", c.ref.gflops}, {"flops_error", c.flops_error}, {"gated", c.ref.gated},
                   {"breakdown", c.cost.breakdown}});
    }
    if (ablation > 0) {
      const auto mse = dvae_grain_ablation(resolve(common), ablation);
      std::cout << "\nDVAE reconstruction MSE by grain map (" << ablation << " images):\n";
      for (const auto& [k, v] : mse) std::cout << "  " << std::left << std::setw(12) << k << v << "\n";
    }
    if (!analyze_json.empty()) write_json(analyze_json, {{"rows", j}});
  } else if (ver->parsed()) {
    SuiteOptions so;
    so.work_dir = work_dir;
    so.log = &std::cout;
    std::vector<CriterionResult> results;
    try {
      results = run_suite(suite, so);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    const auto j = report_json(results);
    if (!report.empty()) write_json(report, j);
    std::cout << j["passed"].get<int>() << "/" << j["total"].get<int>() << " criteria passed\n";
    return j["passed"] == j["total"] ? 0 : kExitVerify;
  } else if (gen->parsed()) {
    const RunConfig cfg = resolve(common);
    const std::int64_t n = data_count < 0 ? cfg.data.count : std::min(data_count, cfg.data.count);
    std::filesystem::create_directories(data_out);
    nlohmann::ordered_json labels = nlohmann::ordered_json::object();
    for (std::int64_t i = 0; i < n; ++i) {
      const auto s = generate_synthetic(cfg.data, i);
      char name[32];
      std::snprintf(name, sizeof name, "img_%05lld.png", static_cast<long long>(i));
      write_png(std::filesystem::path(data_out) / name, s.image);
      labels[name] = s.label;
    }
    write_json(std::filesystem::path(data_out) / "labels.json", {{"spec", cfg.data.to_json()}, {"labels", labels}});
    std::cout << "wrote " << n << " images to " << data_out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
