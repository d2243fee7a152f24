// Runs every acceptance criterion and prints one PASS/FAIL line per criterion.
// Exits 0 once the full report is produced; --strict turns any FAIL into
// exit code 3.
#include <cstring>
#include <filesystem>
#include <iostream>

#include "dyngrain/acceptance.hpp"
#include "dyngrain/harness.hpp"
#include "dyngrain/io.hpp"

int main(int argc, char** argv) {
  dyngrain::configure_allocator();
  bool strict = false;
  std::string suite = "all";
  std::filesystem::path work = "acceptance_run";
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--strict")) {
      strict = true;
    } else if (!std::strcmp(argv[i], "--work-dir") && i + 1 < argc) {
      work = argv[++i];
    } else {
      suite = argv[i];
    }
  }
  try {
    dyngrain::SuiteOptions opts;
    opts.work_dir = work;
    opts.log = &std::cout;
    const auto results = dyngrain::run_suite(suite, opts);
    const auto report = dyngrain::report_json(results);
    std::filesystem::create_directories(work);
    dyngrain::write_json(work / "report.json", report);
    const int passed = report["passed"].get<int>(), total = report["total"].get<int>();
    std::cout << "acceptance: " << passed << "/" << total << " criteria passed\n";
    return strict && passed != total ? 3 : 0;
  } catch (const std::exception& e) {
    std::cerr << "acceptance run aborted: " << e.what() << "\n";
    return 1;
  }
}
