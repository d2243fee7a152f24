#pragma once

#include <filesystem>
#include <json.hpp>
#include <ostream>
#include <string>
#include <vector>

namespace dyngrain {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
};

struct SuiteOptions {
  /// Scratch space for the end-to-end run.
  std::filesystem::path work_dir = "acceptance_run";
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;
};

/// Suite names accepted by run_suite: one per criterion plus "fast"
/// (everything except the end-to-end run) and "all".
std::vector<std::string> suite_names();

/// Throws std::invalid_argument for an unknown suite name.
std::vector<CriterionResult> run_suite(const std::string& name, const SuiteOptions& opts = {});

/// One line per criterion: "[PASS] 3 copy: ... (0.41 s)".
std::string format_line(const CriterionResult& r);
nlohmann::ordered_json report_json(const std::vector<CriterionResult>& results);

}  // namespace dyngrain
