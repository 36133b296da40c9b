#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokenrl/harness/task_gen.hpp"

namespace tokenrl::harness {

enum class VerifyScope { all, lemma1, theorem1, eq8, eq14, eq15 };

VerifyScope scope_from_name(const std::string& name);
std::string scope_name(VerifyScope scope);

/**
 * Check tolerances are data: a single manifest (embedded by default,
 * replaceable from a JSON file) names every threshold the verification
 * batteries and the acceptance suite assert against.
 */
class Tolerances {
 public:
  static Tolerances defaults();
  static Tolerances from_file(const std::string& path);

  double get(const std::string& name) const;

 private:
  std::vector<std::pair<std::string, double>> entries_;
};

struct CheckResult {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double tolerance = 0.0;
};

struct VerificationReport {
  std::string scope;
  std::vector<CheckResult> checks;

  bool overall() const {
    for (const auto& c : checks) {
      if (!c.pass) return false;
    }
    return true;
  }
};

struct VerifyConfig {
  std::uint64_t seed_base = 20240801;
  int lemma1_instances = 100;
  int theorem1_instances = 50;
  int eq8_instances = 50;
  int eq14_instances = 100;
  int eq15_instances = 20;
};

/// Runs the seeded invariant batteries for the scope. Failures are report
/// entries, never exceptions.
VerificationReport run_verify_suite(VerifyScope scope, const VerifyConfig& cfg,
                                    const Tolerances& tol);

std::string report_to_text(const VerificationReport& report);
std::string report_to_json(const VerificationReport& report);

}  // namespace tokenrl::harness
