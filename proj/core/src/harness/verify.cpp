#include "tokenrl/harness/verify.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tokenrl/decode.hpp"
#include "tokenrl/dpo.hpp"
#include "tokenrl/preference.hpp"

namespace tokenrl::harness {

using nlohmann::json;

// Every threshold asserted by run_verify_suite and the acceptance suite, in
// one place. Values mirror the stated tolerances of the checks they gate.
static constexpr const char* kToleranceManifest = R"json({
  "schema": "tokenrl.tolerances.v1",
  "lemma1_roundtrip": 1e-9,
  "zero_reward_prob": 1e-12,
  "zero_reward_value": 1e-12,
  "eq8_max_abs": 1e-10,
  "theorem1_prob": 1e-10,
  "theorem1_tv": 1e-10,
  "eq14_rank_mismatches": 0,
  "eq15_identity": 1e-10,
  "eq15_fresh_ref": 0,
  "dpo_tv": 1e-3,
  "dpo_advantage_residual": 1e-2,
  "grad_tabular": 1e-6,
  "grad_tinyseq": 1e-5,
  "corruption_min_rate": 0.9,
  "soft_optimality_partition": 1e-9
})json";

VerifyScope scope_from_name(const std::string& name) {
  if (name == "all") return VerifyScope::all;
  if (name == "lemma1") return VerifyScope::lemma1;
  if (name == "theorem1") return VerifyScope::theorem1;
  if (name == "eq8") return VerifyScope::eq8;
  if (name == "eq14") return VerifyScope::eq14;
  if (name == "eq15") return VerifyScope::eq15;
  throw std::invalid_argument("unknown verify scope '" + name + "'");
}

std::string scope_name(VerifyScope scope) {
  switch (scope) {
    case VerifyScope::all: return "all";
    case VerifyScope::lemma1: return "lemma1";
    case VerifyScope::theorem1: return "theorem1";
    case VerifyScope::eq8: return "eq8";
    case VerifyScope::eq14: return "eq14";
    case VerifyScope::eq15: return "eq15";
  }
  return "unknown";
}

Tolerances Tolerances::defaults() {
  Tolerances t;
  const json j = json::parse(kToleranceManifest);
  for (const auto& [key, value] : j.items()) {
    if (key == "schema") continue;
    t.entries_.emplace_back(key, value.get<double>());
  }
  return t;
}

Tolerances Tolerances::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  Tolerances t;
  for (const auto& [key, value] : j.items()) {
    if (key == "schema") continue;
    t.entries_.emplace_back(key, value.get<double>());
  }
  return t;
}

double Tolerances::get(const std::string& name) const {
  for (const auto& [key, value] : entries_) {
    if (key == name) return value;
  }
  throw std::invalid_argument("tolerance manifest has no entry '" + name + "'");
}

// ============================================================================
// Batteries
// ============================================================================

namespace {

// max |a - b| over all table entries
double table_max_abs_diff(const softrl::StateActionTable& a,
                          const softrl::StateActionTable& b) {
  double worst = 0.0;
  for (std::size_t p = 0; p < a.index().num_prompts(); ++p) {
    const auto fa = a.flat(p);
    const auto fb = b.flat(p);
    for (std::size_t i = 0; i < fa.size(); ++i) {
      worst = std::max(worst, std::fabs(fa[i] - fb[i]));
    }
  }
  return worst;
}

CheckResult lemma1_battery(const VerifyConfig& cfg, const Tolerances& tol) {
  double worst = 0.0;
  for (int k = 0; k < cfg.lemma1_instances; ++k) {
    const auto inst = random_instance(cfg.seed_base + static_cast<std::uint64_t>(k));
    // reward -> Q* -> reward
    const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
    const auto back = softrl::q_to_reward(sol.q, *inst.ref, inst.beta);
    worst = std::max(worst, table_max_abs_diff(inst.reward, back));
    // Q -> reward -> Q* (any finite table is a valid Q under the terminal gauge)
    Rng rng(cfg.seed_base + 7777 + static_cast<std::uint64_t>(k));
    auto q = random_reward_table(inst.index, rng, -2.0, 2.0);
    const auto r2 = softrl::q_to_reward(q, *inst.ref, inst.beta);
    const auto sol2 = softrl::solve_soft(inst.index, r2, inst.ref, inst.beta);
    worst = std::max(worst, table_max_abs_diff(q, sol2.q));
  }
  const double t = tol.get("lemma1_roundtrip");
  return CheckResult{"lemma1.roundtrip_max_abs_error", worst <= t, worst, t};
}

std::vector<CheckResult> theorem1_battery(const VerifyConfig& cfg,
                                          const Tolerances& tol) {
  double worst_prob = 0.0;
  double worst_tv = 0.0;
  for (int k = 0; k < cfg.theorem1_instances; ++k) {
    const auto inst =
        random_instance(cfg.seed_base + 100000 + static_cast<std::uint64_t>(k));
    Rng rng(cfg.seed_base + 200000 + static_cast<std::uint64_t>(k));
    const auto phi = random_potential(inst.index, rng, 1.0);
    const auto shaped = softrl::shape_reward(inst.reward, phi);

    const auto sol_a = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
    const auto sol_b = softrl::solve_soft(inst.index, shaped, inst.ref, inst.beta);
    worst_prob = std::max(worst_prob, table_max_abs_diff(sol_a.pi_star, sol_b.pi_star));

    const auto dist_a = pref::preference_distribution_from_reward(inst.reward);
    const auto dist_b = pref::preference_distribution_from_reward(shaped);
    worst_tv = std::max(worst_tv, pref::tv_distance(dist_a, dist_b));
  }
  const double tp = tol.get("theorem1_prob");
  const double tt = tol.get("theorem1_tv");
  return {CheckResult{"theorem1.pi_star_prob_change", worst_prob <= tp, worst_prob, tp},
          CheckResult{"theorem1.preference_tv", worst_tv <= tt, worst_tv, tt}};
}

CheckResult eq8_battery(const VerifyConfig& cfg, const Tolerances& tol) {
  double worst = 0.0;
  for (int k = 0; k < cfg.eq8_instances; ++k) {
    const auto inst =
        random_instance(cfg.seed_base + 300000 + static_cast<std::uint64_t>(k));
    const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
    const auto pi_star = policy::TabularPolicy::from_solution(sol);
    const auto from_reward = pref::preference_distribution_from_reward(inst.reward);
    const auto from_policy = pref::preference_distribution_from_policy(
        inst.index, pi_star, *inst.ref, inst.beta);
    worst = std::max(worst, pref::tv_distance(from_reward, from_policy));
  }
  const double t = tol.get("eq8_max_abs");
  return CheckResult{"eq8.bt_vs_policy_preference", worst <= t, worst, t};
}

CheckResult eq14_battery(const VerifyConfig& cfg, const Tolerances& tol) {
  const std::size_t widths[] = {1, 2, 5};
  long mismatches = 0;
  for (int k = 0; k < cfg.eq14_instances; ++k) {
    const auto inst =
        random_instance(cfg.seed_base + 400000 + static_cast<std::uint64_t>(k));
    const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
    const auto pi_star = policy::TabularPolicy::from_solution(sol);
    for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
      for (const std::size_t w : widths) {
        const auto by_likelihood =
            decode::beam_search(pi_star, *inst.index, p, w, inst.beta);
        const auto by_value = decode::guided_search(inst.reward, *inst.ref,
                                                    sol.v, p, w, inst.beta);
        if (by_likelihood.size() != by_value.size()) {
          ++mismatches;
          continue;
        }
        for (std::size_t i = 0; i < by_likelihood.size(); ++i) {
          if (by_likelihood[i].trajectory.response !=
              by_value[i].trajectory.response) {
            ++mismatches;
            break;
          }
        }
      }
    }
  }
  const double t = tol.get("eq14_rank_mismatches");
  const double measured = static_cast<double>(mismatches);
  return CheckResult{"eq14.ranking_mismatches", measured <= t, measured, t};
}

std::vector<CheckResult> eq15_battery(const VerifyConfig& cfg,
                                      const Tolerances& tol) {
  double worst = 0.0;
  double worst_fresh = 0.0;
  for (int k = 0; k < cfg.eq15_instances; ++k) {
    const auto inst =
        random_instance(cfg.seed_base + 500000 + static_cast<std::uint64_t>(k));
    auto pi = policy::TabularPolicy(inst.index);
    Rng rng(cfg.seed_base + 600000 + static_cast<std::uint64_t>(k));
    pi.randomize(rng, 1.0);
    for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
      const double elr = dpo::expected_logratio(pi, *inst.ref, *inst.index,
                                                inst.beta, p);
      const double kl = dpo::sequence_kl(*inst.ref, pi, *inst.index, p);
      worst = std::max(worst, std::fabs(elr - (-inst.beta * kl)));
      // fresh reference: expectation must vanish identically
      const double zero = dpo::expected_logratio(*inst.ref, *inst.ref,
                                                 *inst.index, inst.beta, p);
      worst_fresh = std::max(worst_fresh, std::fabs(zero));
    }
  }
  const double ti = tol.get("eq15_identity");
  const double tf = tol.get("eq15_fresh_ref");
  return {CheckResult{"eq15.identity_vs_direct_kl", worst <= ti, worst, ti},
          CheckResult{"eq15.fresh_reference_zero", worst_fresh <= tf, worst_fresh, tf}};
}

}  // namespace

VerificationReport run_verify_suite(VerifyScope scope, const VerifyConfig& cfg,
                                    const Tolerances& tol) {
  VerificationReport report;
  report.scope = scope_name(scope);
  const bool all = scope == VerifyScope::all;
  if (all || scope == VerifyScope::lemma1) {
    report.checks.push_back(lemma1_battery(cfg, tol));
  }
  if (all || scope == VerifyScope::theorem1) {
    for (auto& c : theorem1_battery(cfg, tol)) report.checks.push_back(std::move(c));
  }
  if (all || scope == VerifyScope::eq8) {
    report.checks.push_back(eq8_battery(cfg, tol));
  }
  if (all || scope == VerifyScope::eq14) {
    report.checks.push_back(eq14_battery(cfg, tol));
  }
  if (all || scope == VerifyScope::eq15) {
    for (auto& c : eq15_battery(cfg, tol)) report.checks.push_back(std::move(c));
  }
  return report;
}

std::string report_to_text(const VerificationReport& report) {
  std::ostringstream os;
  for (const auto& c : report.checks) {
    os << (c.pass ? "[PASS] " : "[FAIL] ") << c.name
       << "  measured=" << format_f64(c.measured)
       << " tolerance=" << format_f64(c.tolerance) << "\n";
  }
  os << (report.overall() ? "OVERALL PASS" : "OVERALL FAIL") << " (scope "
     << report.scope << ")\n";
  return os.str();
}

std::string report_to_json(const VerificationReport& report) {
  json j;
  j["schema"] = "tokenrl.verify-report.v1";
  j["scope"] = report.scope;
  j["overall"] = report.overall() ? "pass" : "fail";
  json checks = json::array();
  for (const auto& c : report.checks) {
    json e;
    e["name"] = c.name;
    e["status"] = c.pass ? "pass" : "fail";
    e["measured"] = c.measured;
    e["tolerance"] = c.tolerance;
    checks.push_back(std::move(e));
  }
  j["checks"] = std::move(checks);
  return j.dump(2) + "\n";
}

}  // namespace tokenrl::harness
