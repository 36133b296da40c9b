#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "tokenrl/dpo.hpp"
#include "tokenrl/preference.hpp"

namespace tokenrl::harness {

struct CompareConfig {
  double beta = 1.0;
  double bandit_l2 = 0.0;
  pref::BanditFitConfig fit;
  dpo::DpoConfig dpo;
  bool exact_data = false;  // infinite-data limit instead of the sampled pairs
  std::uint64_t seed = 0;
};

struct CompareReport {
  std::string task_fingerprint;
  std::string mode;  // "exact" or "sampled"
  long bandit_pairs = 0;
  long dpo_steps = 0;
  double tv_classical_vs_dpo = 0.0;
  double tv_classical_vs_truth = 0.0;
  double tv_dpo_vs_truth = 0.0;
  double dpo_final_loss = 0.0;
  std::string note;
};

/**
 * Pipeline A (classical): fit a bandit reward from the preference data, place
 * it on terminal transitions and solve the KL-constrained objective exactly.
 * With the terminal-only table the exact solve coincides with maximum-entropy
 * RL on the shaped token reward that adds beta*log pi_ref per step, so the
 * comparison isolates the objective rather than an optimizer. Pipeline B:
 * token-level DPO on the same data. The report carries total-variation
 * distances between the two induced preference distributions and each one's
 * distance to the ground truth.
 */
CompareReport compare_classical_rlhf(const softrl::RewardTable& ground_truth,
                                     std::span<const mdp::PreferencePair> pairs,
                                     const CompareConfig& cfg);

std::string compare_report_to_json(const CompareReport& report);

}  // namespace tokenrl::harness
