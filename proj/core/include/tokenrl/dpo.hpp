#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokenrl/mdp.hpp"
#include "tokenrl/policy.hpp"
#include "tokenrl/preference.hpp"

namespace tokenrl::dpo {

struct DpoConfig {
  double beta = 1.0;  // the DPO beta; multiplies the log-ratios
  policy::TrainConfig optim;
  /// Record a diagnostics row every this many steps (step 0 always recorded).
  int diagnostics_every = 1;
  /// Write a checkpoint every this many steps (0 = never); consumed by the
  /// harness trainer wrapper.
  int checkpoint_every = 0;
};

/// One diagnostics row. Implicit rewards are sequence-level
/// beta*log(pi/pi_ref); expected_logratio is the exact per-prompt expectation
/// under the reference (averaged over prompts), which equals -beta*KL.
struct StepRecord {
  long step = 0;
  double loss = 0.0;
  double chosen_ir = 0.0;
  double rejected_ir = 0.0;
  double margin = 0.0;
  double expected_logratio = 0.0;
};

struct TrainingDiagnostics {
  std::vector<StepRecord> steps;
};

/// CSV with a schema comment line; running means of the implicit rewards are
/// appended since the choice of summary statistic is a report-level concern.
void diagnostics_to_csv(const TrainingDiagnostics& diag, const std::string& path);

// ============================================================================
// Loss
// ============================================================================

/// Mean over the batch of -log sigma(margin); margin is the difference of
/// token-summed beta*log(pi/pi_ref) between chosen and rejected. The gradient
/// is with respect to pi's parameters (accumulated into `grad` when
/// nonempty). Policies are evaluated at softmax temperature `policy_beta`.
double dpo_loss_and_grad(const policy::Policy& pi, const policy::Policy& ref,
                         const mdp::TreeIndex& index,
                         std::span<const mdp::PreferencePair> batch, double beta,
                         double policy_beta = 1.0, std::span<double> grad = {});

/// Expected DPO loss under an exact preference distribution: every ordered
/// pair weighted by its ground-truth win probability. Gradients are
/// aggregated over the tree (subtree sums), so one step costs O(states).
double exact_dpo_loss_and_grad(const policy::Policy& pi, const policy::Policy& ref,
                               const pref::PreferenceDistribution& target,
                               double beta, double policy_beta = 1.0,
                               std::span<double> grad = {});

// ============================================================================
// Training
// ============================================================================

struct DpoResult {
  std::unique_ptr<policy::Policy> policy;
  TrainingDiagnostics diagnostics;
  std::string ref_hash;  // reference frozen at construction
};

/// Sampled-dataset mode: epochs over (optionally seeded-permutation
/// minibatched) preference pairs. Throws on divergence, carrying the last
/// finite loss in the message.
DpoResult dpo_train(const policy::Policy& init, const policy::Policy& ref,
                    const mdp::TreeIndex& index,
                    std::span<const mdp::PreferencePair> data,
                    const DpoConfig& cfg);

/// Exact-expected-loss mode: full-batch steps against the ground-truth
/// preference distribution.
DpoResult dpo_train_exact(const policy::Policy& init, const policy::Policy& ref,
                          const pref::PreferenceDistribution& target,
                          const DpoConfig& cfg);

// ============================================================================
// Credit assignment and diagnostics
// ============================================================================

/// Per-token beta*log(pi(a|s)/pi_ref(a|s)) along the trajectory. The sum
/// equals the sequence-level implicit reward.
std::vector<double> implicit_token_rewards(const policy::Policy& pi,
                                           const policy::Policy& ref,
                                           const mdp::TreeIndex& index,
                                           double beta,
                                           const mdp::Trajectory& traj,
                                           double policy_beta = 1.0);

/// Exact E_{y ~ pi_ref}[beta log(pi(y|x)/pi_ref(y|x))] by tree traversal;
/// equals -beta * KL(pi_ref || pi) over whole responses.
double expected_logratio(const policy::Policy& pi, const policy::Policy& ref,
                         const mdp::TreeIndex& index, double beta,
                         std::size_t prompt, double policy_beta = 1.0);

/// Independent route: direct KL(pi_ref || pi) over enumerated responses.
double sequence_kl(const policy::Policy& ref, const policy::Policy& pi,
                   const mdp::TreeIndex& index, std::size_t prompt,
                   double policy_beta = 1.0);

/// Central finite differences against the analytic DPO gradient; see
/// policy::grad_check for the error convention.
double grad_check_dpo(const policy::Policy& pi, const policy::Policy& ref,
                      const mdp::TreeIndex& index,
                      std::span<const mdp::PreferencePair> batch, double beta,
                      double policy_beta, double eps,
                      std::size_t max_coords = 0, std::uint64_t seed = 0,
                      double resolvable_floor = 0.0);

}  // namespace tokenrl::dpo
