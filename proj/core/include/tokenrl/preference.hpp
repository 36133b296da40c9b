#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tokenrl/mdp.hpp"
#include "tokenrl/policy.hpp"
#include "tokenrl/soft_rl.hpp"

namespace tokenrl::pref {

/// Sum of per-token rewards along a trajectory.
double traj_return(const softrl::RewardTable& reward, const mdp::Trajectory& tau);

/// sigma(return(tw) - return(tl)), in log space. Errors when the two
/// trajectories do not share a prompt.
double bt_preference(const softrl::RewardTable& reward, const mdp::Trajectory& tw,
                     const mdp::Trajectory& tl);

/// sigma of the difference of token-summed beta*log(pi/pi_ref) terms.
double policy_preference(const mdp::TreeIndex& index, const policy::Policy& pi,
                         const policy::Policy& ref, double beta,
                         const mdp::Trajectory& tw, const mdp::Trajectory& tl);

// ============================================================================
// Exact preference distributions
// ============================================================================

/**
 * Bradley-Terry probabilities over every ordered pair of enumerated
 * responses, per prompt. Responses are stored in lexicographic order; the
 * matrix is kept upper-triangular (prob(i over j) for i < j) with the
 * complement implied.
 */
class PreferenceDistribution {
 public:
  PreferenceDistribution() = default;
  PreferenceDistribution(std::shared_ptr<const mdp::TreeIndex> index,
                         std::vector<std::vector<mdp::Trajectory>> responses,
                         std::vector<std::vector<double>> upper);

  std::size_t num_prompts() const { return responses_.size(); }
  std::span<const mdp::Trajectory> responses(std::size_t prompt) const {
    return responses_[prompt];
  }
  /// p(responses[i] preferred over responses[j]); i != j.
  double prob(std::size_t prompt, std::size_t i, std::size_t j) const;

  const mdp::TreeIndex& index() const { return *index_; }
  std::shared_ptr<const mdp::TreeIndex> index_ptr() const { return index_; }

 private:
  std::shared_ptr<const mdp::TreeIndex> index_;
  std::vector<std::vector<mdp::Trajectory>> responses_;
  std::vector<std::vector<double>> upper_;  // row-major strictly-upper entries
  std::vector<std::size_t> counts_;
};

/// Eq.-1 route: probabilities from trajectory returns under a reward table.
PreferenceDistribution preference_distribution_from_reward(
    const softrl::RewardTable& reward);

/// Eq.-8 route: probabilities from policy/reference log-ratios.
PreferenceDistribution preference_distribution_from_policy(
    std::shared_ptr<const mdp::TreeIndex> index, const policy::Policy& pi,
    const policy::Policy& ref, double beta);

/// Max absolute pairwise probability difference (each pair is a Bernoulli;
/// this is the largest total-variation distance over pairs).
double tv_distance(const PreferenceDistribution& a, const PreferenceDistribution& b);

// ============================================================================
// Dataset sampling
// ============================================================================

enum class PairSampler { reference, uniform };

/**
 * Draws `n` preference pairs: prompt uniform over the task prompts, two
 * distinct responses from the sampler policy (or uniformly over enumerated
 * responses), winner by a Bernoulli draw with the Bradley-Terry probability.
 * Fully determined by the seed.
 */
std::vector<mdp::PreferencePair> sample_preferences(
    const softrl::RewardTable& reward, const policy::Policy& ref, std::size_t n,
    std::uint64_t seed, double beta = 1.0,
    PairSampler sampler = PairSampler::reference);

// ============================================================================
// Bandit reward model (classical-RLHF comparator)
// ============================================================================

/**
 * Tabular reward over whole responses, one free parameter per enumerated
 * response per prompt, fit by maximum likelihood on pairwise labels with an
 * optional L2 penalty. Reported values are mean-centered per prompt (the
 * Bradley-Terry shift gauge).
 */
struct BanditRewardModel {
  std::shared_ptr<const mdp::TreeIndex> index;
  std::vector<std::vector<mdp::Trajectory>> responses;  // lexicographic
  std::vector<std::vector<double>> values;              // aligned with responses
  double l2_strength = 0.0;

  double value_of(std::size_t prompt, std::span<const Token> response) const;
};

struct BanditFitConfig {
  double step_size = 1.0;
  double momentum = 0.9;
  double grad_tol = 1e-10;
  long max_iters = 200000;
};

/// Fit from sampled pairs (each observation counts once).
BanditRewardModel fit_bandit_reward(std::shared_ptr<const mdp::TreeIndex> index,
                                    std::span<const mdp::PreferencePair> pairs,
                                    double l2_strength,
                                    const BanditFitConfig& cfg = {});

/// Fit from an exact preference distribution: every pair weighted by its
/// ground-truth win probability (the infinite-data limit).
BanditRewardModel fit_bandit_reward_exact(const PreferenceDistribution& target,
                                          double l2_strength,
                                          const BanditFitConfig& cfg = {});

/// Places a bandit reward on the terminal (EOS) transition of each response,
/// zero elsewhere: the token-level table whose trajectory returns equal the
/// bandit values.
softrl::RewardTable bandit_to_terminal_reward(const BanditRewardModel& model);

void save_bandit_model(const BanditRewardModel& model, const std::string& path);

}  // namespace tokenrl::pref
