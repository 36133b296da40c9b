#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "tokenrl/mdp.hpp"
#include "tokenrl/policy.hpp"
#include "tokenrl/soft_rl.hpp"

namespace tokenrl::decode {

struct ScoredTrajectory {
  mdp::Trajectory trajectory;
  double score = 0.0;
};

/// Ancestral sampling at softmax temperature beta, deterministic given the
/// seed. EOS is forced at the horizon by the action mask.
mdp::Trajectory sample_response(const policy::Policy& pi,
                                const mdp::TreeIndex& index,
                                std::size_t prompt, std::uint64_t seed,
                                double beta = 1.0);

/**
 * Beam search over cumulative beta*log pi, no length normalization.
 * Finished hypotheses stay in the beam and compete with live ones; ties
 * break lexicographically by token ids. Returns the top `width` terminated
 * trajectories, best first.
 */
std::vector<ScoredTrajectory> beam_search(const policy::Policy& pi,
                                          const mdp::TreeIndex& index,
                                          std::size_t prompt, std::size_t width,
                                          double beta);

/**
 * Reward-guided beam search: maximizes the partial-expansion objective
 * sum_t [r + beta*log pi_ref] + V(next state), where V is the exact soft
 * value (or an explicitly supplied substitute, zero at terminals). With the
 * exact V the ranking coincides with likelihood search over the optimal
 * policy; scores differ from likelihood scores by the constant V(root).
 */
std::vector<ScoredTrajectory> guided_search(const softrl::RewardTable& reward,
                                            const policy::Policy& ref,
                                            const softrl::StateTable& v,
                                            std::size_t prompt,
                                            std::size_t width, double beta);

// ============================================================================
// Proxy-tuned composition
// ============================================================================

/**
 * Inference-time re-weighting pi(a|s) proportional to
 * pi_base(a|s) * (pi_proxy(a|s)/pi_ref(a|s))^beta, renormalized per state.
 * Component policies are evaluated at the temperature passed to
 * action_log_probs; the stored beta is the composition exponent.
 */
class ComposedPolicy final : public policy::Policy {
 public:
  ComposedPolicy(std::shared_ptr<const policy::Policy> base,
                 std::shared_ptr<const policy::Policy> proxy,
                 std::shared_ptr<const policy::Policy> ref, double beta);

  Kind kind() const override { return Kind::composed; }
  void action_log_probs(const mdp::TreeIndex& index, std::size_t prompt,
                        int node, double beta,
                        std::span<double> out) const override;
  std::unique_ptr<policy::Policy> clone() const override {
    return std::make_unique<ComposedPolicy>(*this);
  }

  double compose_beta() const { return compose_beta_; }

 private:
  std::shared_ptr<const policy::Policy> base_;
  std::shared_ptr<const policy::Policy> proxy_;
  std::shared_ptr<const policy::Policy> ref_;
  double compose_beta_;
};

ComposedPolicy proxy_compose(std::shared_ptr<const policy::Policy> base,
                             std::shared_ptr<const policy::Policy> proxy,
                             std::shared_ptr<const policy::Policy> ref,
                             double beta);

}  // namespace tokenrl::decode
