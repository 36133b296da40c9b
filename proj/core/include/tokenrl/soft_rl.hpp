#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tokenrl/mdp.hpp"

namespace tokenrl::policy {
class Policy;
}

namespace tokenrl::softrl {

// ============================================================================
// Tables over the reachable tree
// ============================================================================

/// One value per reachable (state, action) pair, laid out per the PrefixTree
/// row scheme. Doubles as the reward table and the Q table: the solver's
/// whole point is that the two have the same shape.
class StateActionTable {
 public:
  StateActionTable() = default;
  explicit StateActionTable(std::shared_ptr<const mdp::TreeIndex> index,
                            double fill = 0.0);

  double at(std::size_t prompt, int node, Token a) const {
    return data_[prompt][index_->tree(prompt).entry_index(node, a)];
  }
  double& at(std::size_t prompt, int node, Token a) {
    return data_[prompt][index_->tree(prompt).entry_index(node, a)];
  }

  /// The full action row of a node (width vocab, or 1 at EOS-only nodes).
  std::span<const double> row(std::size_t prompt, int node) const;
  std::span<double> row(std::size_t prompt, int node);

  const mdp::TreeIndex& index() const { return *index_; }
  std::shared_ptr<const mdp::TreeIndex> index_ptr() const { return index_; }
  std::span<const double> flat(std::size_t prompt) const { return data_[prompt]; }
  std::span<double> flat(std::size_t prompt) { return data_[prompt]; }

 private:
  std::shared_ptr<const mdp::TreeIndex> index_;
  std::vector<std::vector<double>> data_;
};

using RewardTable = StateActionTable;
using QTable = StateActionTable;

/// One value per nonterminal state (node). Terminal states are tracked
/// separately where a type needs them (Potential); the solver's V is zero at
/// terminals by the gauge and never stored.
class StateTable {
 public:
  StateTable() = default;
  explicit StateTable(std::shared_ptr<const mdp::TreeIndex> index,
                      double fill = 0.0);

  double at(std::size_t prompt, int node) const { return data_[prompt][node]; }
  double& at(std::size_t prompt, int node) { return data_[prompt][node]; }

  const mdp::TreeIndex& index() const { return *index_; }
  std::shared_ptr<const mdp::TreeIndex> index_ptr() const { return index_; }
  std::span<const double> values(std::size_t prompt) const { return data_[prompt]; }
  std::span<double> values(std::size_t prompt) { return data_[prompt]; }

 private:
  std::shared_ptr<const mdp::TreeIndex> index_;
  std::vector<std::vector<double>> data_;
};

/**
 * Potential function over states. Interior values are per nonterminal node;
 * terminal values are per terminal state, identified by the node whose EOS
 * transition reaches it, and must all be zero for the potential to be usable
 * in shaping.
 */
struct Potential {
  StateTable interior;
  StateTable terminal;

  explicit Potential(std::shared_ptr<const mdp::TreeIndex> index)
      : interior(index), terminal(std::move(index)) {}
};

/// Throws if any terminal value is nonzero.
void validate_potential(const Potential& phi);

// ============================================================================
// Exact solution
// ============================================================================

/**
 * Exact maximum-entropy solution on the tree: optimal soft Q, soft value V
 * (beta-scaled log-sum-exp of Q over actions), and the optimal policy
 * pi_star as per-state probability rows. V is zero at all terminal states by
 * the gauge, which is what makes the reward<->Q map a literal bijection.
 * The partition function of the induced response distribution is
 * exp(v(root)/beta).
 */
struct SoftSolution {
  QTable q;
  StateTable v;
  StateActionTable pi_star;  // probabilities, each row sums to 1
  double beta = 1.0;
  std::shared_ptr<const policy::Policy> ref;
};

struct SolveOptions {
  /// Optional lower bound applied to reference probabilities before taking
  /// logs; 0 means validate-and-fail on zero-probability reference actions
  /// instead of clamping.
  double ref_floor = 0.0;
};

/**
 * Backward induction from the leaves:
 *   Q(s,a) = r(s,a) + beta*log pi_ref(a|s) + V(s')   (V(terminal) = 0)
 *   V(s)   = beta * logsumexp_a Q(s,a)/beta
 *   pi*(a|s) = exp((Q(s,a) - V(s))/beta)
 * All reference policies are evaluated at softmax temperature `beta`.
 */
SoftSolution solve_soft(std::shared_ptr<const mdp::TreeIndex> index,
                        const RewardTable& reward,
                        std::shared_ptr<const policy::Policy> ref, double beta,
                        const SolveOptions& opts = {});

/// Inverse of the Bellman backup: r(s,a) = q(s,a) - beta*log pi_ref(a|s)
/// - V(s'), with V computed from q and V(terminal) = 0.
RewardTable q_to_reward(const QTable& q, const policy::Policy& ref, double beta,
                        const SolveOptions& opts = {});

/// r'(s,a) = r(s,a) + phi(s') - phi(s). Requires phi zero at terminals.
RewardTable shape_reward(const RewardTable& reward, const Potential& phi);

/// The optimal advantage A(s,a) = beta*log(pi*(a|s)/pi_ref(a|s)), computed as
/// (q - v) - beta*log pi_ref. Equal (to rounding) to r(s,a) + V(s') - V(s);
/// satisfies sum_a pi_ref(a|s)*exp(A(s,a)/beta) = 1 at every state.
StateActionTable advantage_of(const SoftSolution& sol);

// ============================================================================
// Reward table serialization
// ============================================================================

/// JSON Lines, one entry per line:
/// {"prompt_index": int, "prefix": [int,...], "action": int, "value": num}.
/// `sparse` skips exact zeros; loading fills unlisted reachable entries with
/// zero and rejects keys that do not name a reachable pair.
void save_reward_table(const RewardTable& table, const std::string& path,
                       bool sparse = false);
RewardTable load_reward_table(std::shared_ptr<const mdp::TreeIndex> index,
                              const std::string& path);

}  // namespace tokenrl::softrl
