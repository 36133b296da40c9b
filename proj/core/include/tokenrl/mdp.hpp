#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tokenrl/common.hpp"

namespace tokenrl::mdp {

/**
 * Deterministic tree-structured token MDP.
 *
 * States are prefixes (prompt plus generated tokens), actions are vocabulary
 * tokens, transitions are concatenation. A state is terminal once the
 * generated sequence ends with `eos_id` or reaches `max_response_len`.
 * Valid responses always end in EOS: when one slot is left, decoders and
 * solvers restrict the action set to {eos_id}, so every trajectory is
 * EOS-terminated within the horizon.
 */
struct TokenMdp {
  int vocab_size = 0;
  Token eos_id = 0;
  int max_response_len = 0;
  std::vector<std::vector<Token>> prompts;
};

/// Throws std::invalid_argument if the MDP violates its invariants
/// (eos in range, positive horizon, nonempty pairwise-distinct prompts,
/// prompt tokens in range).
void validate_mdp(const TokenMdp& mdp);

struct State {
  std::vector<Token> prompt;
  std::vector<Token> generated;
  bool terminal = false;
};

State initial_state(const TokenMdp& mdp, std::size_t prompt_index);

/// Appends `a` to the generated sequence. Errors on terminal states and
/// out-of-range tokens; termination follows the State invariant (EOS or
/// horizon reached).
State step(const TokenMdp& mdp, const State& s, Token a);

struct Trajectory {
  std::vector<Token> prompt;
  std::vector<Token> response;  // ends in eos_id
};

enum class LabelSource { sampled, fixed };

struct PreferencePair {
  std::vector<Token> prompt;
  std::vector<Token> chosen;
  std::vector<Token> rejected;
  LabelSource label_source = LabelSource::fixed;
};

/// Checks that `response` is a valid response for the MDP: nonempty, tokens in
/// range, EOS exactly at the final position, length within the horizon.
/// Throws std::invalid_argument with a reason otherwise.
void validate_response(const TokenMdp& mdp, std::span<const Token> response);

/// Both responses valid for the shared prompt and chosen != rejected.
void validate_pair(const TokenMdp& mdp, const PreferencePair& p);

/// Builds a pair from two trajectories. Throws "prompt mismatch" when the
/// trajectories do not start at the same state.
PreferencePair make_preference_pair(const Trajectory& chosen,
                                    const Trajectory& rejected,
                                    LabelSource source);

inline constexpr std::size_t kDefaultEnumerationCap = 1'000'000;

/// Number of valid responses for the MDP: sum over n of (|A|-1)^n for
/// n = 0 .. max_response_len-1. Throws if (|A|-1)^(max_response_len-1)
/// exceeds `cap`.
std::size_t count_responses(const TokenMdp& mdp,
                            std::size_t cap = kDefaultEnumerationCap);

/// All valid responses for one prompt, exactly once, in lexicographic
/// token-id order. The order is part of the contract.
std::vector<Trajectory> enumerate_responses(
    const TokenMdp& mdp, std::span<const Token> prompt,
    std::size_t cap = kDefaultEnumerationCap);

// ============================================================================
// Prefix tree: dense indexing of the reachable states of one prompt
// ============================================================================

/**
 * Enumerates the nonterminal states reachable from a prompt and gives each a
 * dense node id (DFS preorder, actions ascending). Terminal states are not
 * materialized: every terminal is the EOS child of some node and is
 * identified by that parent node where needed.
 *
 * Per-node action rows back every (state, action) table in the solver and
 * the tabular policies. A node at depth max_response_len-1 has a single
 * valid action (EOS) and a width-1 row; all other nodes have full-vocabulary
 * rows.
 */
class PrefixTree {
 public:
  static PrefixTree build(const TokenMdp& mdp, std::size_t prompt_index,
                          std::size_t cap = kDefaultEnumerationCap);

  int num_nodes() const { return static_cast<int>(depth_.size()); }
  int depth(int node) const { return depth_[node]; }
  int parent(int node) const { return parent_[node]; }

  /// Child node for a non-EOS action, or -1 when the action leads to a
  /// terminal state or is invalid at this node.
  int child(int node, Token a) const {
    if (row_width_[node] == 1) return -1;
    return children_[static_cast<std::size_t>(node) * vocab_ + a];
  }

  bool action_valid(int node, Token a) const {
    if (a < 0 || a >= static_cast<Token>(vocab_)) return false;
    return row_width_[node] == static_cast<int>(vocab_) || a == eos_;
  }

  /// Number of valid actions at the node: vocab_size, or 1 at the last
  /// pre-horizon level where only EOS is allowed.
  int num_actions(int node) const { return row_width_[node]; }

  /// Generated token prefix identifying the node (empty at the root).
  std::span<const Token> prefix(int node) const {
    const auto off = prefix_offset_[node];
    return std::span<const Token>(prefix_pool_).subspan(off, depth_[node]);
  }

  /// Node for a generated prefix, or -1 if the prefix is not a reachable
  /// nonterminal state.
  int node_of_prefix(std::span<const Token> prefix) const;

  // Flat (state, action) row layout shared by all tables over this tree.
  std::size_t row_offset(int node) const { return row_offset_[node]; }
  int row_width(int node) const { return row_width_[node]; }
  std::size_t table_size() const { return table_size_; }

  /// Flat index of a (node, action) entry; throws on invalid actions.
  std::size_t entry_index(int node, Token a) const;

  Token eos() const { return eos_; }
  int vocab() const { return static_cast<int>(vocab_); }

 private:
  std::size_t vocab_ = 0;
  Token eos_ = 0;
  std::vector<int> parent_;
  std::vector<Token> action_from_parent_;
  std::vector<int> depth_;
  std::vector<int> children_;  // num_nodes * vocab, -1 for EOS/terminal
  std::vector<std::size_t> prefix_offset_;
  std::vector<Token> prefix_pool_;
  std::vector<std::size_t> row_offset_;
  std::vector<int> row_width_;
  std::size_t table_size_ = 0;
};

/**
 * Shared workspace: the MDP plus one PrefixTree per prompt. Immutable after
 * build; solver tables, tabular policies and decoders all key their storage
 * off this object so node ids agree everywhere.
 */
class TreeIndex {
 public:
  static std::shared_ptr<const TreeIndex> build(
      TokenMdp mdp, std::size_t cap = kDefaultEnumerationCap);

  const TokenMdp& mdp() const { return mdp_; }
  std::size_t num_prompts() const { return trees_.size(); }
  const PrefixTree& tree(std::size_t prompt_index) const {
    return trees_[prompt_index];
  }

  /// Index of a prompt in the MDP's prompt list; throws if unknown.
  std::size_t prompt_index(std::span<const Token> prompt) const;

  /// Total (state, action) entries across all prompts.
  std::size_t total_entries() const { return total_entries_; }
  std::size_t total_nodes() const { return total_nodes_; }

  /// FNV-1a fingerprint of the task definition, used to bind checkpoints and
  /// serialized tables to the task they were produced for.
  std::string fingerprint() const { return fingerprint_; }

 private:
  TokenMdp mdp_;
  std::vector<PrefixTree> trees_;
  std::map<std::vector<Token>, std::size_t> prompt_lookup_;
  std::size_t total_entries_ = 0;
  std::size_t total_nodes_ = 0;
  std::string fingerprint_;
};

/// The (node, action) pairs visited by a response, in order. Validates the
/// response against the MDP on the way.
std::vector<std::pair<int, Token>> path_of(const TreeIndex& index,
                                           std::size_t prompt_index,
                                           std::span<const Token> response);

// ============================================================================
// File formats
// ============================================================================

/// Task JSON: {"vocab_size": int, "eos_id": int, "max_response_len": int,
/// "prompts": [[int,...],...]}. An optional "schema" field is written and
/// ignored on read.
TokenMdp load_task(const std::string& path);
void save_task(const TokenMdp& mdp, const std::string& path);

/// Preference dataset JSON Lines, one object per line:
/// {"prompt": [int], "chosen": [int], "rejected": [int]}.
/// Loading validates every pair against the MDP; non-EOS-terminated
/// responses are rejected at ingestion.
std::vector<PreferencePair> load_pairs(const TokenMdp& mdp,
                                       const std::string& path);
void save_pairs(std::span<const PreferencePair> pairs,
                const std::string& path);

}  // namespace tokenrl::mdp
