#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tokenrl/mdp.hpp"
#include "tokenrl/policy.hpp"
#include "tokenrl/soft_rl.hpp"

namespace tokenrl::harness {

// ============================================================================
// Seeded instances for verification batteries and tests
// ============================================================================

struct InstanceOptions {
  int min_vocab = 2;
  int max_vocab = 5;
  int min_len = 2;
  int max_len = 4;
  int max_prompts = 2;
  double reward_lo = -2.0;
  double reward_hi = 2.0;
  /// Gaussian stddev of reference logits; 0 keeps the reference uniform.
  double ref_logit_stddev = 1.0;
  double beta_lo = 0.5;
  double beta_hi = 2.0;
};

struct RandomInstance {
  std::shared_ptr<const mdp::TreeIndex> index;
  softrl::RewardTable reward;
  std::shared_ptr<policy::TabularPolicy> ref;
  double beta = 1.0;
};

/// Random tree MDP with uniform rewards and a (possibly randomized) tabular
/// reference, fully determined by the seed.
RandomInstance random_instance(std::uint64_t seed, const InstanceOptions& opts = {});

/// Uniform rewards over every reachable pair.
softrl::RewardTable random_reward_table(std::shared_ptr<const mdp::TreeIndex> index,
                                        Rng& rng, double lo, double hi);

/// Gaussian interior values, zeros at terminals.
softrl::Potential random_potential(std::shared_ptr<const mdp::TreeIndex> index,
                                   Rng& rng, double stddev);

// ============================================================================
// Task generation (gen-task CLI)
// ============================================================================

struct BanditTaskParams {
  int num_responses = 2;  // vocab size; depth-1 tree
  double reward_lo = -2.0;
  double reward_hi = 2.0;
};

struct RandomTaskParams {
  int vocab_size = 4;
  int max_response_len = 4;
  int num_prompts = 1;
  double reward_lo = -2.0;
  double reward_hi = 2.0;
};

struct CorruptionTaskParams {
  int vocab_size = 6;
  int max_response_len = 6;
  Token bad_token = 1;  // never EOS
  double penalty = 4.0;
  int num_train = 500;
  int num_heldout = 100;
};

struct CorruptionRecord {
  std::size_t pair_index = 0;
  std::size_t position = 0;  // corrupted index within the rejected response
};

struct GeneratedTask {
  mdp::TokenMdp task;
  std::shared_ptr<const mdp::TreeIndex> index;
  softrl::RewardTable reward;  // ground truth
  std::vector<mdp::PreferencePair> train_pairs;
  std::vector<mdp::PreferencePair> heldout_pairs;
  std::vector<CorruptionRecord> train_meta;
  std::vector<CorruptionRecord> heldout_meta;
};

GeneratedTask make_bandit_task(const BanditTaskParams& params, std::uint64_t seed);
GeneratedTask make_random_task(const RandomTaskParams& params, std::uint64_t seed);

/// Chosen responses sampled from the uniform reference without the bad token
/// (length at least 2); rejected copies the chosen with one non-final token
/// replaced by the bad token at a recorded position. Ground-truth reward
/// penalizes the bad token everywhere.
GeneratedTask make_corruption_task(const CorruptionTaskParams& params,
                                   std::uint64_t seed);

/// Writes task.json, rewards.jsonl (sparse for bandit/corruption) and, when
/// pairs exist, train_pairs.jsonl / heldout_pairs.jsonl plus the
/// corruption_meta JSONL files. Byte-identical for a fixed seed.
void write_task_files(const GeneratedTask& task, const std::string& out_dir);

std::vector<CorruptionRecord> load_corruption_meta(const std::string& path);

}  // namespace tokenrl::harness
