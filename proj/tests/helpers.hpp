#pragma once

// Shared fixtures and independent oracles for the test suites. Oracles here
// deliberately avoid the library code paths they are used to check.

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "tokenrl/mdp.hpp"
#include "tokenrl/policy.hpp"
#include "tokenrl/soft_rl.hpp"

namespace testutil {

using tokenrl::Token;

// closed-form response count: sum over n of (vocab-1)^n, n = 0..max_len-1
inline std::size_t count_oracle(int vocab, int max_len) {
  std::size_t total = 0;
  std::size_t level = 1;
  for (int n = 0; n < max_len; ++n) {
    total += level;
    level *= static_cast<std::size_t>(vocab - 1);
  }
  return total;
}

// brute-force enumeration written independently of the library walker
inline void list_responses_oracle(int vocab, Token eos, int max_len,
                                  std::vector<Token>& prefix,
                                  std::vector<std::vector<Token>>& out) {
  for (Token a = 0; a < vocab; ++a) {
    prefix.push_back(a);
    if (a == eos) {
      out.push_back(prefix);
    } else if (static_cast<int>(prefix.size()) < max_len) {
      list_responses_oracle(vocab, eos, max_len, prefix, out);
    }
    prefix.pop_back();
  }
}

inline std::vector<std::vector<Token>> list_responses_oracle(int vocab, Token eos,
                                                             int max_len) {
  std::vector<Token> prefix;
  std::vector<std::vector<Token>> out;
  list_responses_oracle(vocab, eos, max_len, prefix, out);
  return out;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Small fixed task: vocab 3 (EOS = 0), horizon 3, one prompt. 7 responses.
inline tokenrl::mdp::TokenMdp small_task() {
  tokenrl::mdp::TokenMdp m;
  m.vocab_size = 3;
  m.eos_id = 0;
  m.max_response_len = 3;
  m.prompts = {{1, 2}};
  return m;
}

// Depth-1 bandit: vocab 2 (EOS = 0), horizon 2. Responses [0] and [1,0].
inline tokenrl::mdp::TokenMdp bandit_task() {
  tokenrl::mdp::TokenMdp m;
  m.vocab_size = 2;
  m.eos_id = 0;
  m.max_response_len = 2;
  m.prompts = {{0}};
  return m;
}

// Sum of rewards along a response by explicit MDP stepping, independent of
// path_of / traj_return.
inline double return_by_stepping(const tokenrl::mdp::TokenMdp& m,
                                 const tokenrl::softrl::RewardTable& reward,
                                 std::size_t prompt,
                                 const std::vector<Token>& response) {
  const auto& tree = reward.index().tree(prompt);
  auto s = tokenrl::mdp::initial_state(m, prompt);
  double total = 0.0;
  for (Token a : response) {
    const int node = tree.node_of_prefix(s.generated);
    total += reward.at(prompt, node, a);
    s = tokenrl::mdp::step(m, s, a);
  }
  return total;
}

}  // namespace testutil
