#include "tokenrl/decode.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace tokenrl::decode {

mdp::Trajectory sample_response(const policy::Policy& pi,
                                const mdp::TreeIndex& index, std::size_t prompt,
                                std::uint64_t seed, double beta) {
  Rng rng(seed);
  return policy::sample_trajectory(pi, index, prompt, beta, rng);
}

namespace {

struct Hypothesis {
  std::vector<Token> tokens;
  int node = 0;        // current tree node; -1 once finished
  double score = 0.0;
  bool finished = false;
};

bool hyp_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(),
                                      b.tokens.begin(), b.tokens.end());
}

// Shared beam loop. `initial` seeds the root score; `increment(node, a,
// child)` scores one transition (child < 0 means terminal).
std::vector<ScoredTrajectory> run_beam(
    const mdp::TreeIndex& index, std::size_t prompt, std::size_t width,
    double initial,
    const std::function<double(int, Token, int)>& increment) {
  if (width < 1) throw std::invalid_argument("beam width must be >= 1");
  const auto& tree = index.tree(prompt);
  const auto& m = index.mdp();

  std::vector<Hypothesis> beam{Hypothesis{{}, 0, initial, false}};
  std::vector<Hypothesis> pool;
  while (true) {
    bool all_finished = true;
    for (const auto& h : beam) all_finished = all_finished && h.finished;
    if (all_finished) break;

    pool.clear();
    for (const auto& h : beam) {
      if (h.finished) {
        pool.push_back(h);
        continue;
      }
      for (Token a = 0; a < m.vocab_size; ++a) {
        if (!tree.action_valid(h.node, a)) continue;
        const int child = (a == m.eos_id) ? -1 : tree.child(h.node, a);
        Hypothesis next;
        next.tokens = h.tokens;
        next.tokens.push_back(a);
        next.score = h.score + increment(h.node, a, child);
        next.node = child;
        next.finished = (a == m.eos_id);
        pool.push_back(std::move(next));
      }
    }
    std::sort(pool.begin(), pool.end(), hyp_before);
    if (pool.size() > width) pool.resize(width);
    beam = pool;
  }

  std::vector<ScoredTrajectory> out;
  out.reserve(beam.size());
  for (auto& h : beam) {
    out.push_back(ScoredTrajectory{
        mdp::Trajectory{m.prompts[prompt], std::move(h.tokens)}, h.score});
  }
  return out;
}

}  // namespace

std::vector<ScoredTrajectory> beam_search(const policy::Policy& pi,
                                          const mdp::TreeIndex& index,
                                          std::size_t prompt, std::size_t width,
                                          double beta) {
  const int vocab = index.mdp().vocab_size;
  // cache per-node log-prob rows as the beam revisits nodes across steps
  std::vector<std::vector<double>> cache(
      static_cast<std::size_t>(index.tree(prompt).num_nodes()));
  auto increment = [&, vocab](int node, Token a, int) {
    auto& row = cache[static_cast<std::size_t>(node)];
    if (row.empty()) {
      row.resize(static_cast<std::size_t>(vocab));
      pi.action_log_probs(index, prompt, node, beta, row);
    }
    return beta * row[static_cast<std::size_t>(a)];
  };
  return run_beam(index, prompt, width, 0.0, increment);
}

std::vector<ScoredTrajectory> guided_search(const softrl::RewardTable& reward,
                                            const policy::Policy& ref,
                                            const softrl::StateTable& v,
                                            std::size_t prompt,
                                            std::size_t width, double beta) {
  const auto index = reward.index_ptr();
  if (v.index().fingerprint() != index->fingerprint()) {
    throw std::invalid_argument("guided_search: value table built for a different task");
  }
  const int vocab = index->mdp().vocab_size;
  std::vector<std::vector<double>> cache(
      static_cast<std::size_t>(index->tree(prompt).num_nodes()));
  auto increment = [&, vocab](int node, Token a, int child) {
    auto& row = cache[static_cast<std::size_t>(node)];
    if (row.empty()) {
      row.resize(static_cast<std::size_t>(vocab));
      ref.action_log_probs(*index, prompt, node, beta, row);
    }
    const double logref = row[static_cast<std::size_t>(a)];
    if (!std::isfinite(logref)) {
      throw std::invalid_argument("zero-probability reference action");
    }
    const double next_v = (child >= 0) ? v.at(prompt, child) : 0.0;
    return reward.at(prompt, node, a) + beta * logref + next_v - v.at(prompt, node);
  };
  return run_beam(*index, prompt, width, v.at(prompt, 0), increment);
}

// ============================================================================
// ComposedPolicy
// ============================================================================

ComposedPolicy::ComposedPolicy(std::shared_ptr<const policy::Policy> base,
                               std::shared_ptr<const policy::Policy> proxy,
                               std::shared_ptr<const policy::Policy> ref,
                               double beta)
    : base_(std::move(base)),
      proxy_(std::move(proxy)),
      ref_(std::move(ref)),
      compose_beta_(beta) {
  if (!base_ || !proxy_ || !ref_) {
    throw std::invalid_argument("composed policy: null component");
  }
}

void ComposedPolicy::action_log_probs(const mdp::TreeIndex& index,
                                      std::size_t prompt, int node, double beta,
                                      std::span<double> out) const {
  const auto& tree = index.tree(prompt);
  const std::size_t vocab = out.size();
  std::vector<double> lb(vocab), lp(vocab), lr(vocab);
  base_->action_log_probs(index, prompt, node, beta, lb);
  proxy_->action_log_probs(index, prompt, node, beta, lp);
  ref_->action_log_probs(index, prompt, node, beta, lr);
  for (std::size_t a = 0; a < vocab; ++a) {
    if (!tree.action_valid(node, static_cast<Token>(a))) {
      out[a] = -std::numeric_limits<double>::infinity();
      continue;
    }
    if (!std::isfinite(lr[a])) {
      throw std::invalid_argument("zero-probability reference action");
    }
    out[a] = lb[a] + compose_beta_ * (lp[a] - lr[a]);
  }
  log_softmax(std::span<const double>(out.data(), out.size()), 1.0, out);
}

ComposedPolicy proxy_compose(std::shared_ptr<const policy::Policy> base,
                             std::shared_ptr<const policy::Policy> proxy,
                             std::shared_ptr<const policy::Policy> ref,
                             double beta) {
  return ComposedPolicy(std::move(base), std::move(proxy), std::move(ref), beta);
}

}  // namespace tokenrl::decode
