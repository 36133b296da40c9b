#include "tokenrl/preference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <tuple>

#include <json.hpp>

namespace tokenrl::pref {

using nlohmann::json;

double traj_return(const softrl::RewardTable& reward, const mdp::Trajectory& tau) {
  const auto& index = reward.index();
  const std::size_t p = index.prompt_index(tau.prompt);
  const auto path = mdp::path_of(index, p, tau.response);
  double total = 0.0;
  for (const auto& [node, action] : path) total += reward.at(p, node, action);
  return total;
}

double bt_preference(const softrl::RewardTable& reward, const mdp::Trajectory& tw,
                     const mdp::Trajectory& tl) {
  if (tw.prompt != tl.prompt) throw std::invalid_argument("prompt mismatch");
  const double margin = traj_return(reward, tw) - traj_return(reward, tl);
  return std::exp(log_sigmoid(margin));
}

double policy_preference(const mdp::TreeIndex& index, const policy::Policy& pi,
                         const policy::Policy& ref, double beta,
                         const mdp::Trajectory& tw, const mdp::Trajectory& tl) {
  if (tw.prompt != tl.prompt) throw std::invalid_argument("prompt mismatch");
  const auto lw_pi = policy::logprob(pi, index, beta, tw);
  const auto lw_ref = policy::logprob(ref, index, beta, tw);
  const auto ll_pi = policy::logprob(pi, index, beta, tl);
  const auto ll_ref = policy::logprob(ref, index, beta, tl);
  if (!std::isfinite(lw_ref.total) || !std::isfinite(ll_ref.total)) {
    throw std::invalid_argument("zero-probability reference action");
  }
  const double margin =
      beta * ((lw_pi.total - lw_ref.total) - (ll_pi.total - ll_ref.total));
  return std::exp(log_sigmoid(margin));
}

// ============================================================================
// PreferenceDistribution
// ============================================================================

PreferenceDistribution::PreferenceDistribution(
    std::shared_ptr<const mdp::TreeIndex> index,
    std::vector<std::vector<mdp::Trajectory>> responses,
    std::vector<std::vector<double>> upper)
    : index_(std::move(index)),
      responses_(std::move(responses)),
      upper_(std::move(upper)) {
  counts_.reserve(responses_.size());
  for (const auto& r : responses_) counts_.push_back(r.size());
}

double PreferenceDistribution::prob(std::size_t prompt, std::size_t i,
                                    std::size_t j) const {
  if (i == j) throw std::invalid_argument("preference of a pair with itself");
  const std::size_t n = counts_[prompt];
  const bool swap = i > j;
  if (swap) std::swap(i, j);
  // strictly-upper row-major index
  const std::size_t idx = i * n - i * (i + 1) / 2 + (j - i - 1);
  const double p = upper_[prompt][idx];
  return swap ? 1.0 - p : p;
}

namespace {

template <typename MarginFn>
PreferenceDistribution build_distribution(
    std::shared_ptr<const mdp::TreeIndex> index, MarginFn&& margin_of) {
  std::vector<std::vector<mdp::Trajectory>> responses;
  std::vector<std::vector<double>> upper;
  const auto& m = index->mdp();
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    auto rs = mdp::enumerate_responses(m, m.prompts[p]);
    // per-response scores; pairwise margins are score differences
    std::vector<double> scores(rs.size());
    for (std::size_t i = 0; i < rs.size(); ++i) scores[i] = margin_of(p, rs[i]);
    std::vector<double> tri;
    tri.reserve(rs.size() * (rs.size() - 1) / 2);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      for (std::size_t j = i + 1; j < rs.size(); ++j) {
        tri.push_back(std::exp(log_sigmoid(scores[i] - scores[j])));
      }
    }
    responses.push_back(std::move(rs));
    upper.push_back(std::move(tri));
  }
  return PreferenceDistribution(std::move(index), std::move(responses),
                                std::move(upper));
}

}  // namespace

PreferenceDistribution preference_distribution_from_reward(
    const softrl::RewardTable& reward) {
  auto index = reward.index_ptr();
  return build_distribution(index, [&](std::size_t, const mdp::Trajectory& t) {
    return traj_return(reward, t);
  });
}

PreferenceDistribution preference_distribution_from_policy(
    std::shared_ptr<const mdp::TreeIndex> index, const policy::Policy& pi,
    const policy::Policy& ref, double beta) {
  const auto lp_pi = policy::materialize_log_probs(pi, index, beta);
  const auto lp_ref = policy::materialize_log_probs(ref, index, beta);
  return build_distribution(index, [&](std::size_t p, const mdp::Trajectory& t) {
    const auto path = mdp::path_of(*index, p, t.response);
    double sum = 0.0;
    for (const auto& [node, action] : path) {
      const double lr = lp_ref.at(p, node, action);
      if (!std::isfinite(lr)) {
        throw std::invalid_argument("zero-probability reference action");
      }
      sum += beta * (lp_pi.at(p, node, action) - lr);
    }
    return sum;
  });
}

double tv_distance(const PreferenceDistribution& a, const PreferenceDistribution& b) {
  if (a.num_prompts() != b.num_prompts()) {
    throw std::invalid_argument("preference distributions over different tasks");
  }
  double worst = 0.0;
  for (std::size_t p = 0; p < a.num_prompts(); ++p) {
    const std::size_t n = a.responses(p).size();
    if (n != b.responses(p).size()) {
      throw std::invalid_argument("preference distributions over different tasks");
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        worst = std::max(worst, std::fabs(a.prob(p, i, j) - b.prob(p, i, j)));
      }
    }
  }
  return worst;
}

// ============================================================================
// Sampling
// ============================================================================

std::vector<mdp::PreferencePair> sample_preferences(
    const softrl::RewardTable& reward, const policy::Policy& ref, std::size_t n,
    std::uint64_t seed, double beta, PairSampler sampler) {
  const auto index = reward.index_ptr();
  Rng rng(seed);
  const auto& m = index->mdp();

  // uniform sampler support: enumerated responses per prompt
  std::vector<std::vector<mdp::Trajectory>> enumerated;
  if (sampler == PairSampler::uniform) {
    for (std::size_t p = 0; p < index->num_prompts(); ++p) {
      enumerated.push_back(mdp::enumerate_responses(m, m.prompts[p]));
    }
  }

  std::vector<mdp::PreferencePair> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t p = rng.uniform_int(index->num_prompts());
    mdp::Trajectory a, b;
    constexpr int kMaxTries = 10000;
    int tries = 0;
    do {
      if (++tries > kMaxTries) {
        throw std::runtime_error(
            "sample_preferences: cannot draw distinct responses (single-response prompt?)");
      }
      if (sampler == PairSampler::uniform) {
        a = enumerated[p][rng.uniform_int(enumerated[p].size())];
        b = enumerated[p][rng.uniform_int(enumerated[p].size())];
      } else {
        a = policy::sample_trajectory(ref, *index, p, beta, rng);
        b = policy::sample_trajectory(ref, *index, p, beta, rng);
      }
    } while (a.response == b.response);
    const double p_a_wins = bt_preference(reward, a, b);
    const bool a_wins = rng.bernoulli(p_a_wins);
    out.push_back(mdp::make_preference_pair(a_wins ? a : b, a_wins ? b : a,
                                            mdp::LabelSource::sampled));
  }
  return out;
}

// ============================================================================
// Bandit reward model
// ============================================================================

double BanditRewardModel::value_of(std::size_t prompt,
                                   std::span<const Token> response) const {
  const auto& rs = responses[prompt];
  for (std::size_t i = 0; i < rs.size(); ++i) {
    if (std::equal(rs[i].response.begin(), rs[i].response.end(), response.begin(),
                   response.end())) {
      return values[prompt][i];
    }
  }
  throw std::invalid_argument("bandit model: unknown response");
}

namespace {

struct PairObs {
  std::size_t prompt;
  std::size_t win;   // response index
  std::size_t lose;  // response index
  double weight;
};

BanditRewardModel fit_bandit(std::shared_ptr<const mdp::TreeIndex> index,
                             std::vector<PairObs> observations,
                             double l2_strength, const BanditFitConfig& cfg) {
  if (l2_strength < 0.0) throw std::invalid_argument("l2_strength must be >= 0");

  // merge duplicate observations so iteration cost scales with distinct
  // pairs, not dataset size
  {
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, double> merged;
    for (const auto& o : observations) {
      merged[{o.prompt, o.win, o.lose}] += o.weight;
    }
    observations.clear();
    for (const auto& [key, w] : merged) {
      observations.push_back(
          PairObs{std::get<0>(key), std::get<1>(key), std::get<2>(key), w});
    }
  }
  BanditRewardModel model;
  model.index = index;
  model.l2_strength = l2_strength;
  const auto& m = index->mdp();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    model.responses.push_back(mdp::enumerate_responses(m, m.prompts[p]));
    offsets.push_back(total);
    total += model.responses.back().size();
  }

  double weight_total = 0.0;
  for (const auto& o : observations) weight_total += o.weight;
  if (weight_total <= 0.0) throw std::invalid_argument("bandit fit: no observations");

  std::vector<double> theta(total, 0.0);
  std::vector<double> grad(total);
  std::vector<double> velocity(total, 0.0);

  bool converged = false;
  for (long it = 0; it < cfg.max_iters; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (const auto& o : observations) {
      const std::size_t iw = offsets[o.prompt] + o.win;
      const std::size_t il = offsets[o.prompt] + o.lose;
      // d(-log sigma(tw - tl))/dtw = -(1 - sigma) ; negated for the loser
      const double coef = -o.weight / weight_total * sigmoid(theta[il] - theta[iw]);
      grad[iw] += coef;
      grad[il] -= coef;
    }
    double gnorm2 = 0.0;
    for (std::size_t i = 0; i < total; ++i) {
      grad[i] += l2_strength * theta[i];
      gnorm2 += grad[i] * grad[i];
    }
    if (std::sqrt(gnorm2) < cfg.grad_tol) {
      converged = true;
      break;
    }
    for (std::size_t i = 0; i < total; ++i) {
      velocity[i] = cfg.momentum * velocity[i] - cfg.step_size * grad[i];
      theta[i] += velocity[i];
    }
  }
  if (!converged) {
    throw std::runtime_error("bandit fit: no convergence within iteration cap");
  }

  // mean-center per prompt (the Bradley-Terry shift gauge)
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    const std::size_t n = model.responses[p].size();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += theta[offsets[p] + i];
    mean /= static_cast<double>(n);
    std::vector<double> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = theta[offsets[p] + i] - mean;
    model.values.push_back(std::move(vals));
  }
  return model;
}

}  // namespace

BanditRewardModel fit_bandit_reward(std::shared_ptr<const mdp::TreeIndex> index,
                                    std::span<const mdp::PreferencePair> pairs,
                                    double l2_strength,
                                    const BanditFitConfig& cfg) {
  const auto& m = index->mdp();
  // response tokens -> lexicographic rank, per prompt
  std::vector<std::map<std::vector<Token>, std::size_t>> rank(index->num_prompts());
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    const auto rs = mdp::enumerate_responses(m, m.prompts[p]);
    for (std::size_t i = 0; i < rs.size(); ++i) rank[p].emplace(rs[i].response, i);
  }
  std::vector<PairObs> obs;
  obs.reserve(pairs.size());
  for (const auto& pair : pairs) {
    mdp::validate_pair(m, pair);
    const std::size_t p = index->prompt_index(pair.prompt);
    obs.push_back(PairObs{p, rank[p].at(pair.chosen), rank[p].at(pair.rejected), 1.0});
  }
  return fit_bandit(index, std::move(obs), l2_strength, cfg);
}

BanditRewardModel fit_bandit_reward_exact(const PreferenceDistribution& target,
                                          double l2_strength,
                                          const BanditFitConfig& cfg) {
  auto index = target.index_ptr();
  std::vector<PairObs> obs;
  for (std::size_t p = 0; p < target.num_prompts(); ++p) {
    const std::size_t n = target.responses(p).size();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double pij = target.prob(p, i, j);
        obs.push_back(PairObs{p, i, j, pij});
        obs.push_back(PairObs{p, j, i, 1.0 - pij});
      }
    }
  }
  return fit_bandit(std::move(index), std::move(obs), l2_strength, cfg);
}

softrl::RewardTable bandit_to_terminal_reward(const BanditRewardModel& model) {
  auto index = model.index;
  softrl::RewardTable table(index);
  const auto& m = index->mdp();
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    const auto& tree = index->tree(p);
    for (std::size_t i = 0; i < model.responses[p].size(); ++i) {
      const auto& resp = model.responses[p][i].response;
      const auto prefix = std::span<const Token>(resp).first(resp.size() - 1);
      const int node = tree.node_of_prefix(prefix);
      table.at(p, node, m.eos_id) = model.values[p][i];
    }
  }
  return table;
}

void save_bandit_model(const BanditRewardModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  json j;
  j["schema"] = "tokenrl.bandit-model.v1";
  j["l2_strength"] = model.l2_strength;
  j["centering"] = "per-prompt mean";
  json entries = json::array();
  for (std::size_t p = 0; p < model.responses.size(); ++p) {
    for (std::size_t i = 0; i < model.responses[p].size(); ++i) {
      json e;
      e["prompt_index"] = p;
      e["response"] = model.responses[p][i].response;
      e["value"] = model.values[p][i];
      entries.push_back(std::move(e));
    }
  }
  j["values"] = std::move(entries);
  out << j.dump() << "\n";
}

}  // namespace tokenrl::pref
