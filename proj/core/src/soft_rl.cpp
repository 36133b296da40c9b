#include "tokenrl/soft_rl.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "tokenrl/policy.hpp"

namespace tokenrl::softrl {

using nlohmann::json;

StateActionTable::StateActionTable(std::shared_ptr<const mdp::TreeIndex> index,
                                   double fill)
    : index_(std::move(index)) {
  data_.resize(index_->num_prompts());
  for (std::size_t p = 0; p < data_.size(); ++p) {
    data_[p].assign(index_->tree(p).table_size(), fill);
  }
}

std::span<const double> StateActionTable::row(std::size_t prompt, int node) const {
  const auto& tree = index_->tree(prompt);
  return std::span<const double>(data_[prompt])
      .subspan(tree.row_offset(node), tree.row_width(node));
}

std::span<double> StateActionTable::row(std::size_t prompt, int node) {
  const auto& tree = index_->tree(prompt);
  return std::span<double>(data_[prompt])
      .subspan(tree.row_offset(node), tree.row_width(node));
}

StateTable::StateTable(std::shared_ptr<const mdp::TreeIndex> index, double fill)
    : index_(std::move(index)) {
  data_.resize(index_->num_prompts());
  for (std::size_t p = 0; p < data_.size(); ++p) {
    data_[p].assign(static_cast<std::size_t>(index_->tree(p).num_nodes()), fill);
  }
}

void validate_potential(const Potential& phi) {
  const auto& index = phi.terminal.index();
  for (std::size_t p = 0; p < index.num_prompts(); ++p) {
    for (double v : phi.terminal.values(p)) {
      if (v != 0.0) {
        throw std::invalid_argument("potential: nonzero at a terminal state");
      }
    }
  }
}

namespace {

// Reference log-probs at one node, with positivity validation or optional
// probability flooring.
void ref_log_probs(const policy::Policy& ref, const mdp::TreeIndex& index,
                   std::size_t prompt, int node, double beta,
                   const SolveOptions& opts, std::span<double> buf,
                   std::span<double> row_out) {
  const auto& tree = index.tree(prompt);
  ref.action_log_probs(index, prompt, node, beta, buf);
  if (opts.ref_floor > 0.0) {
    double total = 0.0;
    for (Token a = 0; a < static_cast<Token>(buf.size()); ++a) {
      if (!tree.action_valid(node, a)) continue;
      buf[a] = std::max(std::exp(buf[a]), opts.ref_floor);
      total += buf[a];
    }
    for (Token a = 0; a < static_cast<Token>(buf.size()); ++a) {
      if (tree.action_valid(node, a)) buf[a] = std::log(buf[a] / total);
    }
  }
  int i = 0;
  for (Token a = 0; a < static_cast<Token>(buf.size()); ++a) {
    if (!tree.action_valid(node, a)) continue;
    // log-space evaluation keeps log pi_ref finite even when the probability
    // itself underflows; both cases poison the Bellman backup
    if (!std::isfinite(buf[a]) || std::exp(buf[a]) == 0.0) {
      throw std::invalid_argument("zero-probability reference action");
    }
    row_out[i++] = buf[a];
  }
}

}  // namespace

SoftSolution solve_soft(std::shared_ptr<const mdp::TreeIndex> index,
                        const RewardTable& reward,
                        std::shared_ptr<const policy::Policy> ref, double beta,
                        const SolveOptions& opts) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  if (!ref) throw std::invalid_argument("null reference policy");

  SoftSolution sol;
  sol.q = QTable(index);
  sol.v = StateTable(index);
  sol.pi_star = StateActionTable(index);
  sol.beta = beta;
  sol.ref = ref;

  const int vocab = index->mdp().vocab_size;
  std::vector<double> logref_buf(static_cast<std::size_t>(vocab));
  std::vector<double> logref_row(static_cast<std::size_t>(vocab));

  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    const auto& tree = index->tree(p);
    // Children carry higher preorder ids than parents, so a reverse sweep is
    // leaves-first backward induction.
    for (int node = tree.num_nodes() - 1; node >= 0; --node) {
      const int width = tree.row_width(node);
      ref_log_probs(*ref, *index, p, node, beta, opts,
                    std::span<double>(logref_buf),
                    std::span<double>(logref_row));
      auto q_row = sol.q.row(p, node);
      const auto r_row = reward.row(p, node);
      int i = 0;
      for (Token a = 0; a < vocab; ++a) {
        if (!tree.action_valid(node, a)) continue;
        const int c = tree.child(node, a);
        const double next_v = (c >= 0) ? sol.v.at(p, c) : 0.0;
        q_row[i] = r_row[i] + beta * logref_row[i] + next_v;
        ++i;
      }
      auto pi_row = sol.pi_star.row(p, node);
      for (int k = 0; k < width; ++k) pi_row[k] = q_row[k] / beta;
      const double lse = log_sum_exp(pi_row);
      sol.v.at(p, node) = beta * lse;
      for (int k = 0; k < width; ++k) pi_row[k] = std::exp(pi_row[k] - lse);
    }
  }
  return sol;
}

RewardTable q_to_reward(const QTable& q, const policy::Policy& ref, double beta,
                        const SolveOptions& opts) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  auto index = q.index_ptr();
  RewardTable r(index);
  StateTable v(index);

  const int vocab = index->mdp().vocab_size;
  std::vector<double> logref_buf(static_cast<std::size_t>(vocab));
  std::vector<double> logref_row(static_cast<std::size_t>(vocab));
  std::vector<double> scratch(static_cast<std::size_t>(vocab));

  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    const auto& tree = index->tree(p);
    // V depends on q locally (Eq. 6), so one pass fills it.
    for (int node = 0; node < tree.num_nodes(); ++node) {
      const auto q_row = q.row(p, node);
      const int width = tree.row_width(node);
      auto sc = std::span<double>(scratch).first(static_cast<std::size_t>(width));
      for (int k = 0; k < width; ++k) sc[k] = q_row[k] / beta;
      v.at(p, node) = beta * log_sum_exp(sc);
    }
    for (int node = 0; node < tree.num_nodes(); ++node) {
      ref_log_probs(ref, *index, p, node, beta, opts,
                    std::span<double>(logref_buf),
                    std::span<double>(logref_row));
      const auto q_row = q.row(p, node);
      auto r_row = r.row(p, node);
      int i = 0;
      for (Token a = 0; a < vocab; ++a) {
        if (!tree.action_valid(node, a)) continue;
        const int c = tree.child(node, a);
        const double next_v = (c >= 0) ? v.at(p, c) : 0.0;
        r_row[i] = q_row[i] - beta * logref_row[i] - next_v;
        ++i;
      }
    }
  }
  return r;
}

RewardTable shape_reward(const RewardTable& reward, const Potential& phi) {
  validate_potential(phi);
  auto index = reward.index_ptr();
  RewardTable shaped(index);
  const int vocab = index->mdp().vocab_size;
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    const auto& tree = index->tree(p);
    for (int node = 0; node < tree.num_nodes(); ++node) {
      const double phi_here = phi.interior.at(p, node);
      const auto r_row = reward.row(p, node);
      auto out_row = shaped.row(p, node);
      int i = 0;
      for (Token a = 0; a < vocab; ++a) {
        if (!tree.action_valid(node, a)) continue;
        const int c = tree.child(node, a);
        const double phi_next =
            (c >= 0) ? phi.interior.at(p, c) : phi.terminal.at(p, node);
        out_row[i] = r_row[i] + phi_next - phi_here;
        ++i;
      }
    }
  }
  return shaped;
}

StateActionTable advantage_of(const SoftSolution& sol) {
  if (!sol.ref) throw std::invalid_argument("solution has no reference policy");
  auto index = sol.q.index_ptr();
  StateActionTable adv(index);
  const int vocab = index->mdp().vocab_size;
  std::vector<double> logref(static_cast<std::size_t>(vocab));
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    const auto& tree = index->tree(p);
    for (int node = 0; node < tree.num_nodes(); ++node) {
      const auto q_row = sol.q.row(p, node);
      auto a_row = adv.row(p, node);
      const double v = sol.v.at(p, node);
      sol.ref->action_log_probs(*index, p, node, sol.beta, logref);
      // A = beta*log(pi*/pi_ref) = (q - v) - beta*log pi_ref; the KL bonus
      // inside q cancels so this also equals r + V(s') - V(s)
      int i = 0;
      for (Token a = 0; a < vocab; ++a) {
        if (!tree.action_valid(node, a)) continue;
        a_row[i] = q_row[i] - v - sol.beta * logref[static_cast<std::size_t>(a)];
        ++i;
      }
    }
  }
  return adv;
}

void save_reward_table(const RewardTable& table, const std::string& path,
                       bool sparse) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const auto& index = table.index();
  const int vocab = index.mdp().vocab_size;
  for (std::size_t p = 0; p < index.num_prompts(); ++p) {
    const auto& tree = index.tree(p);
    for (int node = 0; node < tree.num_nodes(); ++node) {
      for (Token a = 0; a < vocab; ++a) {
        if (!tree.action_valid(node, a)) continue;
        const double v = table.at(p, node, a);
        if (sparse && v == 0.0) continue;
        json j;
        j["prompt_index"] = p;
        const auto prefix = tree.prefix(node);
        j["prefix"] = std::vector<Token>(prefix.begin(), prefix.end());
        j["action"] = a;
        j["value"] = v;
        out << j.dump() << "\n";
      }
    }
  }
}

RewardTable load_reward_table(std::shared_ptr<const mdp::TreeIndex> index,
                              const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  RewardTable table(index);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const auto p = j.at("prompt_index").get<std::size_t>();
    if (p >= index->num_prompts()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": prompt index out of range");
    }
    std::vector<Token> prefix;
    for (const auto& t : j.at("prefix")) prefix.push_back(t.get<Token>());
    const Token a = j.at("action").get<Token>();
    const auto& tree = index->tree(p);
    const int node = tree.node_of_prefix(prefix);
    if (node < 0 || !tree.action_valid(node, a)) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": entry does not name a reachable state-action pair");
    }
    table.at(p, node, a) = j.at("value").get<double>();
  }
  return table;
}

}  // namespace tokenrl::softrl
