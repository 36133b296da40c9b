#include "tokenrl/dpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace tokenrl::dpo {

namespace {

// d(-log sigma(m))/dm = -sigma(-m)

// Per-state gradient push: dlogits = coef * beta * (e_a - pi(.|s)) / policy_beta
void push_token_grad(const policy::Policy& pi, const mdp::TreeIndex& index,
                     std::size_t prompt, int node, Token action, double coef,
                     double beta, double policy_beta,
                     std::span<double> logprob_buf, std::span<double> dlogits,
                     std::span<double> grad) {
  if (index.tree(prompt).row_width(node) == 1) return;  // forced EOS, no gradient
  pi.action_log_probs(index, prompt, node, policy_beta, logprob_buf);
  const double scale = coef * beta / policy_beta;
  for (std::size_t b = 0; b < dlogits.size(); ++b) {
    const double prob = std::exp(logprob_buf[b]);
    const double delta = (static_cast<Token>(b) == action) ? 1.0 : 0.0;
    dlogits[b] = scale * (delta - prob);
  }
  pi.accumulate_param_grad(index, prompt, node, dlogits, grad);
}

double sequence_logratio(const policy::Policy& pi, const policy::Policy& ref,
                         const mdp::TreeIndex& index, double beta,
                         double policy_beta, const mdp::Trajectory& traj) {
  const auto lp = policy::logprob(pi, index, policy_beta, traj);
  const auto lr = policy::logprob(ref, index, policy_beta, traj);
  if (!std::isfinite(lr.total)) {
    throw std::invalid_argument("zero-probability reference action");
  }
  return beta * (lp.total - lr.total);
}

}  // namespace

double dpo_loss_and_grad(const policy::Policy& pi, const policy::Policy& ref,
                         const mdp::TreeIndex& index,
                         std::span<const mdp::PreferencePair> batch, double beta,
                         double policy_beta, std::span<double> grad) {
  if (batch.empty()) throw std::invalid_argument("dpo: empty batch");
  const int vocab = index.mdp().vocab_size;
  std::vector<double> buf(static_cast<std::size_t>(vocab));
  std::vector<double> dlogits(static_cast<std::size_t>(vocab));
  const double scale = 1.0 / static_cast<double>(batch.size());

  double loss = 0.0;
  for (const auto& pair : batch) {
    const std::size_t p = index.prompt_index(pair.prompt);
    const mdp::Trajectory chosen{pair.prompt, pair.chosen};
    const mdp::Trajectory rejected{pair.prompt, pair.rejected};
    const double margin =
        sequence_logratio(pi, ref, index, beta, policy_beta, chosen) -
        sequence_logratio(pi, ref, index, beta, policy_beta, rejected);
    loss += scale * softplus(-margin);
    if (grad.empty()) continue;
    const double dmargin = -scale * sigmoid(-margin);
    for (const auto& [node, action] : mdp::path_of(index, p, pair.chosen)) {
      push_token_grad(pi, index, p, node, action, dmargin, beta, policy_beta,
                      buf, dlogits, grad);
    }
    for (const auto& [node, action] : mdp::path_of(index, p, pair.rejected)) {
      push_token_grad(pi, index, p, node, action, -dmargin, beta, policy_beta,
                      buf, dlogits, grad);
    }
  }
  return loss;
}

double exact_dpo_loss_and_grad(const policy::Policy& pi, const policy::Policy& ref,
                               const pref::PreferenceDistribution& target,
                               double beta, double policy_beta,
                               std::span<double> grad) {
  const auto index = target.index_ptr();
  const auto lp_pi = policy::materialize_log_probs(pi, index, policy_beta);
  const auto lp_ref = policy::materialize_log_probs(ref, index, policy_beta);

  std::size_t total_pairs = 0;
  for (std::size_t p = 0; p < target.num_prompts(); ++p) {
    const std::size_t n = target.responses(p).size();
    total_pairs += n * (n - 1) / 2;
  }
  if (total_pairs == 0) throw std::invalid_argument("dpo: no preference pairs");
  const double scale = 1.0 / static_cast<double>(total_pairs);

  const int vocab = index->mdp().vocab_size;
  std::vector<double> buf(static_cast<std::size_t>(vocab));
  std::vector<double> dlogits(static_cast<std::size_t>(vocab));

  double loss = 0.0;
  for (std::size_t p = 0; p < target.num_prompts(); ++p) {
    const auto responses = target.responses(p);
    const std::size_t n = responses.size();

    // sequence-level implicit rewards and their paths
    std::vector<double> L(n);
    std::vector<std::vector<std::pair<int, Token>>> paths(n);
    for (std::size_t i = 0; i < n; ++i) {
      paths[i] = mdp::path_of(*index, p, responses[i].response);
      double sum = 0.0;
      for (const auto& [node, action] : paths[i]) {
        const double lr = lp_ref.at(p, node, action);
        if (!std::isfinite(lr)) {
          throw std::invalid_argument("zero-probability reference action");
        }
        sum += beta * (lp_pi.at(p, node, action) - lr);
      }
      L[i] = sum;
    }

    std::vector<double> g(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double pw = target.prob(p, i, j);
        const double m = L[i] - L[j];
        loss += scale * (pw * softplus(-m) + (1.0 - pw) * softplus(m));
        if (grad.empty()) continue;
        const double dm = scale * (-pw * sigmoid(-m) + (1.0 - pw) * sigmoid(m));
        g[i] += dm;
        g[j] -= dm;
      }
    }
    if (grad.empty()) continue;

    // fold response coefficients onto the per-state-action table, then do
    // one chain-rule pass per node
    softrl::StateActionTable coef(index);
    for (std::size_t i = 0; i < n; ++i) {
      if (g[i] == 0.0) continue;
      for (const auto& [node, action] : paths[i]) coef.at(p, node, action) += g[i];
    }
    const auto& tree = index->tree(p);
    for (int node = 0; node < tree.num_nodes(); ++node) {
      if (tree.row_width(node) == 1) continue;
      const auto row = coef.row(p, node);
      bool any = false;
      double row_total = 0.0;
      for (double c : row) {
        row_total += c;
        any = any || c != 0.0;
      }
      if (!any) continue;
      const auto lp_row = lp_pi.row(p, node);
      for (std::size_t b = 0; b < row.size(); ++b) {
        dlogits[b] =
            beta / policy_beta * (row[b] - std::exp(lp_row[b]) * row_total);
      }
      pi.accumulate_param_grad(*index, p, node, dlogits, grad);
    }
  }
  return loss;
}

// ============================================================================
// Expectations over the reference
// ============================================================================

namespace {

// E over responses of the reference-induced distribution of per-path sums of
// `value(node, action)` terms. Reverse preorder = children before parents.
double tree_expectation(const mdp::TreeIndex& index, std::size_t prompt,
                        const softrl::StateActionTable& ref_log_probs,
                        const std::function<double(int, int, Token)>& value) {
  const auto& tree = index.tree(prompt);
  const int vocab = index.mdp().vocab_size;
  std::vector<double> e(static_cast<std::size_t>(tree.num_nodes()), 0.0);
  for (int node = tree.num_nodes() - 1; node >= 0; --node) {
    const auto lref = ref_log_probs.row(prompt, node);
    double acc = 0.0;
    int i = 0;
    for (Token a = 0; a < vocab; ++a) {
      if (!tree.action_valid(node, a)) continue;
      const double rho = std::exp(lref[i]);
      const int c = tree.child(node, a);
      acc += rho * (value(node, i, a) + (c >= 0 ? e[c] : 0.0));
      ++i;
    }
    e[node] = acc;
  }
  return e[0];
}

}  // namespace

double expected_logratio(const policy::Policy& pi, const policy::Policy& ref,
                         const mdp::TreeIndex& index, double beta,
                         std::size_t prompt, double policy_beta) {
  auto holder = std::shared_ptr<const mdp::TreeIndex>(&index, [](auto*) {});
  const auto lp_pi = policy::materialize_log_probs(pi, holder, policy_beta);
  const auto lp_ref = policy::materialize_log_probs(ref, holder, policy_beta);
  return tree_expectation(index, prompt, lp_ref, [&](int node, int i, Token) {
    return beta * (lp_pi.row(prompt, node)[i] - lp_ref.row(prompt, node)[i]);
  });
}

double sequence_kl(const policy::Policy& ref, const policy::Policy& pi,
                   const mdp::TreeIndex& index, std::size_t prompt,
                   double policy_beta) {
  auto holder = std::shared_ptr<const mdp::TreeIndex>(&index, [](auto*) {});
  const auto lp_pi = policy::materialize_log_probs(pi, holder, policy_beta);
  const auto lp_ref = policy::materialize_log_probs(ref, holder, policy_beta);
  return tree_expectation(index, prompt, lp_ref, [&](int node, int i, Token) {
    return lp_ref.row(prompt, node)[i] - lp_pi.row(prompt, node)[i];
  });
}

std::vector<double> implicit_token_rewards(const policy::Policy& pi,
                                           const policy::Policy& ref,
                                           const mdp::TreeIndex& index,
                                           double beta,
                                           const mdp::Trajectory& traj,
                                           double policy_beta) {
  const auto lp = policy::logprob(pi, index, policy_beta, traj);
  const auto lr = policy::logprob(ref, index, policy_beta, traj);
  std::vector<double> out(lp.per_token.size());
  for (std::size_t t = 0; t < out.size(); ++t) {
    if (!std::isfinite(lr.per_token[t])) {
      throw std::invalid_argument("zero-probability reference action");
    }
    out[t] = beta * (lp.per_token[t] - lr.per_token[t]);
  }
  return out;
}

double grad_check_dpo(const policy::Policy& pi, const policy::Policy& ref,
                      const mdp::TreeIndex& index,
                      std::span<const mdp::PreferencePair> batch, double beta,
                      double policy_beta, double eps, std::size_t max_coords,
                      std::uint64_t seed, double resolvable_floor) {
  std::vector<double> grad(pi.param_count(), 0.0);
  dpo_loss_and_grad(pi, ref, index, batch, beta, policy_beta, grad);
  return policy::grad_check(
      pi,
      [&](const policy::Policy& probe) {
        return dpo_loss_and_grad(probe, ref, index, batch, beta, policy_beta);
      },
      grad, eps, max_coords, seed, resolvable_floor);
}

// ============================================================================
// Trainers
// ============================================================================

namespace {

struct DiagInputs {
  const mdp::TreeIndex* index;
  const policy::Policy* ref;
  double beta;
  double policy_beta;
};

// diagnostics row for the sampled-dataset trainer
StepRecord make_record(long step, double loss, const policy::Policy& pi,
                       const DiagInputs& in,
                       std::span<const mdp::PreferencePair> data) {
  StepRecord rec;
  rec.step = step;
  rec.loss = loss;
  double chosen = 0.0, rejected = 0.0;
  for (const auto& pair : data) {
    chosen += sequence_logratio(pi, *in.ref, *in.index, in.beta, in.policy_beta,
                                mdp::Trajectory{pair.prompt, pair.chosen});
    rejected += sequence_logratio(pi, *in.ref, *in.index, in.beta, in.policy_beta,
                                  mdp::Trajectory{pair.prompt, pair.rejected});
  }
  const double inv = data.empty() ? 0.0 : 1.0 / static_cast<double>(data.size());
  rec.chosen_ir = chosen * inv;
  rec.rejected_ir = rejected * inv;
  rec.margin = rec.chosen_ir - rec.rejected_ir;
  double elr = 0.0;
  for (std::size_t p = 0; p < in.index->num_prompts(); ++p) {
    elr += expected_logratio(pi, *in.ref, *in.index, in.beta, p, in.policy_beta);
  }
  rec.expected_logratio = elr / static_cast<double>(in.index->num_prompts());
  return rec;
}

StepRecord make_record_exact(long step, double loss, const policy::Policy& pi,
                             const DiagInputs& in,
                             const pref::PreferenceDistribution& target) {
  StepRecord rec;
  rec.step = step;
  rec.loss = loss;
  double chosen = 0.0, rejected = 0.0, margin = 0.0;
  std::size_t total_pairs = 0;
  for (std::size_t p = 0; p < target.num_prompts(); ++p) {
    const auto responses = target.responses(p);
    std::vector<double> L(responses.size());
    for (std::size_t i = 0; i < L.size(); ++i) {
      L[i] = sequence_logratio(pi, *in.ref, *in.index, in.beta, in.policy_beta,
                               responses[i]);
    }
    for (std::size_t i = 0; i < L.size(); ++i) {
      for (std::size_t j = i + 1; j < L.size(); ++j) {
        const double pw = target.prob(p, i, j);
        chosen += pw * L[i] + (1.0 - pw) * L[j];
        rejected += pw * L[j] + (1.0 - pw) * L[i];
        margin += (2.0 * pw - 1.0) * (L[i] - L[j]);
        ++total_pairs;
      }
    }
  }
  const double inv = total_pairs ? 1.0 / static_cast<double>(total_pairs) : 0.0;
  rec.chosen_ir = chosen * inv;
  rec.rejected_ir = rejected * inv;
  rec.margin = margin * inv;
  double elr = 0.0;
  for (std::size_t p = 0; p < in.index->num_prompts(); ++p) {
    elr += expected_logratio(pi, *in.ref, *in.index, in.beta, p, in.policy_beta);
  }
  rec.expected_logratio = elr / static_cast<double>(in.index->num_prompts());
  return rec;
}

}  // namespace

DpoResult dpo_train(const policy::Policy& init, const policy::Policy& ref,
                    const mdp::TreeIndex& index,
                    std::span<const mdp::PreferencePair> data,
                    const DpoConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("dpo_train: empty dataset");
  DpoResult result;
  result.policy = init.clone();
  result.ref_hash = policy::policy_hash(ref);
  policy::Policy& pi = *result.policy;
  const DiagInputs diag{&index, &ref, cfg.beta, cfg.optim.policy_beta};

  policy::Optimizer opt(cfg.optim, pi.param_count());
  std::vector<double> grad(pi.param_count());
  Rng rng(cfg.optim.seed);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = cfg.optim.batch_size > 0
                             ? static_cast<std::size_t>(cfg.optim.batch_size)
                             : data.size();

  const double loss0 = dpo_loss_and_grad(pi, ref, index, data, cfg.beta,
                                         cfg.optim.policy_beta);
  result.diagnostics.steps.push_back(make_record(0, loss0, pi, diag, data));

  std::vector<double> last_good(pi.params().begin(), pi.params().end());
  std::vector<mdp::PreferencePair> batch;
  long step = 0;
  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    if (cfg.optim.batch_size > 0) {
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
      }
    }
    for (std::size_t start = 0; start < data.size(); start += bs) {
      batch.clear();
      for (std::size_t i = start; i < std::min(start + bs, data.size()); ++i) {
        batch.push_back(data[order[i]]);
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      const double loss = dpo_loss_and_grad(pi, ref, index, batch, cfg.beta,
                                            cfg.optim.policy_beta, grad);
      if (!std::isfinite(loss)) {
        std::copy(last_good.begin(), last_good.end(), pi.params().begin());
        throw std::runtime_error("dpo_train: diverged at step " +
                                 std::to_string(step) +
                                 "; parameters restored to last finite step");
      }
      std::copy(pi.params().begin(), pi.params().end(), last_good.begin());
      opt.step(pi.params(), grad);
      ++step;
      if (cfg.diagnostics_every > 0 && step % cfg.diagnostics_every == 0) {
        const double full = dpo_loss_and_grad(pi, ref, index, data, cfg.beta,
                                              cfg.optim.policy_beta);
        result.diagnostics.steps.push_back(make_record(step, full, pi, diag, data));
      }
    }
  }
  if (result.diagnostics.steps.back().step != step) {
    const double full =
        dpo_loss_and_grad(pi, ref, index, data, cfg.beta, cfg.optim.policy_beta);
    result.diagnostics.steps.push_back(make_record(step, full, pi, diag, data));
  }
  return result;
}

DpoResult dpo_train_exact(const policy::Policy& init, const policy::Policy& ref,
                          const pref::PreferenceDistribution& target,
                          const DpoConfig& cfg) {
  DpoResult result;
  result.policy = init.clone();
  result.ref_hash = policy::policy_hash(ref);
  policy::Policy& pi = *result.policy;
  const auto index = target.index_ptr();
  const DiagInputs diag{index.get(), &ref, cfg.beta, cfg.optim.policy_beta};

  policy::Optimizer opt(cfg.optim, pi.param_count());
  std::vector<double> grad(pi.param_count());

  const double loss0 =
      exact_dpo_loss_and_grad(pi, ref, target, cfg.beta, cfg.optim.policy_beta);
  result.diagnostics.steps.push_back(make_record_exact(0, loss0, pi, diag, target));

  std::vector<double> last_good(pi.params().begin(), pi.params().end());
  for (long step = 1; step <= cfg.optim.epochs; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    const double loss = exact_dpo_loss_and_grad(pi, ref, target, cfg.beta,
                                                cfg.optim.policy_beta, grad);
    if (!std::isfinite(loss)) {
      std::copy(last_good.begin(), last_good.end(), pi.params().begin());
      throw std::runtime_error("dpo_train_exact: diverged at step " +
                               std::to_string(step) +
                               "; parameters restored to last finite step");
    }
    std::copy(pi.params().begin(), pi.params().end(), last_good.begin());
    opt.step(pi.params(), grad);
    if (cfg.diagnostics_every > 0 && step % cfg.diagnostics_every == 0) {
      const double full = exact_dpo_loss_and_grad(pi, ref, target, cfg.beta,
                                                  cfg.optim.policy_beta);
      result.diagnostics.steps.push_back(
          make_record_exact(step, full, pi, diag, target));
    }
  }
  if (result.diagnostics.steps.back().step != cfg.optim.epochs) {
    const double full =
        exact_dpo_loss_and_grad(pi, ref, target, cfg.beta, cfg.optim.policy_beta);
    result.diagnostics.steps.push_back(
        make_record_exact(cfg.optim.epochs, full, pi, diag, target));
  }
  return result;
}

void diagnostics_to_csv(const TrainingDiagnostics& diag, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "# schema: tokenrl.dpo-diagnostics.v1\n";
  out << "step,loss,chosen_ir,rejected_ir,margin,expected_logratio,"
         "chosen_ir_running,rejected_ir_running\n";
  double chosen_sum = 0.0, rejected_sum = 0.0;
  std::size_t n = 0;
  for (const auto& rec : diag.steps) {
    chosen_sum += rec.chosen_ir;
    rejected_sum += rec.rejected_ir;
    ++n;
    out << rec.step << "," << format_f64(rec.loss) << ","
        << format_f64(rec.chosen_ir) << "," << format_f64(rec.rejected_ir) << ","
        << format_f64(rec.margin) << "," << format_f64(rec.expected_logratio)
        << "," << format_f64(chosen_sum / static_cast<double>(n)) << ","
        << format_f64(rejected_sum / static_cast<double>(n)) << "\n";
  }
}

}  // namespace tokenrl::dpo
