#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tokenrl/common.hpp"
#include "tokenrl/mdp.hpp"
#include "tokenrl/soft_rl.hpp"

namespace tokenrl::policy {

/**
 * A policy maps states to action log-probabilities. Sampling follows the
 * softmax of per-state logits divided by temperature beta; the logits play
 * the role of a Q function, so any exact solution is representable by a
 * tabular policy with logits set to Q.
 *
 * Gradient contract: trainers compute the loss derivative with respect to
 * the per-state logits (after the log-softmax chain rule) and hand it to
 * accumulate_param_grad, which maps it onto the flat parameter vector.
 */
class Policy {
 public:
  enum class Kind { tabular, tiny_seq, composed };

  virtual ~Policy() = default;
  virtual Kind kind() const = 0;
  virtual std::string kind_name() const;

  /// Log-probabilities over the whole vocabulary at (prompt, node), softmax
  /// temperature `beta`. Invalid actions (non-EOS at the last pre-horizon
  /// level) get -infinity. out.size() must equal vocab_size.
  virtual void action_log_probs(const mdp::TreeIndex& index,
                                std::size_t prompt, int node, double beta,
                                std::span<double> out) const = 0;

  virtual std::size_t param_count() const { return 0; }
  virtual std::span<const double> params() const { return {}; }
  virtual std::span<double> params() { return {}; }

  /// Accumulates d(loss)/d(params) given d(loss)/d(logits) at one state.
  /// dlogits covers the whole vocabulary with zeros on invalid actions.
  /// Throws for policies without trainable parameters.
  virtual void accumulate_param_grad(const mdp::TreeIndex& index,
                                     std::size_t prompt, int node,
                                     std::span<const double> dlogits,
                                     std::span<double> grad) const;

  virtual std::unique_ptr<Policy> clone() const = 0;

  /// Softmax temperature associated with the policy (checkpoint metadata and
  /// CLI default); operations that take an explicit beta ignore it.
  double temperature() const { return temperature_; }
  void set_temperature(double beta) { temperature_ = beta; }

 protected:
  double temperature_ = 1.0;
};

// ============================================================================
// Tabular policy
// ============================================================================

/// One logit per reachable (state, action) pair. Zero-initialized, i.e. the
/// fresh policy is exactly uniform.
class TabularPolicy final : public Policy {
 public:
  explicit TabularPolicy(std::shared_ptr<const mdp::TreeIndex> index);

  /// Realizes the exact optimal policy: logits := Q, evaluated at the
  /// solution's beta.
  static TabularPolicy from_solution(const softrl::SoftSolution& sol);

  Kind kind() const override { return Kind::tabular; }
  void action_log_probs(const mdp::TreeIndex& index, std::size_t prompt,
                        int node, double beta,
                        std::span<double> out) const override;
  std::size_t param_count() const override { return params_.size(); }
  std::span<const double> params() const override { return params_; }
  std::span<double> params() override { return params_; }
  void accumulate_param_grad(const mdp::TreeIndex& index, std::size_t prompt,
                             int node, std::span<const double> dlogits,
                             std::span<double> grad) const override;
  std::unique_ptr<Policy> clone() const override {
    return std::make_unique<TabularPolicy>(*this);
  }

  double logit(std::size_t prompt, int node, Token a) const;
  double& logit(std::size_t prompt, int node, Token a);

  /// Seeded Gaussian logits, for randomized reference policies.
  void randomize(Rng& rng, double stddev);

  const std::shared_ptr<const mdp::TreeIndex>& index_ptr() const { return index_; }
  std::size_t prompt_offset(std::size_t prompt) const { return prompt_offset_[prompt]; }

 private:
  std::shared_ptr<const mdp::TreeIndex> index_;
  std::vector<std::size_t> prompt_offset_;
  std::vector<double> params_;
};

// ============================================================================
// Tiny parametric sequence policy
// ============================================================================

struct TinySeqConfig {
  int embed_dim = 16;
  int window = 8;
  int hidden = 32;
  double init_stddev = 0.02;
};

/**
 * Small windowed MLP language model: embeds the last `window` tokens of
 * prompt+generated (left-padded), one tanh hidden layer, linear projection
 * to vocabulary logits. Stands in for any model that outputs logits, and is
 * small enough for full finite-difference audits.
 */
class TinySeqPolicy final : public Policy {
 public:
  TinySeqPolicy(int vocab_size, TinySeqConfig cfg, std::uint64_t seed);

  /// Construct from an existing flat parameter vector (checkpoint load).
  TinySeqPolicy(int vocab_size, TinySeqConfig cfg, std::vector<double> params);

  Kind kind() const override { return Kind::tiny_seq; }
  void action_log_probs(const mdp::TreeIndex& index, std::size_t prompt,
                        int node, double beta,
                        std::span<double> out) const override;
  std::size_t param_count() const override { return params_.size(); }
  std::span<const double> params() const override { return params_; }
  std::span<double> params() override { return params_; }
  void accumulate_param_grad(const mdp::TreeIndex& index, std::size_t prompt,
                             int node, std::span<const double> dlogits,
                             std::span<double> grad) const override;
  std::unique_ptr<Policy> clone() const override {
    return std::make_unique<TinySeqPolicy>(*this);
  }

  const TinySeqConfig& config() const { return cfg_; }
  int vocab_size() const { return vocab_; }

 private:
  void build_window(const mdp::TreeIndex& index, std::size_t prompt, int node,
                    std::span<int> window_out) const;
  void forward(std::span<const int> window, std::span<double> hidden,
               std::span<double> logits) const;

  int vocab_ = 0;
  TinySeqConfig cfg_;
  std::vector<double> params_;
  // layout: embeddings[(vocab+1) * d] | W1[h * (k*d)] | b1[h] | W2[v * h] | b2[v]
  std::size_t off_w1_ = 0, off_b1_ = 0, off_w2_ = 0, off_b2_ = 0;
};

// ============================================================================
// Evaluation
// ============================================================================

struct LogProb {
  double total = 0.0;
  std::vector<double> per_token;
};

/// Per-token log-probabilities of a trajectory under the temperature-beta
/// softmax, and their sum.
LogProb logprob(const Policy& pi, const mdp::TreeIndex& index, double beta,
                const mdp::Trajectory& traj);

/// log pi(a|s) for every reachable pair, materialized once. Backs the
/// enumeration-heavy operations (exact losses, expectations, preference
/// distributions) so the policy forward pass runs once per state.
softrl::StateActionTable materialize_log_probs(
    const Policy& pi, std::shared_ptr<const mdp::TreeIndex> index, double beta);

/// One ancestral draw at softmax temperature beta using the caller's
/// generator. EOS is forced at the horizon by the action mask.
mdp::Trajectory sample_trajectory(const Policy& pi, const mdp::TreeIndex& index,
                                  std::size_t prompt, double beta, Rng& rng);

// ============================================================================
// Training
// ============================================================================

struct TrainConfig {
  enum class Optimizer { momentum, adam };
  Optimizer optimizer = Optimizer::momentum;
  double step_size = 1e-2;  // default for tabular; use 1e-3 for tiny-seq
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Step-size decay: multiply by step_decay every decay_every optimizer
  /// steps (0 disables).
  double step_decay = 1.0;
  int decay_every = 0;
  int epochs = 200;
  int batch_size = 0;  // 0 = full batch; otherwise seeded-permutation batches
  std::uint64_t seed = 0;
  double policy_beta = 1.0;  // softmax temperature during training
};

/// First-order update rule shared by the SFT and DPO trainers.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n);
  void step(std::span<double> params, std::span<const double> grad);

 private:
  TrainConfig cfg_;
  std::vector<double> velocity_;
  std::vector<double> second_;
  long t_ = 0;
};

/// Mean negative log-likelihood of the corpus; gradient optional.
double sft_loss(const Policy& pi, const mdp::TreeIndex& index,
                std::span<const mdp::Trajectory> corpus, double policy_beta,
                std::span<double> grad = {});

struct SftResult {
  std::unique_ptr<Policy> policy;
  std::vector<double> epoch_losses;
};

/// Gradient-ascent maximum likelihood on the corpus. Throws on non-finite
/// loss with the failing epoch in the message.
SftResult sft_train(const Policy& init, const mdp::TreeIndex& index,
                    std::span<const mdp::Trajectory> corpus,
                    const TrainConfig& cfg);

// ============================================================================
// Finite-difference audit
// ============================================================================

/// Central finite differences against an analytic gradient. Checks all
/// coordinates when max_coords == 0, otherwise a seeded sample of that many.
/// Returns the max relative error with denominator max(|a|, |n|, 1e-8).
/// When sampling, coordinates with |analytic| below `resolvable_floor` are
/// excluded: central differences cannot resolve gradients beneath the
/// cancellation noise of the loss evaluation, so they carry no audit signal.
double grad_check(const Policy& pi,
                  const std::function<double(const Policy&)>& loss,
                  std::span<const double> analytic_grad, double eps,
                  std::size_t max_coords = 0, std::uint64_t seed = 0,
                  double resolvable_floor = 0.0);

/// grad_check specialization for the SFT loss.
double grad_check_sft(const Policy& pi, const mdp::TreeIndex& index,
                      std::span<const mdp::Trajectory> corpus,
                      double policy_beta, double eps,
                      std::size_t max_coords = 0, std::uint64_t seed = 0,
                      double resolvable_floor = 0.0);

/// Content hash over kind, temperature and the exact parameter bits; the
/// same value a checkpoint of this policy carries.
std::string policy_hash(const Policy& pi);

}  // namespace tokenrl::policy
