#include "tokenrl/policy.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tokenrl::policy {

std::string Policy::kind_name() const {
  switch (kind()) {
    case Kind::tabular: return "tabular";
    case Kind::tiny_seq: return "tiny-seq";
    case Kind::composed: return "composed";
  }
  return "unknown";
}

void Policy::accumulate_param_grad(const mdp::TreeIndex&, std::size_t, int,
                                   std::span<const double>,
                                   std::span<double>) const {
  throw std::logic_error("policy has no trainable parameters");
}

// ============================================================================
// TabularPolicy
// ============================================================================

TabularPolicy::TabularPolicy(std::shared_ptr<const mdp::TreeIndex> index)
    : index_(std::move(index)) {
  std::size_t total = 0;
  prompt_offset_.reserve(index_->num_prompts());
  for (std::size_t p = 0; p < index_->num_prompts(); ++p) {
    prompt_offset_.push_back(total);
    total += index_->tree(p).table_size();
  }
  params_.assign(total, 0.0);
}

TabularPolicy TabularPolicy::from_solution(const softrl::SoftSolution& sol) {
  TabularPolicy pi(sol.q.index_ptr());
  const auto& index = sol.q.index();
  for (std::size_t p = 0; p < index.num_prompts(); ++p) {
    const auto flat = sol.q.flat(p);
    std::copy(flat.begin(), flat.end(),
              pi.params_.begin() + static_cast<std::ptrdiff_t>(pi.prompt_offset_[p]));
  }
  pi.set_temperature(sol.beta);
  return pi;
}

double TabularPolicy::logit(std::size_t prompt, int node, Token a) const {
  return params_[prompt_offset_[prompt] + index_->tree(prompt).entry_index(node, a)];
}

double& TabularPolicy::logit(std::size_t prompt, int node, Token a) {
  return params_[prompt_offset_[prompt] + index_->tree(prompt).entry_index(node, a)];
}

void TabularPolicy::action_log_probs(const mdp::TreeIndex& index,
                                     std::size_t prompt, int node, double beta,
                                     std::span<double> out) const {
  if (&index != index_.get()) {
    throw std::invalid_argument("tabular policy evaluated against a foreign tree index");
  }
  const auto& tree = index.tree(prompt);
  const int width = tree.row_width(node);
  const std::size_t base = prompt_offset_[prompt] + tree.row_offset(node);
  if (width == 1) {
    for (auto& v : out) v = -std::numeric_limits<double>::infinity();
    out[static_cast<std::size_t>(tree.eos())] = 0.0;
    return;
  }
  const auto logits =
      std::span<const double>(params_).subspan(base, static_cast<std::size_t>(width));
  log_softmax(logits, beta, out);
}

void TabularPolicy::accumulate_param_grad(const mdp::TreeIndex& index,
                                          std::size_t prompt, int node,
                                          std::span<const double> dlogits,
                                          std::span<double> grad) const {
  if (&index != index_.get()) {
    throw std::invalid_argument("tabular policy evaluated against a foreign tree index");
  }
  const auto& tree = index.tree(prompt);
  if (tree.row_width(node) == 1) return;  // single-action rows carry no gradient
  const std::size_t base = prompt_offset_[prompt] + tree.row_offset(node);
  for (std::size_t a = 0; a < dlogits.size(); ++a) {
    grad[base + a] += dlogits[a];
  }
}

void TabularPolicy::randomize(Rng& rng, double stddev) {
  for (auto& v : params_) v = rng.normal(0.0, stddev);
}

// ============================================================================
// TinySeqPolicy
// ============================================================================

namespace {
std::size_t tinyseq_param_count(int vocab, const TinySeqConfig& cfg) {
  const std::size_t d = static_cast<std::size_t>(cfg.embed_dim);
  const std::size_t k = static_cast<std::size_t>(cfg.window);
  const std::size_t h = static_cast<std::size_t>(cfg.hidden);
  const std::size_t v = static_cast<std::size_t>(vocab);
  return (v + 1) * d + h * (k * d) + h + v * h + v;
}
}  // namespace

TinySeqPolicy::TinySeqPolicy(int vocab_size, TinySeqConfig cfg, std::uint64_t seed)
    : vocab_(vocab_size), cfg_(cfg) {
  params_.resize(tinyseq_param_count(vocab_, cfg_));
  Rng rng(seed);
  for (auto& v : params_) v = rng.normal(0.0, cfg_.init_stddev);
  const std::size_t d = static_cast<std::size_t>(cfg_.embed_dim);
  const std::size_t k = static_cast<std::size_t>(cfg_.window);
  const std::size_t h = static_cast<std::size_t>(cfg_.hidden);
  off_w1_ = (static_cast<std::size_t>(vocab_) + 1) * d;
  off_b1_ = off_w1_ + h * (k * d);
  off_w2_ = off_b1_ + h;
  off_b2_ = off_w2_ + static_cast<std::size_t>(vocab_) * h;
}

TinySeqPolicy::TinySeqPolicy(int vocab_size, TinySeqConfig cfg,
                             std::vector<double> params)
    : TinySeqPolicy(vocab_size, cfg, std::uint64_t{0}) {
  if (params.size() != params_.size()) {
    throw std::invalid_argument("tiny-seq parameter vector has wrong size");
  }
  params_ = std::move(params);
}

void TinySeqPolicy::build_window(const mdp::TreeIndex& index, std::size_t prompt,
                                 int node, std::span<int> window_out) const {
  const auto& prompt_tokens = index.mdp().prompts[prompt];
  const auto prefix = index.tree(prompt).prefix(node);
  const int k = cfg_.window;
  const int total = static_cast<int>(prompt_tokens.size() + prefix.size());
  for (int i = 0; i < k; ++i) {
    const int pos = total - k + i;
    if (pos < 0) {
      window_out[i] = vocab_;  // pad row
    } else if (pos < static_cast<int>(prompt_tokens.size())) {
      window_out[i] = prompt_tokens[static_cast<std::size_t>(pos)];
    } else {
      window_out[i] = prefix[static_cast<std::size_t>(pos) - prompt_tokens.size()];
    }
  }
}

void TinySeqPolicy::forward(std::span<const int> window, std::span<double> hidden,
                            std::span<double> logits) const {
  const int d = cfg_.embed_dim;
  const int k = cfg_.window;
  const int h = cfg_.hidden;
  const double* W1 = params_.data() + off_w1_;
  const double* b1 = params_.data() + off_b1_;
  const double* W2 = params_.data() + off_w2_;
  const double* b2 = params_.data() + off_b2_;

  for (int j = 0; j < h; ++j) {
    double acc = b1[j];
    const double* w_row = W1 + static_cast<std::size_t>(j) * (k * d);
    for (int t = 0; t < k; ++t) {
      const double* emb = params_.data() + static_cast<std::size_t>(window[t]) * d;
      const double* w = w_row + static_cast<std::size_t>(t) * d;
      for (int e = 0; e < d; ++e) acc += w[e] * emb[e];
    }
    hidden[j] = std::tanh(acc);
  }
  for (int a = 0; a < vocab_; ++a) {
    double acc = b2[a];
    const double* w = W2 + static_cast<std::size_t>(a) * h;
    for (int j = 0; j < h; ++j) acc += w[j] * hidden[j];
    logits[a] = acc;
  }
}

void TinySeqPolicy::action_log_probs(const mdp::TreeIndex& index,
                                     std::size_t prompt, int node, double beta,
                                     std::span<double> out) const {
  const auto& tree = index.tree(prompt);
  if (tree.row_width(node) == 1) {
    for (auto& v : out) v = -std::numeric_limits<double>::infinity();
    out[static_cast<std::size_t>(tree.eos())] = 0.0;
    return;
  }
  std::vector<int> window(static_cast<std::size_t>(cfg_.window));
  std::vector<double> hidden(static_cast<std::size_t>(cfg_.hidden));
  build_window(index, prompt, node, window);
  forward(window, hidden, out);
  log_softmax(std::span<const double>(out.data(), out.size()), beta, out);
}

void TinySeqPolicy::accumulate_param_grad(const mdp::TreeIndex& index,
                                          std::size_t prompt, int node,
                                          std::span<const double> dlogits,
                                          std::span<double> grad) const {
  const auto& tree = index.tree(prompt);
  if (tree.row_width(node) == 1) return;

  const int d = cfg_.embed_dim;
  const int k = cfg_.window;
  const int h = cfg_.hidden;
  std::vector<int> window(static_cast<std::size_t>(k));
  std::vector<double> hidden(static_cast<std::size_t>(h));
  std::vector<double> logits(static_cast<std::size_t>(vocab_));
  build_window(index, prompt, node, window);
  forward(window, hidden, logits);

  const double* W1 = params_.data() + off_w1_;
  const double* W2 = params_.data() + off_w2_;
  double* gW1 = grad.data() + off_w1_;
  double* gb1 = grad.data() + off_b1_;
  double* gW2 = grad.data() + off_w2_;
  double* gb2 = grad.data() + off_b2_;

  // output layer
  std::vector<double> dhidden(static_cast<std::size_t>(h), 0.0);
  for (int a = 0; a < vocab_; ++a) {
    const double da = dlogits[static_cast<std::size_t>(a)];
    if (da == 0.0) continue;
    gb2[a] += da;
    const double* w = W2 + static_cast<std::size_t>(a) * h;
    double* gw = gW2 + static_cast<std::size_t>(a) * h;
    for (int j = 0; j < h; ++j) {
      gw[j] += da * hidden[j];
      dhidden[j] += da * w[j];
    }
  }
  // hidden layer (tanh) and embeddings
  for (int j = 0; j < h; ++j) {
    const double dj = dhidden[static_cast<std::size_t>(j)] *
                      (1.0 - hidden[static_cast<std::size_t>(j)] *
                                 hidden[static_cast<std::size_t>(j)]);
    if (dj == 0.0) continue;
    gb1[j] += dj;
    const double* w_row = W1 + static_cast<std::size_t>(j) * (k * d);
    double* gw_row = gW1 + static_cast<std::size_t>(j) * (k * d);
    for (int t = 0; t < k; ++t) {
      const double* emb = params_.data() + static_cast<std::size_t>(window[t]) * d;
      double* gemb = grad.data() + static_cast<std::size_t>(window[t]) * d;
      const double* w = w_row + static_cast<std::size_t>(t) * d;
      double* gw = gw_row + static_cast<std::size_t>(t) * d;
      for (int e = 0; e < d; ++e) {
        gw[e] += dj * emb[e];
        gemb[e] += dj * w[e];
      }
    }
  }
}

// ============================================================================
// Evaluation
// ============================================================================

LogProb logprob(const Policy& pi, const mdp::TreeIndex& index, double beta,
                const mdp::Trajectory& traj) {
  const std::size_t p = index.prompt_index(traj.prompt);
  const auto path = mdp::path_of(index, p, traj.response);
  LogProb result;
  result.per_token.reserve(path.size());
  std::vector<double> buf(static_cast<std::size_t>(index.mdp().vocab_size));
  for (const auto& [node, action] : path) {
    pi.action_log_probs(index, p, node, beta, buf);
    const double lp = buf[static_cast<std::size_t>(action)];
    result.per_token.push_back(lp);
    result.total += lp;
  }
  return result;
}

mdp::Trajectory sample_trajectory(const Policy& pi, const mdp::TreeIndex& index,
                                  std::size_t prompt, double beta, Rng& rng) {
  const auto& tree = index.tree(prompt);
  const auto& m = index.mdp();
  std::vector<double> buf(static_cast<std::size_t>(m.vocab_size));
  std::vector<double> probs(static_cast<std::size_t>(m.vocab_size));
  mdp::Trajectory traj;
  traj.prompt = m.prompts[prompt];
  int node = 0;
  while (true) {
    pi.action_log_probs(index, prompt, node, beta, buf);
    for (std::size_t a = 0; a < probs.size(); ++a) {
      probs[a] = std::isfinite(buf[a]) ? std::exp(buf[a]) : 0.0;
    }
    const Token a = static_cast<Token>(rng.discrete(probs));
    traj.response.push_back(a);
    if (a == m.eos_id) return traj;
    node = tree.child(node, a);
    if (node < 0) throw std::logic_error("sampled into a terminal non-EOS state");
  }
}

softrl::StateActionTable materialize_log_probs(
    const Policy& pi, std::shared_ptr<const mdp::TreeIndex> index, double beta) {
  softrl::StateActionTable table(index);
  const int vocab = index->mdp().vocab_size;
  std::vector<double> buf(static_cast<std::size_t>(vocab));
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    const auto& tree = index->tree(p);
    for (int node = 0; node < tree.num_nodes(); ++node) {
      pi.action_log_probs(*index, p, node, beta, buf);
      auto row = table.row(p, node);
      int i = 0;
      for (Token a = 0; a < vocab; ++a) {
        if (tree.action_valid(node, a)) row[i++] = buf[static_cast<std::size_t>(a)];
      }
    }
  }
  return table;
}

// ============================================================================
// Optimizer
// ============================================================================

Optimizer::Optimizer(const TrainConfig& cfg, std::size_t n) : cfg_(cfg) {
  velocity_.assign(n, 0.0);
  if (cfg_.optimizer == TrainConfig::Optimizer::adam) second_.assign(n, 0.0);
}

void Optimizer::step(std::span<double> params, std::span<const double> grad) {
  ++t_;
  double lr = cfg_.step_size;
  if (cfg_.decay_every > 0 && cfg_.step_decay != 1.0) {
    lr *= std::pow(cfg_.step_decay,
                   static_cast<double>((t_ - 1) / cfg_.decay_every));
  }
  if (cfg_.optimizer == TrainConfig::Optimizer::momentum) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity_[i] = cfg_.momentum * velocity_[i] - lr * grad[i];
      params[i] += velocity_[i];
    }
    return;
  }
  const double b1 = cfg_.adam_beta1;
  const double b2 = cfg_.adam_beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = b1 * velocity_[i] + (1.0 - b1) * grad[i];
    second_[i] = b2 * second_[i] + (1.0 - b2) * grad[i] * grad[i];
    const double mhat = velocity_[i] / corr1;
    const double vhat = second_[i] / corr2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
  }
}

// ============================================================================
// SFT
// ============================================================================

double sft_loss(const Policy& pi, const mdp::TreeIndex& index,
                std::span<const mdp::Trajectory> corpus, double policy_beta,
                std::span<double> grad) {
  if (corpus.empty()) throw std::invalid_argument("sft: empty corpus");
  const int vocab = index.mdp().vocab_size;
  std::vector<double> buf(static_cast<std::size_t>(vocab));
  std::vector<double> dlogits(static_cast<std::size_t>(vocab));
  const double scale = 1.0 / static_cast<double>(corpus.size());

  double loss = 0.0;
  for (const auto& traj : corpus) {
    const std::size_t p = index.prompt_index(traj.prompt);
    const auto path = mdp::path_of(index, p, traj.response);
    for (const auto& [node, action] : path) {
      if (index.tree(p).row_width(node) == 1) continue;  // forced EOS
      pi.action_log_probs(index, p, node, policy_beta, buf);
      loss -= scale * buf[static_cast<std::size_t>(action)];
      if (!grad.empty()) {
        // d(-log pi(a|s))/dl_b = (pi(b|s) - delta_ab) / beta
        for (int b = 0; b < vocab; ++b) {
          const double prob = std::exp(buf[static_cast<std::size_t>(b)]);
          const double delta = (b == action) ? 1.0 : 0.0;
          dlogits[static_cast<std::size_t>(b)] =
              std::isfinite(buf[static_cast<std::size_t>(b)])
                  ? scale * (prob - delta) / policy_beta
                  : 0.0;
        }
        pi.accumulate_param_grad(index, p, node, dlogits, grad);
      }
    }
  }
  return loss;
}

SftResult sft_train(const Policy& init, const mdp::TreeIndex& index,
                    std::span<const mdp::Trajectory> corpus,
                    const TrainConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("sft: empty corpus");
  SftResult result;
  result.policy = init.clone();
  Policy& pi = *result.policy;
  Optimizer opt(cfg, pi.param_count());
  std::vector<double> grad(pi.param_count());
  Rng rng(cfg.seed);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs =
      cfg.batch_size > 0 ? static_cast<std::size_t>(cfg.batch_size) : corpus.size();

  std::vector<mdp::Trajectory> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.batch_size > 0) {
      // seeded Fisher-Yates permutation
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
      }
    }
    double epoch_loss = 0.0;
    std::size_t nbatches = 0;
    for (std::size_t start = 0; start < corpus.size(); start += bs) {
      batch.clear();
      for (std::size_t i = start; i < std::min(start + bs, corpus.size()); ++i) {
        batch.push_back(corpus[order[i]]);
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      const double loss = sft_loss(pi, index, batch, cfg.policy_beta, grad);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("sft: non-finite loss at epoch " +
                                 std::to_string(epoch) + " (step size too large?)");
      }
      opt.step(pi.params(), grad);
      epoch_loss += loss;
      ++nbatches;
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(nbatches));
  }
  return result;
}

// ============================================================================
// Finite differences
// ============================================================================

double grad_check(const Policy& pi,
                  const std::function<double(const Policy&)>& loss,
                  std::span<const double> analytic_grad, double eps,
                  std::size_t max_coords, std::uint64_t seed,
                  double resolvable_floor) {
  if (!(eps > 0.0) || eps > 1e-3) {
    throw std::invalid_argument("grad_check: eps must be in (0, 1e-3]");
  }
  const std::size_t n = pi.param_count();
  std::vector<std::size_t> coords;
  if (max_coords == 0 || max_coords >= n) {
    coords.resize(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  } else {
    std::vector<std::size_t> pool;
    pool.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (std::fabs(analytic_grad[i]) >= resolvable_floor) pool.push_back(i);
    }
    if (pool.size() <= max_coords) {
      coords = std::move(pool);
    } else {
      Rng rng(seed);
      for (std::size_t i = 0; i < max_coords; ++i) {
        std::swap(pool[i], pool[i + rng.uniform_int(pool.size() - i)]);
      }
      coords.assign(pool.begin(),
                    pool.begin() + static_cast<std::ptrdiff_t>(max_coords));
    }
  }

  auto probe = pi.clone();
  auto params = probe->params();
  double max_rel = 0.0;
  for (const std::size_t i : coords) {
    const double saved = params[i];
    params[i] = saved + eps;
    const double up = loss(*probe);
    params[i] = saved - eps;
    const double down = loss(*probe);
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = analytic_grad[i];
    const double denom =
        std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
  }
  return max_rel;
}

double grad_check_sft(const Policy& pi, const mdp::TreeIndex& index,
                      std::span<const mdp::Trajectory> corpus,
                      double policy_beta, double eps, std::size_t max_coords,
                      std::uint64_t seed, double resolvable_floor) {
  std::vector<double> grad(pi.param_count(), 0.0);
  sft_loss(pi, index, corpus, policy_beta, grad);
  return grad_check(
      pi,
      [&](const Policy& probe) {
        return sft_loss(probe, index, corpus, policy_beta);
      },
      grad, eps, max_coords, seed, resolvable_floor);
}

std::string policy_hash(const Policy& pi) {
  Fnv1a h;
  h.update(pi.kind_name());
  h.update_f64(pi.temperature());
  h.update_u64(pi.param_count());
  for (double v : pi.params()) h.update_f64(v);
  return h.hex();
}

}  // namespace tokenrl::policy
