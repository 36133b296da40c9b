#include "tokenrl/harness/task_gen.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace tokenrl::harness {

using nlohmann::json;

softrl::RewardTable random_reward_table(std::shared_ptr<const mdp::TreeIndex> index,
                                        Rng& rng, double lo, double hi) {
  softrl::RewardTable table(index);
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    for (auto& v : table.flat(p)) v = rng.uniform(lo, hi);
  }
  return table;
}

softrl::Potential random_potential(std::shared_ptr<const mdp::TreeIndex> index,
                                   Rng& rng, double stddev) {
  softrl::Potential phi(index);
  for (std::size_t p = 0; p < index->num_prompts(); ++p) {
    for (auto& v : phi.interior.values(p)) v = rng.normal(0.0, stddev);
  }
  return phi;
}

RandomInstance random_instance(std::uint64_t seed, const InstanceOptions& opts) {
  Rng rng(seed);
  mdp::TokenMdp task;
  task.vocab_size =
      opts.min_vocab +
      static_cast<int>(rng.uniform_int(
          static_cast<std::uint64_t>(opts.max_vocab - opts.min_vocab + 1)));
  task.eos_id = static_cast<Token>(rng.uniform_int(
      static_cast<std::uint64_t>(task.vocab_size)));
  task.max_response_len =
      opts.min_len + static_cast<int>(rng.uniform_int(
                         static_cast<std::uint64_t>(opts.max_len - opts.min_len + 1)));
  const int num_prompts =
      1 + static_cast<int>(rng.uniform_int(
              static_cast<std::uint64_t>(opts.max_prompts)));
  std::set<std::vector<Token>> seen;
  while (static_cast<int>(task.prompts.size()) < num_prompts) {
    const std::size_t len = 1 + rng.uniform_int(3);
    std::vector<Token> prompt;
    for (std::size_t i = 0; i < len; ++i) {
      prompt.push_back(static_cast<Token>(
          rng.uniform_int(static_cast<std::uint64_t>(task.vocab_size))));
    }
    if (seen.insert(prompt).second) task.prompts.push_back(std::move(prompt));
  }

  RandomInstance inst;
  inst.index = mdp::TreeIndex::build(task);
  inst.reward = random_reward_table(inst.index, rng, opts.reward_lo, opts.reward_hi);
  inst.ref = std::make_shared<policy::TabularPolicy>(inst.index);
  if (opts.ref_logit_stddev > 0.0) {
    inst.ref->randomize(rng, opts.ref_logit_stddev);
  }
  inst.beta = rng.uniform(opts.beta_lo, opts.beta_hi);
  return inst;
}

// ============================================================================
// gen-task kinds
// ============================================================================

GeneratedTask make_bandit_task(const BanditTaskParams& params, std::uint64_t seed) {
  if (params.num_responses < 2) {
    throw std::invalid_argument("bandit task needs at least 2 responses");
  }
  Rng rng(seed);
  GeneratedTask out;
  // vocab of num_responses tokens: EOS plus (num_responses - 1) alternatives;
  // horizon 2 gives exactly num_responses responses (a depth-1 tree)
  out.task.vocab_size = params.num_responses;
  out.task.eos_id = 0;
  out.task.max_response_len = 2;
  out.task.prompts = {{0}};
  out.index = mdp::TreeIndex::build(out.task);
  out.reward = softrl::RewardTable(out.index);
  const auto& m = out.task;
  const auto responses = mdp::enumerate_responses(m, m.prompts[0]);
  for (const auto& resp : responses) {
    const auto prefix =
        std::span<const Token>(resp.response).first(resp.response.size() - 1);
    const int node = out.index->tree(0).node_of_prefix(prefix);
    out.reward.at(0, node, m.eos_id) = rng.uniform(params.reward_lo, params.reward_hi);
  }
  return out;
}

GeneratedTask make_random_task(const RandomTaskParams& params, std::uint64_t seed) {
  Rng rng(seed);
  GeneratedTask out;
  out.task.vocab_size = params.vocab_size;
  out.task.eos_id = 0;
  out.task.max_response_len = params.max_response_len;
  for (int p = 0; p < params.num_prompts; ++p) {
    out.task.prompts.push_back({static_cast<Token>(p % params.vocab_size),
                                static_cast<Token>((p / params.vocab_size) %
                                                   params.vocab_size)});
  }
  out.index = mdp::TreeIndex::build(out.task);
  out.reward =
      random_reward_table(out.index, rng, params.reward_lo, params.reward_hi);
  return out;
}

namespace {

mdp::Trajectory sample_clean_response(const mdp::TreeIndex& index,
                                      const policy::Policy& ref, Token bad,
                                      Rng& rng) {
  // uniform-reference draw without the bad token and with a corruptible
  // (non-final) position
  constexpr int kMaxTries = 100000;
  for (int i = 0; i < kMaxTries; ++i) {
    auto traj = policy::sample_trajectory(ref, index, 0, 1.0, rng);
    if (traj.response.size() < 2) continue;
    if (std::find(traj.response.begin(), traj.response.end(), bad) !=
        traj.response.end()) {
      continue;
    }
    return traj;
  }
  throw std::runtime_error("corruption task: cannot sample clean responses");
}

}  // namespace

GeneratedTask make_corruption_task(const CorruptionTaskParams& params,
                                   std::uint64_t seed) {
  if (params.bad_token == 0) {
    throw std::invalid_argument("bad token must not be the EOS token");
  }
  if (params.bad_token >= params.vocab_size) {
    throw std::invalid_argument("bad token out of range");
  }
  Rng rng(seed);
  GeneratedTask out;
  out.task.vocab_size = params.vocab_size;
  out.task.eos_id = 0;
  out.task.max_response_len = params.max_response_len;
  out.task.prompts = {{2, 3}};
  out.index = mdp::TreeIndex::build(out.task);

  // ground truth penalizes the bad token on every transition
  out.reward = softrl::RewardTable(out.index);
  for (std::size_t p = 0; p < out.index->num_prompts(); ++p) {
    const auto& tree = out.index->tree(p);
    for (int node = 0; node < tree.num_nodes(); ++node) {
      if (tree.action_valid(node, params.bad_token)) {
        out.reward.at(p, node, params.bad_token) = -params.penalty;
      }
    }
  }

  const policy::TabularPolicy uniform_ref(out.index);
  auto gen_split = [&](int count, std::vector<mdp::PreferencePair>& pairs,
                       std::vector<CorruptionRecord>& meta) {
    for (int i = 0; i < count; ++i) {
      const auto chosen = sample_clean_response(*out.index, uniform_ref,
                                                params.bad_token, rng);
      const std::size_t pos = rng.uniform_int(chosen.response.size() - 1);
      mdp::PreferencePair pair;
      pair.prompt = chosen.prompt;
      pair.chosen = chosen.response;
      pair.rejected = chosen.response;
      pair.rejected[pos] = params.bad_token;
      pair.label_source = mdp::LabelSource::fixed;
      mdp::validate_pair(out.task, pair);
      pairs.push_back(std::move(pair));
      meta.push_back(CorruptionRecord{static_cast<std::size_t>(i), pos});
    }
  };
  gen_split(params.num_train, out.train_pairs, out.train_meta);
  gen_split(params.num_heldout, out.heldout_pairs, out.heldout_meta);
  return out;
}

void write_task_files(const GeneratedTask& task, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  mdp::save_task(task.task, (dir / "task.json").string());
  // nonzero entries suffice; loaders fill reachable pairs with zero
  softrl::save_reward_table(task.reward, (dir / "rewards.jsonl").string(),
                            /*sparse=*/true);
  auto write_meta = [](const std::vector<CorruptionRecord>& meta,
                       const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& rec : meta) {
      json j;
      j["pair_index"] = rec.pair_index;
      j["position"] = rec.position;
      out << j.dump() << "\n";
    }
  };
  if (!task.train_pairs.empty()) {
    mdp::save_pairs(task.train_pairs, (dir / "train_pairs.jsonl").string());
    if (!task.train_meta.empty()) {
      write_meta(task.train_meta, (dir / "train_corruption.jsonl").string());
    }
  }
  if (!task.heldout_pairs.empty()) {
    mdp::save_pairs(task.heldout_pairs, (dir / "heldout_pairs.jsonl").string());
    if (!task.heldout_meta.empty()) {
      write_meta(task.heldout_meta, (dir / "heldout_corruption.jsonl").string());
    }
  }
}

std::vector<CorruptionRecord> load_corruption_meta(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<CorruptionRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    out.push_back(CorruptionRecord{j.at("pair_index").get<std::size_t>(),
                                   j.at("position").get<std::size_t>()});
  }
  return out;
}

}  // namespace tokenrl::harness
