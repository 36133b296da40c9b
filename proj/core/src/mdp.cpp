#include "tokenrl/mdp.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace tokenrl::mdp {

using nlohmann::json;

void validate_mdp(const TokenMdp& mdp) {
  if (mdp.vocab_size < 1) throw std::invalid_argument("vocab_size must be positive");
  if (mdp.eos_id < 0 || mdp.eos_id >= mdp.vocab_size) {
    throw std::invalid_argument("eos_id out of range");
  }
  if (mdp.max_response_len < 1) {
    throw std::invalid_argument("max_response_len must be positive");
  }
  if (mdp.prompts.empty()) throw std::invalid_argument("prompts must be nonempty");
  std::set<std::vector<Token>> seen;
  for (const auto& p : mdp.prompts) {
    for (Token t : p) {
      if (t < 0 || t >= mdp.vocab_size) {
        throw std::invalid_argument("prompt token out of range");
      }
    }
    if (!seen.insert(p).second) {
      throw std::invalid_argument("prompts must be pairwise distinct");
    }
  }
}

State initial_state(const TokenMdp& mdp, std::size_t prompt_index) {
  if (prompt_index >= mdp.prompts.size()) {
    throw std::invalid_argument("prompt index out of range");
  }
  return State{mdp.prompts[prompt_index], {}, false};
}

State step(const TokenMdp& mdp, const State& s, Token a) {
  if (s.terminal) throw std::invalid_argument("step: terminal state");
  if (a < 0 || a >= mdp.vocab_size) {
    throw std::invalid_argument("step: token out of range");
  }
  State next = s;
  next.generated.push_back(a);
  next.terminal = (a == mdp.eos_id) ||
                  (static_cast<int>(next.generated.size()) >= mdp.max_response_len);
  return next;
}

void validate_response(const TokenMdp& mdp, std::span<const Token> response) {
  if (response.empty()) throw std::invalid_argument("response: empty");
  if (static_cast<int>(response.size()) > mdp.max_response_len) {
    throw std::invalid_argument("response: longer than max_response_len");
  }
  for (std::size_t i = 0; i < response.size(); ++i) {
    const Token t = response[i];
    if (t < 0 || t >= mdp.vocab_size) {
      throw std::invalid_argument("response: token out of range");
    }
    const bool is_last = (i + 1 == response.size());
    if ((t == mdp.eos_id) != is_last) {
      throw std::invalid_argument(is_last ? "response: does not end in EOS"
                                          : "response: EOS before final position");
    }
  }
}

void validate_pair(const TokenMdp& mdp, const PreferencePair& p) {
  validate_response(mdp, p.chosen);
  validate_response(mdp, p.rejected);
  if (p.chosen == p.rejected) {
    throw std::invalid_argument("pair: degenerate (chosen equals rejected)");
  }
  bool known = false;
  for (const auto& prompt : mdp.prompts) {
    if (prompt == p.prompt) {
      known = true;
      break;
    }
  }
  if (!known) throw std::invalid_argument("pair: prompt mismatch (not a task prompt)");
}

PreferencePair make_preference_pair(const Trajectory& chosen,
                                    const Trajectory& rejected,
                                    LabelSource source) {
  if (chosen.prompt != rejected.prompt) {
    throw std::invalid_argument("prompt mismatch");
  }
  if (chosen.response == rejected.response) {
    throw std::invalid_argument("degenerate pair");
  }
  return PreferencePair{chosen.prompt, chosen.response, rejected.response, source};
}

namespace {

// (vocab-1)^(max_len-1) with saturation at cap+1.
std::size_t last_level_count(const TokenMdp& mdp, std::size_t cap) {
  const std::size_t base = static_cast<std::size_t>(mdp.vocab_size) - 1;
  std::size_t v = 1;
  for (int i = 0; i + 1 < mdp.max_response_len; ++i) {
    if (base != 0 && v > cap / std::max<std::size_t>(base, 1)) return cap + 1;
    v *= base;
    if (v > cap) return cap + 1;
  }
  return v;
}

}  // namespace

std::size_t count_responses(const TokenMdp& mdp, std::size_t cap) {
  validate_mdp(mdp);
  if (last_level_count(mdp, cap) > cap) {
    throw std::invalid_argument("enumeration cap exceeded");
  }
  const std::size_t base = static_cast<std::size_t>(mdp.vocab_size) - 1;
  std::size_t total = 0;
  std::size_t level = 1;
  for (int n = 0; n < mdp.max_response_len; ++n) {
    total += level;
    level *= base;
  }
  return total;
}

std::vector<Trajectory> enumerate_responses(const TokenMdp& mdp,
                                            std::span<const Token> prompt,
                                            std::size_t cap) {
  validate_mdp(mdp);
  if (last_level_count(mdp, cap) > cap) {
    throw std::invalid_argument("enumeration cap exceeded");
  }
  std::vector<Trajectory> out;
  std::vector<Token> prefix;
  const std::vector<Token> prompt_vec(prompt.begin(), prompt.end());

  // Ascending token order at every level yields lexicographic output.
  auto walk = [&](auto&& self, int depth) -> void {
    for (Token a = 0; a < mdp.vocab_size; ++a) {
      if (a == mdp.eos_id) {
        std::vector<Token> resp = prefix;
        resp.push_back(mdp.eos_id);
        out.push_back(Trajectory{prompt_vec, std::move(resp)});
      } else if (depth + 1 < mdp.max_response_len) {
        prefix.push_back(a);
        self(self, depth + 1);
        prefix.pop_back();
      }
    }
  };
  walk(walk, 0);
  return out;
}

// ============================================================================
// PrefixTree
// ============================================================================

PrefixTree PrefixTree::build(const TokenMdp& mdp, std::size_t prompt_index,
                             std::size_t cap) {
  validate_mdp(mdp);
  if (prompt_index >= mdp.prompts.size()) {
    throw std::invalid_argument("prompt index out of range");
  }
  if (last_level_count(mdp, cap) > cap) {
    throw std::invalid_argument("enumeration cap exceeded");
  }

  PrefixTree t;
  t.vocab_ = static_cast<std::size_t>(mdp.vocab_size);
  t.eos_ = mdp.eos_id;
  const int horizon = mdp.max_response_len;

  // Preorder DFS over non-EOS extensions.
  std::vector<Token> prefix;
  auto add_node = [&](int parent, Token action, int depth) {
    t.parent_.push_back(parent);
    t.action_from_parent_.push_back(action);
    t.depth_.push_back(depth);
    t.prefix_offset_.push_back(t.prefix_pool_.size());
    t.prefix_pool_.insert(t.prefix_pool_.end(), prefix.begin(), prefix.end());
    t.children_.insert(t.children_.end(), t.vocab_, -1);
    return static_cast<int>(t.depth_.size()) - 1;
  };

  auto walk = [&](auto&& self, int parent, Token action, int depth) -> int {
    const int node = add_node(parent, action, depth);
    if (depth + 1 < horizon) {
      for (Token a = 0; a < mdp.vocab_size; ++a) {
        if (a == mdp.eos_id) continue;
        prefix.push_back(a);
        const int c = self(self, node, a, depth + 1);
        prefix.pop_back();
        t.children_[static_cast<std::size_t>(node) * t.vocab_ + a] = c;
      }
    }
    return node;
  };
  walk(walk, -1, -1, 0);

  t.row_offset_.resize(t.depth_.size());
  t.row_width_.resize(t.depth_.size());
  std::size_t off = 0;
  for (std::size_t n = 0; n < t.depth_.size(); ++n) {
    t.row_offset_[n] = off;
    t.row_width_[n] = (t.depth_[n] + 1 < horizon) ? static_cast<int>(t.vocab_) : 1;
    off += static_cast<std::size_t>(t.row_width_[n]);
  }
  t.table_size_ = off;
  return t;
}

int PrefixTree::node_of_prefix(std::span<const Token> prefix) const {
  int node = 0;
  for (Token a : prefix) {
    if (a < 0 || a >= static_cast<Token>(vocab_) || a == eos_) return -1;
    node = child(node, a);
    if (node < 0) return -1;
  }
  return node;
}

std::size_t PrefixTree::entry_index(int node, Token a) const {
  if (!action_valid(node, a)) {
    throw std::invalid_argument("entry_index: invalid action at node");
  }
  if (row_width_[node] == 1) return row_offset_[node];
  return row_offset_[node] + static_cast<std::size_t>(a);
}

// ============================================================================
// TreeIndex
// ============================================================================

std::shared_ptr<const TreeIndex> TreeIndex::build(TokenMdp mdp, std::size_t cap) {
  validate_mdp(mdp);
  auto index = std::make_shared<TreeIndex>();
  index->mdp_ = std::move(mdp);
  const auto& m = index->mdp_;
  for (std::size_t p = 0; p < m.prompts.size(); ++p) {
    index->trees_.push_back(PrefixTree::build(m, p, cap));
    index->prompt_lookup_.emplace(m.prompts[p], p);
    index->total_entries_ += index->trees_.back().table_size();
    index->total_nodes_ +=
        static_cast<std::size_t>(index->trees_.back().num_nodes());
  }
  Fnv1a h;
  h.update_u64(static_cast<std::uint64_t>(m.vocab_size));
  h.update_u64(static_cast<std::uint64_t>(m.eos_id));
  h.update_u64(static_cast<std::uint64_t>(m.max_response_len));
  h.update_u64(m.prompts.size());
  for (const auto& p : m.prompts) {
    h.update_u64(p.size());
    for (Token t : p) h.update_u64(static_cast<std::uint64_t>(t));
  }
  index->fingerprint_ = h.hex();
  return index;
}

std::size_t TreeIndex::prompt_index(std::span<const Token> prompt) const {
  const std::vector<Token> key(prompt.begin(), prompt.end());
  const auto it = prompt_lookup_.find(key);
  if (it == prompt_lookup_.end()) {
    throw std::invalid_argument("unknown prompt");
  }
  return it->second;
}

std::vector<std::pair<int, Token>> path_of(const TreeIndex& index,
                                           std::size_t prompt_index,
                                           std::span<const Token> response) {
  validate_response(index.mdp(), response);
  const PrefixTree& tree = index.tree(prompt_index);
  std::vector<std::pair<int, Token>> path;
  path.reserve(response.size());
  int node = 0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    path.emplace_back(node, response[i]);
    if (i + 1 < response.size()) {
      node = tree.child(node, response[i]);
      if (node < 0) throw std::invalid_argument("response leaves the tree");
    }
  }
  return path;
}

// ============================================================================
// File formats
// ============================================================================

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  return j;
}

std::vector<Token> tokens_from_json(const json& j) {
  std::vector<Token> out;
  for (const auto& v : j) out.push_back(v.get<Token>());
  return out;
}

}  // namespace

TokenMdp load_task(const std::string& path) {
  const json j = read_json_file(path);
  TokenMdp mdp;
  mdp.vocab_size = j.at("vocab_size").get<int>();
  mdp.eos_id = j.at("eos_id").get<Token>();
  mdp.max_response_len = j.at("max_response_len").get<int>();
  for (const auto& p : j.at("prompts")) mdp.prompts.push_back(tokens_from_json(p));
  validate_mdp(mdp);
  return mdp;
}

void save_task(const TokenMdp& mdp, const std::string& path) {
  validate_mdp(mdp);
  json j;
  j["schema"] = "tokenrl.task.v1";
  j["vocab_size"] = mdp.vocab_size;
  j["eos_id"] = mdp.eos_id;
  j["max_response_len"] = mdp.max_response_len;
  j["prompts"] = mdp.prompts;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump() << "\n";
}

std::vector<PreferencePair> load_pairs(const TokenMdp& mdp,
                                       const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<PreferencePair> pairs;
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
    PreferencePair p;
    p.prompt = tokens_from_json(j.at("prompt"));
    p.chosen = tokens_from_json(j.at("chosen"));
    p.rejected = tokens_from_json(j.at("rejected"));
    if (j.contains("label_source") && j["label_source"] == "sampled") {
      p.label_source = LabelSource::sampled;
    }
    try {
      validate_pair(mdp, p);
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void save_pairs(std::span<const PreferencePair> pairs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& p : pairs) {
    json j;
    j["prompt"] = p.prompt;
    j["chosen"] = p.chosen;
    j["rejected"] = p.rejected;
    out << j.dump() << "\n";
  }
}

}  // namespace tokenrl::mdp
