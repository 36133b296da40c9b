#include "tokenrl/harness/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace tokenrl::harness {

using nlohmann::json;

namespace {
constexpr const char* kSchema = "tokenrl.checkpoint.v1";
}

void save_policy(const policy::Policy& pi, const std::string& path) {
  json j;
  j["schema"] = kSchema;
  j["kind"] = pi.kind_name();
  j["beta"] = pi.temperature();
  j["param_count"] = pi.param_count();
  j["param_encoding"] = "base64-le-f64";
  j["params"] = encode_f64_le(pi.params());
  json hp;
  if (pi.kind() == policy::Policy::Kind::tabular) {
    const auto& tab = dynamic_cast<const policy::TabularPolicy&>(pi);
    hp["task_fingerprint"] = tab.index_ptr()->fingerprint();
  } else if (pi.kind() == policy::Policy::Kind::tiny_seq) {
    const auto& seq = dynamic_cast<const policy::TinySeqPolicy&>(pi);
    hp["vocab_size"] = seq.vocab_size();
    hp["embed_dim"] = seq.config().embed_dim;
    hp["window"] = seq.config().window;
    hp["hidden"] = seq.config().hidden;
  } else {
    throw std::invalid_argument("checkpoint: policy kind is not persistable");
  }
  j["hyperparams"] = std::move(hp);
  j["hash"] = policy::policy_hash(pi);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump() << "\n";
}

std::unique_ptr<policy::Policy> load_policy(
    const std::string& path, std::shared_ptr<const mdp::TreeIndex> index) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  if (!j.contains("schema") || j["schema"] != kSchema) {
    throw std::runtime_error("checkpoint: unsupported version");
  }
  const std::string kind = j.at("kind").get<std::string>();
  const double beta = j.at("beta").get<double>();
  auto params = decode_f64_le(j.at("params").get<std::string>());
  if (params.size() != j.at("param_count").get<std::size_t>()) {
    throw std::runtime_error("checkpoint: parameter count mismatch");
  }

  std::unique_ptr<policy::Policy> pi;
  const json& hp = j.at("hyperparams");
  if (kind == "tabular") {
    if (!index) throw std::invalid_argument("tabular checkpoint needs a task index");
    if (hp.at("task_fingerprint").get<std::string>() != index->fingerprint()) {
      throw std::runtime_error("checkpoint: task fingerprint mismatch");
    }
    auto tab = std::make_unique<policy::TabularPolicy>(index);
    if (tab->param_count() != params.size()) {
      throw std::runtime_error("checkpoint: parameter count mismatch");
    }
    std::copy(params.begin(), params.end(), tab->params().begin());
    pi = std::move(tab);
  } else if (kind == "tiny-seq") {
    policy::TinySeqConfig cfg;
    cfg.embed_dim = hp.at("embed_dim").get<int>();
    cfg.window = hp.at("window").get<int>();
    cfg.hidden = hp.at("hidden").get<int>();
    pi = std::make_unique<policy::TinySeqPolicy>(hp.at("vocab_size").get<int>(),
                                                 cfg, std::move(params));
  } else {
    throw std::runtime_error("checkpoint: unknown policy kind '" + kind + "'");
  }
  pi->set_temperature(beta);
  if (policy::policy_hash(*pi) != j.at("hash").get<std::string>()) {
    throw std::runtime_error("checkpoint: hash mismatch");
  }
  return pi;
}

}  // namespace tokenrl::harness
