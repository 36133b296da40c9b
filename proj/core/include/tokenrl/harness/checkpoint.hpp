#pragma once

#include <memory>
#include <string>

#include "tokenrl/mdp.hpp"
#include "tokenrl/policy.hpp"

namespace tokenrl::harness {

/**
 * Policy checkpoints: a JSON container with kind, hyperparameters, beta, the
 * flat parameter vector packed as base64 little-endian doubles, and an
 * FNV-1a content hash. Save then load is bitwise exact. Tabular checkpoints
 * record the task fingerprint and can only be loaded against the same task.
 */
void save_policy(const policy::Policy& pi, const std::string& path);

/// Loads a checkpoint; `index` is required for tabular policies (whose
/// parameters are laid out over the task's trees) and ignored otherwise.
/// Throws "unsupported version" on schema mismatch and "hash mismatch" on a
/// tampered payload.
std::unique_ptr<policy::Policy> load_policy(
    const std::string& path, std::shared_ptr<const mdp::TreeIndex> index);

}  // namespace tokenrl::harness
