#pragma once

#include <span>
#include <string>
#include <vector>

#include "tokenrl/common.hpp"

namespace tokenrl::harness {

enum class HeatmapFormat { ansi, html };

struct HeatmapMeta {
  double beta = 1.0;
  std::string ref_hash;  // reference checkpoint content hash, for the legend
};

/**
 * Renders response tokens on a diverging color scale centered at zero, range
 * set by the max absolute value in the trajectory (all-neutral when every
 * value is zero). Positive values shade towards blue, negative towards red.
 * HTML output is a self-contained page; ANSI uses 24-bit background colors.
 * A legend states beta, the reference hash and the scale.
 */
std::string render_heatmap(std::span<const Token> tokens,
                           std::span<const double> per_token_rewards,
                           HeatmapFormat format, const HeatmapMeta& meta);

}  // namespace tokenrl::harness
