#include "tokenrl/harness/heatmap.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace tokenrl::harness {

namespace {

struct Rgb {
  int r, g, b;
};

constexpr Rgb kNeutral{247, 247, 247};
constexpr Rgb kPositive{33, 102, 172};  // blue
constexpr Rgb kNegative{178, 24, 43};   // red

Rgb blend(const Rgb& from, const Rgb& to, double t) {
  auto mix = [t](int a, int b) {
    return static_cast<int>(std::lround(a + t * (b - a)));
  };
  return Rgb{mix(from.r, to.r), mix(from.g, to.g), mix(from.b, to.b)};
}

// value in [-scale, scale] -> diverging color centered at zero
Rgb color_of(double value, double scale) {
  if (scale <= 0.0) return kNeutral;
  const double t = std::min(1.0, std::fabs(value) / scale);
  return blend(kNeutral, value >= 0.0 ? kPositive : kNegative, t);
}

std::string scale_text(double beta, const std::string& ref_hash, double scale) {
  std::ostringstream os;
  os << "beta=" << format_f64(beta) << " ref=" << (ref_hash.empty() ? "-" : ref_hash)
     << " scale=+-" << format_f64(scale);
  return os.str();
}

}  // namespace

std::string render_heatmap(std::span<const Token> tokens,
                           std::span<const double> per_token_rewards,
                           HeatmapFormat format, const HeatmapMeta& meta) {
  if (tokens.size() != per_token_rewards.size()) {
    throw std::invalid_argument("heatmap: token/reward length mismatch");
  }
  double scale = 0.0;
  for (double v : per_token_rewards) scale = std::max(scale, std::fabs(v));

  std::ostringstream out;
  if (format == HeatmapFormat::ansi) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const Rgb c = color_of(per_token_rewards[i], scale);
      char buf[64];
      std::snprintf(buf, sizeof(buf), "\x1b[48;2;%d;%d;%dm\x1b[38;2;0;0;0m", c.r,
                    c.g, c.b);
      out << buf << " " << tokens[i] << " " << "\x1b[0m";
    }
    out << "\n" << scale_text(meta.beta, meta.ref_hash, scale) << "\n";
    return out.str();
  }

  out << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
      << "<style>\n"
      << "body { font-family: monospace; background: #ffffff; }\n"
      << ".seq span { padding: 2px 6px; margin: 1px; display: inline-block; "
         "border-radius: 3px; color: #000000; }\n"
      << ".legend { margin-top: 12px; color: #333333; }\n"
      << "</style>\n</head>\n<body>\n<div class=\"seq\">\n";
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Rgb c = color_of(per_token_rewards[i], scale);
    char buf[96];
    std::snprintf(buf, sizeof(buf),
                  "<span style=\"background-color:rgb(%d,%d,%d)\" title=\"%s\">",
                  c.r, c.g, c.b, format_f64(per_token_rewards[i]).c_str());
    out << buf << tokens[i] << "</span>\n";
  }
  out << "</div>\n<div class=\"legend\">"
      << scale_text(meta.beta, meta.ref_hash, scale) << "</div>\n</body>\n</html>\n";
  return out.str();
}

}  // namespace tokenrl::harness
