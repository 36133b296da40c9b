#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tokenrl {

using Token = std::int32_t;

// ============================================================================
// Stable scalar helpers
// ============================================================================

/// softplus(x) = log(1 + e^x), overflow-safe for large |x|.
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

/// Logistic function, computed without overflow for any x.
inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

/// log sigma(x) = -softplus(-x).
inline double log_sigmoid(double x) { return -softplus(-x); }

/// Max-subtracted log-sum-exp. Entries equal to -inf are skipped.
inline double log_sum_exp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

/// out[i] = logits[i]/beta - logsumexp(logits/beta). out may alias logits.
inline void log_softmax(std::span<const double> logits, double beta,
                        std::span<double> out) {
  const std::size_t n = logits.size();
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = logits[i] / beta;
    m = std::max(m, out[i]);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(out[i] - m);
  const double lse = m + std::log(s);
  for (std::size_t i = 0; i < n; ++i) out[i] -= lse;
}

// ============================================================================
// Deterministic random numbers
// ============================================================================

// mt19937_64 engine with hand-rolled transforms so streams are identical
// across standard libraries, not just across runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via polar Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform01() - 1.0;
      v = 2.0 * uniform01() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double k = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * k;
    has_spare_ = true;
    return u * k;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Index draw from unnormalized nonnegative weights.
  std::size_t discrete(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform01() * total;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return i;
    }
    return weights.empty() ? 0 : weights.size() - 1;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ============================================================================
// Hashing and encoding
// ============================================================================

/// Incremental FNV-1a (64-bit), used for content hashes of checkpoints and
/// task fingerprints.
class Fnv1a {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      hash_ ^= p[i];
      hash_ *= 1099511628211ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update_u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    update(b, 8);
  }
  void update_f64(double v) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, 8);
    update_u64(bits);
  }
  std::uint64_t value() const { return hash_; }
  std::string hex() const;

 private:
  std::uint64_t hash_ = 1469598103934665603ULL;
};

std::string base64_encode(std::span<const unsigned char> data);
std::vector<unsigned char> base64_decode(const std::string& text);

/// Doubles packed little-endian, for bit-exact checkpoint payloads.
std::string encode_f64_le(std::span<const double> values);
std::vector<double> decode_f64_le(const std::string& base64_text);

/// printf("%.17g") — shortest text that round-trips a double is not needed;
/// 17 significant digits always round-trip.
std::string format_f64(double v);

}  // namespace tokenrl
