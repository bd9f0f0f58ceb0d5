// Deterministic, splittable random number generation.
//
// All randomness in the simulator flows from a single 64-bit seed through
// counter-based stream derivation: stream(seed, run, vehicle, purpose) is a
// pure function, so per-vehicle and per-run streams are identical no matter
// how episodes are scheduled across workers. Normal variates use a
// hand-rolled Box-Muller transform because <random>'s normal_distribution is
// not reproducible across standard library vendors.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>

namespace dtn {

/// SplitMix64 core: tiny state, passes BigCrush, and (unlike engines with
/// large state) cheap to fork per (run, vehicle, purpose) triple.
class Rng {
 public:
  explicit Rng(uint64_t seed = 1) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; caches the second variate.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite.
    double u1 = 1.0 - next_double();
    double u2 = next_double();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  Eigen::Vector2d normal2() {
    Eigen::Vector2d z;
    z << next_normal(), next_normal();
    return z;
  }

  Eigen::Vector4d normal4() {
    Eigen::Vector4d z;
    z << next_normal(), next_normal(), next_normal(), next_normal();
    return z;
  }

  /// Derives an independent stream keyed by up to three counters. Pure in
  /// (seed, a, b, c); forking never perturbs the parent stream.
  static Rng stream(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = mix(seed ^ 0xA0761D6478BD642Full);
    s = mix(s ^ mix(a + 0x8BB84B93962EACC9ull));
    s = mix(s ^ mix(b + 0x2D358DCCAA6C78A5ull));
    s = mix(s ^ mix(c + 0x4B33A62ED433D4A3ull));
    return Rng(s);
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 33)) * 0xFF51AFD7ED558CCDull;
    z = (z ^ (z >> 33)) * 0xC4CEB9FE1A85EC53ull;
    return z ^ (z >> 33);
  }

  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Named purposes for derived streams (third counter of Rng::stream).
enum class RngPurpose : uint64_t {
  process_noise = 1,
  measurement_noise = 2,
  spawn = 3,
  scenario = 4,
  test = 5,
};

inline Rng make_stream(uint64_t seed, uint64_t run, uint64_t vehicle,
                       RngPurpose purpose) {
  return Rng::stream(seed, run, vehicle, static_cast<uint64_t>(purpose));
}

}  // namespace dtn
