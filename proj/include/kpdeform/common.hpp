#pragma once

// Shared vocabulary: linear-algebra aliases, error types, a portable RNG,
// content hashing and JSON helpers for point arrays.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace kpd {

using Vec3 = Eigen::Vector3d;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Face = std::array<int, 3>;
using json = nlohmann::json;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed external input (files, request payloads, CLI arguments).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

class ParseError : public InvalidInput {
 public:
  ParseError(const std::string& what, int line)
      : InvalidInput(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Counter-based generator: the n-th draw is a pure function of (seed, n),
/// so streams are bit-identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() { return mix(seed_ ^ mix(++counter_ * 0x9E3779B97F4A7C15ULL)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) without modulo bias.
  std::size_t index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::index: empty range");
    const std::uint64_t bound = n;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return static_cast<std::size_t>(r % bound);
  }

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Independent child stream identified by `stream`.
  Rng split(std::uint64_t stream) const { return Rng(mix(seed_ + 0xD1B54A32D192ED03ULL * (stream + 1))); }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// FNV-1a 64-bit over raw bytes.
class Hasher {
 public:
  Hasher& bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001B3ULL;
    }
    return *this;
  }
  Hasher& doubles(std::span<const double> values) {
    for (double v : values) {
      const std::uint64_t bits = to_le(v);
      bytes(&bits, sizeof bits);
    }
    return *this;
  }
  Hasher& ints(std::span<const int> values) {
    for (int v : values) {
      const std::int64_t w = v;
      bytes(&w, sizeof w);
    }
    return *this;
  }
  std::uint64_t value() const noexcept { return state_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

  static std::uint64_t to_le(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    return bits;  // x86-64 and aarch64 targets are little-endian
  }

 private:
  std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

inline std::string hash_points(const Points& p) {
  return Hasher().doubles({p.data(), static_cast<std::size_t>(p.size())}).hex();
}

inline std::string hash_faces(const std::vector<Face>& faces) {
  Hasher h;
  for (const auto& f : faces) h.ints(f);
  return h.hex();
}

/// Round to 9 significant digits; nlohmann then prints the short form.
inline double round9(double v) {
  if (!std::isfinite(v)) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

inline json points_to_json(const Points& p) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    arr.push_back({round9(p(i, 0)), round9(p(i, 1)), round9(p(i, 2))});
  return arr;
}

inline Points points_from_json(const json& arr) {
  if (!arr.is_array()) throw InvalidInput("expected an array of [x,y,z] triples");
  Points p(static_cast<Eigen::Index>(arr.size()), 3);
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& row = arr[i];
    if (!row.is_array() || row.size() != 3) throw InvalidInput("point " + std::to_string(i) + " is not an [x,y,z] triple");
    for (int c = 0; c < 3; ++c) {
      if (!row[c].is_number()) throw InvalidInput("point " + std::to_string(i) + " has a non-numeric coordinate");
      const double v = row[c].get<double>();
      if (!std::isfinite(v)) throw InvalidInput("point " + std::to_string(i) + " has a non-finite coordinate");
      p(static_cast<Eigen::Index>(i), c) = v;
    }
  }
  return p;
}

inline bool all_finite(const Points& p) { return p.allFinite(); }

}  // namespace kpd
