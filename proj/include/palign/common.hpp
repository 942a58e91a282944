#pragma once

// Shared vocabulary for the palign toolkit: error types, stable hashing,
// seeded randomness and warning sinks.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

namespace palign {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// ---------------------------------------------------------------------------
// Errors. Every failure mode named by the toolkit's contracts has its own
// type so callers (and tests) can distinguish them.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define PALIGN_DEFINE_ERROR(Name)             \
  class Name : public Error {                 \
   public:                                    \
    using Error::Error;                       \
  };

PALIGN_DEFINE_ERROR(ValidationError)
PALIGN_DEFINE_ERROR(IntegrityError)
PALIGN_DEFINE_ERROR(SplitError)
PALIGN_DEFINE_ERROR(ConstructionError)
PALIGN_DEFINE_ERROR(LookupError)
PALIGN_DEFINE_ERROR(NumericError)
PALIGN_DEFINE_ERROR(ConfigError)
PALIGN_DEFINE_ERROR(DataError)
PALIGN_DEFINE_ERROR(AdaptationRequiredError)
PALIGN_DEFINE_ERROR(VocabError)
PALIGN_DEFINE_ERROR(LengthError)
PALIGN_DEFINE_ERROR(RetrievalError)
PALIGN_DEFINE_ERROR(CoverageError)
PALIGN_DEFINE_ERROR(InputError)
PALIGN_DEFINE_ERROR(InitError)
PALIGN_DEFINE_ERROR(RenderError)
PALIGN_DEFINE_ERROR(MigrationError)
PALIGN_DEFINE_ERROR(StageError)
PALIGN_DEFINE_ERROR(FormatError)

#undef PALIGN_DEFINE_ERROR

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// ---------------------------------------------------------------------------
// Warnings are routed through a sink so that library code never writes to
// stderr behind the caller's back unless asked to.
// ---------------------------------------------------------------------------

using WarningSink = std::function<void(const std::string&)>;

inline void stderr_warning(const std::string& msg) {
  std::fprintf(stderr, "warning: %s\n", msg.c_str());
}

inline void warn(const WarningSink& sink, const std::string& msg) {
  if (sink) sink(msg);
}

// ---------------------------------------------------------------------------
// Stable hashing (FNV-1a, 64 bit). Used for pair ids, checksums and cache
// keys; must not change between releases.
// ---------------------------------------------------------------------------

class Fnv1a {
 public:
  Fnv1a& update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= kPrime;
    }
    return *this;
  }
  // Length-prefixed field so that ("ab","c") and ("a","bc") differ.
  Fnv1a& field(std::string_view bytes) {
    update_u64(bytes.size());
    return update(bytes);
  }
  Fnv1a& update_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      state_ ^= static_cast<unsigned char>(v >> (8 * i));
      state_ *= kPrime;
    }
    return *this;
  }
  Fnv1a& update_double(double d) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(d));
    std::memcpy(&bits, &d, sizeof(d));
    return update_u64(bits);
  }
  std::uint64_t digest() const noexcept { return state_; }
  std::string hex() const { return to_hex(state_); }

  static std::string to_hex(std::uint64_t v) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
      v >>= 4;
    }
    return out;
  }

 private:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;
  std::uint64_t state_ = kOffset;
};

inline std::string hash_hex(std::string_view bytes) {
  return Fnv1a{}.update(bytes).hex();
}

// ---------------------------------------------------------------------------
// Seeded randomness. std::mt19937_64's output sequence is fixed by the
// standard, but the std distributions are not, so bounded draws and shuffles
// are done here to stay bit-identical across standard libraries.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}
  Rng(std::uint64_t seed, std::string_view stream)
      : engine_(splitmix64(seed ^ Fnv1a{}.update(stream).digest())) {}

  std::uint64_t next() { return engine_(); }

  // Uniform integer in [0, n) by rejection sampling.
  std::size_t index(std::size_t n) {
    if (n == 0) throw InputError("Rng::index on empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return static_cast<std::size_t>(v % bound);
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (one value per call; the pair's second
  // member is discarded to keep the stream position simple).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace palign
