#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace flafe {

// ---- error taxonomy ----
// Everything thrown by the library derives from Error so callers can catch
// one base type at the CLI boundary and map it to an exit code.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SyntaxError : Error {
    std::size_t position;
    SyntaxError(std::size_t pos, const std::string& what)
        : Error("syntax error at position " + std::to_string(pos) + ": " + what),
          position(pos) {}
};

struct LimitError : Error { using Error::Error; };
struct UnknownColumn : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct SchemaError : Error { using Error::Error; };
struct PartitionError : Error { using Error::Error; };
struct InsufficientData : Error { using Error::Error; };
struct NonFinite : Error { using Error::Error; };
struct DegenerateTarget : Error { using Error::Error; };
struct ParamError : Error { using Error::Error; };
struct RangeError : Error { using Error::Error; };
struct DepthExceeded : Error { using Error::Error; };
struct ScaleMismatch : Error { using Error::Error; };
struct KeyMismatch : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct ProtocolError : Error { using Error::Error; };

// ---- deterministic RNG ----
//
// One master seed fans out to independent streams. Derivation is
// splitmix64 over (seed XOR fnv1a(tag) XOR index), so the stream for
// ("client", 3) is stable across runs, platforms, and call order. All
// sampling helpers below are written out explicitly instead of using
// std::uniform_*_distribution, whose output is implementation-defined;
// this keeps full runs byte-reproducible.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t s = seed ^ fnv1a(tag) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    std::uint64_t a = splitmix64(s);
    std::uint64_t b = splitmix64(s);
    return a ^ (b << 1);
}

class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // unbiased integer in [0, n) by rejection
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ParamError("RngStream::below: n must be positive");
        std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
        std::uint64_t x;
        do { x = gen_(); } while (x >= limit);
        return x % n;
    }

    // uniform in [0, 1) with 53-bit resolution
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Box-Muller; one value per call keeps streams simple to reason about
        double u1, u2;
        do { u1 = uniform(); } while (u1 <= 0.0);
        u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Marsaglia-Tsang; alpha >= 1 is all the Dirichlet path needs, the
    // boost for alpha < 1 is included for completeness.
    double gamma(double alpha) {
        if (alpha < 1.0) {
            double u;
            do { u = uniform(); } while (u <= 0.0);
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        double d = alpha - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u;
            do { u = uniform(); } while (u <= 0.0);
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        // Fisher-Yates with our own bounded draws (std::shuffle is
        // implementation-defined across standard libraries)
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = std::size_t(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

// ---- number formatting ----
// Shortest round-trip representation; used by the expression printer and
// report writer so equal doubles always print to equal bytes.

inline std::string format_double(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline bool nearly_equal(double a, double b, double tol) {
    return std::fabs(a - b) <= tol;
}

}  // namespace flafe
