#pragma once

// Shared basics: error types, logging controlled by the STFUSE_LOG environment
// variable, printf-style string formatting, and a deterministic random number
// generator with named substreams.

#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace stfuse {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user-supplied configuration or arguments.
struct ConfigError : Error { using Error::Error; };
// Inputs outside the mathematical domain of an operation (e.g. points outside
// the mesh, degenerate polygons).
struct DomainError : Error { using Error::Error; };
struct GeometryError : Error { using Error::Error; };
// Linear algebra failures that persist after recovery attempts.
struct NumericalError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
// Too many failed cells in a simulation study.
struct StudyError : Error { using Error::Error; };

// One optimizer evaluation: parameter vector (transformed scale) and objective.
struct OptTracePoint {
    std::vector<double> theta;
    double value = 0.0;
};

// Optimization failure; carries the evaluation trace for post-mortems.
struct FitError : Error {
    explicit FitError(const std::string& msg, std::vector<OptTracePoint> tr = {})
        : Error(msg), trace(std::move(tr)) {}
    std::vector<OptTracePoint> trace;
};

inline std::string strf(const char* fmt, ...)
#if defined(__GNUC__)
    __attribute__((format(printf, 1, 2)))
#endif
    ;

inline std::string strf(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    va_list ap2;
    va_copy(ap2, ap);
    int n = std::vsnprintf(nullptr, 0, fmt, ap);
    va_end(ap);
    std::string out;
    if (n > 0) {
        out.resize(static_cast<std::size_t>(n));
        std::vsnprintf(out.data(), out.size() + 1, fmt, ap2);
    }
    va_end(ap2);
    return out;
}

namespace log {

enum class Level : int { error = 0, info = 1, debug = 2 };

inline Level threshold() {
    static const Level lvl = [] {
        const char* env = std::getenv("STFUSE_LOG");
        if (!env) return Level::info;
        const std::string s(env);
        if (s == "error") return Level::error;
        if (s == "debug") return Level::debug;
        return Level::info;
    }();
    return lvl;
}

inline bool enabled(Level lvl) {
    return static_cast<int>(lvl) <= static_cast<int>(threshold());
}

inline void write(Level lvl, const std::string& msg) {
    if (!enabled(lvl)) return;
    const char* tag = lvl == Level::error ? "error" : lvl == Level::info ? "info" : "debug";
    std::fprintf(stderr, "[stfuse] %s: %s\n", tag, msg.c_str());
}

inline void error(const std::string& msg) { write(Level::error, msg); }
inline void info(const std::string& msg) { write(Level::info, msg); }
inline void debug(const std::string& msg) { write(Level::debug, msg); }

}  // namespace log

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Stable mix of a seed with a purpose tag, used to derive substream seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t purpose) {
    std::uint64_t s = seed ^ (0x632be59bd9b4e019ULL * (purpose + 1));
    std::uint64_t r = splitmix64(s);
    return r ^ splitmix64(s);
}

}  // namespace detail

// Deterministic generator. All randomness in the library flows through this
// class so that a run is reproducible from a single seed. Distinct logical
// streams (field innovations, observation noise, missingness, ...) are split
// off with substream() so adding draws to one stream never shifts another.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t seed() const { return seed_; }

    Rng substream(std::uint64_t purpose) const {
        return Rng(detail::mix_seed(seed_, purpose));
    }

    std::uint64_t bits() { return gen_(); }

    // Uniform on (0, 1]; never zero, so log(uniform()) is always finite.
    double uniform() {
        return static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without state: one normal per pair of uniforms, the sine
    // partner is discarded. Slightly wasteful but keeps draws independent of
    // call history, which matters for reproducibility of interleaved streams.
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    // Unbiased integer in [0, n).
    std::size_t index(std::size_t n) {
        if (n == 0) throw ConfigError("Rng::index: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r;
        do {
            r = gen_();
        } while (r >= limit);
        return static_cast<std::size_t>(r % n);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace stfuse
