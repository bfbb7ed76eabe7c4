#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "pmtl/common.hpp"

namespace pmtl {

// mt19937_64 wrapper with hand-rolled distributions. std:: distributions are
// implementation-defined, so sampling goes through explicit formulas here to
// keep streams stable across compilers and serializable into checkpoints.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    Scalar uniform() { return static_cast<Scalar>(engine_() >> 11) * 0x1.0p-53; }

    Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    // Standard normal via Box-Muller with an explicit spare slot.
    Scalar normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        Scalar u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const Scalar u2 = uniform();
        const Scalar r = std::sqrt(-2.0 * std::log(u1));
        const Scalar theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    Scalar normal(Scalar mean, Scalar stddev) { return mean + stddev * normal(); }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent stream; used to give each module its own
    // initialization stream so config changes elsewhere do not shift it.
    Rng fork(std::uint64_t salt) {
        std::uint64_t h = next_u64() ^ (salt * 0x9e3779b97f4a7c15ull);
        h ^= h >> 32;
        h *= 0xbf58476d1ce4e5b9ull;
        h ^= h >> 29;
        return Rng(h);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
        os.precision(17);
        os << std::scientific << spare_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        int spare_flag = 0;
        is >> engine_ >> spare_flag >> spare_;
        if (!is) throw ValidationError("Rng::deserialize: malformed state string");
        has_spare_ = spare_flag != 0;
    }

   private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    Scalar spare_ = 0.0;
};

}  // namespace pmtl
