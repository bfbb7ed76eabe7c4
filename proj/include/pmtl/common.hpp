#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmtl {

using Scalar = double;

// Bad caller input: shape mismatches, out-of-range ids, malformed configs.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem-level failures; message carries the path and, where known, the sample index.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// A file exists but its contents are unusable (truncation, checksum, bad magic).
// `offset` is the byte position at which parsing failed.
struct IntegrityError : std::runtime_error {
    IntegrityError(const std::string& what, std::uint64_t offset_bytes)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset_bytes) + ")"),
          offset(offset_bytes) {}
    std::uint64_t offset;
};

// Raised when the training loop hits a non-finite loss; message carries the
// diagnostic snapshot (step, component losses, max |grad|).
struct TrainingAborted : std::runtime_error {
    explicit TrainingAborted(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

// Worker-thread cap from PROTO_MTL_THREADS; defaults to 1 so every numeric
// path is single-threaded and bit-reproducible.
int max_threads();

}  // namespace pmtl
