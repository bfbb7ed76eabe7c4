#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pmtl/tensor.hpp"

namespace pmtl {

// Versioned binary container with a CRC-protected body. Save -> load -> save
// round trips are bit-identical.
struct CheckpointData {
    std::uint32_t version = 1;
    std::string config_text;
    std::int64_t epoch = 0;
    std::int64_t adam_step = 0;
    std::string rng_state;
    std::vector<std::pair<std::string, Tensor>> tensors;  // params + buffers, model order
    std::vector<std::pair<std::string, std::vector<Scalar>>> adam_state;
};

void save_checkpoint(const CheckpointData& data, const std::string& path);

// Throws IntegrityError (with the failing byte offset) on truncation, bad
// magic, checksum mismatch, or unknown version; never returns partial state.
CheckpointData load_checkpoint(const std::string& path);

}  // namespace pmtl
