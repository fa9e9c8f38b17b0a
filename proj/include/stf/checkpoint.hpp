#pragma once

#include <filesystem>

#include "stf/model.hpp"

namespace stf {

// On-disk model bundle: version, config echo, normalization statistics, and
// every named parameter tensor with its shape. JSON, doubles round-trip
// exactly.
struct Checkpoint {
    int version = 1;
    ModelConfig config;
    int n_nodes = 0;
    NormStats stats;
    ModelParams params;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace stf
