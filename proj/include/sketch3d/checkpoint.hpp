#pragma once

#include "sketch3d/networks.hpp"
#include "sketch3d/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sketch3d {

// Raised for any malformed, truncated or tampered SKF1 file.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TensorBlock {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

// SKF1 layout, all integers little-endian:
//   "SKF1" | sha256(config json) | u64 len, config json | u64 len, metadata json |
//   u64 block count | blocks | sha256 of everything before it
// A block is u32 name length, name, u32 rank, u64 extents[rank], f64 values.
struct Checkpoint {
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<TensorBlock> blocks;

    const TensorBlock* find(const std::string& name) const;
    const TensorBlock& at(const std::string& name) const;

    // Adds every parameter of `store` under its own name.
    void add_parameters(const ParameterStore& store);
    // Copies matching blocks into `store`; every parameter must be present with
    // the right shape.
    void restore_parameters(ParameterStore& store) const;

    // Moments are stored as "<prefix>.m.<param>" and "<prefix>.v.<param>"; the step
    // count goes into metadata under `prefix`.
    void add_adam_state(const std::string& prefix, const ParameterStore& store, const AdamState& state);
    AdamState restore_adam_state(const std::string& prefix, const ParameterStore& store) const;
};

std::string config_digest(const nlohmann::json& config);

std::vector<std::uint8_t> serialize(const Checkpoint& checkpoint);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

// Writes to a sibling temporary and renames, so readers never see a partial file.
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sketch3d
