#pragma once

#include "tame/autodiff/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace tame::io {

inline constexpr int kCheckpointFormatVersion = 1;

// On-disk layout:
//   8 bytes   magic "TAMECKPT"
//   8 bytes   little-endian uint64 header length H
//   H bytes   UTF-8 JSON header {format_version, kind, seed, meta, tensors:[{name, shape, offset}]}
//   payload   little-endian IEEE-754 doubles, tensors in header order, row-major
struct Checkpoint {
    std::string kind;
    std::uint64_t seed = 0;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, ad::Matrix>> tensors;

    void add(std::string name, ad::Matrix m) { tensors.emplace_back(std::move(name), std::move(m)); }
    const ad::Matrix& get(const std::string& name) const;
    bool has(const std::string& name) const;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace tame::io
