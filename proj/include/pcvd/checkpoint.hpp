#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pcvd/tensor.hpp"

namespace pcvd {

inline constexpr std::string_view kCheckpointMagic = "PCVD-CKPT-1";

/// Parameter path -> tensor. Ordered so archives are byte-stable.
using ParameterMap = std::map<std::string, Tensor>;

/// Layout: magic, u64 entry count, then per entry
/// u32 name length, name, u32 rank, rank x u64 extents, float64 payload.
std::vector<std::uint8_t> encode_checkpoint(const ParameterMap& params);
ParameterMap decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const ParameterMap& params);
ParameterMap read_checkpoint(const std::filesystem::path& path);

/// Order-sensitive FNV-1a over names, shapes and value bits.
std::uint64_t parameter_checksum(const ParameterMap& params);

}  // namespace pcvd
