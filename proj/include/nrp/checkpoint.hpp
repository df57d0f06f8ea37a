#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nrp/data.hpp"
#include "nrp/network.hpp"

namespace nrp::io {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "NRPC" | u32 version | u32 count | per tensor: u32 name length, name bytes,
/// u32 rank, u64 extents, u8 dtype (0=f32, 1=f64), raw values. All little-endian.
std::vector<std::uint8_t> encode_checkpoint(const std::vector<nets::NamedTensor>& tensors);
std::vector<nets::NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Writes the network state to `path` and its metadata (plus `extra`) to
/// `path` + ".meta" as key=value lines. Both writes are atomic.
void save_checkpoint(const nets::Network& net, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra = {});
std::vector<nets::NamedTensor> load_checkpoint(const std::filesystem::path& path);
/// Loads state into an existing network; fails naming the first mismatch.
void load_checkpoint_into(nets::Network& net, const std::filesystem::path& path);
/// Rebuilds the architecture from the sidecar metadata, then loads the state.
nets::Network load_network(const std::filesystem::path& path);

std::filesystem::path meta_path(const std::filesystem::path& checkpoint);
std::map<std::string, std::string> read_key_values(const std::filesystem::path& path);
std::string format_key_values(const std::map<std::string, std::string>& kv);

}  // namespace nrp::io
