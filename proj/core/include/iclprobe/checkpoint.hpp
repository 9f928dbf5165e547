#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "iclprobe/model.hpp"

namespace iclprobe {

// Checkpoint layout, all integers little-endian:
//   "ICLPROBE"                       8 bytes magic
//   u32 version (=1)
//   i32 n_layers, n_heads, d_model, d_ff, vocab_size, max_seq, precision (0 single, 1 double)
//   u32 tensor count
//   per tensor, in ParameterLayout order:
//     u32 name length, name bytes, u32 rows, u32 cols,
//     rows*cols IEEE-754 values (binary32 or binary64 per precision), row-major
inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'L', 'P', 'R', 'O', 'B', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Model<T>& model);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model);

ModelConfig read_checkpoint_config(const std::filesystem::path& path);

// Loads a checkpoint stored in either precision and converts to T.
template <typename T>
Model<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

// 64-bit FNV-1a digest, used to stamp run manifests with the checkpoint identity.
std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes);
std::string hex64(std::uint64_t value);

}  // namespace iclprobe
