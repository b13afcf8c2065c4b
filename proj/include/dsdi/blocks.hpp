// SPDX-License-Identifier: Apache-2.0
//
// Flat binary file of named f32 tensors (little-endian):
//   "DSCK", u32 version (1), u32 block count, then per block
//   u32 name length, name bytes, u32 rank, u32 dims[rank], f32 values.
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dsdi/tensor.hpp"

namespace dsdi {

using NamedTensor = std::pair<std::string, Tensor<float>>;

void write_blocks(const std::filesystem::path& path, const std::vector<NamedTensor>& blocks);
/// Throws ParseError with the byte offset of the first malformed field.
std::vector<NamedTensor> read_blocks(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

}  // namespace dsdi
