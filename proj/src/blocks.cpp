// SPDX-License-Identifier: Apache-2.0
#include "dsdi/blocks.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dsdi/errors.hpp"

namespace dsdi {

static_assert(std::endian::native == std::endian::little, "block I/O assumes little-endian");

namespace {

constexpr char kMagic[4] = {'D', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

}  // namespace

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_blocks(const std::filesystem::path& path, const std::vector<NamedTensor>& blocks) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& [name, t] : blocks) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * static_cast<Index>(sizeof(float))));
  }
  if (!out) throw InputError("failed writing " + path.string());
}

std::vector<NamedTensor> read_blocks(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  const std::string file = path.filename().string();
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size())
      throw ParseError(file + ": truncated", static_cast<std::int64_t>(bytes.size()));
  };
  auto u32 = [&] {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  };
  need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError(file + ": bad magic", 0);
  pos = 4;
  if (u32() != kVersion) throw ParseError(file + ": unsupported version", 4);
  const std::uint32_t count = u32();
  std::vector<NamedTensor> blocks;
  for (std::uint32_t b = 0; b < count; ++b) {
    const std::uint32_t len = u32();
    need(len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), len);
    pos += len;
    const std::size_t rank_at = pos;
    const std::uint32_t rank = u32();
    if (rank > 8) throw ParseError(file + ": implausible rank", static_cast<std::int64_t>(rank_at));
    Shape shape(rank);
    for (auto& d : shape) d = u32();
    Tensor<float> t(shape);
    const auto n = static_cast<std::size_t>(t.size()) * sizeof(float);
    need(n);
    std::memcpy(t.data(), bytes.data() + pos, n);
    pos += n;
    blocks.emplace_back(std::move(name), std::move(t));
  }
  if (pos != bytes.size()) throw ParseError(file + ": trailing bytes", static_cast<std::int64_t>(pos));
  return blocks;
}

}  // namespace dsdi
