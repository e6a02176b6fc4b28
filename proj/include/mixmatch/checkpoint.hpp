#pragma once

// Parameter checkpoint files.
//
// Layout (all integers unsigned 32-bit little-endian):
//   "MMCKPT1"                                   7-byte magic
//   repeated until end of file:
//     name_length, name bytes
//     rank, dims[rank]
//     values: product(dims) little-endian IEEE-754 float32

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mixmatch/model.hpp"

namespace mixmatch {

inline constexpr std::string_view checkpoint_magic = "MMCKPT1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
  if (in.size() - pos < 4) throw CheckpointError("checkpoint: truncated integer field");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail

/// Serializes parameters as float32 regardless of T.
template <typename T>
std::string encode_checkpoint(const ParamSet<T>& params) {
  std::string out(checkpoint_magic);
  for (const auto& p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : p.tensor.values())
      detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

/// Inverse of encode_checkpoint. Parameters named "*.bias" are marked as
/// exempt from weight decay.
inline ParamSet<float> decode_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, checkpoint_magic.size()) != checkpoint_magic)
    throw CheckpointError("checkpoint: bad magic (expected MMCKPT1)");
  std::size_t pos = checkpoint_magic.size();
  ParamSet<float> params;
  while (pos < bytes.size()) {
    const std::uint32_t name_len = detail::get_u32(bytes, pos);
    if (bytes.size() - pos < name_len) throw CheckpointError("checkpoint: truncated name");
    std::string name(bytes.substr(pos, name_len));
    pos += name_len;
    const std::uint32_t rank = detail::get_u32(bytes, pos);
    if (rank > 8) throw CheckpointError("checkpoint: implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u32(bytes, pos);
    if ((bytes.size() - pos) / 4 < numel(shape))
      throw CheckpointError("checkpoint: truncated values for " + name);
    std::vector<float> values(numel(shape));
    for (auto& v : values) v = std::bit_cast<float>(detail::get_u32(bytes, pos));
    const bool decays = !name.ends_with(".bias");
    params.add(std::move(name), Tensor<float>::parameter(std::move(shape), std::move(values)),
               decays);
  }
  return params;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
  const std::string bytes = encode_checkpoint(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for " + path.string());
}

inline ParamSet<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace mixmatch
