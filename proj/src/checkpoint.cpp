#include "doprompt/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>

#include "doprompt/errors.hpp"
#include "binary_io.hpp"

namespace doprompt {

namespace {

using binary::get_u64;
using binary::put_f32;
using binary::put_u64;

constexpr std::array<char, 4> kMagic{'D', 'P', 'T', '1'};
constexpr std::uint64_t kMaxNameLength = 1u << 16;
constexpr std::uint64_t kMaxRank = 16;
constexpr std::uint64_t kMaxElements = 1ull << 32;

}  // namespace

void write_checkpoint(std::ostream& out, std::span<const NamedTensor> tensors) {
  out.write(kMagic.data(), kMagic.size());
  for (const NamedTensor& nt : tensors) {
    put_u64(out, nt.name.size());
    out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    put_u64(out, nt.tensor.rank());
    for (std::size_t d : nt.tensor.shape()) put_u64(out, d);
    for (Real v : nt.tensor.values()) put_f32(out, static_cast<float>(v));
  }
  if (!out) throw FormatError("checkpoint: write failed");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kMagic) throw FormatError("checkpoint: bad magic, expected DPT1");
  std::vector<NamedTensor> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::uint64_t name_len = get_u64(in, "checkpoint name length");
    if (name_len == 0 || name_len > kMaxNameLength) {
      throw FormatError("checkpoint: implausible name length " + std::to_string(name_len));
    }
    std::string name(name_len, '\0');
    binary::read_exact(in, name.data(), name_len, "checkpoint name");
    const std::uint64_t rank = get_u64(in, "checkpoint rank");
    if (rank > kMaxRank) throw FormatError("checkpoint: implausible rank for " + name);
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
      const std::uint64_t d = get_u64(in, "checkpoint dims");
      if (d == 0 || d > kMaxElements || count * d > kMaxElements) {
        throw FormatError("checkpoint: implausible dimension in " + name);
      }
      count *= d;
      shape.push_back(static_cast<std::size_t>(d));
    }
    std::vector<unsigned char> raw(count * 4);
    binary::read_exact(in, reinterpret_cast<char*>(raw.data()), raw.size(), "checkpoint values");
    std::vector<Real> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      values[i] = static_cast<Real>(std::bit_cast<float>(binary::decode_u32(&raw[4 * i])));
    }
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
  write_checkpoint(out, tensors);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path.string());
  return read_checkpoint(in);
}

void assign_named(std::span<const NamedTensor> source, std::span<NamedTensor> target) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const NamedTensor& nt : source) by_name[nt.name] = &nt.tensor;
  for (NamedTensor& nt : target) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + nt.name);
    if (it->second->shape() != nt.tensor.shape()) {
      throw FormatError("checkpoint: tensor " + nt.name + " has shape " +
                        shape_string(it->second->shape()) + ", expected " +
                        shape_string(nt.tensor.shape()));
    }
    auto src = it->second->values();
    std::copy(src.begin(), src.end(), nt.tensor.mutable_values().begin());
  }
}

}  // namespace doprompt
