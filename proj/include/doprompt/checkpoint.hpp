#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "doprompt/tensor.hpp"

namespace doprompt {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// DPT1 layout, all integers little-endian u64:
//   "DPT1"
//   repeated until EOF: name_len, name bytes (UTF-8), rank, dims[rank],
//                       values as little-endian IEEE-754 binary32
void write_checkpoint(std::ostream& out, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Copies values of `source` into the same-named entries of `target`. Every
/// target name must be present with an identical shape.
void assign_named(std::span<const NamedTensor> source, std::span<NamedTensor> target);

}  // namespace doprompt
