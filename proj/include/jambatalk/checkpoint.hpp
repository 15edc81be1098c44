#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "jambatalk/nn.hpp"

namespace jambatalk {

// Flat key -> (shape, little-endian float64 data) container.
//
// Layout:
//   "JTCKPT01"                      8-byte magic
//   u32 entry count
//   per entry: u32 key length, key bytes, u32 rank, rank x u64 extents,
//              numel x f64 values
// All integers and floats are little-endian.
using TensorMap = std::map<std::string, Tensor>;

void save_checkpoint(const std::filesystem::path& path, const ParamList& entries);
TensorMap load_checkpoint(const std::filesystem::path& path);

// Copies values into existing parameters. Every parameter must be present with
// a matching shape; extra keys in `source` are ignored.
void assign_params(const ParamList& params, const TensorMap& source);

}  // namespace jambatalk
