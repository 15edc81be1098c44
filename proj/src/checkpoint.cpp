#include "jambatalk/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include <fmt/format.h>

#include "jambatalk/binary_io.hpp"

namespace jambatalk {

namespace {
constexpr char kMagic[8] = {'J', 'T', 'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const std::filesystem::path& path, const ParamList& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  io::write_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    io::write_u32(out, static_cast<std::uint32_t>(e.key.size()));
    out.write(e.key.data(), static_cast<std::streamsize>(e.key.size()));
    io::write_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) io::write_u64(out, d);
    for (double v : e.tensor.data()) io::write_f64(out, v);
  }
  if (!out) throw LoadError("failed writing checkpoint: " + path.string());
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, kMagic)) {
    throw LoadError("not a checkpoint file (bad magic): " + path.string());
  }
  TensorMap result;
  const std::uint32_t count = io::read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t key_len = io::read_u32(in);
    std::string key(key_len, '\0');
    in.read(key.data(), key_len);
    const std::uint32_t rank = io::read_u32(in);
    Shape shape(rank);
    for (auto& d : shape) d = io::read_u64(in);
    std::vector<double> values(numel_of(shape));
    for (auto& v : values) v = io::read_f64(in);
    if (!in) throw LoadError(fmt::format("truncated checkpoint at entry {} ({})", i, key));
    result.emplace(std::move(key), Tensor::from(std::move(shape), std::move(values)));
  }
  return result;
}

void assign_params(const ParamList& params, const TensorMap& source) {
  for (auto p : params) {
    auto it = source.find(p.key);
    if (it == source.end()) throw LoadError("checkpoint is missing parameter " + p.key);
    if (it->second.shape() != p.tensor.shape()) {
      throw LoadError(fmt::format("checkpoint shape mismatch for {}: {} vs {}", p.key,
                                  shape_str(it->second.shape()), shape_str(p.tensor.shape())));
    }
    auto dst = p.tensor.mutable_data();
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace jambatalk
