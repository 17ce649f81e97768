#pragma once

// Flat little-endian f32 weight blob with a shape-manifest header:
//   "PCW1" | u32 version | u32 tensor_count
//   per tensor: u16 name length, name bytes, u32 rows, u32 cols
//   payload: every tensor's rows*cols f32 values, in header order
//   u32 CRC32 of everything before it

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pc4d/tensor.hpp"

namespace pc4d {

struct NamedTensor {
  std::string name;
  Mat<float> value;
};

std::vector<std::uint8_t> encode_weights(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> decode_weights(std::span<const std::uint8_t> bytes);

void save_weights(std::span<const NamedTensor> tensors, const std::filesystem::path& path);
std::vector<NamedTensor> load_weights(const std::filesystem::path& path);

// Parameter structs expose `for_each(f)` calling f(name, Mat<T>&) in a fixed
// order; these adapters move them in and out of blobs.
template <class Params>
std::vector<NamedTensor> to_named(const Params& p, const std::string& prefix = "") {
  std::vector<NamedTensor> out;
  const_cast<Params&>(p).for_each([&](const std::string& name, auto& m) {
    out.push_back({prefix + name, m.template cast<float>()});
  });
  return out;
}

template <class Params>
void from_named(Params& p, std::span<const NamedTensor> tensors, const std::string& prefix = "") {
  std::size_t i = 0;
  p.for_each([&](const std::string& name, auto& m) {
    using T = typename std::decay_t<decltype(m.data)>::value_type;
    const NamedTensor* found = nullptr;
    if (i < tensors.size() && tensors[i].name == prefix + name) {
      found = &tensors[i];
    } else {
      for (const auto& t : tensors)
        if (t.name == prefix + name) found = &t;
    }
    if (!found) fail(ErrorKind::kShapeMismatch, "weights missing tensor '" + prefix + name + "'");
    require_shape(found->value, m.rows, m.cols, (prefix + name).c_str());
    m = found->value.template cast<T>();
    ++i;
  });
}

}  // namespace pc4d
