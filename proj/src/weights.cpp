#include "pc4d/weights.hpp"

#include <algorithm>

#include "pc4d/bytes.hpp"

namespace pc4d {

namespace {
constexpr char kMagic[4] = {'P', 'C', 'W', '1'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_weights(std::span<const NamedTensor> tensors) {
  ByteWriter out;
  out.raw(std::string_view(kMagic, 4));
  out.u32(kVersion);
  out.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    out.str16(t.name);
    out.u32(static_cast<std::uint32_t>(t.value.rows));
    out.u32(static_cast<std::uint32_t>(t.value.cols));
  }
  for (const auto& t : tensors)
    for (float v : t.value.data) out.f32(v);
  out.append_crc();
  return out.take();
}

std::vector<NamedTensor> decode_weights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin()))
    fail(ErrorKind::kBadMagic, "not a PCW1 weight blob");
  auto body = verify_trailing_crc(bytes);
  ByteReader in(body);
  in.raw(4);
  const auto version = in.u32();
  if (version != kVersion) fail(ErrorKind::kVersionUnsupported, "weight blob version " + std::to_string(version));
  const auto count = in.u32();
  std::vector<NamedTensor> out(count);
  for (auto& t : out) {
    t.name = in.str16();
    const auto rows = in.u32();
    const auto cols = in.u32();
    t.value.rows = rows;
    t.value.cols = cols;
  }
  for (auto& t : out) {
    in.need(t.value.rows * t.value.cols * 4);
    t.value.data.resize(t.value.rows * t.value.cols);
    for (auto& v : t.value.data) v = in.f32();
  }
  if (in.remaining() != 0)
    fail(ErrorKind::kParse, "trailing bytes after payload at byte offset " + std::to_string(in.offset()));
  return out;
}

void save_weights(std::span<const NamedTensor> tensors, const std::filesystem::path& path) {
  write_file(path, encode_weights(tensors));
}

std::vector<NamedTensor> load_weights(const std::filesystem::path& path) { return decode_weights(read_file(path)); }

}  // namespace pc4d
