#pragma once

// Per-frame point tokenizer: farthest-point centers, k-nearest-neighbour
// groups, a shared two-layer point feature map with max pooling per group,
// and one global token per frame aggregated from the group tokens.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pc4d/geometry.hpp"
#include "pc4d/sampler.hpp"
#include "pc4d/tensor.hpp"
#include "pc4d/weights.hpp"

namespace pc4d {

struct EncoderParams {
  std::size_t groups = 16;      // G
  std::size_t neighbors = 32;   // k
  std::size_t width = 64;       // c
  Mat<float> w1, b1;            // 6 -> c
  Mat<float> w2, b2;            // c -> c
  Mat<float> w_pos;             // center xyz -> c
  Mat<float> w_global, b_global;  // pooled group tokens -> global token

  template <class F>
  void for_each(F&& f) {
    f("w1", w1);
    f("b1", b1);
    f("w2", w2);
    f("b2", b2);
    f("w_pos", w_pos);
    f("w_global", w_global);
    f("b_global", b_global);
  }
};

// Weights uniform in +-1/sqrt(fan_in), biases zero.
EncoderParams init_encoder(std::size_t groups, std::size_t neighbors, std::size_t width, std::uint64_t seed);

std::vector<NamedTensor> encoder_tensors(const EncoderParams& p);
EncoderParams encoder_from_tensors(std::span<const NamedTensor> tensors);

void save_encoder(const EncoderParams& p, const std::string& path);
EncoderParams load_encoder(const std::string& path);

struct FrameTokens {
  Mat<float> group_tokens;  // G x c
  Mat<float> global_token;  // 1 x c
  std::vector<Vec3> centers;
};

struct TokenSequence {
  std::size_t T = 0, G = 0, c = 0;
  Mat<float> tokens;  // (T * (G + 1)) x c; per frame: groups 1..G then global

  std::size_t length() const { return T * (G + 1); }
  std::span<const float> token(std::size_t t, std::size_t slot) const { return tokens.row(t * (G + 1) + slot); }
};

// xyz holds n points with the given stride (3 for packed xyz, 6 for xyzrgb).
std::vector<std::size_t> farthest_point_sample(std::span<const float> xyz, std::size_t stride, std::size_t groups,
                                               std::size_t start_index = 0);

// For each center, the k nearest points (squared Euclidean, ties to the lower
// index), ordered by increasing distance.
std::vector<std::vector<std::size_t>> knn_group(std::span<const float> xyz, std::size_t stride,
                                                std::span<const Vec3> centers, std::size_t k);

namespace serial {
std::vector<std::vector<std::size_t>> knn_group(std::span<const float> xyz, std::size_t stride,
                                                std::span<const Vec3> centers, std::size_t k);
}

// `points` is one frame, N rows of (x, y, z, r, g, b).
FrameTokens encode_frame(std::span<const float> points, const EncoderParams& params);
TokenSequence encode_sequence(const PointCloudSequence& seq, const EncoderParams& params);

void save_tokens(const TokenSequence& tokens, const std::string& path);
TokenSequence load_tokens(const std::string& path);

}  // namespace pc4d
