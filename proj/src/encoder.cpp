#include "pc4d/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pc4d/kernels.hpp"
#include "pc4d/rng.hpp"
#include "pc4d/weights.hpp"

namespace pc4d {

namespace {

Mat<float> uniform_init(std::size_t rows, std::size_t cols, Rng& rng) {
  Mat<float> m(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  for (auto& v : m.data) v = static_cast<float>(rng.uniform(-bound, bound));
  return m;
}

std::vector<std::size_t> nearest_k(std::span<const float> xyz, std::size_t stride, std::size_t n, Vec3 c,
                                   std::size_t k, std::vector<float>& d2, std::vector<std::size_t>& order) {
  for (std::size_t i = 0; i < n; ++i) {
    const float* p = xyz.data() + i * stride;
    const float dx = p[0] - c.x, dy = p[1] - c.y, dz = p[2] - c.z;
    d2[i] = dx * dx + dy * dy + dz * dz;
  }
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return d2[a] < d2[b] || (d2[a] == d2[b] && a < b); });
  return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k)};
}

void check_knn_args(std::span<const float> xyz, std::size_t stride, std::size_t k) {
  if (stride < 3) fail(ErrorKind::kShapeMismatch, "point stride must be >= 3");
  const std::size_t n = xyz.size() / stride;
  if (k == 0 || k > n)
    fail(ErrorKind::kTooFewPoints, "knn_group needs 1 <= k <= N (k=" + std::to_string(k) + ", N=" + std::to_string(n) + ")");
}

}  // namespace

EncoderParams init_encoder(std::size_t groups, std::size_t neighbors, std::size_t width, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "frame_encoder"));
  EncoderParams p;
  p.groups = groups;
  p.neighbors = neighbors;
  p.width = width;
  p.w1 = uniform_init(6, width, rng);
  p.b1 = Mat<float>(1, width);
  p.w2 = uniform_init(width, width, rng);
  p.b2 = Mat<float>(1, width);
  p.w_pos = uniform_init(3, width, rng);
  p.w_global = uniform_init(width, width, rng);
  p.b_global = Mat<float>(1, width);
  return p;
}

std::vector<NamedTensor> encoder_tensors(const EncoderParams& p) {
  auto tensors = to_named(p);
  Mat<float> meta(1, 3);
  meta.data = {static_cast<float>(p.groups), static_cast<float>(p.neighbors), static_cast<float>(p.width)};
  tensors.insert(tensors.begin(), {"meta", meta});
  return tensors;
}

EncoderParams encoder_from_tensors(std::span<const NamedTensor> tensors) {
  if (tensors.empty() || tensors[0].name != "meta" || tensors[0].value.size() != 3)
    fail(ErrorKind::kSchema, "encoder weights need a leading 'meta' tensor [G, k, c]");
  const auto& meta = tensors[0].value.data;
  auto p = init_encoder(static_cast<std::size_t>(meta[0]), static_cast<std::size_t>(meta[1]),
                        static_cast<std::size_t>(meta[2]), 0);
  from_named(p, tensors.subspan(1));
  return p;
}

void save_encoder(const EncoderParams& p, const std::string& path) { save_weights(encoder_tensors(p), path); }

EncoderParams load_encoder(const std::string& path) { return encoder_from_tensors(load_weights(path)); }

std::vector<std::size_t> farthest_point_sample(std::span<const float> xyz, std::size_t stride, std::size_t groups,
                                               std::size_t start_index) {
  if (stride < 3) fail(ErrorKind::kShapeMismatch, "point stride must be >= 3");
  const std::size_t n = xyz.size() / stride;
  if (groups == 0 || groups > n)
    fail(ErrorKind::kTooFewPoints,
         "farthest_point_sample needs N >= G >= 1 (N=" + std::to_string(n) + ", G=" + std::to_string(groups) + ")");
  if (start_index >= n) fail(ErrorKind::kInvalidArgument, "start_index out of range");
  std::vector<float> min_d2(n, std::numeric_limits<float>::infinity());
  std::vector<std::size_t> picked;
  picked.reserve(groups);
  std::size_t cur = start_index;
  for (std::size_t g = 0; g < groups; ++g) {
    picked.push_back(cur);
    min_d2[cur] = -1.0f;  // never re-selected, even among duplicates
    if (g + 1 == groups) break;
    cur = kernels::fps_update(xyz, stride, xyz.data() + cur * stride, min_d2);
  }
  return picked;
}

namespace serial {

std::vector<std::vector<std::size_t>> knn_group(std::span<const float> xyz, std::size_t stride,
                                                std::span<const Vec3> centers, std::size_t k) {
  check_knn_args(xyz, stride, k);
  const std::size_t n = xyz.size() / stride;
  std::vector<std::vector<std::size_t>> groups(centers.size());
  std::vector<float> d2(n);
  std::vector<std::size_t> order(n);
  for (std::size_t g = 0; g < centers.size(); ++g) groups[g] = nearest_k(xyz, stride, n, centers[g], k, d2, order);
  return groups;
}

}  // namespace serial

std::vector<std::vector<std::size_t>> knn_group(std::span<const float> xyz, std::size_t stride,
                                                std::span<const Vec3> centers, std::size_t k) {
  check_knn_args(xyz, stride, k);
  const std::size_t n = xyz.size() / stride;
  std::vector<std::vector<std::size_t>> groups(centers.size());
  const auto g_count = static_cast<std::int64_t>(centers.size());
#pragma omp parallel if (g_count > 1 && n > 4096)
  {
    std::vector<float> d2(n);
    std::vector<std::size_t> order(n);
#pragma omp for schedule(static)
    for (std::int64_t g = 0; g < g_count; ++g) groups[g] = nearest_k(xyz, stride, n, centers[g], k, d2, order);
  }
  return groups;
}

FrameTokens encode_frame(std::span<const float> points, const EncoderParams& params) {
  constexpr std::size_t kStride = PointCloudSequence::kChannels;
  if (points.size() % kStride != 0) fail(ErrorKind::kShapeMismatch, "frame buffer is not a multiple of 6 floats");
  const std::size_t c = params.width;
  require_shape(params.w1, 6, c, "encoder w1");
  require_shape(params.w2, c, c, "encoder w2");
  require_shape(params.w_pos, 3, c, "encoder w_pos");
  require_shape(params.w_global, c, c, "encoder w_global");

  const std::size_t G = params.groups, k = params.neighbors;
  const auto center_idx = farthest_point_sample(points, kStride, G, 0);
  FrameTokens out;
  out.centers.reserve(G);
  for (auto i : center_idx) out.centers.push_back({points[i * kStride], points[i * kStride + 1], points[i * kStride + 2]});
  const auto groups = knn_group(points, kStride, out.centers, k);

  Mat<float> x(G * k, 6);
  for (std::size_t g = 0; g < G; ++g) {
    const Vec3 ctr = out.centers[g];
    for (std::size_t j = 0; j < k; ++j) {
      const float* p = points.data() + groups[g][j] * kStride;
      float* row = x.row(g * k + j).data();
      row[0] = p[0] - ctr.x;
      row[1] = p[1] - ctr.y;
      row[2] = p[2] - ctr.z;
      row[3] = p[3];
      row[4] = p[4];
      row[5] = p[5];
    }
  }
  Mat<float> h1, h2;
  kernels::gemm_nn(x, params.w1, h1);
  for (std::size_t r = 0; r < h1.rows; ++r)
    for (std::size_t j = 0; j < c; ++j) h1(r, j) = std::max(0.0f, h1(r, j) + params.b1.data[j]);
  kernels::gemm_nn(h1, params.w2, h2);

  Mat<float> centers(G, 3);
  for (std::size_t g = 0; g < G; ++g) {
    centers(g, 0) = out.centers[g].x;
    centers(g, 1) = out.centers[g].y;
    centers(g, 2) = out.centers[g].z;
  }
  kernels::gemm_nn(centers, params.w_pos, out.group_tokens);
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t j = 0; j < c; ++j) {
      float m = -std::numeric_limits<float>::infinity();
      for (std::size_t r = 0; r < k; ++r) m = std::max(m, h2(g * k + r, j));
      out.group_tokens(g, j) += m + params.b2.data[j];
    }
  }

  Mat<float> pooled(1, c, -std::numeric_limits<float>::infinity());
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t j = 0; j < c; ++j) pooled.data[j] = std::max(pooled.data[j], out.group_tokens(g, j));
  kernels::gemm_nn(pooled, params.w_global, out.global_token);
  for (std::size_t j = 0; j < c; ++j) out.global_token.data[j] += params.b_global.data[j];
  return out;
}

TokenSequence encode_sequence(const PointCloudSequence& seq, const EncoderParams& params) {
  TokenSequence ts;
  ts.T = seq.T;
  ts.G = params.groups;
  ts.c = params.width;
  ts.tokens = Mat<float>(ts.length(), ts.c);
  const auto frames = static_cast<std::int64_t>(seq.T);
  // Frames are independent; each writes its own block of rows.
#pragma omp parallel for schedule(dynamic) if (frames > 1)
  for (std::int64_t t = 0; t < frames; ++t) {
    const FrameTokens ft = encode_frame(seq.frame(static_cast<std::size_t>(t)), params);
    const std::size_t base = static_cast<std::size_t>(t) * (ts.G + 1);
    for (std::size_t g = 0; g < ts.G; ++g)
      std::copy(ft.group_tokens.row(g).begin(), ft.group_tokens.row(g).end(), ts.tokens.row(base + g).begin());
    std::copy(ft.global_token.data.begin(), ft.global_token.data.end(), ts.tokens.row(base + ts.G).begin());
  }
  return ts;
}

void save_tokens(const TokenSequence& tokens, const std::string& path) {
  Mat<float> meta(1, 3);
  meta.data = {static_cast<float>(tokens.T), static_cast<float>(tokens.G), static_cast<float>(tokens.c)};
  std::vector<NamedTensor> tensors{{"meta", meta}, {"tokens", tokens.tokens}};
  save_weights(tensors, path);
}

TokenSequence load_tokens(const std::string& path) {
  const auto tensors = load_weights(path);
  if (tensors.size() != 2 || tensors[0].name != "meta" || tensors[1].name != "tokens")
    fail(ErrorKind::kSchema, "token file needs 'meta' and 'tokens' tensors");
  TokenSequence ts;
  ts.T = static_cast<std::size_t>(tensors[0].value.data[0]);
  ts.G = static_cast<std::size_t>(tensors[0].value.data[1]);
  ts.c = static_cast<std::size_t>(tensors[0].value.data[2]);
  ts.tokens = tensors[1].value;
  require_shape(ts.tokens, ts.length(), ts.c, "tokens");
  return ts;
}

}  // namespace pc4d
