#include <doctest.h>

#include <algorithm>
#include <limits>

#include "pc4d/encoder.hpp"
#include "pc4d/rng.hpp"
#include "test_util.hpp"

using namespace pc4d;
using pc4d::testing::kind_of;
using pc4d::testing::TempDir;

namespace {

std::vector<float> cloud(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> pts(n * 6);
  for (auto& v : pts) v = static_cast<float>(rng.uniform(-1, 1));
  return pts;
}

// Brute-force greedy max-min in double precision.
std::vector<std::size_t> fps_oracle(const std::vector<float>& pts, std::size_t stride, std::size_t g) {
  const std::size_t n = pts.size() / stride;
  std::vector<std::size_t> out{0};
  while (out.size() < g) {
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(out.begin(), out.end(), i) != out.end()) continue;
      double dmin = std::numeric_limits<double>::infinity();
      for (auto c : out) {
        double d = 0;
        for (int k = 0; k < 3; ++k) {
          const double diff = double(pts[i * stride + k]) - pts[c * stride + k];
          d += diff * diff;
        }
        dmin = std::min(dmin, d);
      }
      if (dmin > best) best = dmin, arg = i;
    }
    out.push_back(arg);
  }
  return out;
}

}  // namespace

TEST_CASE("farthest point sampling examples") {
  const std::vector<float> line{0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0, 10, 0, 0};
  CHECK(farthest_point_sample(line, 3, 3, 0) == std::vector<std::size_t>{0, 4, 3});
  CHECK(farthest_point_sample(line, 3, 1, 2) == std::vector<std::size_t>{2});
  auto all = farthest_point_sample(line, 3, 5, 0);
  std::sort(all.begin(), all.end());
  CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(kind_of([&] { farthest_point_sample(line, 3, 6, 0); }) == ErrorKind::kTooFewPoints);

  const auto pts = cloud(300, 3);
  CHECK(farthest_point_sample(pts, 6, 12, 0) == fps_oracle(pts, 6, 12));
}

TEST_CASE("fps coverage radius shrinks as G grows") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto pts = cloud(500, seed);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t g : {2, 4, 8, 16}) {
      const auto centers = farthest_point_sample(pts, 6, g, 0);
      double cover = 0;
      for (std::size_t i = 0; i < 500; ++i) {
        double dmin = std::numeric_limits<double>::infinity();
        for (auto c : centers) {
          double d = 0;
          for (int k = 0; k < 3; ++k) d += std::pow(double(pts[i * 6 + k]) - pts[c * 6 + k], 2);
          dmin = std::min(dmin, d);
        }
        cover = std::max(cover, dmin);
      }
      CHECK(cover <= prev);
      prev = cover;
    }
  }
}

TEST_CASE("knn grouping examples and tie-breaks") {
  const std::vector<float> square{0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0};
  const std::vector<Vec3> corner{{0, 0, 0}};
  CHECK(knn_group(square, 3, corner, 2)[0] == std::vector<std::size_t>{0, 1});
  CHECK(knn_group(square, 3, corner, 1)[0] == std::vector<std::size_t>{0});

  std::vector<float> doubled;
  for (int rep = 0; rep < 2; ++rep) doubled.insert(doubled.end(), square.begin(), square.end());
  CHECK(knn_group(doubled, 3, corner, 4)[0] == std::vector<std::size_t>{0, 4, 1, 2});

  const auto pts = cloud(6000, 4);
  std::vector<Vec3> centers;
  for (auto i : farthest_point_sample(pts, 6, 8, 0)) centers.push_back({pts[i * 6], pts[i * 6 + 1], pts[i * 6 + 2]});
  CHECK(knn_group(pts, 6, centers, 16) == serial::knn_group(pts, 6, centers, 16));
}

TEST_CASE("encode_frame is zero on zero input and invariant to in-group order") {
  auto params = init_encoder(4, 4, 8, 1);
  const std::vector<float> zeros(16 * 6, 0.0f);
  const auto z = encode_frame(zeros, params);
  for (float v : z.group_tokens.data) CHECK(v == 0.0f);
  for (float v : z.global_token.data) CHECK(v == 0.0f);

  // 4 groups of 4 well-separated points, so each group is exactly one cluster.
  Rng rng(2);
  std::vector<float> pts;
  const float offsets[4][3] = {{0, 0, 0}, {10, 0, 0}, {0, 10, 0}, {0, 0, 10}};
  for (auto& o : offsets)
    for (int j = 0; j < 4; ++j) {
      for (int k = 0; k < 3; ++k) pts.push_back(o[k] + float(rng.uniform(-0.1, 0.1)));
      for (int k = 0; k < 3; ++k) pts.push_back(float(rng.uniform()));
    }
  const auto ref = encode_frame(pts, params);
  // Permute the three non-seed points of the first cluster through all orders.
  std::array<int, 3> perm{1, 2, 3};
  do {
    auto p = pts;
    for (int j = 0; j < 3; ++j)
      std::copy_n(pts.begin() + perm[j] * 6, 6, p.begin() + (j + 1) * 6);
    const auto tok = encode_frame(p, params);
    for (std::size_t g = 0; g < 4; ++g) {
      // groups are matched by center since FPS order may differ
      std::size_t match = 4;
      for (std::size_t h = 0; h < 4; ++h)
        if (distance(tok.centers[g], ref.centers[h]) < 1.0) match = h;
      REQUIRE(match < 4);
      for (std::size_t j = 0; j < 8; ++j) CHECK(tok.group_tokens(g, j) == ref.group_tokens(match, j));
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  CHECK(kind_of([&] { encode_frame(std::span(pts).first(13), params); }) == ErrorKind::kShapeMismatch);
}

TEST_CASE("encode_sequence layout, frame independence and shape") {
  auto params = init_encoder(16, 32, 384, 7);
  PointCloudSequence seq;
  seq.T = 16;
  seq.N = 256;
  seq.data = cloud(16 * 256, 1);
  const auto ts = encode_sequence(seq, params);
  CHECK(ts.tokens.rows == 16u * 17u);
  CHECK(ts.tokens.cols == 384u);
  CHECK(ts.length() == 16u * 17u);

  auto small = init_encoder(4, 8, 16, 7);
  PointCloudSequence s2;
  s2.T = 3;
  s2.N = 64;
  s2.data = cloud(3 * 64, 2);
  const auto a = encode_sequence(s2, small);
  auto perturbed = s2;
  perturbed.data[64 * 6 + 5] += 0.5f;
  const auto b = encode_sequence(perturbed, small);
  for (std::size_t r = 0; r < a.tokens.rows; ++r) {
    const bool same = std::equal(a.tokens.row(r).begin(), a.tokens.row(r).end(), b.tokens.row(r).begin());
    if (r / 5 != 1) CHECK(same);
  }

  auto swapped = s2;
  std::copy_n(s2.data.begin(), 64 * 6, swapped.data.begin() + 2 * 64 * 6);
  std::copy_n(s2.data.begin() + 2 * 64 * 6, 64 * 6, swapped.data.begin());
  const auto c = encode_sequence(swapped, small);
  for (std::size_t g = 0; g < 5; ++g) {
    CHECK(std::equal(c.tokens.row(g).begin(), c.tokens.row(g).end(), a.tokens.row(10 + g).begin()));
    CHECK(std::equal(c.tokens.row(10 + g).begin(), c.tokens.row(10 + g).end(), a.tokens.row(g).begin()));
  }

  auto still = s2;
  std::copy_n(s2.data.begin(), 64 * 6, still.data.begin() + 64 * 6);
  std::copy_n(s2.data.begin(), 64 * 6, still.data.begin() + 2 * 64 * 6);
  const auto st = encode_sequence(still, small);
  CHECK(std::equal(st.tokens.data.begin(), st.tokens.data.begin() + 5 * 16, st.tokens.data.begin() + 10 * 16));
}

TEST_CASE("translation changes group tokens") {
  auto params = init_encoder(4, 8, 16, 3);
  auto pts = cloud(64, 9);
  const auto a = encode_frame(pts, params);
  for (std::size_t i = 0; i < 64; ++i) pts[i * 6] += 0.5f;
  const auto b = encode_frame(pts, params);
  CHECK_FALSE(a.group_tokens == b.group_tokens);
}

TEST_CASE("encoder weights and token files round trip") {
  TempDir dir("enc");
  const auto p = init_encoder(8, 16, 32, 5);
  save_encoder(p, (dir / "enc.pcw").string());
  const auto q = load_encoder((dir / "enc.pcw").string());
  CHECK(q.groups == 8);
  CHECK(q.neighbors == 16);
  CHECK(q.w1 == p.w1);
  CHECK(q.w_global == p.w_global);

  PointCloudSequence s;
  s.T = 2;
  s.N = 64;
  s.data = cloud(128, 1);
  const auto ts = encode_sequence(s, p);
  save_tokens(ts, (dir / "t.pcw").string());
  const auto back = load_tokens((dir / "t.pcw").string());
  CHECK(back.tokens == ts.tokens);
  CHECK(back.G == 8);
}
