#include <doctest.h>

#include <cmath>
#include <numeric>

#include "pc4d/rng.hpp"
#include "pc4d/sampler.hpp"
#include "test_util.hpp"

using namespace pc4d;
using pc4d::testing::kind_of;

namespace {

// Exact largest remainder over integer weights, seats handed out one at a time.
std::vector<std::size_t> largest_remainder_oracle(const std::vector<long long>& w, std::size_t n) {
  long long total = std::accumulate(w.begin(), w.end(), 0LL);
  std::vector<std::size_t> counts(w.size());
  std::vector<long long> rem(w.size());
  std::size_t given = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const long long num = static_cast<long long>(n) * w[i];
    counts[i] = static_cast<std::size_t>(num / total);
    rem[i] = num % total;
    given += counts[i];
  }
  while (given < n) {
    std::size_t best = w.size();
    for (std::size_t i = 0; i < w.size(); ++i)
      if (w[i] > 0 && rem[i] >= 0 && (best == w.size() || rem[i] > rem[best])) best = i;
    ++counts[best];
    rem[best] = -1;
    ++given;
  }
  return counts;
}

MeshAnimation two_triangles() {
  MeshAnimation a;
  a.frames = {{{0, 0, 0}, {3, 0, 0}, {0, 2, 0}, {-1, 0, 0}, {0, -2, 0}}};
  a.faces = {{0, 1, 2}, {0, 3, 4}};
  return a;
}

MeshAnimation unit_square() {
  MeshAnimation a;
  a.frames = {{{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}}};
  a.faces = {{0, 1, 2}, {0, 2, 3}};
  return a;
}

Affine3 random_affine(Rng& rng, bool rigid) {
  Affine3 r = Affine3::rotation(static_cast<int>(rng.below(3)), rng.uniform(-3, 3));
  if (!rigid)
    for (auto& v : r.m) v += rng.uniform(-0.3, 0.3);
  for (auto& v : r.t) v = rng.uniform(-2, 2);
  return r;
}

MeshAnimation affine_animation(const MeshAnimation& base, std::vector<Affine3>& motions, Rng& rng, bool rigid) {
  MeshAnimation a = base;
  motions.assign(1, Affine3{});
  for (int t = 1; t < 6; ++t) {
    motions.push_back(random_affine(rng, rigid));
    std::vector<Vec3> f;
    for (const auto& p : base.frames[0]) f.push_back(motions.back().apply(p));
    a.frames.push_back(std::move(f));
  }
  return a;
}

}  // namespace

TEST_CASE("allocation examples") {
  auto alloc = [](std::vector<double> a, std::size_t n) { return allocate_points_by_area(a, n); };
  CHECK(alloc({3, 1}, 8) == std::vector<std::size_t>{6, 2});
  CHECK(alloc({1, 1, 1}, 8) == std::vector<std::size_t>{3, 3, 2});
  CHECK(alloc({0, 5}, 7) == std::vector<std::size_t>{0, 7});
  CHECK(kind_of([&] { alloc({0, 0}, 3); }) == ErrorKind::kAllZeroAreas);
}

TEST_CASE("allocation equals the exact largest-remainder oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + rng.below(12);
    std::vector<long long> w(m);
    for (auto& v : w) v = rng.below(4) == 0 ? 0 : static_cast<long long>(1 + rng.below(50));
    if (std::accumulate(w.begin(), w.end(), 0LL) == 0) w[0] = 1;
    const std::size_t n = 1 + rng.below(500);
    const std::vector<double> areas(w.begin(), w.end());
    const auto got = allocate_points_by_area(areas, n);
    REQUIRE(got == largest_remainder_oracle(w, n));
    const double total = std::accumulate(areas.begin(), areas.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) CHECK(std::abs(double(got[i]) - n * areas[i] / total) < 1.0);
  }
}

TEST_CASE("single triangle, one anchor") {
  MeshAnimation a;
  a.frames = {{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}};
  a.faces = {{0, 1, 2}};
  const auto anchors = sample_surface(mesh_frame(a, 0), 1, SampleMode::kUniform, 3);
  REQUIRE(anchors.size() == 1);
  CHECK(anchors.triangle_index[0] == 0);
  const auto& b = anchors.barycentric[0];
  CHECK(std::abs(b[0] + b[1] + b[2] - 1.0f) <= 1e-6);
  for (float x : b) CHECK(x >= 0.0f);
}

TEST_CASE("area-weighted triangle choice stays within the binomial band") {
  const auto a = two_triangles();
  for (std::uint64_t seed : {1, 2, 3, 99}) {
    const auto anchors = sample_surface(mesh_frame(a, 0), 4000, SampleMode::kUniform, seed);
    const auto c0 = std::count(anchors.triangle_index.begin(), anchors.triangle_index.end(), 0u);
    CHECK(c0 >= 2830);
    CHECK(c0 <= 3170);
  }
}

TEST_CASE("triangle frequencies on a random fan follow their areas") {
  Rng rng(8);
  MeshAnimation a;
  a.frames.resize(1);
  a.frames[0].push_back({0, 0, 0});
  const int m = 12;
  for (int i = 0; i <= m; ++i) {
    const double ang = 2 * 3.14159265 * i / (m + 1);
    const double r = 0.2 + rng.uniform() * 2;
    a.frames[0].push_back({float(r * std::cos(ang)), float(r * std::sin(ang)), 0});
  }
  for (int i = 1; i <= m; ++i) a.faces.push_back({0, std::uint32_t(i), std::uint32_t(i + 1)});
  double total = 0;
  std::vector<double> area;
  for (const auto& f : a.faces) {
    area.push_back(triangle_area(a.frames[0][f[0]], a.frames[0][f[1]], a.frames[0][f[2]]));
    total += area.back();
  }
  const std::size_t n = 10000;
  const auto anchors = sample_surface(mesh_frame(a, 0), n, SampleMode::kUniform, 77);
  std::vector<double> count(m);
  for (auto t : anchors.triangle_index) count[t] += 1;
  for (int i = 0; i < m; ++i) {
    const double p = area[i] / total, mean = n * p, sd = std::sqrt(n * p * (1 - p));
    CHECK(std::abs(count[i] - mean) <= 3 * sd);
  }
}

TEST_CASE("anchors satisfy barycentric and index invariants") {
  SynthSpec spec;
  spec.kind = MotionKind::kHingeArticulation;
  spec.base_shape = BaseShape::kBiped;
  spec.frame_count = 16;
  const auto a = generate_synthetic_asset(spec, 4);
  for (auto mode : {SampleMode::kUniform, SampleMode::kPoisson}) {
    const auto anchors = sample_surface(mesh_frame(a, 0), 2000, mode, 12, {0, 30, UnderfillPolicy::kTopUp});
    CHECK(anchors.size() == 2000);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const auto& b = anchors.barycentric[i];
      CHECK(std::abs(double(b[0]) + b[1] + b[2] - 1.0) <= 1e-6);
      CHECK(anchors.triangle_index[i] < a.faces.size());
    }
    const auto again = sample_surface(mesh_frame(a, 0), 2000, mode, 12, {0, 30, UnderfillPolicy::kTopUp});
    CHECK(again.triangle_index == anchors.triangle_index);
    CHECK(again.barycentric == anchors.barycentric);
  }
}

TEST_CASE("poisson darts keep their spacing") {
  const auto a = unit_square();
  const auto anchors =
      sample_surface(mesh_frame(a, 0), 200, SampleMode::kPoisson, 5, {0.2, 30, UnderfillPolicy::kPartial});
  CHECK(anchors.size() == anchors.poisson_accepted);
  CHECK(anchors.size() > 5);
  const auto pts = reconstruct_frame(anchors, mesh_frame(a, 0));
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) CHECK(distance(pts[i], pts[j]) >= 0.2);

  CHECK(kind_of([&] {
          sample_surface(mesh_frame(a, 0), 200, SampleMode::kPoisson, 5, {0.2, 30, UnderfillPolicy::kThrow});
        }) == ErrorKind::kPoissonUnderfill);
  const auto topped =
      sample_surface(mesh_frame(a, 0), 200, SampleMode::kPoisson, 5, {0.2, 30, UnderfillPolicy::kTopUp});
  CHECK(topped.size() == 200);
  CHECK(topped.poisson_accepted == anchors.size());
}

TEST_CASE("reconstruction examples") {
  MeshAnimation a;
  a.frames = {{{0, 0, 0}, {3, 0, 0}, {0, 3, 0}}};
  a.faces = {{0, 1, 2}};
  SampleAnchors s;
  s.triangle_index = {0, 0};
  s.barycentric = {{1.0f / 3, 1.0f / 3, 1.0f / 3}, {1, 0, 0}};
  s.color.resize(2);
  const auto p = reconstruct_frame(s, mesh_frame(a, 0));
  CHECK(p[0].x == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(p[0].y == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(p[0].z == 0.0f);
  CHECK(p[1] == a.frames[0][0]);

  SampleAnchors bad = s;
  bad.triangle_index[0] = 1;
  CHECK(kind_of([&] { reconstruct_frame(bad, mesh_frame(a, 0)); }) == ErrorKind::kTopologyMismatch);
}

TEST_CASE("reconstruction is exact under rigid and affine motion") {
  Rng rng(31);
  SynthSpec spec;
  spec.kind = MotionKind::kStatic;
  spec.frame_count = 1;
  for (int trial = 0; trial < 20; ++trial) {
    spec.base_shape = trial % 2 ? BaseShape::kCylinder : BaseShape::kBiped;
    const auto base = generate_synthetic_asset(spec, trial);
    std::vector<Affine3> motions;
    const auto anim = affine_animation(base, motions, rng, trial < 10);
    const auto anchors = sample_surface(mesh_frame(anim, 0), 1000, SampleMode::kUniform, trial);
    const auto p0 = reconstruct_frame(anchors, mesh_frame(anim, 0));
    double worst = 0;
    for (std::size_t t = 1; t < anim.frame_count(); ++t) {
      const auto pt = reconstruct_frame(anchors, mesh_frame(anim, t));
      for (std::size_t i = 0; i < pt.size(); ++i) {
        const Vec3 e = motions[t].apply(p0[i]);
        worst = std::max({worst, double(std::abs(e.x - pt[i].x)), double(std::abs(e.y - pt[i].y)),
                          double(std::abs(e.z - pt[i].z))});
      }
    }
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("colour priority") {
  MeshAnimation a;
  a.frames = {{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}};
  a.faces = {{0, 1, 2}};
  SampleAnchors s;
  s.triangle_index = {0};
  s.barycentric = {{1.0f / 3, 1.0f / 3, 1.0f / 3}};
  s.color.resize(1);

  CHECK(assign_colors(s, a).color[0] == Rgb{0.5f, 0.5f, 0.5f});
  a.base_color = Rgb{0.2f, 0.4f, 0.6f};
  CHECK(assign_colors(s, a).color[0] == Rgb{0.2f, 0.4f, 0.6f});
  a.vertex_colors = std::vector<Rgb>{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const auto c = assign_colors(s, a).color[0];
  for (float v : c) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-6));
  a.vertex_colors = std::vector<Rgb>(3, Rgb{1, 1, 1});
  const auto w = assign_colors(s, a).color[0];
  for (float v : w) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
  a.vertex_colors = std::vector<Rgb>(3, Rgb{2, -1, 1});
  CHECK(assign_colors(s, a).color[0] == Rgb{1, 0, 1});
}

TEST_CASE("build_sequence shape, determinism and frame-invariant colour") {
  SynthSpec spec;
  spec.kind = MotionKind::kRigidRotation;
  spec.frame_count = 40;
  spec.color_scheme = ColorScheme::kGradient;
  spec.asset_id = "spin";
  const auto anim = generate_synthetic_asset(spec, 6);
  const auto idx = select_frames_equidistant(40, 16);
  SequenceOptions opts;
  opts.seed = 17;
  const auto seq = build_sequence(anim, idx, opts);
  CHECK(seq.T == 16);
  CHECK(seq.N == 8192);
  CHECK(seq.data.size() == 16u * 8192u * 6u);
  const auto again = build_sequence(anim, idx, opts);
  CHECK(again.data == seq.data);

  bool colours_equal = true;
  double max_r = 0;
  for (std::size_t t = 0; t < seq.T; ++t)
    for (std::size_t i = 0; i < seq.N; ++i) {
      for (int ch = 3; ch < 6; ++ch) colours_equal &= seq.point(t, i)[ch] == seq.point(0, i)[ch];
      const float* p = seq.point(t, i);
      max_r = std::max(max_r, std::sqrt(double(p[0]) * p[0] + double(p[1]) * p[1] + double(p[2]) * p[2]));
    }
  CHECK(colours_equal);
  CHECK(max_r <= 1 + 1e-6);

  spec.kind = MotionKind::kStatic;
  const auto still = build_sequence(generate_synthetic_asset(spec, 6), idx, opts);
  for (std::size_t t = 1; t < still.T; ++t) CHECK(std::equal(still.frame(t).begin(), still.frame(t).end(), still.frame(0).begin()));
}

TEST_CASE("whole-sequence normalization is invertible and keeps motion") {
  SynthSpec spec;
  spec.kind = MotionKind::kTranslation;
  spec.amplitude = 1.5;
  spec.frame_count = 16;
  const auto anim = generate_synthetic_asset(spec, 2);
  SequenceOptions opts;
  opts.points = 512;
  opts.normalize = false;
  const auto raw = build_sequence(anim, select_frames_equidistant(16, 16), opts);
  const auto norm = normalize_sequence(raw);

  auto centroid = [](const PointCloudSequence& s, std::size_t t) {
    std::array<double, 3> c{0, 0, 0};
    for (std::size_t i = 0; i < s.N; ++i)
      for (int k = 0; k < 3; ++k) c[k] += s.point(t, i)[k];
    for (auto& v : c) v /= double(s.N);
    return c;
  };
  const auto r0 = centroid(raw, 0), n0 = centroid(norm, 0);
  for (std::size_t t = 1; t < raw.T; ++t) {
    const auto rt = centroid(raw, t), nt = centroid(norm, t);
    for (int k = 0; k < 3; ++k) CHECK(nt[k] - n0[k] == doctest::Approx((rt[k] - r0[k]) / norm.norm_scale).epsilon(1e-5));
  }
  const auto nl = centroid(norm, raw.T - 1);
  CHECK(std::abs(nl[0] - n0[0]) + std::abs(nl[1] - n0[1]) + std::abs(nl[2] - n0[2]) > 0.1);

  const auto back = denormalize_sequence(norm);
  double worst = 0;
  for (std::size_t i = 0; i < raw.data.size(); ++i) worst = std::max(worst, double(std::abs(back.data[i] - raw.data[i])));
  CHECK(worst <= 1e-5);

  const auto twice = normalize_sequence(norm);
  CHECK(std::abs(twice.norm_scale - 1.0) <= 1e-6);

  PointCloudSequence flat = raw;
  for (std::size_t i = 0; i < flat.data.size(); i += 6) flat.data[i] = flat.data[i + 1] = flat.data[i + 2] = 1.0f;
  CHECK(kind_of([&] { normalize_sequence(flat); }) == ErrorKind::kDegenerateBounds);
}
