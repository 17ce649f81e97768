#pragma once

// Frame-0 surface sampling and barycentric re-evaluation: every point keeps the
// same (triangle, u, v, w) anchor in every frame, which is what makes the
// resulting (T, N, 6) sequence point-to-point consistent.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pc4d/geometry.hpp"
#include "pc4d/mesh.hpp"

namespace pc4d {

using Barycentric = std::array<float, 3>;

struct SampleAnchors {
  std::vector<std::uint32_t> triangle_index;
  std::vector<Barycentric> barycentric;
  std::vector<Rgb> color;
  // Leading anchors placed by dart throwing; the rest (if any) are uniform top-up.
  std::size_t poisson_accepted = 0;

  std::size_t size() const { return triangle_index.size(); }
};

struct MeshFrame {
  std::span<const Vec3> positions;
  std::span<const Face> faces;
};

inline MeshFrame mesh_frame(const MeshAnimation& anim, std::size_t t) { return {anim.frame(t), anim.faces}; }

struct PointCloudSequence {
  static constexpr std::size_t kChannels = 6;

  std::size_t T = 0;
  std::size_t N = 0;
  std::vector<float> data;  // frame-major: ((t * N) + i) * 6 + channel
  std::array<float, 3> norm_center{0, 0, 0};
  float norm_scale = 1.0f;
  std::string asset_id;
  bool poisson_underfilled = false;  // not persisted

  float* point(std::size_t t, std::size_t i) { return data.data() + (t * N + i) * kChannels; }
  const float* point(std::size_t t, std::size_t i) const { return data.data() + (t * N + i) * kChannels; }
  std::span<const float> frame(std::size_t t) const { return {data.data() + t * N * kChannels, N * kChannels}; }
};

enum class SampleMode { kUniform, kPoisson };
SampleMode parse_sample_mode(const std::string& name);

enum class UnderfillPolicy {
  kThrow,   // PoissonUnderfill
  kTopUp,   // fill the remainder uniformly and flag it
  kPartial  // return only the dart-accepted anchors
};

struct PoissonOptions {
  double radius = 0.0;  // <= 0: sqrt(total_area / (N * pi)) * 0.7
  double dart_factor = 30.0;
  UnderfillPolicy underfill = UnderfillPolicy::kThrow;
};

double default_poisson_radius(double total_area, std::size_t n);

// Largest-remainder apportionment of n over non-negative weights; ties on the
// fractional part go to the lowest index.
std::vector<std::size_t> allocate_points_by_area(std::span<const double> areas, std::size_t n);

// Connected components over shared vertices; returns one label per face, labels
// numbered by first appearance.
std::vector<std::uint32_t> face_components(std::span<const Face> faces, std::size_t vertex_count);

SampleAnchors sample_surface(const MeshFrame& frame0, std::size_t n, SampleMode mode, std::uint64_t seed,
                             const PoissonOptions& poisson = {});

std::vector<Vec3> reconstruct_frame(const SampleAnchors& anchors, const MeshFrame& frame_t);

SampleAnchors assign_colors(SampleAnchors anchors, const MeshAnimation& anim);

struct SequenceOptions {
  std::size_t points = 8192;
  SampleMode mode = SampleMode::kUniform;
  std::uint64_t seed = 0;
  PoissonOptions poisson{0.0, 30.0, UnderfillPolicy::kTopUp};
  bool normalize = true;
};

PointCloudSequence build_sequence(const MeshAnimation& anim, std::span<const int> frame_indices,
                                  const SequenceOptions& opts);

// Whole-sequence centering and unit-ball scaling. The returned norm_center /
// norm_scale describe this call's transform: original = stored * scale + center.
PointCloudSequence normalize_sequence(const PointCloudSequence& seq);
PointCloudSequence denormalize_sequence(const PointCloudSequence& seq);

}  // namespace pc4d
