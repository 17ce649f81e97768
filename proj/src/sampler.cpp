#include "pc4d/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <unordered_map>

#include "pc4d/error.hpp"
#include "pc4d/kernels.hpp"
#include "pc4d/rng.hpp"

namespace pc4d {

SampleMode parse_sample_mode(const std::string& name) {
  if (name == "uniform") return SampleMode::kUniform;
  if (name == "poisson") return SampleMode::kPoisson;
  fail(ErrorKind::kInvalidArgument, "unknown sample mode '" + name + "'");
}

double default_poisson_radius(double total_area, std::size_t n) {
  return std::sqrt(total_area / (static_cast<double>(n) * std::numbers::pi)) * 0.7;
}

std::vector<std::size_t> allocate_points_by_area(std::span<const double> areas, std::size_t n) {
  if (n == 0) fail(ErrorKind::kInvalidArgument, "allocate_points_by_area needs N >= 1");
  double total = 0;
  for (double a : areas) {
    if (!(a >= 0) || !std::isfinite(a)) fail(ErrorKind::kInvalidArgument, "areas must be finite and non-negative");
    total += a;
  }
  if (!(total > 0)) fail(ErrorKind::kAllZeroAreas, "total area is zero");

  std::vector<std::size_t> counts(areas.size());
  std::vector<double> remainder(areas.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < areas.size(); ++i) {
    // Remainders kept in units of total/n so equal fractions compare equal.
    const double scaled = static_cast<double>(n) * areas[i];
    remainder[i] = std::fmod(scaled, total);
    counts[i] = static_cast<std::size_t>(std::llround((scaled - remainder[i]) / total));
    assigned += counts[i];
  }
  // Rounding can only leave a shortfall in [0, size); hand it out by remainder.
  std::vector<std::size_t> order(areas.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return remainder[a] > remainder[b];
  });
  for (std::size_t k = 0; assigned < n; ++k) {
    const std::size_t i = order[k % order.size()];
    if (areas[i] == 0) continue;
    ++counts[i];
    ++assigned;
  }
  while (assigned > n) {  // floating overshoot guard; never hit for sane inputs
    const std::size_t i = order.back();
    if (counts[i] > 0) {
      --counts[i];
      --assigned;
    }
    order.pop_back();
  }
  return counts;
}

std::vector<std::uint32_t> face_components(std::span<const Face> faces, std::size_t vertex_count) {
  std::vector<std::uint32_t> parent(vertex_count);
  std::iota(parent.begin(), parent.end(), 0u);
  auto find = [&](std::uint32_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (const auto& f : faces) {
    const auto a = find(f[0]);
    for (int k = 1; k < 3; ++k) {
      const auto b = find(f[k]);
      if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
  }
  std::unordered_map<std::uint32_t, std::uint32_t> label;
  std::vector<std::uint32_t> out(faces.size());
  for (std::size_t i = 0; i < faces.size(); ++i) {
    const auto root = find(faces[i][0]);
    auto [it, inserted] = label.try_emplace(root, static_cast<std::uint32_t>(label.size()));
    out[i] = it->second;
  }
  return out;
}

namespace {

Barycentric draw_barycentric(Rng& rng) {
  const double r1 = rng.uniform(), r2 = rng.uniform();
  const double s = std::sqrt(r1);
  const double u = 1.0 - s, v = s * (1.0 - r2);
  return {static_cast<float>(u), static_cast<float>(v), static_cast<float>(1.0 - u - v)};
}

// Area-weighted triangle choice over a subset of faces.
class TrianglePicker {
 public:
  TrianglePicker(std::vector<std::uint32_t> tris, const std::vector<double>& areas) : tris_(std::move(tris)) {
    cdf_.reserve(tris_.size());
    double acc = 0;
    for (auto t : tris_) {
      acc += areas[t];
      cdf_.push_back(acc);
    }
  }
  double total() const { return cdf_.empty() ? 0.0 : cdf_.back(); }
  std::uint32_t pick(Rng& rng) const {
    const double x = rng.uniform() * total();
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), x);
    if (it == cdf_.end()) --it;  // x == total only through rounding
    return tris_[static_cast<std::size_t>(it - cdf_.begin())];
  }

 private:
  std::vector<std::uint32_t> tris_;
  std::vector<double> cdf_;
};

Vec3 anchor_position(const MeshFrame& frame, std::uint32_t tri, const Barycentric& b) {
  const Face& f = frame.faces[tri];
  const Vec3 a = frame.positions[f[0]], bb = frame.positions[f[1]], c = frame.positions[f[2]];
  return {b[0] * a.x + b[1] * bb.x + b[2] * c.x, b[0] * a.y + b[1] * bb.y + b[2] * c.y,
          b[0] * a.z + b[1] * bb.z + b[2] * c.z};
}

// Uniform hash grid with cell edge r; a candidate only needs its 27 neighbours.
class SpacingGrid {
 public:
  explicit SpacingGrid(double r) : r_(r), r2_(r * r) {}

  bool admissible(Vec3 p) const {
    const auto [cx, cy, cz] = cell(p);
    for (long long dx = -1; dx <= 1; ++dx)
      for (long long dy = -1; dy <= 1; ++dy)
        for (long long dz = -1; dz <= 1; ++dz) {
          auto it = cells_.find(key(cx + dx, cy + dy, cz + dz));
          if (it == cells_.end()) continue;
          for (const Vec3& q : it->second) {
            const Vec3 d = p - q;
            if (dot(d, d) < r2_) return false;
          }
        }
    return true;
  }

  void insert(Vec3 p) {
    const auto [cx, cy, cz] = cell(p);
    cells_[key(cx, cy, cz)].push_back(p);
  }

 private:
  std::array<long long, 3> cell(Vec3 p) const {
    return {static_cast<long long>(std::floor(p.x / r_)), static_cast<long long>(std::floor(p.y / r_)),
            static_cast<long long>(std::floor(p.z / r_))};
  }
  static std::uint64_t key(long long x, long long y, long long z) {
    return mix64(static_cast<std::uint64_t>(x) * 0x9e3779b97f4a7c15ULL ^ static_cast<std::uint64_t>(y) * 0xc2b2ae3d27d4eb4fULL ^
                 static_cast<std::uint64_t>(z) * 0x165667b19e3779f9ULL);
  }
  double r_, r2_;
  std::unordered_map<std::uint64_t, std::vector<Vec3>> cells_;
};

}  // namespace

SampleAnchors sample_surface(const MeshFrame& frame0, std::size_t n, SampleMode mode, std::uint64_t seed,
                             const PoissonOptions& poisson) {
  if (n == 0) fail(ErrorKind::kInvalidArgument, "sample_surface needs N >= 1");
  std::vector<double> areas(frame0.faces.size());
  double total = 0;
  for (std::size_t i = 0; i < frame0.faces.size(); ++i) {
    const Face& f = frame0.faces[i];
    if (f[0] >= frame0.positions.size() || f[1] >= frame0.positions.size() || f[2] >= frame0.positions.size())
      fail(ErrorKind::kTopologyMismatch, "face " + std::to_string(i) + " out of range");
    areas[i] = triangle_area(frame0.positions[f[0]], frame0.positions[f[1]], frame0.positions[f[2]]);
    total += areas[i];
  }
  if (!(total > 0)) fail(ErrorKind::kAllZeroAreas, "surface has zero total area");

  Rng rng(seed);
  SampleAnchors out;
  out.triangle_index.reserve(n);
  out.barycentric.reserve(n);

  auto emit = [&](std::uint32_t tri, const Barycentric& b) {
    out.triangle_index.push_back(tri);
    out.barycentric.push_back(b);
  };

  std::vector<std::uint32_t> all(frame0.faces.size());
  std::iota(all.begin(), all.end(), 0u);

  if (mode == SampleMode::kUniform) {
    // Each connected component is one flattened sub-mesh; points are split
    // across components by area first, then drawn area-weighted inside each.
    const auto comp = face_components(frame0.faces, frame0.positions.size());
    const std::uint32_t n_comp = comp.empty() ? 0 : *std::max_element(comp.begin(), comp.end()) + 1;
    std::vector<double> comp_area(n_comp, 0.0);
    std::vector<std::vector<std::uint32_t>> comp_tris(n_comp);
    for (std::size_t i = 0; i < comp.size(); ++i) {
      comp_area[comp[i]] += areas[i];
      comp_tris[comp[i]].push_back(static_cast<std::uint32_t>(i));
    }
    const auto counts = allocate_points_by_area(comp_area, n);
    for (std::uint32_t c = 0; c < n_comp; ++c) {
      if (counts[c] == 0) continue;
      TrianglePicker picker(std::move(comp_tris[c]), areas);
      for (std::size_t k = 0; k < counts[c]; ++k) {
        const auto tri = picker.pick(rng);
        emit(tri, draw_barycentric(rng));
      }
    }
    return out;
  }

  const double r = poisson.radius > 0 ? poisson.radius : default_poisson_radius(total, n);
  const auto budget = static_cast<std::size_t>(std::ceil(poisson.dart_factor * static_cast<double>(n)));
  TrianglePicker picker(all, areas);
  SpacingGrid grid(r);
  for (std::size_t dart = 0; dart < budget && out.size() < n; ++dart) {
    const auto tri = picker.pick(rng);
    const auto b = draw_barycentric(rng);
    const Vec3 p = anchor_position(frame0, tri, b);
    if (!grid.admissible(p)) continue;
    grid.insert(p);
    emit(tri, b);
  }
  out.poisson_accepted = out.size();
  if (out.size() < n) {
    switch (poisson.underfill) {
      case UnderfillPolicy::kThrow:
        fail(ErrorKind::kPoissonUnderfill, "placed " + std::to_string(out.size()) + " of " + std::to_string(n) +
                                               " points at spacing " + std::to_string(r));
      case UnderfillPolicy::kPartial:
        break;
      case UnderfillPolicy::kTopUp:
        while (out.size() < n) {
          const auto tri = picker.pick(rng);
          emit(tri, draw_barycentric(rng));
        }
        break;
    }
  }
  return out;
}

std::vector<Vec3> reconstruct_frame(const SampleAnchors& anchors, const MeshFrame& frame_t) {
  for (auto tri : anchors.triangle_index)
    if (tri >= frame_t.faces.size())
      fail(ErrorKind::kTopologyMismatch, "anchor triangle " + std::to_string(tri) + " >= face count " +
                                             std::to_string(frame_t.faces.size()));
  for (const auto& f : frame_t.faces)
    for (auto idx : f)
      if (idx >= frame_t.positions.size()) fail(ErrorKind::kTopologyMismatch, "face index beyond vertex count");
  std::vector<Vec3> out(anchors.size());
  kernels::reconstruct(anchors.triangle_index, anchors.barycentric, frame_t.faces, frame_t.positions, out);
  return out;
}

SampleAnchors assign_colors(SampleAnchors anchors, const MeshAnimation& anim) {
  anchors.color.resize(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    Rgb c{0.5f, 0.5f, 0.5f};
    if (anim.vertex_colors) {
      const Face& f = anim.faces.at(anchors.triangle_index[i]);
      const auto& b = anchors.barycentric[i];
      const auto& vc = *anim.vertex_colors;
      for (int ch = 0; ch < 3; ++ch) c[ch] = b[0] * vc[f[0]][ch] + b[1] * vc[f[1]][ch] + b[2] * vc[f[2]][ch];
    } else if (anim.base_color) {
      c = *anim.base_color;
    }
    for (auto& ch : c) ch = std::clamp(ch, 0.0f, 1.0f);
    anchors.color[i] = c;
  }
  return anchors;
}

PointCloudSequence build_sequence(const MeshAnimation& anim, std::span<const int> frame_indices,
                                  const SequenceOptions& opts) {
  check_topology(anim);
  if (frame_indices.empty()) fail(ErrorKind::kInvalidArgument, "build_sequence needs at least one frame index");
  for (int idx : frame_indices)
    if (idx < 0 || static_cast<std::size_t>(idx) >= anim.frame_count())
      fail(ErrorKind::kInvalidArgument, "frame index " + std::to_string(idx) + " out of range");

  const auto first = static_cast<std::size_t>(frame_indices.front());
  SampleAnchors anchors = sample_surface(mesh_frame(anim, first), opts.points, opts.mode,
                                         derive_seed(opts.seed, anim.asset_id), opts.poisson);
  anchors = assign_colors(std::move(anchors), anim);

  PointCloudSequence seq;
  seq.asset_id = anim.asset_id;
  seq.T = frame_indices.size();
  seq.N = anchors.size();
  seq.poisson_underfilled = opts.mode == SampleMode::kPoisson && anchors.poisson_accepted < anchors.size();
  seq.data.resize(seq.T * seq.N * PointCloudSequence::kChannels);

  const auto frames = static_cast<std::int64_t>(seq.T);
#pragma omp parallel for schedule(static) if (frames > 1 && seq.N > 2048)
  for (std::int64_t t = 0; t < frames; ++t) {
    const auto pts = reconstruct_frame(anchors, mesh_frame(anim, static_cast<std::size_t>(frame_indices[t])));
    for (std::size_t i = 0; i < seq.N; ++i) {
      float* p = seq.point(static_cast<std::size_t>(t), i);
      p[0] = pts[i].x;
      p[1] = pts[i].y;
      p[2] = pts[i].z;
      p[3] = anchors.color[i][0];
      p[4] = anchors.color[i][1];
      p[5] = anchors.color[i][2];
    }
  }
  return opts.normalize ? normalize_sequence(seq) : seq;
}

PointCloudSequence normalize_sequence(const PointCloudSequence& seq) {
  const std::size_t count = seq.T * seq.N;
  if (count == 0) fail(ErrorKind::kDegenerateBounds, "empty sequence");
  double cx = 0, cy = 0, cz = 0;
  for (std::size_t k = 0; k < count; ++k) {
    const float* p = seq.data.data() + k * PointCloudSequence::kChannels;
    cx += p[0];
    cy += p[1];
    cz += p[2];
  }
  cx /= static_cast<double>(count);
  cy /= static_cast<double>(count);
  cz /= static_cast<double>(count);
  double radius = 0;
  for (std::size_t k = 0; k < count; ++k) {
    const float* p = seq.data.data() + k * PointCloudSequence::kChannels;
    const double dx = p[0] - cx, dy = p[1] - cy, dz = p[2] - cz;
    radius = std::max(radius, std::sqrt(dx * dx + dy * dy + dz * dz));
  }
  if (!(radius > 0) || !std::isfinite(radius)) fail(ErrorKind::kDegenerateBounds, "all points coincide");

  PointCloudSequence out = seq;
  for (std::size_t k = 0; k < count; ++k) {
    float* p = out.data.data() + k * PointCloudSequence::kChannels;
    p[0] = static_cast<float>((p[0] - cx) / radius);
    p[1] = static_cast<float>((p[1] - cy) / radius);
    p[2] = static_cast<float>((p[2] - cz) / radius);
  }
  out.norm_center = {static_cast<float>(cx), static_cast<float>(cy), static_cast<float>(cz)};
  out.norm_scale = static_cast<float>(radius);
  return out;
}

PointCloudSequence denormalize_sequence(const PointCloudSequence& seq) {
  PointCloudSequence out = seq;
  const std::size_t count = seq.T * seq.N;
  for (std::size_t k = 0; k < count; ++k) {
    float* p = out.data.data() + k * PointCloudSequence::kChannels;
    for (int c = 0; c < 3; ++c)
      p[c] = static_cast<float>(static_cast<double>(p[c]) * seq.norm_scale + seq.norm_center[c]);
  }
  out.norm_center = {0, 0, 0};
  out.norm_scale = 1.0f;
  return out;
}

}  // namespace pc4d
