#pragma once

// Animated mesh ingest: loading, synthesis, frame-range clipping, equidistant
// frame selection and the motion filter.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pc4d/geometry.hpp"

namespace pc4d {

// Per-frame vertex positions over one shared triangle index buffer.
struct MeshAnimation {
  std::string asset_id;
  std::vector<std::vector<Vec3>> frames;  // frames[t][v]
  std::vector<Face> faces;
  std::optional<std::vector<Rgb>> vertex_colors;
  std::optional<Rgb> base_color;

  std::size_t frame_count() const { return frames.size(); }
  std::size_t vertex_count() const { return frames.empty() ? 0 : frames.front().size(); }
  std::span<const Vec3> frame(std::size_t t) const { return frames.at(t); }
};

enum class AnimationFormat { kObjSequence, kM4d };

AnimationFormat parse_animation_format(const std::string& name);

// Throws TopologyMismatch (frame with differing V, face index out of range) or
// EmptyAnimation.
void check_topology(const MeshAnimation& anim);

MeshAnimation load_mesh_animation(const std::filesystem::path& path, AnimationFormat format);
void save_m4d(const MeshAnimation& anim, const std::filesystem::path& path);
// Writes frame_0000.obj, frame_0001.obj, ... into `dir` (created if missing).
void save_obj_sequence(const MeshAnimation& anim, const std::filesystem::path& dir);

MeshAnimation parse_m4d(std::span<const std::uint8_t> bytes, const std::string& asset_id);

enum class MotionKind { kRigidRotation, kOscillation, kHingeArticulation, kTranslation, kStatic };
enum class BaseShape { kBox, kCylinder, kBiped };
enum class ColorScheme { kNone, kRed, kGreen, kBlue, kYellow, kWhite, kGradient };

struct SynthSpec {
  MotionKind kind = MotionKind::kStatic;
  BaseShape base_shape = BaseShape::kBox;
  double amplitude = 0.0;
  int period_frames = 16;
  int frame_count = 16;
  ColorScheme color_scheme = ColorScheme::kNone;
  int axis = 1;          // rotation axis / hinge axis: 0 = x, 1 = y, 2 = z
  bool reverse = false;  // flips rotation sense and translation direction
  std::string asset_id = "synthetic";
};

std::string to_string(MotionKind k);
std::string to_string(BaseShape s);
std::string to_string(ColorScheme c);
Rgb scheme_color(ColorScheme c);

// Pure function of (spec, seed). The seed perturbs shape proportions only.
MeshAnimation generate_synthetic_asset(const SynthSpec& spec, std::uint64_t seed);

MeshAnimation clip_frame_range(const MeshAnimation& anim, int min_frames = 16, int max_frames = 200);

// round(j * (frame_count - 1) / (T - 1)) with round-half-up, in exact integer math.
std::vector<int> select_frames_equidistant(int frame_count, int T = 16);

double bounding_box_diagonal(std::span<const Vec3> pts);

// Per-transition mean vertex displacement over the frame-0 bbox diagonal.
std::vector<double> transition_scores(const MeshAnimation& anim);
double motion_score(const MeshAnimation& anim);

struct FilterConfig {
  int min_frames = 16;
  int max_frames = 200;
  double motion_low = 1e-4;   // sequence mean must reach this
  double motion_high = 0.5;   // no single transition may exceed this
};

struct ValidationReport {
  bool topology_ok = false;
  bool frame_count_ok = false;
  std::vector<std::size_t> degenerate_triangles;
  double motion_score = 0.0;
  double max_transition = 0.0;
  bool accepted = false;
  std::vector<std::string> reasons;
};

std::vector<std::size_t> degenerate_triangles(const MeshAnimation& anim);
ValidationReport validate_animation(const MeshAnimation& anim, const FilterConfig& cfg = {});

}  // namespace pc4d
