#include "pc4d/mesh.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <system_error>

#include "pc4d/bytes.hpp"
#include "pc4d/error.hpp"
#include "pc4d/rng.hpp"

namespace pc4d {

namespace {

constexpr char kM4dMagic[4] = {'M', '4', 'D', 'A'};
constexpr std::uint32_t kM4dVersion = 1;

}  // namespace

AnimationFormat parse_animation_format(const std::string& name) {
  if (name == "obj-seq" || name == "obj_sequence") return AnimationFormat::kObjSequence;
  if (name == "m4d" || name == "m4d_interchange") return AnimationFormat::kM4d;
  fail(ErrorKind::kInvalidArgument, "unknown animation format '" + name + "'");
}

void check_topology(const MeshAnimation& anim) {
  if (anim.frames.empty()) fail(ErrorKind::kEmptyAnimation, anim.asset_id + " has no frames");
  const std::size_t v = anim.frames.front().size();
  for (std::size_t t = 1; t < anim.frames.size(); ++t) {
    if (anim.frames[t].size() != v)
      fail(ErrorKind::kTopologyMismatch, "frame " + std::to_string(t) + " has " +
                                             std::to_string(anim.frames[t].size()) + " vertices, frame 0 has " +
                                             std::to_string(v));
  }
  for (std::size_t f = 0; f < anim.faces.size(); ++f) {
    for (auto idx : anim.faces[f])
      if (idx >= v)
        fail(ErrorKind::kTopologyMismatch,
             "face " + std::to_string(f) + " references vertex " + std::to_string(idx) + " >= " + std::to_string(v));
  }
  if (anim.vertex_colors && anim.vertex_colors->size() != v)
    fail(ErrorKind::kTopologyMismatch, "vertex color count differs from vertex count");
}

// ---------------------------------------------------------------------------
// .m4d container

MeshAnimation parse_m4d(std::span<const std::uint8_t> bytes, const std::string& asset_id) {
  if (bytes.size() < 4 || !std::equal(kM4dMagic, kM4dMagic + 4, bytes.begin()))
    fail(ErrorKind::kBadMagic, "not an M4DA container");
  auto body = verify_trailing_crc(bytes);
  ByteReader in(body);
  in.raw(4);
  const auto version = in.u32();
  if (version != kM4dVersion) fail(ErrorKind::kVersionUnsupported, "m4d version " + std::to_string(version));
  const auto v = in.u32();
  const auto f = in.u32();
  const auto face_count = in.u32();
  const auto has_colors = in.u8();
  if (f == 0) fail(ErrorKind::kEmptyAnimation, asset_id + ": zero frames");
  if (has_colors > 1) fail(ErrorKind::kParse, "has_colors flag must be 0 or 1 at byte offset 20");

  MeshAnimation anim;
  anim.asset_id = asset_id;
  // Validate the declared sizes against the body before allocating.
  const std::uint64_t expected = 21ull + 12ull * face_count + 12ull * f * v + (has_colors ? 12ull * v : 0ull);
  if (expected != body.size())
    fail(ErrorKind::kParse, "declared sizes imply " + std::to_string(expected) + " bytes, body has " +
                                std::to_string(body.size()) + " (byte offset " + std::to_string(in.offset()) + ")");
  anim.faces.resize(face_count);
  for (auto& face : anim.faces)
    for (auto& idx : face) idx = in.u32();
  anim.frames.assign(f, std::vector<Vec3>(v));
  for (auto& frame : anim.frames)
    for (auto& p : frame) {
      p.x = in.f32();
      p.y = in.f32();
      p.z = in.f32();
    }
  if (has_colors) {
    std::vector<Rgb> colors(v);
    for (auto& c : colors)
      for (auto& ch : c) ch = in.f32();
    anim.vertex_colors = std::move(colors);
  }
  check_topology(anim);
  return anim;
}

void save_m4d(const MeshAnimation& anim, const std::filesystem::path& path) {
  check_topology(anim);
  ByteWriter out;
  out.raw(std::string_view(kM4dMagic, 4));
  out.u32(kM4dVersion);
  out.u32(static_cast<std::uint32_t>(anim.vertex_count()));
  out.u32(static_cast<std::uint32_t>(anim.frame_count()));
  out.u32(static_cast<std::uint32_t>(anim.faces.size()));
  out.u8(anim.vertex_colors ? 1 : 0);
  for (const auto& face : anim.faces)
    for (auto idx : face) out.u32(idx);
  for (const auto& frame : anim.frames)
    for (const auto& p : frame) {
      out.f32(p.x);
      out.f32(p.y);
      out.f32(p.z);
    }
  if (anim.vertex_colors)
    for (const auto& c : *anim.vertex_colors)
      for (auto ch : c) out.f32(ch);
  out.append_crc();
  write_file(path, out.bytes());
}

// ---------------------------------------------------------------------------
// OBJ sequence

namespace {

struct ObjFrame {
  std::vector<Vec3> vertices;
  std::vector<Rgb> colors;
  std::vector<Face> faces;
};

[[noreturn]] void obj_error(const std::filesystem::path& file, std::size_t offset, const std::string& msg) {
  fail(ErrorKind::kParse, file.filename().string() + " at byte offset " + std::to_string(offset) + ": " + msg);
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

bool parse_float(std::string_view s, float& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

ObjFrame parse_obj(const std::filesystem::path& file) {
  const std::string text = read_text_file(file);
  ObjFrame frame;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string_view line(text.data() + pos, end - pos);
    const auto tok = split_ws(line);
    if (!tok.empty() && tok[0][0] != '#') {
      if (tok[0] == "v") {
        if (tok.size() != 4 && tok.size() != 7) obj_error(file, pos, "vertex record needs 3 or 6 numbers");
        float vals[6] = {};
        for (std::size_t i = 1; i < tok.size(); ++i)
          if (!parse_float(tok[i], vals[i - 1])) obj_error(file, pos, "bad number '" + std::string(tok[i]) + "'");
        frame.vertices.push_back({vals[0], vals[1], vals[2]});
        if (tok.size() == 7) frame.colors.push_back({vals[3], vals[4], vals[5]});
      } else if (tok[0] == "f") {
        if (tok.size() < 4) obj_error(file, pos, "face record needs at least 3 indices");
        std::vector<std::uint32_t> poly;
        for (std::size_t i = 1; i < tok.size(); ++i) {
          const auto slash = tok[i].find('/');
          const auto head = tok[i].substr(0, slash);
          long long idx = 0;
          auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), idx);
          if (ec != std::errc() || ptr != head.data() + head.size() || idx == 0)
            obj_error(file, pos, "bad face index '" + std::string(tok[i]) + "'");
          const long long nv = static_cast<long long>(frame.vertices.size());
          const long long zero_based = idx > 0 ? idx - 1 : nv + idx;
          if (zero_based < 0) obj_error(file, pos, "negative face index out of range");
          poly.push_back(static_cast<std::uint32_t>(zero_based));
        }
        for (std::size_t i = 1; i + 1 < poly.size(); ++i) frame.faces.push_back({poly[0], poly[i], poly[i + 1]});
      }
      // vt, vn, o, g, s, usemtl, mtllib: not needed.
    }
    pos = end + 1;
  }
  if (!frame.colors.empty() && frame.colors.size() != frame.vertices.size())
    obj_error(file, 0, "vertex colors given for only some vertices");
  return frame;
}

void append_float(std::string& out, float v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

std::vector<std::filesystem::path> obj_frame_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(ErrorKind::kIo, dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("frame_", 0) == 0 && entry.path().extension() == ".obj")
      files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

void save_obj_sequence(const MeshAnimation& anim, const std::filesystem::path& dir) {
  check_topology(anim);
  std::filesystem::create_directories(dir);
  for (std::size_t t = 0; t < anim.frame_count(); ++t) {
    std::string text = "# " + anim.asset_id + " frame " + std::to_string(t) + "\n";
    for (std::size_t v = 0; v < anim.vertex_count(); ++v) {
      const auto& p = anim.frames[t][v];
      text += "v ";
      append_float(text, p.x);
      text += ' ';
      append_float(text, p.y);
      text += ' ';
      append_float(text, p.z);
      if (anim.vertex_colors) {
        for (auto ch : (*anim.vertex_colors)[v]) {
          text += ' ';
          append_float(text, ch);
        }
      }
      text += '\n';
    }
    for (const auto& f : anim.faces)
      text += "f " + std::to_string(f[0] + 1) + ' ' + std::to_string(f[1] + 1) + ' ' + std::to_string(f[2] + 1) + '\n';
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.obj", t);
    write_text_file(dir / name, text);
  }
}

MeshAnimation load_mesh_animation(const std::filesystem::path& path, AnimationFormat format) {
  if (format == AnimationFormat::kM4d) return parse_m4d(read_file(path), path.stem().string());

  const auto files = obj_frame_files(path);
  if (files.empty()) fail(ErrorKind::kEmptyAnimation, "no frame_*.obj files in " + path.string());
  MeshAnimation anim;
  anim.asset_id = path.filename().empty() ? path.parent_path().filename().string() : path.filename().string();
  for (std::size_t t = 0; t < files.size(); ++t) {
    ObjFrame frame = parse_obj(files[t]);
    if (t == 0) {
      anim.faces = std::move(frame.faces);
      if (!frame.colors.empty()) anim.vertex_colors = std::move(frame.colors);
    } else {
      if (frame.vertices.size() != anim.frames[0].size())
        fail(ErrorKind::kTopologyMismatch, "frame " + std::to_string(t) + " has " +
                                               std::to_string(frame.vertices.size()) + " vertices, frame 0 has " +
                                               std::to_string(anim.frames[0].size()));
      if (frame.faces != anim.faces)
        fail(ErrorKind::kTopologyMismatch, "frame " + std::to_string(t) + " face buffer differs from frame 0");
    }
    anim.frames.push_back(std::move(frame.vertices));
  }
  check_topology(anim);
  return anim;
}

// ---------------------------------------------------------------------------
// Synthetic assets

std::string to_string(MotionKind k) {
  switch (k) {
    case MotionKind::kRigidRotation: return "rigid_rotation";
    case MotionKind::kOscillation: return "oscillation";
    case MotionKind::kHingeArticulation: return "hinge_articulation";
    case MotionKind::kTranslation: return "translation";
    case MotionKind::kStatic: return "static";
  }
  return "?";
}

std::string to_string(BaseShape s) {
  switch (s) {
    case BaseShape::kBox: return "box";
    case BaseShape::kCylinder: return "cylinder";
    case BaseShape::kBiped: return "biped";
  }
  return "?";
}

std::string to_string(ColorScheme c) {
  switch (c) {
    case ColorScheme::kNone: return "none";
    case ColorScheme::kRed: return "red";
    case ColorScheme::kGreen: return "green";
    case ColorScheme::kBlue: return "blue";
    case ColorScheme::kYellow: return "yellow";
    case ColorScheme::kWhite: return "white";
    case ColorScheme::kGradient: return "gradient";
  }
  return "?";
}

Rgb scheme_color(ColorScheme c) {
  switch (c) {
    case ColorScheme::kRed: return {0.9f, 0.1f, 0.1f};
    case ColorScheme::kGreen: return {0.1f, 0.8f, 0.2f};
    case ColorScheme::kBlue: return {0.1f, 0.2f, 0.9f};
    case ColorScheme::kYellow: return {0.95f, 0.85f, 0.1f};
    case ColorScheme::kWhite: return {1.0f, 1.0f, 1.0f};
    default: return {0.5f, 0.5f, 0.5f};
  }
}

namespace {

struct Part {
  std::size_t first_vertex;
  std::size_t vertex_count;
  Vec3 pivot;
  int swing;  // +1 / -1 / 0 for hinge motion
};

struct ShapeBuild {
  std::vector<Vec3> verts;
  std::vector<Face> faces;
  std::vector<Part> parts;
};

void add_box(ShapeBuild& b, Vec3 c, Vec3 half, Vec3 pivot, int swing) {
  const auto base = static_cast<std::uint32_t>(b.verts.size());
  for (int i = 0; i < 8; ++i) {
    b.verts.push_back({c.x + ((i & 1) ? half.x : -half.x), c.y + ((i & 2) ? half.y : -half.y),
                       c.z + ((i & 4) ? half.z : -half.z)});
  }
  // Outward-facing, counter-clockwise.
  static constexpr std::uint32_t kFaces[12][3] = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
                                                  {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  for (const auto& f : kFaces) b.faces.push_back({base + f[0], base + f[1], base + f[2]});
  b.parts.push_back({base, 8, pivot, swing});
}

ShapeBuild build_shape(BaseShape shape, Rng& rng) {
  ShapeBuild b;
  const float sx = static_cast<float>(rng.uniform(0.85, 1.15));
  const float sy = static_cast<float>(rng.uniform(0.85, 1.15));
  const float sz = static_cast<float>(rng.uniform(0.85, 1.15));
  switch (shape) {
    case BaseShape::kBox: {
      add_box(b, {0, 0, 0}, {0.5f * sx, 0.5f * sy, 0.5f * sz}, {}, 0);
      break;
    }
    case BaseShape::kCylinder: {
      constexpr std::uint32_t kSeg = 16;
      const float r = 0.4f * sx, h = 0.6f * sy;
      for (int ring = 0; ring < 2; ++ring)
        for (std::uint32_t i = 0; i < kSeg; ++i) {
          const double a = 2.0 * std::numbers::pi * i / kSeg;
          b.verts.push_back({static_cast<float>(r * std::cos(a)), ring ? h : -h, static_cast<float>(r * std::sin(a))});
        }
      b.verts.push_back({0, -h, 0});
      b.verts.push_back({0, h, 0});
      const std::uint32_t bottom = 2 * kSeg, top = 2 * kSeg + 1;
      for (std::uint32_t i = 0; i < kSeg; ++i) {
        const std::uint32_t j = (i + 1) % kSeg;
        b.faces.push_back({i, kSeg + i, j});
        b.faces.push_back({j, kSeg + i, kSeg + j});
        b.faces.push_back({bottom, i, j});
        b.faces.push_back({top, kSeg + j, kSeg + i});
      }
      b.parts.push_back({0, b.verts.size(), {}, 0});
      break;
    }
    case BaseShape::kBiped: {
      add_box(b, {0, 0.15f * sy, 0}, {0.22f * sx, 0.3f * sy, 0.12f * sz}, {}, 0);                      // torso
      add_box(b, {0, 0.6f * sy, 0}, {0.13f, 0.13f, 0.13f}, {}, 0);                                     // head
      add_box(b, {-0.32f * sx, 0.2f * sy, 0}, {0.07f, 0.25f * sy, 0.07f}, {-0.32f * sx, 0.43f * sy, 0}, 1);  // arms
      add_box(b, {0.32f * sx, 0.2f * sy, 0}, {0.07f, 0.25f * sy, 0.07f}, {0.32f * sx, 0.43f * sy, 0}, -1);
      add_box(b, {-0.12f * sx, -0.45f * sy, 0}, {0.08f, 0.3f * sy, 0.08f}, {-0.12f * sx, -0.15f * sy, 0}, -1);  // legs
      add_box(b, {0.12f * sx, -0.45f * sy, 0}, {0.08f, 0.3f * sy, 0.08f}, {0.12f * sx, -0.15f * sy, 0}, 1);
      break;
    }
  }
  return b;
}

}  // namespace

MeshAnimation generate_synthetic_asset(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.frame_count < 1) fail(ErrorKind::kInvalidArgument, "SynthSpec.frame_count must be >= 1");
  if (!(spec.amplitude >= 0)) fail(ErrorKind::kInvalidArgument, "SynthSpec.amplitude must be >= 0");
  if (spec.period_frames < 1) fail(ErrorKind::kInvalidArgument, "SynthSpec.period_frames must be >= 1");
  if (spec.axis < 0 || spec.axis > 2) fail(ErrorKind::kInvalidArgument, "SynthSpec.axis must be 0, 1 or 2");

  Rng rng(derive_seed(seed, spec.asset_id));
  ShapeBuild shape = build_shape(spec.base_shape, rng);
  const std::vector<Vec3>& rest = shape.verts;

  MeshAnimation anim;
  anim.asset_id = spec.asset_id;
  anim.faces = shape.faces;
  const double sign = spec.reverse ? -1.0 : 1.0;
  const double two_pi = 2.0 * std::numbers::pi;

  for (int t = 0; t < spec.frame_count; ++t) {
    const double phase = two_pi * t / spec.period_frames;
    std::vector<Vec3> frame(rest.size());
    switch (spec.kind) {
      case MotionKind::kStatic:
        frame = rest;
        break;
      case MotionKind::kRigidRotation: {
        const auto r = Affine3::rotation(spec.axis, sign * phase);
        for (std::size_t v = 0; v < rest.size(); ++v) frame[v] = r.apply(rest[v]);
        break;
      }
      case MotionKind::kOscillation: {
        Affine3 a;
        a.t[spec.axis] = spec.amplitude * std::sin(phase);
        for (std::size_t v = 0; v < rest.size(); ++v) frame[v] = a.apply(rest[v]);
        break;
      }
      case MotionKind::kTranslation: {
        Affine3 a;
        a.t[spec.axis] = sign * spec.amplitude * t / spec.period_frames;
        for (std::size_t v = 0; v < rest.size(); ++v) frame[v] = a.apply(rest[v]);
        break;
      }
      case MotionKind::kHingeArticulation: {
        const double angle = sign * spec.amplitude * std::sin(phase);
        const int hinge_axis = spec.axis;
        frame = rest;
        if (spec.base_shape == BaseShape::kBiped) {
          for (const auto& part : shape.parts) {
            if (part.swing == 0) continue;
            auto r = Affine3::rotation(hinge_axis, part.swing * angle);
            for (std::size_t v = part.first_vertex; v < part.first_vertex + part.vertex_count; ++v) {
              const Vec3 rel = rest[v] - part.pivot;
              frame[v] = r.apply(rel) + part.pivot;
            }
          }
        } else {
          // Upper half folds about a hinge through the origin.
          auto r = Affine3::rotation(hinge_axis, angle);
          for (std::size_t v = 0; v < rest.size(); ++v)
            if (rest[v].y > 0) frame[v] = r.apply(rest[v]);
        }
        break;
      }
    }
    anim.frames.push_back(std::move(frame));
  }

  if (spec.color_scheme == ColorScheme::kGradient) {
    float lo = rest.front().y, hi = rest.front().y;
    for (const auto& p : rest) {
      lo = std::min(lo, p.y);
      hi = std::max(hi, p.y);
    }
    std::vector<Rgb> colors;
    for (const auto& p : rest) {
      const float s = hi > lo ? (p.y - lo) / (hi - lo) : 0.0f;
      colors.push_back({s, 0.2f, 1.0f - s});
    }
    anim.vertex_colors = std::move(colors);
  } else if (spec.color_scheme != ColorScheme::kNone) {
    anim.vertex_colors = std::vector<Rgb>(rest.size(), scheme_color(spec.color_scheme));
  }
  return anim;
}

// ---------------------------------------------------------------------------
// Frame range and selection

MeshAnimation clip_frame_range(const MeshAnimation& anim, int min_frames, int max_frames) {
  if (max_frames < 1 || min_frames > max_frames)
    fail(ErrorKind::kInvalidArgument, "clip_frame_range needs 1 <= min_frames <= max_frames");
  const auto n = static_cast<int>(anim.frame_count());
  if (n < min_frames)
    fail(ErrorKind::kTooFewFrames,
         anim.asset_id + " has " + std::to_string(n) + " frames, minimum is " + std::to_string(min_frames));
  if (n <= max_frames) return anim;
  MeshAnimation out = anim;
  out.frames.resize(static_cast<std::size_t>(max_frames));
  return out;
}

std::vector<int> select_frames_equidistant(int frame_count, int T) {
  if (T < 2 || frame_count < T)
    fail(ErrorKind::kInsufficientFrames,
         "need frame_count >= T >= 2, got frame_count=" + std::to_string(frame_count) + " T=" + std::to_string(T));
  std::vector<int> idx(static_cast<std::size_t>(T));
  const long long span = frame_count - 1, den = T - 1;
  for (long long j = 0; j < T; ++j) idx[j] = static_cast<int>((2 * j * span + den) / (2 * den));
  return idx;
}

// ---------------------------------------------------------------------------
// Motion filter

double bounding_box_diagonal(std::span<const Vec3> pts) {
  if (pts.empty()) return 0.0;
  Vec3 lo = pts.front(), hi = pts.front();
  for (const auto& p : pts) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  return distance(lo, hi);
}

std::vector<double> transition_scores(const MeshAnimation& anim) {
  if (anim.frame_count() < 2) fail(ErrorKind::kInsufficientFrames, "motion score needs at least 2 frames");
  const double diag = bounding_box_diagonal(anim.frame(0));
  if (!(diag > 0)) fail(ErrorKind::kDegenerateBounds, anim.asset_id + " has zero spatial extent in frame 0");
  const std::size_t v = anim.vertex_count();
  std::vector<double> scores;
  scores.reserve(anim.frame_count() - 1);
  for (std::size_t t = 1; t < anim.frame_count(); ++t) {
    double sum = 0;
    for (std::size_t i = 0; i < v; ++i) sum += distance(anim.frames[t][i], anim.frames[t - 1][i]);
    scores.push_back(v ? sum / static_cast<double>(v) / diag : 0.0);
  }
  return scores;
}

double motion_score(const MeshAnimation& anim) {
  const auto s = transition_scores(anim);
  double sum = 0;
  for (double x : s) sum += x;
  return sum / static_cast<double>(s.size());
}

std::vector<std::size_t> degenerate_triangles(const MeshAnimation& anim) {
  std::vector<std::size_t> out;
  if (anim.frames.empty()) return out;
  const auto f0 = anim.frame(0);
  const double diag = bounding_box_diagonal(f0);
  const double eps = 1e-12 * diag * diag;
  for (std::size_t i = 0; i < anim.faces.size(); ++i) {
    const auto& f = anim.faces[i];
    if (f[0] >= f0.size() || f[1] >= f0.size() || f[2] >= f0.size()) continue;
    if (triangle_area(f0[f[0]], f0[f[1]], f0[f[2]]) <= eps) out.push_back(i);
  }
  return out;
}

ValidationReport validate_animation(const MeshAnimation& anim, const FilterConfig& cfg) {
  ValidationReport r;
  try {
    check_topology(anim);
    r.topology_ok = true;
  } catch (const Error& e) {
    r.reasons.emplace_back(e.what());
  }
  r.frame_count_ok = static_cast<int>(anim.frame_count()) >= cfg.min_frames;
  if (!r.frame_count_ok)
    r.reasons.push_back("fewer than " + std::to_string(cfg.min_frames) + " frames (" +
                        std::to_string(anim.frame_count()) + ")");
  if (r.topology_ok) r.degenerate_triangles = degenerate_triangles(anim);

  bool motion_ok = false;
  if (r.topology_ok && anim.frame_count() >= 2) {
    try {
      const auto s = transition_scores(anim);
      double sum = 0;
      for (double x : s) {
        sum += x;
        r.max_transition = std::max(r.max_transition, x);
      }
      r.motion_score = sum / static_cast<double>(s.size());
      motion_ok = true;
      if (r.motion_score < cfg.motion_low) {
        motion_ok = false;
        r.reasons.push_back("static: motion score below " + std::to_string(cfg.motion_low));
      }
      if (r.max_transition > cfg.motion_high) {
        motion_ok = false;
        r.reasons.push_back("anomalous: a transition exceeds " + std::to_string(cfg.motion_high));
      }
    } catch (const Error& e) {
      r.reasons.emplace_back(e.what());
    }
  } else if (r.topology_ok) {
    r.reasons.push_back("motion score needs at least 2 frames");
  }
  r.accepted = r.topology_ok && r.frame_count_ok && motion_ok;
  return r;
}

}  // namespace pc4d
