#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace pc4d {

struct Vec3 {
  float x = 0, y = 0, z = 0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(float s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(Vec3 a, Vec3 b) = default;
};

inline double dot(Vec3 a, Vec3 b) {
  return double(a.x) * b.x + double(a.y) * b.y + double(a.z) * b.z;
}
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline double distance(Vec3 a, Vec3 b) { return norm(a - b); }

inline double triangle_area(Vec3 a, Vec3 b, Vec3 c) {
  const double ux = double(b.x) - a.x, uy = double(b.y) - a.y, uz = double(b.z) - a.z;
  const double vx = double(c.x) - a.x, vy = double(c.y) - a.y, vz = double(c.z) - a.z;
  const double cx = uy * vz - uz * vy, cy = uz * vx - ux * vz, cz = ux * vy - uy * vx;
  return 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
}

using Face = std::array<std::uint32_t, 3>;
using Rgb = std::array<float, 3>;

// Row-major 3x3 plus translation, applied in double and rounded once.
struct Affine3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<double, 3> t{0, 0, 0};

  Vec3 apply(Vec3 p) const {
    return {static_cast<float>(m[0] * p.x + m[1] * p.y + m[2] * p.z + t[0]),
            static_cast<float>(m[3] * p.x + m[4] * p.y + m[5] * p.z + t[1]),
            static_cast<float>(m[6] * p.x + m[7] * p.y + m[8] * p.z + t[2])};
  }

  // Rotation by `angle` radians about a unit axis (0 = x, 1 = y, 2 = z).
  static Affine3 rotation(int axis, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    Affine3 r;
    switch (axis) {
      case 0: r.m = {1, 0, 0, 0, c, -s, 0, s, c}; break;
      case 1: r.m = {c, 0, s, 0, 1, 0, -s, 0, c}; break;
      default: r.m = {c, -s, 0, s, c, 0, 0, 0, 1}; break;
    }
    return r;
  }
};

}  // namespace pc4d
