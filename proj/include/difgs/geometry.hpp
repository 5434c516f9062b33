#pragma once

#include <numbers>
#include <string>
#include <vector>

#include "difgs/common.hpp"

/**
 * Circular cone-beam acquisition geometry.
 *
 * World convention: isocenter at the origin, rotation axis = +z. At angle 0
 * the source sits at (sid, 0, 0) and the flat detector is centered on the
 * principal ray at distance sdd from the source. Detector rasters are
 * u-fastest; u runs along the in-plane tangent, v along +z.
 */
namespace difgs {

struct ViewPose {
  double angle = 0;       // radians
  Vec3 source_pos;        // mm
  Vec3 detector_origin;   // world position of the center of pixel (0,0)
  Vec3 detector_u_axis;   // unit
  Vec3 detector_v_axis;   // unit
  Vec3 principal_dir;     // unit, source -> detector
};

struct DetectorShape {
  std::size_t n_u = 0, n_v = 0;
  friend bool operator==(const DetectorShape&, const DetectorShape&) = default;
};

struct ScanGeometry {
  std::size_t n_views = 0;
  double sid = 0;  // source-isocenter distance, mm
  double sdd = 0;  // source-detector distance, mm
  DetectorShape det_shape;
  double det_spacing = 0;  // mm / pixel
  std::vector<ViewPose> poses;

  std::size_t pixels_per_view() const { return det_shape.n_u * det_shape.n_v; }
};

struct Ray {
  Vec3 p_s;  // source
  Vec3 p_d;  // detector point
  Vec3 at(double t) const { return p_s + t * (p_d - p_s); }
  double length() const { return norm(p_d - p_s); }
};

struct DetectorCoord {
  double u = 0, v = 0;
};

inline constexpr double kBehindSourceEps = 1e-9;

inline ScanGeometry make_circular_geometry(std::size_t k_views, double sid, double sdd,
                                           DetectorShape det_shape, double det_spacing) {
  require(k_views >= 1, "make_circular_geometry: k_views must be >= 1");
  require(sid > 0 && sid < sdd, "make_circular_geometry: need 0 < sid < sdd");
  require(det_shape.n_u >= 2 && det_shape.n_v >= 2,
          "make_circular_geometry: detector must be at least 2x2 pixels");
  require(det_spacing > 0, "make_circular_geometry: det_spacing must be positive");

  ScanGeometry g;
  g.n_views = k_views;
  g.sid = sid;
  g.sdd = sdd;
  g.det_shape = det_shape;
  g.det_spacing = det_spacing;
  g.poses.reserve(k_views);
  const double half_u = 0.5 * static_cast<double>(det_shape.n_u - 1) * det_spacing;
  const double half_v = 0.5 * static_cast<double>(det_shape.n_v - 1) * det_spacing;
  for (std::size_t k = 0; k < k_views; ++k) {
    ViewPose p;
    // Endpoint-exclusive coverage of 180 degrees.
    p.angle = static_cast<double>(k) * std::numbers::pi / static_cast<double>(k_views);
    const double c = std::cos(p.angle), s = std::sin(p.angle);
    const Vec3 radial{c, s, 0.0};
    p.source_pos = sid * radial;
    p.principal_dir = -1.0 * radial;
    p.detector_u_axis = {-s, c, 0.0};
    p.detector_v_axis = {0.0, 0.0, 1.0};
    const Vec3 det_center = p.source_pos + sdd * p.principal_dir;
    p.detector_origin = det_center - half_u * p.detector_u_axis - half_v * p.detector_v_axis;
    g.poses.push_back(p);
  }
  return g;
}

inline const ViewPose& pose_at(const ScanGeometry& g, std::size_t k) {
  if (k >= g.poses.size())
    throw InvalidParameter("view index " + std::to_string(k) + " out of range (K=" +
                           std::to_string(g.poses.size()) + ")");
  return g.poses[k];
}

// Perspective projection of a world point onto view k's detector raster, in
// continuous pixel units.
inline DetectorCoord project_point(const ScanGeometry& g, std::size_t k, Vec3 p) {
  const ViewPose& pose = pose_at(g, k);
  const Vec3 d = p - pose.source_pos;
  const double depth = dot(d, pose.principal_dir);
  if (depth <= kBehindSourceEps) throw BehindSource("project_point: point is behind the source");
  const Vec3 hit = pose.source_pos + (g.sdd / depth) * d;
  const Vec3 rel = hit - pose.detector_origin;
  return {dot(rel, pose.detector_u_axis) / g.det_spacing,
          dot(rel, pose.detector_v_axis) / g.det_spacing};
}

// Non-throwing variant for hot loops; returns false when p is behind the source.
inline bool try_project_point(const ScanGeometry& g, std::size_t k, Vec3 p, DetectorCoord& out) {
  const ViewPose& pose = g.poses[k];
  const Vec3 d = p - pose.source_pos;
  const double depth = dot(d, pose.principal_dir);
  if (depth <= kBehindSourceEps) return false;
  const Vec3 hit = pose.source_pos + (g.sdd / depth) * d;
  const Vec3 rel = hit - pose.detector_origin;
  out = {dot(rel, pose.detector_u_axis) / g.det_spacing,
         dot(rel, pose.detector_v_axis) / g.det_spacing};
  return true;
}

inline Vec3 detector_point(const ScanGeometry& g, std::size_t k, DetectorCoord uv) {
  const ViewPose& pose = pose_at(g, k);
  return pose.detector_origin + (uv.u * g.det_spacing) * pose.detector_u_axis +
         (uv.v * g.det_spacing) * pose.detector_v_axis;
}

inline Ray pixel_ray(const ScanGeometry& g, std::size_t k, DetectorCoord uv) {
  return {pose_at(g, k).source_pos, detector_point(g, k, uv)};
}

}  // namespace difgs
