#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace pcvd {

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  return a <= -std::numbers::pi ? a + 2.0 * std::numbers::pi : a;
}

/// Planar rigid transform mapping the local frame into its parent (world_from_local).
struct Pose {
  Eigen::Vector2d translation = Eigen::Vector2d::Zero();
  double yaw = 0.0;

  static Pose identity() { return {}; }
  Pose(Eigen::Vector2d t = Eigen::Vector2d::Zero(), double yaw_rad = 0.0)
      : translation(std::move(t)), yaw(wrap_angle(yaw_rad)) {}

  Eigen::Matrix2d rotation() const { return Eigen::Rotation2Dd(yaw).toRotationMatrix(); }
  Eigen::Vector2d apply(const Eigen::Vector2d& p) const { return rotation() * p + translation; }
  Pose inverse() const { return Pose(-(rotation().transpose() * translation), -yaw); }
  /// (*this) after `local`: parent_from_local2 = parent_from_local1 * local1_from_local2.
  Pose compose(const Pose& local) const { return Pose(apply(local.translation), yaw + local.yaw); }
};

/// Oriented bird's-eye-view box. Ground truth carries score 1.
struct BevBox {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double length = 1.0;
  double width = 1.0;
  double yaw = 0.0;
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();
  int class_id = 0;
  double score = 1.0;
  int track_id = -1;

  std::array<Eigen::Vector2d, 4> corners() const;
  bool contains(const Eigen::Vector2d& p, double margin = 0.0) const;
  double area() const { return length * width; }
};

/// Re-expresses a box given in `from` coordinates in the `to` frame (both world_from_* poses).
BevBox transform_box(const BevBox& box, const Pose& from, const Pose& to);

double polygon_area(const std::vector<Eigen::Vector2d>& poly);
/// Intersection of two convex counter-clockwise polygons (Sutherland-Hodgman).
std::vector<Eigen::Vector2d> convex_intersection(const std::vector<Eigen::Vector2d>& subject,
                                                 const std::vector<Eigen::Vector2d>& clip);
/// Intersection-over-union of oriented boxes in the BEV plane.
double bev_iou(const BevBox& a, const BevBox& b);

/// Distance along a ray (origin, unit direction) to the box boundary, or a negative value on a miss.
double ray_box_distance(const Eigen::Vector2d& origin, const Eigen::Vector2d& dir, const Eigen::Vector2d& center,
                        double length, double width, double yaw);

}  // namespace pcvd
