#include "pcvd/geometry.hpp"

#include <algorithm>
#include <limits>

namespace pcvd {

std::array<Eigen::Vector2d, 4> BevBox::corners() const {
  const Eigen::Matrix2d r = Eigen::Rotation2Dd(yaw).toRotationMatrix();
  const double hl = length / 2, hw = width / 2;
  // counter-clockwise
  return {center + r * Eigen::Vector2d(hl, hw), center + r * Eigen::Vector2d(-hl, hw),
          center + r * Eigen::Vector2d(-hl, -hw), center + r * Eigen::Vector2d(hl, -hw)};
}

bool BevBox::contains(const Eigen::Vector2d& p, double margin) const {
  const Eigen::Vector2d local = Eigen::Rotation2Dd(-yaw).toRotationMatrix() * (p - center);
  return std::abs(local.x()) <= length / 2 + margin && std::abs(local.y()) <= width / 2 + margin;
}

BevBox transform_box(const BevBox& box, const Pose& from, const Pose& to) {
  const Pose to_from = to.inverse().compose(from);
  BevBox out = box;
  out.center = to_from.apply(box.center);
  out.yaw = wrap_angle(box.yaw + to_from.yaw);
  out.velocity = to_from.rotation() * box.velocity;
  return out;
}

double polygon_area(const std::vector<Eigen::Vector2d>& poly) {
  if (poly.size() < 3) return 0.0;
  double a = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return std::abs(a) / 2;
}

std::vector<Eigen::Vector2d> convex_intersection(const std::vector<Eigen::Vector2d>& subject,
                                                 const std::vector<Eigen::Vector2d>& clip) {
  std::vector<Eigen::Vector2d> out = subject;
  for (std::size_t i = 0; i < clip.size() && !out.empty(); ++i) {
    const Eigen::Vector2d a = clip[i], b = clip[(i + 1) % clip.size()];
    auto side = [&](const Eigen::Vector2d& p) { return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x()); };
    std::vector<Eigen::Vector2d> in = std::move(out);
    out.clear();
    for (std::size_t j = 0; j < in.size(); ++j) {
      const Eigen::Vector2d p = in[j], q = in[(j + 1) % in.size()];
      const double sp = side(p), sq = side(q);
      if (sp >= 0) out.push_back(p);
      if ((sp >= 0) != (sq >= 0)) out.push_back(p + (q - p) * (sp / (sp - sq)));
    }
  }
  return out;
}

double bev_iou(const BevBox& a, const BevBox& b) {
  const auto ca = a.corners(), cb = b.corners();
  const double inter = polygon_area(convex_intersection({ca.begin(), ca.end()}, {cb.begin(), cb.end()}));
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double ray_box_distance(const Eigen::Vector2d& origin, const Eigen::Vector2d& dir, const Eigen::Vector2d& center,
                        double length, double width, double yaw) {
  const Eigen::Matrix2d rt = Eigen::Rotation2Dd(-yaw).toRotationMatrix();
  const Eigen::Vector2d o = rt * (origin - center), d = rt * dir;
  const double half[2] = {length / 2, width / 2};
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 2; ++k) {
    if (std::abs(d[k]) < 1e-15) {
      if (std::abs(o[k]) > half[k]) return -1.0;
      continue;
    }
    double ta = (-half[k] - o[k]) / d[k], tb = (half[k] - o[k]) / d[k];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t1 < 0) return -1.0;
  return t0 >= 0 ? t0 : -1.0;  // origin inside a box sees nothing of it
}

}  // namespace pcvd
