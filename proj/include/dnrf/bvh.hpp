// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/geometry.hpp"

#include <limits>
#include <numeric>

namespace dnrf {

struct Aabb {
  Vec3 min = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 max = Vec3::Constant(-std::numeric_limits<double>::infinity());

  static Aabb of(const std::array<Vec3, 3>& tri) {
    Aabb box;
    for (const Vec3& v : tri) box.extend(v);
    return box;
  }

  void extend(const Vec3& p) {
    min = min.cwiseMin(p);
    max = max.cwiseMax(p);
  }
  void extend(const Aabb& other) {
    min = min.cwiseMin(other.min);
    max = max.cwiseMax(other.max);
  }
  bool valid() const { return (min.array() <= max.array()).all(); }
  Vec3 extent() const { return max - min; }
  Vec3 center() const { return 0.5 * (min + max); }
  double diagonal() const { return extent().norm(); }

  bool contains(const Aabb& inner, double slack = 0.0) const {
    return (inner.min.array() >= min.array() - slack).all() &&
           (inner.max.array() <= max.array() + slack).all();
  }
  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }

  /// Squared distance from p to the box (0 inside).
  double squared_distance(const Vec3& p) const {
    const Vec3 d = (min - p).cwiseMax(p - max).cwiseMax(Vec3::Zero());
    return d.squaredNorm();
  }

  Aabb expanded(double margin) const {
    return {min - Vec3::Constant(margin), max + Vec3::Constant(margin)};
  }
};

struct PointTriangleResult {
  double distance = 0.0;
  Vec3 closest_point = Vec3::Zero();
};

/// Closest point on a closed triangle by Voronoi-region classification. No
/// degeneracy check; callers guarantee a valid triangle.
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0)
    return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);

  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

inline PointTriangleResult point_triangle_distance(const Vec3& p, const std::array<Vec3, 3>& tri) {
  if (!(0.5 * (tri[1] - tri[0]).cross(tri[2] - tri[0]).norm() > kDegenerateArea))
    fail(ErrorKind::DegenerateTriangle, "point_triangle_distance");
  PointTriangleResult r;
  r.closest_point = closest_point_on_triangle(p, tri[0], tri[1], tri[2]);
  r.distance = (p - r.closest_point).norm();
  return r;
}

struct NearestTriangle {
  std::uint32_t face = 0;
  double distance = 0.0;
  Vec3 closest_point = Vec3::Zero();
};

/// Median-split AABB tree over the faces of one mesh, for closest-triangle
/// queries. Read-only after construction.
class Bvh {
 public:
  static constexpr std::size_t kLeafSize = 4;

  struct Node {
    Aabb box;
    // Interior: children at `left` and `right`. Leaf: faces [first, first + count).
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    std::uint32_t first = 0;
    std::uint32_t count = 0;
    bool leaf() const { return count > 0; }
  };

  explicit Bvh(const TriangleMesh& mesh) {
    if (mesh.empty()) fail(ErrorKind::EmptyMesh, "cannot build BVH over an empty mesh");
    const std::size_t n = mesh.face_count();
    std::vector<Aabb> boxes(n);
    std::vector<Vec3> centroids(n);
    order_.resize(n);
    for (std::uint32_t f = 0; f < n; ++f) {
      boxes[f] = Aabb::of(mesh.triangle(f));
      centroids[f] = mesh.centroid(f);
      order_[f] = f;
    }
    nodes_.reserve(2 * n / kLeafSize + 1);
    build(0, static_cast<std::uint32_t>(n), boxes, centroids, 0);
    triangles_.resize(n);
    for (std::size_t i = 0; i < n; ++i) triangles_[i] = mesh.triangle(order_[i]);
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  /// Leaf slot -> face index.
  const std::vector<std::uint32_t>& face_order() const { return order_; }
  std::size_t depth() const { return depth_; }

  NearestTriangle nearest(const Vec3& p) const {
    NearestTriangle best;
    double best_sq = std::numeric_limits<double>::infinity();
    std::uint32_t best_face = std::numeric_limits<std::uint32_t>::max();
    std::uint32_t stack[128];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
      const Node& node = nodes_[stack[--top]];
      // Equal bounds are still visited so the lowest-index tie can be found.
      if (node.box.squared_distance(p) > best_sq) continue;
      if (node.leaf()) {
        for (std::uint32_t i = node.first; i < node.first + node.count; ++i) {
          const auto& t = triangles_[i];
          const Vec3 q = closest_point_on_triangle(p, t[0], t[1], t[2]);
          const double d = (p - q).squaredNorm();
          if (d < best_sq || (d == best_sq && order_[i] < best_face)) {
            best_sq = d;
            best_face = order_[i];
            best.closest_point = q;
          }
        }
        continue;
      }
      const double dl = nodes_[node.left].box.squared_distance(p);
      const double dr = nodes_[node.right].box.squared_distance(p);
      // Push the farther child first so the nearer one is popped next.
      if (dl <= dr) {
        stack[top++] = node.right;
        stack[top++] = node.left;
      } else {
        stack[top++] = node.left;
        stack[top++] = node.right;
      }
    }
    best.face = best_face;
    best.distance = std::sqrt(best_sq);
    return best;
  }

 private:
  std::uint32_t build(std::uint32_t first, std::uint32_t last, const std::vector<Aabb>& boxes,
                      const std::vector<Vec3>& centroids, std::size_t depth) {
    depth_ = std::max(depth_, depth);
    const auto index = static_cast<std::uint32_t>(nodes_.size());
    nodes_.emplace_back();
    Aabb box, centroid_box;
    for (std::uint32_t i = first; i < last; ++i) {
      box.extend(boxes[order_[i]]);
      centroid_box.extend(centroids[order_[i]]);
    }
    nodes_[index].box = box;
    if (last - first <= kLeafSize) {
      nodes_[index].first = first;
      nodes_[index].count = last - first;
      return index;
    }
    int axis = 0;
    centroid_box.extent().maxCoeff(&axis);
    const std::uint32_t mid = first + (last - first) / 2;
    std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + last,
                     [&](std::uint32_t a, std::uint32_t b) {
                       const double ca = centroids[a][axis], cb = centroids[b][axis];
                       return ca < cb || (ca == cb && a < b);
                     });
    const std::uint32_t left = build(first, mid, boxes, centroids, depth + 1);
    const std::uint32_t right = build(mid, last, boxes, centroids, depth + 1);
    nodes_[index].left = left;
    nodes_[index].right = right;
    return index;
  }

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> order_;
  std::vector<std::array<Vec3, 3>> triangles_;
  std::size_t depth_ = 0;
};

inline Bvh build_bvh(const TriangleMesh& mesh) { return Bvh(mesh); }

inline NearestTriangle nearest_triangle(const Bvh& bvh, const Vec3& p) { return bvh.nearest(p); }

}  // namespace dnrf
