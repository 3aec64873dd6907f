// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/common.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <utility>

namespace dnrf {

using Face = std::array<std::uint32_t, 3>;

/// Triangles below this area (m^2) are rejected when a mesh is constructed.
inline constexpr double kDegenerateArea = 1e-12;

/// Face list plus edge adjacency. Shared (by pointer) between a canonical mesh
/// and all of its deformed twins.
struct Topology {
  std::vector<Face> faces;
  /// For every face, the other faces sharing one of its edges.
  std::vector<std::vector<std::uint32_t>> adjacency;

  static std::shared_ptr<const Topology> build(std::vector<Face> faces) {
    auto topo = std::make_shared<Topology>();
    topo->faces = std::move(faces);
    topo->adjacency.resize(topo->faces.size());
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::uint32_t>> edges;
    for (std::uint32_t f = 0; f < topo->faces.size(); ++f) {
      const Face& face = topo->faces[f];
      for (int e = 0; e < 3; ++e) {
        std::uint32_t a = face[e], b = face[(e + 1) % 3];
        if (a > b) std::swap(a, b);
        edges[{a, b}].push_back(f);
      }
    }
    for (const auto& [edge, owners] : edges) {
      for (std::uint32_t f : owners)
        for (std::uint32_t g : owners)
          if (f != g) topo->adjacency[f].push_back(g);
    }
    for (auto& adj : topo->adjacency) {
      std::sort(adj.begin(), adj.end());
      adj.erase(std::unique(adj.begin(), adj.end()), adj.end());
    }
    return topo;
  }
};

/// Vertex positions (meters) over a shared topology. Immutable once built.
class TriangleMesh {
 public:
  TriangleMesh() = default;

  /// Validates indices and rejects degenerate faces.
  TriangleMesh(std::vector<Vec3> vertices, std::shared_ptr<const Topology> topology)
      : vertices_(std::move(vertices)), topology_(std::move(topology)) {
    if (!topology_) fail(ErrorKind::InvalidArgument, "mesh without topology");
    for (std::size_t f = 0; f < topology_->faces.size(); ++f) {
      for (std::uint32_t idx : topology_->faces[f])
        if (idx >= vertices_.size())
          fail(ErrorKind::InvalidArgument, "face " + std::to_string(f) + " references vertex " +
                                               std::to_string(idx) + " of " +
                                               std::to_string(vertices_.size()));
      if (face_area(static_cast<std::uint32_t>(f)) <= kDegenerateArea)
        fail(ErrorKind::DegenerateTriangle, "face " + std::to_string(f));
    }
  }

  TriangleMesh(std::vector<Vec3> vertices, std::vector<Face> faces)
      : TriangleMesh(std::move(vertices), Topology::build(std::move(faces))) {}

  /// A twin of this mesh with new vertex positions and the same topology.
  TriangleMesh with_vertices(std::vector<Vec3> vertices) const {
    if (vertices.size() != vertices_.size())
      fail(ErrorKind::TopologyMismatch, "vertex count differs from twin");
    return TriangleMesh(std::move(vertices), topology_);
  }

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<Face>& faces() const { return topology_->faces; }
  const std::vector<std::uint32_t>& adjacent(std::uint32_t face) const {
    return topology_->adjacency[face];
  }
  const std::shared_ptr<const Topology>& topology() const { return topology_; }
  std::size_t face_count() const { return topology_ ? topology_->faces.size() : 0; }
  bool empty() const { return face_count() == 0; }

  std::array<Vec3, 3> triangle(std::uint32_t face) const {
    const Face& f = topology_->faces[face];
    return {vertices_[f[0]], vertices_[f[1]], vertices_[f[2]]};
  }

  Vec3 centroid(std::uint32_t face) const {
    const auto t = triangle(face);
    return (t[0] + t[1] + t[2]) / 3.0;
  }

  double face_area(std::uint32_t face) const {
    const auto t = triangle(face);
    return 0.5 * (t[1] - t[0]).cross(t[2] - t[0]).norm();
  }

  /// True when both meshes use the same face array (same pointer or equal contents).
  bool same_topology(const TriangleMesh& other) const {
    if (topology_ == other.topology_) return true;
    return topology_ && other.topology_ && vertices_.size() == other.vertices_.size() &&
           topology_->faces == other.topology_->faces;
  }

 private:
  std::vector<Vec3> vertices_;
  std::shared_ptr<const Topology> topology_;
};

// ---------------------------------------------------------------------------
// OBJ (v / f records only)

struct ObjData {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
};

inline ObjData read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoFailure, "cannot open " + path);
  ObjData data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x() >> v.y() >> v.z()))
        fail(ErrorKind::IoFailure, path + ":" + std::to_string(line_no) + ": bad vertex");
      data.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<long> idx;
      std::string tok;
      while (ls >> tok) {
        // Accept "i", "i/t", "i/t/n", "i//n".
        const long i = std::stol(tok.substr(0, tok.find('/')));
        idx.push_back(i < 0 ? static_cast<long>(data.vertices.size()) + i : i - 1);
      }
      if (idx.size() != 3)
        fail(ErrorKind::IoFailure, path + ":" + std::to_string(line_no) + ": only triangles supported");
      Face f;
      for (int k = 0; k < 3; ++k) {
        if (idx[k] < 0) fail(ErrorKind::IoFailure, path + ": negative face index");
        f[k] = static_cast<std::uint32_t>(idx[k]);
      }
      data.faces.push_back(f);
    }
  }
  return data;
}

inline TriangleMesh load_obj(const std::string& path) {
  ObjData data = read_obj(path);
  if (data.faces.empty()) fail(ErrorKind::EmptyMesh, path);
  return TriangleMesh(std::move(data.vertices), std::move(data.faces));
}

/// Loads an OBJ that must be a topology twin of `reference`.
inline TriangleMesh load_obj_twin(const std::string& path, const TriangleMesh& reference) {
  ObjData data = read_obj(path);
  if (data.faces != reference.faces() || data.vertices.size() != reference.vertices().size())
    fail(ErrorKind::TopologyMismatch, path + " does not share the canonical face list");
  return reference.with_vertices(std::move(data.vertices));
}

inline void save_obj(const TriangleMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoFailure, "cannot write " + path);
  char buf[128];
  for (const Vec3& v : mesh.vertices()) {
    std::snprintf(buf, sizeof(buf), "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const Face& f : mesh.faces()) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  if (!out) fail(ErrorKind::IoFailure, "write failed: " + path);
}

// ---------------------------------------------------------------------------
// Per-triangle frames and deformation gradients

/// Orthonormal tangent/bitangent/normal basis anchored at the first vertex.
struct TriangleFrame {
  Mat3 rotation;  // columns: tangent, bitangent, normal
  Vec3 translation;
  double area = 0.0;

  Mat4 homogeneous() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  /// Closed-form inverse of the rigid transform.
  Mat4 homogeneous_inverse() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation.transpose();
    m.topRightCorner<3, 1>() = -rotation.transpose() * translation;
    return m;
  }
};

inline TriangleFrame triangle_frame(const Vec3& v0, const Vec3& v1, const Vec3& v2) {
  const Vec3 e1 = v1 - v0;
  const Vec3 cross = e1.cross(v2 - v0);
  const double area = 0.5 * cross.norm();
  if (!(area > kDegenerateArea)) fail(ErrorKind::DegenerateTriangle, "area " + std::to_string(area));
  TriangleFrame frame;
  const Vec3 tangent = e1.normalized();
  const Vec3 normal = cross.normalized();
  frame.rotation.col(0) = tangent;
  frame.rotation.col(1) = normal.cross(tangent);
  frame.rotation.col(2) = normal;
  frame.translation = v0;
  frame.area = area;
  return frame;
}

inline TriangleFrame triangle_frame(const TriangleMesh& mesh, std::uint32_t face) {
  if (face >= mesh.face_count()) fail(ErrorKind::InvalidArgument, "face index out of range");
  const auto t = mesh.triangle(face);
  return triangle_frame(t[0], t[1], t[2]);
}

/// Homogeneous deformed-to-canonical map. Bottom row is always (0, 0, 0, 1).
struct DeformationGradient {
  Mat4 matrix = Mat4::Identity();
};

enum class ScalingMode {
  /// lambda = sqrt(a_canon / a_def): exact for similarity transforms.
  GeometricSqrt,
  /// lambda = a_def / a_canon, the ratio as literally printed.
  LiteralAreaRatio,
};

inline double isotropic_scale(double area_def, double area_canon, ScalingMode mode) {
  return mode == ScalingMode::GeometricSqrt ? std::sqrt(area_canon / area_def)
                                            : area_def / area_canon;
}

/// F = L_canon * diag(s, s, s, 1) * L_def^-1.
inline DeformationGradient deformation_gradient(const TriangleFrame& def_frame,
                                                const TriangleFrame& canon_frame,
                                                ScalingMode mode = ScalingMode::GeometricSqrt) {
  const double s = isotropic_scale(def_frame.area, canon_frame.area, mode);
  Mat4 scale = Mat4::Identity();
  scale(0, 0) = scale(1, 1) = scale(2, 2) = s;
  DeformationGradient grad;
  grad.matrix = canon_frame.homogeneous() * scale * def_frame.homogeneous_inverse();
  grad.matrix.row(3) << 0.0, 0.0, 0.0, 1.0;
  return grad;
}

inline DeformationGradient face_deformation_gradient(const TriangleMesh& mesh_def,
                                                     const TriangleMesh& mesh_canon, std::uint32_t face,
                                                     ScalingMode mode = ScalingMode::GeometricSqrt) {
  return deformation_gradient(triangle_frame(mesh_def, face), triangle_frame(mesh_canon, face), mode);
}

/// Falloff rates of the blending weights exp(-beta * |c_f - p|).
inline constexpr double kNeighborFalloff = 4.0;
inline constexpr double kNearestFalloff = 1.0;

/// Weighted average of per-face gradients over the nearest face and its edge
/// neighbours. `face_gradient(f)` and `centroid(f)` supply per-face data so
/// callers can cache them.
template <typename GradientFn, typename CentroidFn>
DeformationGradient blend_gradients(const Vec3& p, std::uint32_t nearest_face,
                                    std::span<const std::uint32_t> neighbors, GradientFn&& face_gradient,
                                    CentroidFn&& centroid) {
  double w = std::exp(-kNearestFalloff * (centroid(nearest_face) - p).norm());
  double weight_sum = w;
  Mat4 acc = w * face_gradient(nearest_face);
  for (std::uint32_t f : neighbors) {
    w = std::exp(-kNeighborFalloff * (centroid(f) - p).norm());
    weight_sum += w;
    acc += w * face_gradient(f);
  }
  DeformationGradient out;
  out.matrix = acc / weight_sum;
  out.matrix.row(3) << 0.0, 0.0, 0.0, 1.0;
  return out;
}

inline DeformationGradient blended_gradient(const Vec3& p, const TriangleMesh& mesh_def,
                                            const TriangleMesh& mesh_canon, std::uint32_t nearest_face,
                                            ScalingMode mode = ScalingMode::GeometricSqrt) {
  if (!mesh_def.same_topology(mesh_canon))
    fail(ErrorKind::TopologyMismatch, "deformed and canonical meshes are not twins");
  return blend_gradients(
      p, nearest_face, mesh_def.adjacent(nearest_face),
      [&](std::uint32_t f) { return face_deformation_gradient(mesh_def, mesh_canon, f, mode).matrix; },
      [&](std::uint32_t f) { return mesh_def.centroid(f); });
}

inline Vec3 canonicalize(const Vec3& p, const DeformationGradient& grad) {
  const Eigen::Vector4d h = grad.matrix * p.homogeneous();
  return h.head<3>() / h.w();
}

}  // namespace dnrf
