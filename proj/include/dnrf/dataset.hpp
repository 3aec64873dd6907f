// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/image_io.hpp"
#include "dnrf/renderer.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>

namespace dnrf {

namespace fs = std::filesystem;

/// Rotation about the world +y axis by `degrees`, applied to a camera pose
/// around `pivot`. Used for novel-view extrapolation.
inline Camera yaw_offset(const Camera& cam, double degrees, const Vec3& pivot = Vec3::Zero()) {
  const double a = degrees * 3.14159265358979323846 / 180.0;
  const Mat3 rot = Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix();
  Camera out = cam;
  out.pose.topLeftCorner<3, 3>() = rot * cam.rotation();
  out.pose.topRightCorner<3, 1>() = pivot + rot * (cam.center() - pivot);
  return out;
}

/// Camera at `eye` looking at `target` with world +y up (camera y points down).
inline Mat4 look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 forward = (target - eye).normalized();
  const Vec3 down = -Vec3::UnitY();
  const Vec3 right = down.cross(forward).normalized();
  const Vec3 true_down = forward.cross(right);
  Mat4 pose = Mat4::Identity();
  pose.block<3, 1>(0, 0) = right;
  pose.block<3, 1>(0, 1) = true_down;
  pose.block<3, 1>(0, 2) = forward;
  pose.block<3, 1>(0, 3) = eye;
  return pose;
}

// ---------------------------------------------------------------------------
// Synthetic scene: an icosphere with a smooth bump whose height is the
// per-frame expression coefficient, surface-attached emission, orbiting cameras.

namespace synthetic {

inline constexpr double kSphereRadius = 0.5;
inline constexpr double kBumpWidth = 0.18;
inline constexpr double kMouthRadius = 0.24;
inline constexpr double kCameraDistance = 2.2;
inline constexpr double kFocalScale = 1.1;  // focal length in units of image width
inline constexpr double kMaxYawDegrees = 40.0;
inline constexpr double kMaxPitchDegrees = 10.0;
inline constexpr double kBoxMargin = 0.1;

inline Vec3 bump_center() { return kSphereRadius * Vec3(0.0, -0.35, 1.0).normalized(); }

/// Subdivided icosahedron projected onto the sphere (20 * 4^level faces).
inline TriangleMesh icosphere(int level, double radius) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  std::vector<Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                         {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                         {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (Vec3& p : v) p.normalize();
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> midpoints;
    auto mid = [&](std::uint32_t a, std::uint32_t b) {
      const auto key = std::minmax(a, b);
      auto it = midpoints.find(key);
      if (it != midpoints.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      const auto idx = static_cast<std::uint32_t>(v.size() - 1);
      midpoints.emplace(key, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(f.size() * 4);
    for (const Face& tri : f) {
      const std::uint32_t a = mid(tri[0], tri[1]), b = mid(tri[1], tri[2]), c = mid(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  for (Vec3& p : v) p *= radius;
  return TriangleMesh(std::move(v), std::move(f));
}

/// Radial bump of height amplitude * coefficient centered at bump_center().
inline TriangleMesh deform(const TriangleMesh& canonical, double amplitude, double coefficient) {
  std::vector<Vec3> verts = canonical.vertices();
  const Vec3 c = bump_center();
  for (Vec3& v : verts) {
    const double g = std::exp(-(v - c).squaredNorm() / (2.0 * kBumpWidth * kBumpWidth));
    v += (amplitude * coefficient * g) * v.normalized();
  }
  return canonical.with_vertices(std::move(verts));
}

/// Emission color of the canonical surface point p.
struct ColorPattern {
  std::array<double, 3> phase{};

  static ColorPattern draw(Rng& rng) {
    ColorPattern c;
    for (double& p : c.phase) p = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    return c;
  }

  std::array<double, 3> operator()(const Vec3& p) const {
    return {0.55 + 0.35 * std::sin(6.0 * p.x() + phase[0]),
            0.5 + 0.35 * std::sin(6.0 * p.y() + phase[1]) * std::cos(3.0 * p.z()),
            0.5 + 0.35 * std::cos(5.0 * p.z() + 2.0 * p.x() + phase[2])};
  }
};

struct RasterHit {
  bool hit = false;
  double t = 0.0;
  std::uint32_t face = 0;
  double b1 = 0.0, b2 = 0.0;  // barycentric weights of v1, v2
};

/// Brute-force nearest ray/triangle hit (Moller-Trumbore, two-sided).
inline RasterHit raycast(const TriangleMesh& mesh, const Vec3& origin, const Vec3& dir) {
  RasterHit best;
  best.t = std::numeric_limits<double>::infinity();
  for (std::uint32_t f = 0; f < mesh.face_count(); ++f) {
    const auto tri = mesh.triangle(f);
    const Vec3 e1 = tri[1] - tri[0], e2 = tri[2] - tri[0];
    const Vec3 pvec = dir.cross(e2);
    const double det = e1.dot(pvec);
    if (std::abs(det) < 1e-14) continue;
    const double inv = 1.0 / det;
    const Vec3 tvec = origin - tri[0];
    const double u = tvec.dot(pvec) * inv;
    if (u < 0.0 || u > 1.0) continue;
    const Vec3 qvec = tvec.cross(e1);
    const double v = dir.dot(qvec) * inv;
    if (v < 0.0 || u + v > 1.0) continue;
    const double t = e2.dot(qvec) * inv;
    if (t > 1e-9 && t < best.t) best = {true, t, f, u, v};
  }
  if (!best.hit) best.t = 0.0;
  return best;
}

struct RasterOutput {
  Image color;   // 3 channels
  Image mask;    // 1 where the mesh is hit
  Image weight;  // color-loss weight
  Image depth;   // distance along the unit ray to the first hit, 0 on miss
};

/// The generator's own renderer: one ray per pixel center against the
/// deformed mesh, color looked up at the matching canonical surface point.
inline RasterOutput rasterize(const TriangleMesh& deformed, const TriangleMesh& canonical, const Camera& cam,
                              const ColorPattern& pattern, const std::array<double, 3>& background,
                              const FaceFlags& mouth, double mouth_weight) {
  RasterOutput out{Image(cam.width, cam.height, 3), Image(cam.width, cam.height, 1),
                   Image(cam.width, cam.height, 1, 1.0f), Image(cam.width, cam.height, 1)};
  const Mat3 rot = cam.pose.topLeftCorner<3, 3>();
  const Vec3 origin = cam.pose.topRightCorner<3, 1>();
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Vec3 dir = (rot * Vec3((x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0)).normalized();
      const RasterHit hit = raycast(deformed, origin, dir);
      std::array<double, 3> rgb = background;
      if (hit.hit) {
        const auto tri = canonical.triangle(hit.face);
        const Vec3 p = (1.0 - hit.b1 - hit.b2) * tri[0] + hit.b1 * tri[1] + hit.b2 * tri[2];
        rgb = pattern(p);
        out.mask.at(x, y) = 1.0f;
        out.depth.at(x, y) = static_cast<float>(hit.t);
        if (!mouth.empty() && mouth[hit.face]) out.weight.at(x, y) = static_cast<float>(mouth_weight);
      }
      for (int c = 0; c < 3; ++c) out.color.at(x, y, c) = static_cast<float>(rgb[c]);
    }
  return out;
}

inline std::uint64_t scene_stream(std::uint64_t seed) { return derive_seed(seed, 0x7363656e65ULL); }

/// Emission pattern used by generate_synthetic_scene for this seed.
inline ColorPattern color_pattern_for_seed(std::uint64_t seed) {
  Rng rng(scene_stream(seed));
  return ColorPattern::draw(rng);
}

/// Ground-truth radiance field of a synthetic scene in canonical space: opaque
/// inside the (convex) canonical mesh, emitting the surface pattern. Usable
/// wherever a FieldView is accepted.
class OracleField {
 public:
  using scalar_type = double;

  OracleField(const TriangleMesh& canonical, ColorPattern pattern, double density = 1e5)
      : pattern_(pattern), density_(density) {
    Vec3 center = Vec3::Zero();
    for (const Vec3& v : canonical.vertices()) center += v;
    center /= double(canonical.vertices().size());
    for (std::uint32_t f = 0; f < canonical.face_count(); ++f) {
      const auto tri = canonical.triangle(f);
      Vec3 n = (tri[1] - tri[0]).cross(tri[2] - tri[0]).normalized();
      if (n.dot(center - tri[0]) > 0.0) n = -n;
      planes_.push_back({n, n.dot(tri[0])});
    }
  }

  bool inside(const Vec3& p) const {
    for (const auto& [n, d] : planes_)
      if (n.dot(p) > d) return false;
    return true;
  }

  void evaluate(const FieldInputs<double>& in, FieldTape<double>& tape) const {
    const auto batch = static_cast<Eigen::Index>(in.size());
    tape.canonical = in.canonical;
    tape.nets.sigma.resize(batch);
    tape.nets.rgb.resize(3, batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      const Vec3& p = in.canonical[std::size_t(b)];
      tape.nets.sigma[b] = inside(p) ? density_ : 0.0;
      const auto c = pattern_(p);
      for (int ch = 0; ch < 3; ++ch) tape.nets.rgb(ch, b) = c[ch];
    }
  }

 private:
  ColorPattern pattern_;
  double density_;
  std::vector<std::pair<Vec3, double>> planes_;
};

}  // namespace synthetic

struct SyntheticSceneOptions {
  std::uint64_t seed = 7;
  std::uint32_t frames = 60;
  std::uint32_t resolution = 64;
  double amplitude = 0.15;
  int subdivisions = 2;  // 320 faces
  double mouth_weight = 40.0;
};

/// Rounds every coordinate to the nearest float so the box survives 32-bit storage.
inline Aabb float_exact(const Aabb& box) {
  const Eigen::Vector3f lo = box.min.cast<float>(), hi = box.max.cast<float>();
  return {lo.cast<double>(), hi.cast<double>()};
}

namespace detail {

inline nlohmann::json box_json(const Aabb& b) {
  return {{"min", {b.min.x(), b.min.y(), b.min.z()}}, {"max", {b.max.x(), b.max.y(), b.max.z()}}};
}

inline std::string frame_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frames/%04zu", i);
  return buf;
}

}  // namespace detail

/// Writes a complete scene directory (manifest, meshes, images).
inline void generate_synthetic_scene(const fs::path& dir, const SyntheticSceneOptions& opt) {
  if (opt.frames < 2) fail(ErrorKind::InvalidArgument, "a scene needs at least two frames");
  if (opt.resolution < 1) fail(ErrorKind::InvalidArgument, "resolution must be positive");
  std::error_code ec;
  fs::create_directories(dir / "frames", ec);
  if (ec) fail(ErrorKind::IoFailure, "cannot create " + (dir / "frames").string() + ": " + ec.message());

  Rng rng(synthetic::scene_stream(opt.seed));
  const synthetic::ColorPattern pattern = synthetic::ColorPattern::draw(rng);
  const double yaw_phase = rng.uniform(0.0, 6.283185307179586);
  const double coef_phase = rng.uniform(0.0, 6.283185307179586);

  const TriangleMesh canonical = synthetic::icosphere(opt.subdivisions, synthetic::kSphereRadius);
  FaceFlags mouth(canonical.face_count(), 0);
  std::vector<std::uint32_t> mouth_list;
  for (std::uint32_t f = 0; f < canonical.face_count(); ++f)
    if ((canonical.centroid(f) - synthetic::bump_center()).norm() < synthetic::kMouthRadius) {
      mouth[f] = 1;
      mouth_list.push_back(f);
    }
  save_obj(canonical, (dir / "canonical.obj").string());

  const std::array<double, 3> background{1.0, 1.0, 1.0};
  const double res = opt.resolution;
  Aabb canonical_box;
  for (const Vec3& v : canonical.vertices()) canonical_box.extend(v);
  Aabb deformed_box = canonical_box;

  nlohmann::json frames = nlohmann::json::array();
  for (std::uint32_t i = 0; i < opt.frames; ++i) {
    const double u = double(i);
    const double coefficient = 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 * u / 7.3 + coef_phase);
    const double yaw = synthetic::kMaxYawDegrees * std::sin(2.0 * 3.14159265358979323846 * u / 11.7 + yaw_phase);
    const double pitch = synthetic::kMaxPitchDegrees * rng.uniform(-1.0, 1.0);
    const TriangleMesh mesh = synthetic::deform(canonical, opt.amplitude, coefficient);
    for (const Vec3& v : mesh.vertices()) deformed_box.extend(v);

    const double ya = yaw * 3.14159265358979323846 / 180.0, pa = pitch * 3.14159265358979323846 / 180.0;
    const Vec3 eye = synthetic::kCameraDistance *
                     Vec3(std::sin(ya) * std::cos(pa), std::sin(pa), std::cos(ya) * std::cos(pa));
    Camera cam;
    cam.width = cam.height = static_cast<int>(opt.resolution);
    cam.fx = cam.fy = synthetic::kFocalScale * res;
    cam.cx = cam.cy = 0.5 * res;
    cam.pose = look_at(eye, Vec3::Zero());

    const auto raster = synthetic::rasterize(mesh, canonical, cam, pattern, background, mouth, opt.mouth_weight);
    const std::string stem = detail::frame_stem(i);
    save_obj(mesh, (dir / (stem + ".obj")).string());
    write_png((dir / (stem + ".png")).string(), raster.color);
    write_png((dir / (stem + ".mask.png")).string(), raster.mask);
    write_pfm((dir / (stem + ".w.pfm")).string(), raster.weight);
    write_pfm((dir / (stem + ".z.pfm")).string(), raster.depth);

    std::vector<double> pose;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) pose.push_back(cam.pose(r, c));
    std::vector<double> expression(kExpressionDim, 0.0);
    expression[0] = coefficient;
    frames.push_back({{"id", i},
                      {"mesh", stem + ".obj"},
                      {"image", stem + ".png"},
                      {"mask", stem + ".mask.png"},
                      {"weight", stem + ".w.pfm"},
                      {"depth", stem + ".z.pfm"},
                      {"width", cam.width},
                      {"height", cam.height},
                      {"intrinsics", {cam.fx, cam.fy, cam.cx, cam.cy}},
                      {"pose", pose},
                      {"expression", expression}});
  }

  nlohmann::json manifest = {
      {"format", "dnrf-scene"},
      {"version", 1},
      {"canonical_mesh", "canonical.obj"},
      {"background", background},
      {"canonical_box", detail::box_json(float_exact(canonical_box.expanded(synthetic::kBoxMargin)))},
      {"deformed_box", detail::box_json(float_exact(deformed_box.expanded(synthetic::kBoxMargin)))},
      {"mouth_faces", mouth_list},
      {"frames", frames},
  };
  std::ofstream out(dir / "manifest");
  if (!out) fail(ErrorKind::IoFailure, "cannot write " + (dir / "manifest").string());
  out << manifest.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Loaded dataset

struct FrameRecord {
  std::uint32_t id = 0;
  std::shared_ptr<const TriangleMesh> mesh;
  Camera camera;
  Image color;   // target image, 3 channels
  Image mask;    // face-region indicator, 1 channel
  Image weight;  // per-pixel color-loss weight
  Image depth;   // rasterized mesh depth along the ray
  ExpressionCode expression;
};

class Dataset {
 public:
  std::shared_ptr<const TriangleMesh> canonical;
  std::vector<FrameRecord> frames;
  Aabb canonical_box;
  Aabb deformed_box;
  std::array<double, 3> background{1.0, 1.0, 1.0};
  FaceFlags mouth_faces;

  Dataset() = default;
  Dataset(Dataset&&) = delete;

  std::size_t size() const { return frames.size(); }

  /// BVH and gradients of frame i, built on first use. Thread-safe.
  const FrameDeformation& deformation(std::size_t i) const {
    std::call_once(cache_->flags[i], [&] {
      cache_->items[i] = std::make_unique<FrameDeformation>(canonical, frames[i].mesh);
    });
    return *cache_->items[i];
  }

  FrameView frame_view(std::size_t i, bool global_conditioning = false) const {
    FrameView view;
    view.deformation = &deformation(i);
    view.camera = frames[i].camera;
    view.expression = frames[i].expression;
    view.mouth_faces = global_conditioning ? &all_faces_ : &mouth_faces;
    return view;
  }

  void finalize() {
    cache_ = std::make_unique<Cache>(frames.size());
    all_faces_.assign(canonical ? canonical->face_count() : 0, 1);
    if (mouth_faces.empty() && canonical) mouth_faces.assign(canonical->face_count(), 0);
  }

 private:
  struct Cache {
    explicit Cache(std::size_t n) : flags(n), items(n) {}
    std::vector<std::once_flag> flags;
    std::vector<std::unique_ptr<FrameDeformation>> items;
  };
  std::unique_ptr<Cache> cache_;
  FaceFlags all_faces_;
};

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) fail(ErrorKind::ManifestError, where + ": missing field '" + key + "'");
  return obj.at(key);
}

inline Aabb parse_box(const nlohmann::json& j, const std::string& where) {
  try {
    const auto lo = j.at("min").get<std::vector<double>>();
    const auto hi = j.at("max").get<std::vector<double>>();
    if (lo.size() != 3 || hi.size() != 3) throw std::runtime_error("box needs 3 components");
    Aabb b{Vec3(lo[0], lo[1], lo[2]), Vec3(hi[0], hi[1], hi[2])};
    if (!b.valid()) throw std::runtime_error("min > max");
    return b;
  } catch (const std::exception& e) {
    fail(ErrorKind::ManifestError, where + ": " + e.what());
  }
}

inline fs::path existing(const fs::path& root, const nlohmann::json& rel, const std::string& where) {
  if (!rel.is_string()) fail(ErrorKind::ManifestError, where + ": path must be a string");
  const fs::path p = root / rel.get<std::string>();
  if (!fs::exists(p)) fail(ErrorKind::ManifestError, where + ": missing file " + p.string());
  return p;
}

}  // namespace detail

/// Loads and validates a scene directory.
inline std::unique_ptr<Dataset> load_scene(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest";
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorKind::ManifestError, "cannot open " + manifest_path.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const std::exception& e) {
    fail(ErrorKind::ManifestError, manifest_path.string() + ": " + e.what());
  }
  const std::string where = manifest_path.string();
  auto ds = std::make_unique<Dataset>();
  try {
    ds->canonical = std::make_shared<const TriangleMesh>(
        load_obj(detail::existing(dir, detail::field(m, "canonical_mesh", where), where + " canonical_mesh").string()));
    ds->canonical_box = detail::parse_box(detail::field(m, "canonical_box", where), where + " canonical_box");
    ds->deformed_box = detail::parse_box(detail::field(m, "deformed_box", where), where + " deformed_box");
    if (m.contains("background")) {
      const auto bg = m.at("background").get<std::vector<double>>();
      if (bg.size() != 3) fail(ErrorKind::ManifestError, where + ": background needs 3 values");
      ds->background = {bg[0], bg[1], bg[2]};
    }
    ds->mouth_faces.assign(ds->canonical->face_count(), 0);
    if (m.contains("mouth_faces"))
      for (std::uint32_t f : m.at("mouth_faces").get<std::vector<std::uint32_t>>()) {
        if (f >= ds->canonical->face_count()) fail(ErrorKind::ManifestError, where + ": mouth face out of range");
        ds->mouth_faces[f] = 1;
      }
    const auto& frames = detail::field(m, "frames", where);
    if (!frames.is_array() || frames.empty()) fail(ErrorKind::ManifestError, where + ": no frames");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const auto& fj = frames[i];
      const std::string fw = where + " frames[" + std::to_string(i) + "]";
      FrameRecord rec;
      rec.id = fj.value("id", static_cast<std::uint32_t>(i));
      rec.mesh = std::make_shared<const TriangleMesh>(
          load_obj_twin(detail::existing(dir, detail::field(fj, "mesh", fw), fw + ".mesh").string(), *ds->canonical));
      const auto k = detail::field(fj, "intrinsics", fw).get<std::vector<double>>();
      const auto pose = detail::field(fj, "pose", fw).get<std::vector<double>>();
      if (k.size() != 4) fail(ErrorKind::ManifestError, fw + ".intrinsics: need fx fy cx cy");
      if (pose.size() != 16) fail(ErrorKind::ManifestError, fw + ".pose: need 16 values");
      rec.camera.fx = k[0];
      rec.camera.fy = k[1];
      rec.camera.cx = k[2];
      rec.camera.cy = k[3];
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) rec.camera.pose(r, c) = pose[std::size_t(r) * 4 + c];
      rec.camera.width = detail::field(fj, "width", fw).get<int>();
      rec.camera.height = detail::field(fj, "height", fw).get<int>();
      rec.camera.validate();
      const auto expr = detail::field(fj, "expression", fw).get<std::vector<double>>();
      if (expr.size() != kExpressionDim)
        fail(ErrorKind::ManifestError, fw + ".expression: expected 16 values, got " + std::to_string(expr.size()));
      std::copy(expr.begin(), expr.end(), rec.expression.values.begin());
      if (!rec.expression.finite()) fail(ErrorKind::ManifestError, fw + ".expression: non-finite value");

      rec.color = read_png(detail::existing(dir, detail::field(fj, "image", fw), fw + ".image").string(), 3);
      rec.mask = read_png(detail::existing(dir, detail::field(fj, "mask", fw), fw + ".mask").string(), 1);
      rec.weight = read_pfm(detail::existing(dir, detail::field(fj, "weight", fw), fw + ".weight").string());
      rec.depth = read_pfm(detail::existing(dir, detail::field(fj, "depth", fw), fw + ".depth").string());
      for (const Image* img : {&rec.color, &rec.mask, &rec.weight, &rec.depth})
        if (img->width != rec.camera.width || img->height != rec.camera.height)
          fail(ErrorKind::ManifestError, fw + ": image size differs from camera");
      if (rec.weight.channels != 1 || rec.depth.channels != 1)
        fail(ErrorKind::ManifestError, fw + ": weight and depth maps must be single-channel");
      for (std::size_t p = 0; p < rec.depth.data.size(); ++p)
        if (rec.mask.data[p] > 0.5f && !std::isfinite(rec.depth.data[p]))
          fail(ErrorKind::ManifestError, fw + ": non-finite depth inside the face mask");
      ds->frames.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ManifestError, where + ": " + e.what());
  }
  ds->finalize();
  return ds;
}

}  // namespace dnrf
