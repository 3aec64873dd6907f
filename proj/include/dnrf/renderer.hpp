// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/field.hpp"

#include <functional>
#include <memory>

namespace dnrf {

// ---------------------------------------------------------------------------
// Deformed-to-canonical mapping for one frame.

/// BVH over a deformed mesh plus cached per-face gradients and centroids.
class FrameDeformation {
 public:
  struct Mapped {
    Vec3 canonical;
    std::uint32_t face = 0;
  };

  FrameDeformation(std::shared_ptr<const TriangleMesh> canonical, std::shared_ptr<const TriangleMesh> deformed,
                   ScalingMode mode = ScalingMode::GeometricSqrt)
      : canonical_(std::move(canonical)), deformed_(std::move(deformed)), bvh_(*deformed_) {
    if (!deformed_->same_topology(*canonical_))
      fail(ErrorKind::TopologyMismatch, "deformed mesh is not a twin of the canonical mesh");
    const std::size_t n = deformed_->face_count();
    gradients_.resize(n);
    centroids_.resize(n);
    for (std::uint32_t f = 0; f < n; ++f) {
      gradients_[f] = face_deformation_gradient(*deformed_, *canonical_, f, mode).matrix;
      centroids_[f] = deformed_->centroid(f);
    }
  }

  const TriangleMesh& deformed() const { return *deformed_; }
  const TriangleMesh& canonical() const { return *canonical_; }
  const Bvh& bvh() const { return bvh_; }
  const Mat4& face_gradient(std::uint32_t f) const { return gradients_[f]; }

  DeformationGradient gradient_at(const Vec3& p, std::uint32_t nearest_face) const {
    return blend_gradients(
        p, nearest_face, deformed_->adjacent(nearest_face),
        [&](std::uint32_t f) -> const Mat4& { return gradients_[f]; },
        [&](std::uint32_t f) -> const Vec3& { return centroids_[f]; });
  }

  /// nearest_triangle -> blended_gradient -> canonicalize.
  Mapped map(const Vec3& p) const {
    const NearestTriangle hit = bvh_.nearest(p);
    return {canonicalize(p, gradient_at(p, hit.face)), hit.face};
  }

 private:
  std::shared_ptr<const TriangleMesh> canonical_;
  std::shared_ptr<const TriangleMesh> deformed_;
  Bvh bvh_;
  std::vector<Mat4> gradients_;
  std::vector<Vec3> centroids_;
};

// ---------------------------------------------------------------------------
// Camera and rays

/// Pinhole camera; pose maps camera coordinates (x right, y down, z forward)
/// to world.
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Mat4 pose = Mat4::Identity();
  int width = 0;
  int height = 0;

  Vec3 center() const { return pose.topRightCorner<3, 1>(); }
  Mat3 rotation() const { return pose.topLeftCorner<3, 3>(); }

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) fail(ErrorKind::InvalidArgument, "focal lengths must be positive");
    const Mat3 r = rotation();
    if (!(r.transpose() * r).isApprox(Mat3::Identity(), 1e-6))
      fail(ErrorKind::InvalidArgument, "camera rotation is not orthonormal");
  }
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double near = 0.0;
  double far = 0.0;

  bool empty() const { return !(far > near); }
  Vec3 at(double t) const { return origin + t * direction; }
};

/// Slab intersection; returns false when the ray misses the box.
inline bool clip_to_box(const Aabb& box, Ray& ray) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double inv = 1.0 / ray.direction[a];
    double ta = (box.min[a] - ray.origin[a]) * inv;
    double tb = (box.max[a] - ray.origin[a]) * inv;
    if (ta > tb) std::swap(ta, tb);
    // NaN from 0 * inf means the origin lies on a slab plane; treat as inside.
    if (!std::isnan(ta)) t0 = std::max(t0, ta);
    if (!std::isnan(tb)) t1 = std::min(t1, tb);
  }
  if (t1 > t0) {
    ray.near = t0;
    ray.far = t1;
    return true;
  }
  ray.near = ray.far = 0.0;
  return false;
}

/// Ray through pixel (x, y) (continuous pixel coordinates; the ray passes
/// through x + 0.5, y + 0.5). Without a box the ray is unbounded.
inline Ray generate_ray(const Camera& cam, double x, double y, const Aabb* clip = nullptr) {
  if (!(x >= 0.0 && y >= 0.0 && x < double(cam.width) && y < double(cam.height)))
    fail(ErrorKind::PixelOutOfBounds, "(" + std::to_string(x) + ", " + std::to_string(y) + ")");
  const Vec3 local((x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0);
  Ray ray;
  ray.origin = cam.center();
  ray.direction = (cam.rotation() * local).normalized();
  ray.near = 0.0;
  ray.far = std::numeric_limits<double>::infinity();
  if (clip) clip_to_box(*clip, ray);
  return ray;
}

// ---------------------------------------------------------------------------
// Occupancy grid over deformed space

struct OccupancyConfig {
  std::uint32_t resolution = 128;
  double decay = 0.95;
  double threshold = 0.01;
};

class OccupancyGrid {
 public:
  OccupancyGrid() = default;
  OccupancyGrid(const Aabb& box, const OccupancyConfig& config = {})
      : box_(box), config_(config) {
    const std::size_t n = cell_count();
    bits_.assign(n, 1);
    ema_.assign(n, 0.0f);
    forced_.assign(n, 0);
  }

  const Aabb& box() const { return box_; }
  const OccupancyConfig& config() const { return config_; }
  std::uint32_t resolution() const { return config_.resolution; }
  std::size_t cell_count() const {
    const std::size_t r = config_.resolution;
    return r * r * r;
  }

  std::size_t cell_index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
    const std::size_t r = config_.resolution;
    return x + r * (y + r * std::size_t{z});
  }

  /// Cell containing p (clamped to the grid).
  std::size_t cell_of(const Vec3& p) const {
    const Vec3 u = (p - box_.min).array() / box_.extent().array();
    const double r = config_.resolution;
    std::uint32_t c[3];
    for (int a = 0; a < 3; ++a)
      c[a] = static_cast<std::uint32_t>(std::min(std::max(std::floor(u[a] * r), 0.0), r - 1.0));
    return cell_index(c[0], c[1], c[2]);
  }

  Aabb cell_box(std::size_t index) const {
    const std::size_t r = config_.resolution;
    const Vec3 cell_size = box_.extent() / double(r);
    const Vec3 lo = box_.min + Vec3(double(index % r), double((index / r) % r), double(index / (r * r)))
                                   .cwiseProduct(cell_size);
    return {lo, lo + cell_size};
  }

  bool occupied(const Vec3& p) const { return bits_[cell_of(p)] != 0; }
  bool occupied(std::size_t cell) const { return bits_[cell] != 0; }
  bool forced(std::size_t cell) const { return forced_[cell] != 0; }
  float ema(std::size_t cell) const { return ema_[cell]; }

  std::size_t occupied_count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  void set_all(bool value) { std::fill(bits_.begin(), bits_.end(), std::uint8_t(value ? 1 : 0)); }

  std::vector<std::uint8_t>& bits() { return bits_; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }
  std::vector<float>& ema() { return ema_; }
  const std::vector<float>& ema() const { return ema_; }
  std::vector<std::uint8_t>& forced_cells() { return forced_; }
  const std::vector<std::uint8_t>& forced_cells() const { return forced_; }

  /// Recomputes bits from the EMA and forced mask.
  void refresh_bits() {
    const float thr = static_cast<float>(config_.threshold);
    for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] = (ema_[i] > thr || forced_[i]) ? 1 : 0;
  }

 private:
  Aabb box_;
  OccupancyConfig config_;
  std::vector<std::uint8_t> bits_;
  std::vector<float> ema_;
  std::vector<std::uint8_t> forced_;
};

/// Evaluates densities at deformed-space points, each through the deformation
/// of the given frame (index into the caller's frame list).
using DensityProbe =
    std::function<void(std::span<const Vec3> points, std::size_t frame, std::span<double> densities)>;

/// Probes `sample_count` random cells plus every set (non-forced) cell at a
/// jittered point through a random frame, then
/// ema <- max(decay * ema, density) and bit <- ema > threshold. Cells not
/// probed only decay.
inline void update_occupancy(OccupancyGrid& grid, const DensityProbe& probe, std::size_t frame_count,
                             std::size_t sample_count, Rng& rng) {
  if (frame_count == 0) fail(ErrorKind::InvalidArgument, "occupancy update without frames");
  const std::size_t cells = grid.cell_count();
  std::vector<std::size_t> probe_cells;
  probe_cells.reserve(sample_count + grid.occupied_count());
  for (std::size_t i = 0; i < sample_count; ++i) probe_cells.push_back(rng.index(cells));
  for (std::size_t c = 0; c < cells; ++c)
    if (grid.occupied(c) && !grid.forced(c)) probe_cells.push_back(c);

  // Group probes by frame so each probe batch shares one deformation.
  std::vector<std::vector<Vec3>> points(frame_count);
  std::vector<std::vector<std::size_t>> owners(frame_count);
  for (std::size_t c : probe_cells) {
    const Aabb cb = grid.cell_box(c);
    const Vec3 jitter(rng.uniform(), rng.uniform(), rng.uniform());
    const std::size_t frame = rng.index(frame_count);
    points[frame].push_back(cb.min + jitter.cwiseProduct(cb.extent()));
    owners[frame].push_back(c);
  }

  std::vector<float> probed(cells, -1.0f);
  std::vector<double> dens;
  for (std::size_t f = 0; f < frame_count; ++f) {
    if (points[f].empty()) continue;
    dens.assign(points[f].size(), 0.0);
    probe(points[f], f, dens);
    for (std::size_t i = 0; i < dens.size(); ++i) {
      float& slot = probed[owners[f][i]];
      slot = std::max(slot, static_cast<float>(dens[i]));
    }
  }
  const float decay = static_cast<float>(grid.config().decay);
  auto& ema = grid.ema();
  for (std::size_t c = 0; c < cells; ++c) {
    ema[c] *= decay;
    if (probed[c] >= 0.0f) ema[c] = std::max(ema[c], probed[c]);
  }
  grid.refresh_bits();
}

/// Marks cells within `width` of any of the meshes as always occupied.
inline void force_shell(OccupancyGrid& grid, std::span<const TriangleMesh* const> meshes, double width) {
  const std::size_t r = grid.resolution();
  const Vec3 cell_size = grid.box().extent() / double(r);
  const double reach = width + 0.5 * cell_size.norm();
  auto& forced = grid.forced_cells();
  for (const TriangleMesh* mesh : meshes) {
    for (std::uint32_t f = 0; f < mesh->face_count(); ++f) {
      const auto tri = mesh->triangle(f);
      const Aabb box = Aabb::of(tri).expanded(reach);
      std::uint32_t lo[3], hi[3];
      for (int a = 0; a < 3; ++a) {
        const double ul = (box.min[a] - grid.box().min[a]) / cell_size[a];
        const double uh = (box.max[a] - grid.box().min[a]) / cell_size[a];
        lo[a] = static_cast<std::uint32_t>(std::clamp(std::floor(ul), 0.0, double(r - 1)));
        hi[a] = static_cast<std::uint32_t>(std::clamp(std::floor(uh), 0.0, double(r - 1)));
      }
      for (std::uint32_t z = lo[2]; z <= hi[2]; ++z)
        for (std::uint32_t y = lo[1]; y <= hi[1]; ++y)
          for (std::uint32_t x = lo[0]; x <= hi[0]; ++x) {
            const std::size_t c = grid.cell_index(x, y, z);
            if (forced[c]) continue;
            const Vec3 center = grid.box().min + (Vec3(x, y, z) + Vec3::Constant(0.5)).cwiseProduct(cell_size);
            const Vec3 q = closest_point_on_triangle(center, tri[0], tri[1], tri[2]);
            if ((center - q).norm() <= reach) forced[c] = 1;
          }
    }
  }
  grid.refresh_bits();
}

// ---------------------------------------------------------------------------
// Marching and compositing

/// Step between samples in the unit-normalized box metric.
inline const double kStepSize = std::sqrt(3.0) / 1024.0;
/// Marching stops once transmittance falls below this.
inline constexpr double kMinTransmittance = 1e-4;

/// World-space distance between consecutive samples.
inline double world_step(const Aabb& box) { return kStepSize * box.diagonal(); }

/// Sample positions of one ray before any network evaluation.
struct RayCandidates {
  std::vector<double> t;
  std::vector<Vec3> points;
  std::vector<Vec3> canonical;
  std::vector<std::uint8_t> mouth;
};

/// Which faces use the frame's expression code; everywhere else uses ones.
using FaceFlags = std::vector<std::uint8_t>;

/// Samples t_n = near + (n + offset) * step, skipping unoccupied cells, and
/// canonicalizes the retained points. `grid` may be null (dense march).
inline void collect_candidates(const Ray& ray, const OccupancyGrid* grid, const FrameDeformation& deform,
                               const FaceFlags* mouth_faces, double step, double offset, RayCandidates& out) {
  out.t.clear();
  out.points.clear();
  out.canonical.clear();
  out.mouth.clear();
  if (ray.empty()) return;
  for (std::size_t n = 0;; ++n) {
    const double t = ray.near + (double(n) + offset) * step;
    if (t >= ray.far) break;
    const Vec3 p = ray.at(t);
    if (grid && !grid->occupied(p)) continue;
    const auto mapped = deform.map(p);
    out.t.push_back(t);
    out.points.push_back(p);
    out.canonical.push_back(mapped.canonical);
    out.mouth.push_back(mouth_faces && !mouth_faces->empty() ? (*mouth_faces)[mapped.face] : 0);
  }
}

template <typename Scalar>
struct RaySampleBatch {
  std::vector<double> t;
  std::vector<Vec3> points;
  std::vector<Vec3> canonical;
  std::vector<Scalar> density;
  std::vector<std::array<Scalar, 3>> color;
  /// Step in the normalized metric (alpha uses density * delta).
  double delta = kStepSize;

  std::size_t size() const { return t.size(); }
};

template <typename Scalar>
struct CompositeResult {
  std::array<Scalar, 3> color{};
  Scalar depth = Scalar(0);
  Scalar opacity = Scalar(0);
  /// Transmittance after the last sample.
  Scalar transmittance = Scalar(1);
};

/// Alpha compositing with background; samples must be ordered by t.
template <typename Scalar>
CompositeResult<Scalar> composite(std::span<const Scalar> density, std::span<const std::array<Scalar, 3>> color,
                                  std::span<const double> t, double delta, const std::array<double, 3>& background) {
  if (density.size() != color.size() || density.size() != t.size())
    fail(ErrorKind::ShapeMismatch, "composite inputs differ in length");
  for (std::size_t n = 1; n < t.size(); ++n)
    if (!(t[n] > t[n - 1])) fail(ErrorKind::InvalidArgument, "composite samples are not ordered by t");
  CompositeResult<Scalar> r;
  Scalar trans = Scalar(1);
  for (std::size_t n = 0; n < density.size(); ++n) {
    const Scalar alpha = Scalar(1) - std::exp(-density[n] * Scalar(delta));
    const Scalar w = trans * alpha;
    for (int c = 0; c < 3; ++c) r.color[c] += w * color[n][c];
    r.depth += w * Scalar(t[n]);
    r.opacity += w;
    trans *= Scalar(1) - alpha;
  }
  for (int c = 0; c < 3; ++c) r.color[c] += trans * Scalar(background[c]);
  r.transmittance = trans;
  return r;
}

template <typename Scalar>
CompositeResult<Scalar> composite(const RaySampleBatch<Scalar>& batch, const std::array<double, 3>& background) {
  return composite<Scalar>(batch.density, batch.color, batch.t, batch.delta, background);
}

/// Gradients of a scalar loss w.r.t. the composited outputs.
template <typename Scalar>
struct CompositeUpstream {
  std::array<Scalar, 3> color{};
  Scalar depth = Scalar(0);
  Scalar opacity = Scalar(0);
};

/// Reverse pass of `composite`. Uses suffix sums so no division by (1 - alpha):
/// dC/dsigma_n = delta * (T_{n+1} c_n - sum_{k>n} w_k c_k - T_{N+1} bg).
template <typename Scalar>
void composite_backward(std::span<const Scalar> density, std::span<const std::array<Scalar, 3>> color,
                        std::span<const double> t, double delta, const std::array<double, 3>& background,
                        const CompositeUpstream<Scalar>& up, std::span<Scalar> d_density,
                        std::span<std::array<Scalar, 3>> d_color) {
  const std::size_t n = density.size();
  if (d_density.size() != n || d_color.size() != n) fail(ErrorKind::ShapeMismatch, "composite gradient size");
  std::vector<Scalar> trans(n + 1);  // trans[k] = T before sample k
  std::vector<Scalar> weight(n);
  trans[0] = Scalar(1);
  for (std::size_t k = 0; k < n; ++k) {
    const Scalar alpha = Scalar(1) - std::exp(-density[k] * Scalar(delta));
    weight[k] = trans[k] * alpha;
    trans[k + 1] = trans[k] * (Scalar(1) - alpha);
  }
  // d(loss)/d(w_k) through color, depth and opacity.
  auto contribution = [&](std::size_t k) {
    Scalar s = up.depth * Scalar(t[k]) + up.opacity;
    for (int c = 0; c < 3; ++c) s += up.color[c] * color[k][c];
    return s;
  };
  Scalar bg_term = Scalar(0);
  for (int c = 0; c < 3; ++c) bg_term += up.color[c] * Scalar(background[c]);
  // Background enters only through T_{N+1}.
  Scalar suffix = trans[n] * bg_term;
  for (std::size_t k = n; k-- > 0;) {
    d_density[k] = Scalar(delta) * (trans[k + 1] * contribution(k) - suffix);
    for (int c = 0; c < 3; ++c) d_color[k][c] = weight[k] * up.color[c];
    suffix += weight[k] * contribution(k);
  }
}

/// Number of leading samples kept by early termination: sample n is kept
/// while the transmittance in front of it is at least kMinTransmittance.
template <typename Scalar>
std::size_t termination_count(std::span<const Scalar> density, double delta) {
  Scalar trans = Scalar(1);
  for (std::size_t n = 0; n < density.size(); ++n) {
    if (trans < Scalar(kMinTransmittance)) return n;
    trans *= std::exp(-density[n] * Scalar(delta));
  }
  return density.size();
}

/// Per-frame inputs shared by every ray of a render.
struct FrameView {
  const FrameDeformation* deformation = nullptr;
  Camera camera;
  ExpressionCode expression = ExpressionCode::constant();
  const FaceFlags* mouth_faces = nullptr;
};

template <typename Scalar>
void fill_field_inputs(const RayCandidates& cand, std::size_t begin, std::size_t end, const Vec3& direction,
                       const ExpressionCode& expression, FieldInputs<Scalar>& inputs) {
  const auto dir = encode_direction<Scalar>(direction);
  const ExpressionCode ones = ExpressionCode::constant();
  inputs.resize(end - begin);
  for (std::size_t i = begin; i < end; ++i)
    inputs.set(i - begin, cand.canonical[i], dir, cand.mouth[i] ? expression : ones);
}

/// Marches one ray: occupancy skipping, canonicalization, field evaluation in
/// chunks, early termination. `grid` may be null for a dense march. `Field`
/// is a FieldView or any type with the same evaluate() contract.
template <typename Field, typename Scalar = typename Field::scalar_type>
RaySampleBatch<Scalar> march_ray(const Ray& ray, const OccupancyGrid* grid, const Aabb& step_box,
                                 const FrameView& frame, const Field& field, double offset = 0.5,
                                 std::size_t chunk = 64) {
  RayCandidates cand;
  collect_candidates(ray, grid, *frame.deformation, frame.mouth_faces, world_step(step_box), offset, cand);
  RaySampleBatch<Scalar> batch;
  Scalar trans = Scalar(1);
  FieldInputs<Scalar> inputs;
  FieldTape<Scalar> tape;
  for (std::size_t begin = 0; begin < cand.t.size() && trans >= Scalar(kMinTransmittance); begin += chunk) {
    const std::size_t end = std::min(cand.t.size(), begin + chunk);
    fill_field_inputs(cand, begin, end, ray.direction, frame.expression, inputs);
    field.evaluate(inputs, tape);
    for (std::size_t i = begin; i < end; ++i) {
      if (trans < Scalar(kMinTransmittance)) break;
      const auto b = static_cast<Eigen::Index>(i - begin);
      const Scalar sigma = tape.nets.sigma[b];
      batch.t.push_back(cand.t[i]);
      batch.points.push_back(cand.points[i]);
      batch.canonical.push_back(cand.canonical[i]);
      batch.density.push_back(sigma);
      batch.color.push_back({tape.nets.rgb(0, b), tape.nets.rgb(1, b), tape.nets.rgb(2, b)});
      trans *= std::exp(-sigma * Scalar(kStepSize));
    }
  }
  return batch;
}

struct RenderedImage {
  int width = 0;
  int height = 0;
  std::vector<float> color;  // RGB interleaved, row-major
  std::vector<float> depth;
  std::vector<float> opacity;
};

template <typename Field>
RenderedImage render_image(const FrameView& frame, const Field& field, const OccupancyGrid* grid,
                           const Aabb& box, const std::array<double, 3>& background, unsigned threads = 1) {
  const Camera& cam = frame.camera;
  RenderedImage img;
  img.width = cam.width;
  img.height = cam.height;
  const std::size_t pixels = std::size_t(cam.width) * std::size_t(cam.height);
  img.color.assign(pixels * 3, 0.0f);
  img.depth.assign(pixels, 0.0f);
  img.opacity.assign(pixels, 0.0f);
  parallel_for(pixels, threads, [&](std::size_t begin, std::size_t end, unsigned) {
    for (std::size_t i = begin; i < end; ++i) {
      const double x = double(i % std::size_t(cam.width));
      const double y = double(i / std::size_t(cam.width));
      const Ray ray = generate_ray(cam, x, y, &box);
      const auto batch = march_ray(ray, grid, box, frame, field);
      const auto r = composite(batch, background);
      for (int c = 0; c < 3; ++c) img.color[3 * i + c] = static_cast<float>(r.color[c]);
      img.depth[i] = static_cast<float>(r.depth);
      img.opacity[i] = static_cast<float>(r.opacity);
    }
  });
  return img;
}

}  // namespace dnrf
