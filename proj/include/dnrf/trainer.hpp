// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/dataset.hpp"
#include "dnrf/metrics.hpp"

#include <ostream>

namespace dnrf {

// ---------------------------------------------------------------------------
// Losses

/// Per-channel Huber, summed over channels.
template <typename Scalar>
Scalar huber_loss(const std::array<Scalar, 3>& pred, const std::array<double, 3>& target, double rho) {
  if (!(rho > 0.0)) fail(ErrorKind::InvalidArgument, "Huber rho must be positive");
  Scalar sum = Scalar(0);
  for (int c = 0; c < 3; ++c) {
    const Scalar e = std::abs(pred[c] - Scalar(target[c]));
    sum += e < Scalar(rho) ? Scalar(0.5) * e * e : Scalar(rho) * (e - Scalar(0.5 * rho));
  }
  return sum;
}

/// d(huber)/d(pred) per channel.
template <typename Scalar>
std::array<Scalar, 3> huber_gradient(const std::array<Scalar, 3>& pred, const std::array<double, 3>& target,
                                     double rho) {
  std::array<Scalar, 3> g{};
  for (int c = 0; c < 3; ++c) {
    const Scalar e = pred[c] - Scalar(target[c]);
    g[c] = std::abs(e) < Scalar(rho) ? e : (e > Scalar(0) ? Scalar(rho) : Scalar(-rho));
  }
  return g;
}

template <typename Scalar>
Scalar geom_loss(Scalar depth_pred, double depth_mesh, bool in_face) {
  return in_face ? std::abs(Scalar(depth_mesh) - depth_pred) : Scalar(0);
}

/// Supervision for one ray, read from a frame's images.
struct RayTarget {
  std::array<double, 3> color{};
  double weight = 1.0;  // color-loss weight
  bool in_face = false;
  double depth = 0.0;   // rasterized mesh depth along the ray

  static RayTarget at(const FrameRecord& frame, int x, int y) {
    RayTarget t;
    for (int c = 0; c < 3; ++c) t.color[c] = frame.color.at(x, y, c);
    t.weight = frame.weight.at(x, y);
    t.in_face = frame.mask.at(x, y) > 0.5f;
    t.depth = frame.depth.at(x, y);
    return t;
  }
};

struct LossConfig {
  double huber_rho = 0.1;
  double lambda_geom = 1.25;
};

template <typename Scalar>
struct RayLoss {
  Scalar value = Scalar(0);
  CompositeUpstream<Scalar> upstream;
};

template <typename Scalar>
RayLoss<Scalar> ray_loss(const CompositeResult<Scalar>& out, const RayTarget& target, const LossConfig& cfg) {
  RayLoss<Scalar> r;
  const Scalar w = Scalar(target.weight);
  r.value = w * huber_loss(out.color, target.color, cfg.huber_rho);
  const auto g = huber_gradient(out.color, target.color, cfg.huber_rho);
  for (int c = 0; c < 3; ++c) r.upstream.color[c] = w * g[c];
  if (target.in_face && cfg.lambda_geom != 0.0) {
    r.value += Scalar(cfg.lambda_geom) * geom_loss(out.depth, target.depth, true);
    const Scalar diff = out.depth - Scalar(target.depth);
    const Scalar sign = diff > Scalar(0) ? Scalar(1) : (diff < Scalar(0) ? Scalar(-1) : Scalar(0));
    r.upstream.depth = Scalar(cfg.lambda_geom) * sign;
  }
  return r;
}

template <typename Scalar>
struct TotalLoss {
  Scalar value = Scalar(0);
  std::vector<CompositeUpstream<Scalar>> upstream;  // one per ray
};

/// Sum over rays of weighted Huber plus the geometric prior.
template <typename Scalar>
TotalLoss<Scalar> total_loss(std::span<const CompositeResult<Scalar>> outputs, std::span<const RayTarget> targets,
                             const LossConfig& cfg) {
  if (outputs.size() != targets.size()) fail(ErrorKind::ShapeMismatch, "one target per ray");
  TotalLoss<Scalar> total;
  total.upstream.resize(outputs.size());
  for (std::size_t r = 0; r < outputs.size(); ++r) {
    const RayLoss<Scalar> l = ray_loss(outputs[r], targets[r], cfg);
    total.value += l.value;
    total.upstream[r] = l.upstream;
  }
  if (!std::isfinite(static_cast<double>(total.value))) fail(ErrorKind::NonFiniteLoss, "loss is not finite");
  return total;
}

// ---------------------------------------------------------------------------
// Expression transfer

inline std::vector<ExpressionCode> transfer_expression(std::span<const std::vector<double>> source_codes,
                                                       const std::vector<double>& source_neutral,
                                                       const std::vector<double>& target_neutral) {
  auto check = [](const std::vector<double>& v, const std::string& what) {
    if (v.size() != kExpressionDim)
      fail(ErrorKind::LengthMismatch, what + " has " + std::to_string(v.size()) + " values, expected 16");
  };
  check(source_neutral, "source neutral code");
  check(target_neutral, "target neutral code");
  std::vector<ExpressionCode> out;
  out.reserve(source_codes.size());
  for (std::size_t i = 0; i < source_codes.size(); ++i) {
    check(source_codes[i], "source code " + std::to_string(i));
    ExpressionCode t;
    for (std::size_t k = 0; k < kExpressionDim; ++k)
      t.values[k] = target_neutral[k] + (source_codes[i][k] - source_neutral[k]);
    out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::uint32_t total_steps = 32000;
  std::uint32_t buffer_size = 1700;
  std::uint32_t resample_period = 1500;
  std::uint32_t rays_per_step = 4096;
  LossConfig loss;
  std::uint64_t seed = 0;
  /// Feed the expression code to every sample instead of the mouth region only.
  bool global_conditioning = false;
  /// Frames at the end of the dataset excluded from training.
  std::uint32_t holdout_last = 0;
  std::uint32_t occupancy_period = 16;
  std::uint32_t occupancy_probes = 1u << 16;
  OccupancyConfig occupancy;
  /// Keep cells within shell_width of any training mesh permanently occupied.
  bool occupancy_shell = false;
  double shell_width = 0.05;
  FieldConfig field;  // grid bounds are replaced by the scene's canonical box
  AdamConfig adam;
  unsigned threads = 1;

  void validate() const {
    if (buffer_size == 0 || resample_period == 0 || rays_per_step == 0 || occupancy_period == 0)
      fail(ErrorKind::InvalidArgument, "training counts must be positive");
    if (!(loss.huber_rho > 0.0) || !(loss.lambda_geom >= 0.0))
      fail(ErrorKind::InvalidArgument, "loss weights out of range");
    field.grid.validate();
  }
};

/// Settings for a few thousand CPU steps on a small synthetic scene: smaller
/// table and batch, a near-surface shell, and an occupancy threshold on
/// optical thickness per step (0.01 / delta in density units) so empty space
/// can be cleared in a short run.
inline TrainConfig desk_train_config() {
  TrainConfig cfg;
  cfg.total_steps = 3000;
  cfg.rays_per_step = 512;
  cfg.field.grid.table_size = 1u << 14;
  cfg.field.grid.features_per_entry = 2;
  cfg.field.density_bias_init = -6.0;
  cfg.occupancy_shell = true;
  cfg.shell_width = 0.02;
  cfg.occupancy.threshold = 0.01 / kStepSize;
  return cfg;
}

/// Everything needed to continue training.
struct TrainState {
  RadianceField<float> field;
  AdamState<float> adam;
  OccupancyGrid grid;
  std::uint32_t step = 0;
};

struct StepStats {
  std::uint32_t step = 0;
  double loss = 0.0;           // mean per ray
  double psnr_estimate = 0.0;  // from the unweighted color error of the batch
  std::size_t samples = 0;
};

struct TrainHooks {
  std::function<void(std::uint32_t step)> on_resample;
  std::function<void(const StepStats&)> on_step;
};

inline std::size_t training_frame_count(const Dataset& data, const TrainConfig& cfg) {
  if (cfg.holdout_last >= data.size()) fail(ErrorKind::InvalidArgument, "no frames left for training");
  return data.size() - cfg.holdout_last;
}

inline FieldConfig scene_field_config(const Dataset& data, FieldConfig field) {
  field.grid.bounds = float_exact(data.canonical_box);
  return field;
}

/// Fresh parameters, optimizer and occupancy grid.
inline TrainState init_train_state(const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.field = RadianceField<float>(scene_field_config(data, cfg.field));
  s.field.initialize(cfg.seed);
  s.adam = AdamState<float>(cfg.adam, s.field.params());
  s.grid = OccupancyGrid(float_exact(data.deformed_box), cfg.occupancy);
  if (cfg.occupancy_shell) {
    std::vector<const TriangleMesh*> meshes;
    for (std::size_t i = 0; i < training_frame_count(data, cfg); ++i) meshes.push_back(data.frames[i].mesh.get());
    s.grid.forced_cells().assign(s.grid.cell_count(), 0);
    force_shell(s.grid, meshes, cfg.shell_width);
    // Only the shell starts occupied; the EMA adds cells the field fills.
    s.grid.refresh_bits();
  }
  return s;
}

namespace detail {

inline constexpr std::uint64_t kBufferSalt = 0x62756666ULL;
inline constexpr std::uint64_t kRaySalt = 0x72617973ULL;
inline constexpr std::uint64_t kOccupancySalt = 0x6f636375ULL;

struct RaySpec {
  std::uint32_t frame = 0;
  int x = 0, y = 0;
  double offset = 0.5;
};

/// Buffered frame indices for resample epoch `epoch`.
inline std::vector<std::uint32_t> sample_buffer(std::size_t train_frames, std::size_t size, std::uint64_t seed,
                                                std::uint64_t epoch) {
  std::vector<std::uint32_t> all(train_frames);
  for (std::size_t i = 0; i < train_frames; ++i) all[i] = static_cast<std::uint32_t>(i);
  Rng rng(derive_seed(seed, kBufferSalt, epoch));
  const std::size_t n = std::min(size, train_frames);
  for (std::size_t i = 0; i < n; ++i) std::swap(all[i], all[i + rng.index(train_frames - i)]);
  all.resize(n);
  std::sort(all.begin(), all.end());
  return all;
}

struct ThreadScratch {
  std::vector<float> grad;
  RayCandidates cand;
  std::vector<std::size_t> ray_begin;
  std::vector<Vec3> directions;
  FieldInputs<float> inputs;
  FieldTape<float> tape;
  double loss = 0.0;
  double sq_error = 0.0;
  std::size_t samples = 0;
};

}  // namespace detail

/// Runs optimizer steps from state.step up to cfg.total_steps.
inline void train(const Dataset& data, const TrainConfig& cfg, TrainState& state, std::ostream* log = nullptr,
                  const TrainHooks& hooks = {}) {
  cfg.validate();
  const std::size_t train_frames = training_frame_count(data, cfg);
  const FieldLayout& layout = state.field.layout();
  const std::size_t nparams = layout.total;
  const unsigned threads = std::max(1u, cfg.threads);
  const double step_len = world_step(state.grid.box());
  const Aabb& march_box = state.grid.box();

  std::vector<detail::ThreadScratch> scratch(threads);
  std::vector<float> grad(nparams);
  std::vector<detail::RaySpec> rays(cfg.rays_per_step);
  std::vector<std::uint32_t> buffer;
  if (state.step < cfg.total_steps && state.step % cfg.resample_period != 0)
    buffer = detail::sample_buffer(train_frames, cfg.buffer_size, cfg.seed, state.step / cfg.resample_period);

  for (; state.step < cfg.total_steps; ++state.step) {
    const std::uint32_t step = state.step;
    if (step % cfg.resample_period == 0) {
      buffer = detail::sample_buffer(train_frames, cfg.buffer_size, cfg.seed, step / cfg.resample_period);
      if (hooks.on_resample) hooks.on_resample(step);
    }
    const FieldView<float> live = state.field.view();

    if (step > 0 && step % cfg.occupancy_period == 0) {
      Rng occ_rng(derive_seed(cfg.seed, detail::kOccupancySalt, step));
      const DensityProbe probe = [&](std::span<const Vec3> points, std::size_t slot, std::span<double> out) {
        const FrameView fv = data.frame_view(buffer[slot], cfg.global_conditioning);
        parallel_for(points.size(), threads, [&](std::size_t b, std::size_t e, unsigned) {
          constexpr std::size_t kChunk = 1024;
          std::vector<Vec3> canon;
          Matrix<float> expr;
          const ExpressionCode ones = ExpressionCode::constant();
          for (std::size_t c0 = b; c0 < e; c0 += kChunk) {
            const std::size_t c1 = std::min(e, c0 + kChunk);
            canon.resize(c1 - c0);
            expr.resize(kExpressionDim, static_cast<Eigen::Index>(c1 - c0));
            for (std::size_t i = c0; i < c1; ++i) {
              const auto m = fv.deformation->map(points[i]);
              canon[i - c0] = m.canonical;
              const bool use = !fv.mouth_faces->empty() && (*fv.mouth_faces)[m.face];
              const ExpressionCode& code = use ? fv.expression : ones;
              for (std::size_t k = 0; k < kExpressionDim; ++k)
                expr(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i - c0)) = float(code[k]);
            }
            const Vector<float> dens = live.density(canon, expr);
            for (std::size_t i = c0; i < c1; ++i) out[i] = dens[static_cast<Eigen::Index>(i - c0)];
          }
        });
      };
      update_occupancy(state.grid, probe, buffer.size(), cfg.occupancy_probes, occ_rng);
    }

    Rng ray_rng(derive_seed(cfg.seed, detail::kRaySalt, step));
    for (auto& r : rays) {
      r.frame = buffer[ray_rng.index(buffer.size())];
      const Camera& cam = data.frames[r.frame].camera;
      r.x = static_cast<int>(ray_rng.index(static_cast<std::uint64_t>(cam.width)));
      r.y = static_cast<int>(ray_rng.index(static_cast<std::uint64_t>(cam.height)));
      r.offset = ray_rng.uniform();
    }
    const float inv_rays = 1.0f / float(rays.size());

    parallel_for(rays.size(), threads, [&](std::size_t begin, std::size_t end, unsigned t) {
      detail::ThreadScratch& s = scratch[t];
      s.grad.assign(nparams, 0.0f);
      s.loss = s.sq_error = 0.0;
      s.samples = 0;
      constexpr std::size_t kRayChunk = 64;
      for (std::size_t r0 = begin; r0 < end; r0 += kRayChunk) {
        const std::size_t r1 = std::min(end, r0 + kRayChunk);
        // Gather candidates of all rays in the chunk into one batch.
        s.ray_begin.assign(1, 0);
        s.directions.clear();
        std::size_t total = 0;
        std::vector<RayCandidates> cands(r1 - r0);
        for (std::size_t r = r0; r < r1; ++r) {
          const detail::RaySpec& spec = rays[r];
          const FrameView fv = data.frame_view(spec.frame, cfg.global_conditioning);
          const Ray ray = generate_ray(fv.camera, spec.x, spec.y, &march_box);
          collect_candidates(ray, &state.grid, *fv.deformation, fv.mouth_faces, step_len, spec.offset,
                             cands[r - r0]);
          total += cands[r - r0].t.size();
          s.ray_begin.push_back(total);
          s.directions.push_back(ray.direction);
        }
        s.inputs.resize(total);
        for (std::size_t r = r0; r < r1; ++r) {
          const RayCandidates& c = cands[r - r0];
          const auto dir = encode_direction<float>(s.directions[r - r0]);
          const ExpressionCode& expr = data.frames[rays[r].frame].expression;
          const ExpressionCode ones = ExpressionCode::constant();
          for (std::size_t i = 0; i < c.t.size(); ++i)
            s.inputs.set(s.ray_begin[r - r0] + i, c.canonical[i], dir, c.mouth[i] ? expr : ones);
        }
        if (total > 0) live.evaluate(s.inputs, s.tape);

        Vector<float> d_sigma = Vector<float>::Zero(static_cast<Eigen::Index>(total));
        Matrix<float> d_rgb = Matrix<float>::Zero(3, static_cast<Eigen::Index>(total));
        std::vector<float> sigma, ds;
        std::vector<std::array<float, 3>> rgb, dc;
        for (std::size_t r = r0; r < r1; ++r) {
          const RayCandidates& c = cands[r - r0];
          const std::size_t off = s.ray_begin[r - r0];
          sigma.resize(c.t.size());
          rgb.resize(c.t.size());
          for (std::size_t i = 0; i < c.t.size(); ++i) {
            const auto b = static_cast<Eigen::Index>(off + i);
            sigma[i] = s.tape.nets.sigma[b];
            rgb[i] = {s.tape.nets.rgb(0, b), s.tape.nets.rgb(1, b), s.tape.nets.rgb(2, b)};
          }
          const std::size_t kept = termination_count<float>(sigma, kStepSize);
          const std::span<const float> ks(sigma.data(), kept);
          const std::span<const std::array<float, 3>> kc(rgb.data(), kept);
          const std::span<const double> kt(c.t.data(), kept);
          const auto out = composite<float>(ks, kc, kt, kStepSize, data.background);
          const RayTarget target = RayTarget::at(data.frames[rays[r].frame], rays[r].x, rays[r].y);
          RayLoss<float> l = ray_loss(out, target, cfg.loss);
          s.loss += l.value;
          for (int ch = 0; ch < 3; ++ch) {
            const double e = double(out.color[ch]) - target.color[ch];
            s.sq_error += e * e;
          }
          for (auto& v : l.upstream.color) v *= inv_rays;
          l.upstream.depth *= inv_rays;
          ds.resize(kept);
          dc.resize(kept);
          composite_backward<float>(ks, kc, kt, kStepSize, data.background, l.upstream, ds, dc);
          for (std::size_t i = 0; i < kept; ++i) {
            const auto b = static_cast<Eigen::Index>(off + i);
            d_sigma[b] = ds[i];
            for (int ch = 0; ch < 3; ++ch) d_rgb(ch, b) = dc[i][ch];
          }
        }
        if (total > 0) live.backward(s.tape, d_sigma, d_rgb, s.grad);
        s.samples += total;
      }
    });

    StepStats stats;
    stats.step = step;
    std::copy(scratch[0].grad.begin(), scratch[0].grad.end(), grad.begin());
    double loss = 0.0, sq = 0.0;
    for (unsigned t = 0; t < threads; ++t) {
      if (t > 0)
        for (std::size_t i = 0; i < nparams; ++i) grad[i] += scratch[t].grad[i];
      loss += scratch[t].loss;
      sq += scratch[t].sq_error;
      stats.samples += scratch[t].samples;
    }
    stats.loss = loss / double(rays.size());
    stats.psnr_estimate = psnr_from_mse(sq / (3.0 * double(rays.size())));
    if (!std::isfinite(stats.loss))
      fail(ErrorKind::NonFiniteLoss, "loss is not finite at step " + std::to_string(step));
    try {
      adam_step<float>(state.adam, state.field.params(), grad);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFiniteGradient) throw;
      fail(ErrorKind::NonFiniteGradient, "training step " + std::to_string(step) + ": " + e.what());
    }
    if (log) *log << step << '\t' << stats.loss << '\t' << stats.psnr_estimate << '\n';
    if (hooks.on_step) hooks.on_step(stats);
  }
}

// ---------------------------------------------------------------------------
// Evaluation helpers

inline Image to_image(const RenderedImage& r) {
  Image img(r.width, r.height, 3);
  std::copy(r.color.begin(), r.color.end(), img.data.begin());
  return img;
}

/// Renders frame i of the dataset (optionally from a yawed viewpoint) with the
/// given parameters.
inline RenderedImage render_frame(const Dataset& data, std::size_t i, const FieldView<float>& field,
                                  const OccupancyGrid* grid, double yaw_degrees = 0.0,
                                  bool global_conditioning = false, unsigned threads = 1) {
  FrameView fv = data.frame_view(i, global_conditioning);
  if (yaw_degrees != 0.0) fv.camera = yaw_offset(fv.camera, yaw_degrees);
  const Aabb box = grid ? grid->box() : float_exact(data.deformed_box);
  return render_image(fv, field, grid, box, data.background, threads);
}

struct EvalMetrics {
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t frames = 0;
};

/// Per-frame metrics averaged over the last `count` frames.
inline EvalMetrics evaluate_last(const Dataset& data, std::size_t count, const FieldView<float>& field,
                                 const OccupancyGrid* grid, bool global_conditioning = false,
                                 unsigned threads = 1) {
  if (count == 0 || count > data.size()) fail(ErrorKind::InvalidArgument, "bad held-out frame count");
  EvalMetrics m;
  for (std::size_t i = data.size() - count; i < data.size(); ++i) {
    const Image pred = to_image(render_frame(data, i, field, grid, 0.0, global_conditioning, threads));
    const Image& truth = data.frames[i].color;
    const double e = mse(pred, truth);
    m.mse += e;
    m.psnr += psnr_from_mse(e);
    m.ssim += ssim(pred, truth);
  }
  m.frames = count;
  m.mse /= double(count);
  m.psnr /= double(count);
  m.ssim /= double(count);
  return m;
}

}  // namespace dnrf
