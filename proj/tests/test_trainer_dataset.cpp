// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#include "oracles.hpp"
#include "support.hpp"

#include <fstream>
#include <iterator>

using namespace dnrf;
using testing_support::error_kind;
using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

SyntheticSceneOptions tiny_scene() {
  SyntheticSceneOptions o;
  o.frames = 6;
  o.resolution = 16;
  return o;
}

/// One generated scene shared by the whole file.
class SceneTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("scene");
    generate_synthetic_scene(dir_->path(), tiny_scene());
    data_ = load_scene(dir_->path()).release();
  }
  static void TearDownTestSuite() {
    delete data_;
    delete dir_;
  }
  static const fs::path& dir() { return dir_->path(); }
  static const Dataset& data() { return *data_; }

  static TrainConfig small_config() {
    TrainConfig c;
    c.total_steps = 12;
    c.rays_per_step = 48;
    c.field.grid.table_size = 1u << 10;
    c.field.grid.features_per_entry = 2;
    c.occupancy.resolution = 32;
    c.occupancy_period = 4;
    c.occupancy_probes = 2048;
    c.holdout_last = 1;
    c.seed = 3;
    return c;
  }

 private:
  static inline TempDir* dir_ = nullptr;
  static inline Dataset* data_ = nullptr;
};

/// Copy of the shared scene that a test may corrupt.
fs::path copy_scene(const fs::path& from, const TempDir& to) {
  const fs::path dst = to.path() / "scene";
  fs::copy(from, dst, fs::copy_options::recursive);
  return dst;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

TEST(HuberLoss, Examples) {
  EXPECT_EQ(huber_loss<double>({0.3, 0.3, 0.3}, {0.3, 0.3, 0.3}, 0.1), 0.0);
  EXPECT_NEAR(huber_loss<double>({0.55, 0.0, 0.0}, {0.5, 0.0, 0.0}, 0.1), 0.00125, 1e-15);
  EXPECT_NEAR(huber_loss<double>({0.7, 0.0, 0.0}, {0.5, 0.0, 0.0}, 0.1), 0.015, 1e-15);
  // Linear branch uses |e|.
  EXPECT_NEAR(huber_loss<double>({0.3, 0.0, 0.0}, {0.5, 0.0, 0.0}, 0.1), 0.015, 1e-15);
  EXPECT_NEAR(huber_loss<double>({0.55, 0.7, 0.0}, {0.5, 0.5, 0.0}, 0.1), 0.01625, 1e-15);
}

TEST(HuberLoss, GradientIsContinuousAtRho) {
  const double rho = 0.1;
  for (double sign : {1.0, -1.0}) {
    const auto below = huber_gradient<double>({sign * (rho - 1e-12), 0, 0}, {0, 0, 0}, rho);
    const auto above = huber_gradient<double>({sign * (rho + 1e-12), 0, 0}, {0, 0, 0}, rho);
    EXPECT_NEAR(below[0], above[0], 1e-10);
    EXPECT_NEAR(above[0], sign * rho, 1e-10);
  }
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    std::array<double, 3> p{rng.uniform(), rng.uniform(), rng.uniform()};
    const std::array<double, 3> t{rng.uniform(), rng.uniform(), rng.uniform()};
    const auto g = huber_gradient<double>(p, t, rho);
    for (int c = 0; c < 3; ++c) {
      const double keep = p[c];
      p[c] = keep + 1e-7;
      const double up = huber_loss<double>(p, t, rho);
      p[c] = keep - 1e-7;
      const double down = huber_loss<double>(p, t, rho);
      p[c] = keep;
      EXPECT_NEAR(g[c], (up - down) / 2e-7, 1e-6);
    }
  }
}

TEST(GeomLoss, Examples) {
  EXPECT_EQ(geom_loss(1.2, 9.0, false), 0.0);
  EXPECT_EQ(geom_loss(1.5, 1.5, true), 0.0);
  EXPECT_NEAR(geom_loss(1.2, 1.5, true), 0.3, 1e-15);
}

TEST(TotalLoss, Examples) {
  LossConfig cfg;
  CompositeResult<double> perfect;
  perfect.color = {0.2, 0.4, 0.6};
  perfect.depth = 1.7;
  RayTarget exact;
  exact.color = {0.2, 0.4, 0.6};
  exact.in_face = true;
  exact.depth = 1.7;
  const std::vector<CompositeResult<double>> one{perfect};
  EXPECT_EQ(total_loss<double>(one, std::vector<RayTarget>{exact}, cfg).value, 0.0);

  CompositeResult<double> off;
  off.color = {0.55, 0.0, 0.0};
  RayTarget mouth;
  mouth.color = {0.5, 0.0, 0.0};
  mouth.weight = 40.0;
  const std::vector<CompositeResult<double>> two{off};
  EXPECT_NEAR(total_loss<double>(two, std::vector<RayTarget>{mouth}, cfg).value, 0.05, 1e-14);

  CompositeResult<double> bad;
  bad.color = {std::nan(""), 0.0, 0.0};
  const std::vector<CompositeResult<double>> three{bad};
  EXPECT_EQ(error_kind([&] { total_loss<double>(three, std::vector<RayTarget>{mouth}, cfg); }),
            ErrorKind::NonFiniteLoss);
  EXPECT_EQ(error_kind([&] { total_loss<double>(three, std::vector<RayTarget>{}, cfg); }), ErrorKind::ShapeMismatch);
}

TEST(TotalLoss, NonNegativeAndRegionGated) {
  Rng rng(2);
  LossConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<CompositeResult<double>> outs(5);
    std::vector<RayTarget> targets(5);
    double huber_sum = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
      for (int c = 0; c < 3; ++c) {
        outs[r].color[c] = rng.uniform();
        targets[r].color[c] = rng.uniform();
      }
      outs[r].depth = rng.uniform(0.0, 3.0);
      targets[r].depth = rng.uniform(0.0, 3.0);
      targets[r].in_face = rng.uniform() < 0.5;
      targets[r].weight = 1.0;
      huber_sum += huber_loss(outs[r].color, targets[r].color, cfg.huber_rho);
    }
    EXPECT_GE(total_loss<double>(outs, targets, cfg).value, 0.0);
    // No face pixels: geometric term vanishes; unit weights give the plain Huber sum.
    for (auto& t : targets) t.in_face = false;
    const auto gated = total_loss<double>(outs, targets, cfg);
    EXPECT_NEAR(gated.value, huber_sum, 1e-12);
    for (const auto& u : gated.upstream) EXPECT_EQ(u.depth, 0.0);
  }
}

TEST(TotalLoss, EightSampleRayMatchesFiniteDifferences) {
  Rng rng(3);
  const std::array<double, 3> bg{1.0, 1.0, 1.0};
  const double delta = kStepSize;
  LossConfig cfg;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> density, colors, t;
    double tt = 1.5;
    for (int n = 0; n < 8; ++n) {
      density.push_back(rng.uniform(0.0, 600.0));
      for (int c = 0; c < 3; ++c) colors.push_back(rng.uniform());
      tt += 0.004;
      t.push_back(tt);
    }
    RayTarget target;
    for (double& c : target.color) c = rng.uniform();
    target.weight = trial % 2 ? 40.0 : 1.0;
    target.in_face = true;
    target.depth = 0.5;  // far from any reachable depth, away from the |.| kink
    auto pack = [&] {
      std::vector<std::array<double, 3>> c(8);
      for (std::size_t i = 0; i < 8; ++i) c[i] = {colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]};
      return c;
    };
    auto loss = [&] { return ray_loss(composite<double>(density, pack(), t, delta, bg), target, cfg).value; };
    const auto out = composite<double>(density, pack(), t, delta, bg);
    const auto l = ray_loss(out, target, cfg);
    std::vector<double> dd(8);
    std::vector<std::array<double, 3>> dc(8);
    composite_backward<double>(density, pack(), t, delta, bg, l.upstream, dd, dc);
    for (std::size_t i = 0; i < 8; ++i) {
      ASSERT_LT(oracle::relative_error(dd[i], oracle::central_difference(density, i, 1e-4, loss)), 1e-4) << i;
      for (int c = 0; c < 3; ++c)
        ASSERT_LT(oracle::relative_error(dc[i][c], oracle::central_difference(colors, 3 * i + c, 1e-6, loss)), 1e-4);
    }
  }
}

TEST(TotalLoss, EndToEndGradientThroughFieldMatchesFiniteDifferences) {
  FieldConfig fc;
  fc.grid.levels = 4;
  fc.grid.table_size = 1u << 8;
  fc.grid.features_per_entry = 2;
  fc.grid.base_resolution = 4;
  fc.grid.finest_resolution = 32;
  fc.density_bias_init = 5.5;
  RadianceField<double> field(fc);
  field.initialize(4);
  Rng rng(5);
  const auto hash = field.layout().hash_part(std::span<double>(field.params()));
  for (double& v : hash) v = rng.uniform(-0.5, 0.5);

  // One ray with four samples.
  FieldInputs<double> inputs;
  inputs.resize(4);
  const Vec3 dir = testing_support::random_vec(rng).normalized();
  const auto sh = encode_direction<double>(dir);
  std::vector<double> t;
  for (int n = 0; n < 4; ++n) {
    inputs.set(n, Vec3(0.1, -0.2, 0.3) + 0.05 * n * dir, sh, ExpressionCode::constant());
    t.push_back(2.0 + 0.05 * n);
  }
  RayTarget target;
  target.color = {0.9, 0.1, 0.4};
  target.weight = 40.0;
  target.in_face = true;
  target.depth = 0.3;
  const LossConfig cfg;
  const std::array<double, 3> bg{1.0, 1.0, 1.0};

  auto forward = [&](FieldTape<double>& tape) {
    field.view().evaluate(inputs, tape);
    std::vector<double> sigma(4);
    std::vector<std::array<double, 3>> rgb(4);
    for (int b = 0; b < 4; ++b) {
      sigma[b] = tape.nets.sigma[b];
      rgb[b] = {tape.nets.rgb(0, b), tape.nets.rgb(1, b), tape.nets.rgb(2, b)};
    }
    return std::make_pair(sigma, rgb);
  };
  auto loss = [&] {
    FieldTape<double> tape;
    const auto [sigma, rgb] = forward(tape);
    return ray_loss(composite<double>(sigma, rgb, t, kStepSize, bg), target, cfg).value;
  };

  FieldTape<double> tape;
  const auto [sigma, rgb] = forward(tape);
  const auto out = composite<double>(sigma, rgb, t, kStepSize, bg);
  ASSERT_GT(out.opacity, 0.05);
  ASSERT_LT(out.opacity, 0.95);
  const auto l = ray_loss(out, target, cfg);
  std::vector<double> ds(4);
  std::vector<std::array<double, 3>> dc(4);
  composite_backward<double>(sigma, rgb, t, kStepSize, bg, l.upstream, ds, dc);
  Vector<double> d_sigma(4);
  Matrix<double> d_rgb(3, 4);
  for (int b = 0; b < 4; ++b) {
    d_sigma[b] = ds[b];
    for (int c = 0; c < 3; ++c) d_rgb(c, b) = dc[b][c];
  }
  std::vector<double> grad(field.params().size(), 0.0);
  field.view().backward(tape, d_sigma, d_rgb, grad);

  std::size_t checked = 0, nonzero = 0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double fd = oracle::central_difference(field.params(), i, 1e-6, loss);
    ASSERT_LT(oracle::relative_error(grad[i], fd, 1e-7), 1e-3) << "parameter " << i;
    ++checked;
    nonzero += grad[i] != 0.0;
  }
  EXPECT_EQ(checked, field.params().size());
  EXPECT_GT(nonzero, 1000u);
}

// ---------------------------------------------------------------------------
// transfer_expression

TEST(TransferExpression, Examples) {
  std::vector<double> s(16, 0.0), sn(16, 0.0), tn(16, 0.0);
  s[0] = 1.0;
  sn[0] = 0.5;
  tn[0] = 0.2;
  const auto out = transfer_expression(std::vector<std::vector<double>>{s, sn}, sn, tn);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_NEAR(out[0][0], 0.7, 1e-15);
  for (std::size_t k = 1; k < 16; ++k) EXPECT_EQ(out[0][k], 0.0);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(out[1][k], tn[k]);

  const std::vector<double> zero(16, 0.0);
  const auto z = transfer_expression(std::vector<std::vector<double>>{s}, zero, tn);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(z[0][k], tn[k] + s[k]);
}

TEST(TransferExpression, UnitSlopeAffine) {
  Rng rng(6);
  auto rv = [&] {
    std::vector<double> v(16);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
  };
  const auto sn = rv(), tn = rv();
  for (int i = 0; i < 50; ++i) {
    const auto a = rv(), b = rv();
    std::vector<double> mid(16);
    for (int k = 0; k < 16; ++k) mid[k] = 0.3 * a[k] + 0.7 * b[k];
    const auto out = transfer_expression(std::vector<std::vector<double>>{a, b, mid}, sn, tn);
    for (int k = 0; k < 16; ++k) {
      EXPECT_NEAR(out[1][k] - out[0][k], b[k] - a[k], 1e-12);
      EXPECT_NEAR(out[2][k], 0.3 * out[0][k] + 0.7 * out[1][k], 1e-12);
    }
  }
}

TEST(TransferExpression, LengthMismatch) {
  const std::vector<double> ok(16, 0.0), shorter(15, 0.0);
  EXPECT_EQ(error_kind([&] { transfer_expression(std::vector<std::vector<double>>{shorter}, ok, ok); }),
            ErrorKind::LengthMismatch);
  EXPECT_EQ(error_kind([&] { transfer_expression(std::vector<std::vector<double>>{ok}, shorter, ok); }),
            ErrorKind::LengthMismatch);
  EXPECT_EQ(error_kind([&] { transfer_expression(std::vector<std::vector<double>>{ok}, ok, shorter); }),
            ErrorKind::LengthMismatch);
}

// ---------------------------------------------------------------------------
// Training configuration and schedule

TEST(TrainConfig, Defaults) {
  const TrainConfig c;
  EXPECT_EQ(c.total_steps, 32000u);
  EXPECT_EQ(c.buffer_size, 1700u);
  EXPECT_EQ(c.resample_period, 1500u);
  EXPECT_EQ(c.loss.lambda_geom, 1.25);
  EXPECT_EQ(c.loss.huber_rho, 0.1);
  EXPECT_EQ(c.occupancy_period, 16u);
  EXPECT_EQ(c.occupancy_probes, 65536u);
  EXPECT_EQ(c.occupancy.resolution, 128u);
  EXPECT_EQ(c.occupancy.threshold, 0.01);
  EXPECT_EQ(c.adam.learning_rate, 2.5e-3);
  const HashGridConfig g;
  EXPECT_EQ(g.levels, 16u);
  EXPECT_EQ(g.table_size, 1u << 18);
  EXPECT_EQ(g.features_per_entry, 8u);
  TrainConfig bad;
  bad.rays_per_step = 0;
  EXPECT_EQ(error_kind([&] { bad.validate(); }), ErrorKind::InvalidArgument);
}

TEST(TrainConfig, DeskPreset) {
  const TrainConfig d = desk_train_config();
  EXPECT_EQ(d.total_steps, 3000u);
  EXPECT_EQ(d.loss.lambda_geom, 1.25);
  EXPECT_TRUE(d.occupancy_shell);
  EXPECT_NEAR(d.occupancy.threshold * kStepSize, 0.01, 1e-15);
  d.validate();
}

TEST(SampleBuffer, SizeOrderAndDeterminism) {
  const auto a = detail::sample_buffer(50, 20, 9, 0);
  ASSERT_EQ(a.size(), 20u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
  for (auto f : a) EXPECT_LT(f, 50u);
  EXPECT_EQ(a, detail::sample_buffer(50, 20, 9, 0));
  EXPECT_NE(a, detail::sample_buffer(50, 20, 9, 1));
  // Buffer larger than the dataset holds every frame.
  const auto all = detail::sample_buffer(7, 1700, 9, 3);
  EXPECT_EQ(all, (std::vector<std::uint32_t>{0, 1, 2, 3, 4, 5, 6}));
}

TEST_F(SceneTest, ResampleEventsAtMultiplesOfThePeriod) {
  TrainConfig cfg = small_config();
  cfg.total_steps = 23;
  cfg.resample_period = 5;
  cfg.rays_per_step = 8;
  TrainState st = init_train_state(data(), cfg);
  std::vector<std::uint32_t> events;
  std::uint32_t steps = 0;
  TrainHooks hooks;
  hooks.on_resample = [&](std::uint32_t s) { events.push_back(s); };
  hooks.on_step = [&](const StepStats& s) {
    EXPECT_EQ(s.step, steps++);
    EXPECT_TRUE(std::isfinite(s.loss));
    EXPECT_GE(s.loss, 0.0);
  };
  train(data(), cfg, st, nullptr, hooks);
  EXPECT_EQ(events, (std::vector<std::uint32_t>{0, 5, 10, 15, 20}));
  EXPECT_EQ(steps, 23u);
  EXPECT_EQ(st.step, 23u);
}

TEST_F(SceneTest, LossLogHasOneLinePerStep) {
  TrainConfig cfg = small_config();
  cfg.total_steps = 3;
  TrainState st = init_train_state(data(), cfg);
  std::ostringstream log;
  train(data(), cfg, st, &log);
  std::istringstream in(log.str());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string step, loss, psnr, extra;
    ASSERT_TRUE(std::getline(fields, step, '\t') && std::getline(fields, loss, '\t') && std::getline(fields, psnr));
    EXPECT_EQ(std::stoi(step), n);
    EXPECT_TRUE(std::isfinite(std::stod(loss)));
    ++n;
  }
  EXPECT_EQ(n, 3);
}

TEST_F(SceneTest, ZeroStepRunEqualsInitialization) {
  TrainConfig cfg = small_config();
  cfg.total_steps = 0;
  TrainState st = init_train_state(data(), cfg);
  const Checkpoint before = make_checkpoint(st);
  train(data(), cfg, st);
  EXPECT_EQ(make_checkpoint(st), before);
  EXPECT_EQ(before.step, 0u);
  EXPECT_EQ(before.shadow_hash, before.hash);
}

TEST_F(SceneTest, SameSeedGivesIdenticalCheckpoints) {
  TempDir tmp("determinism");
  const TrainConfig cfg = small_config();
  for (const char* name : {"a.ckpt", "b.ckpt"}) {
    TrainState st = init_train_state(data(), cfg);
    train(data(), cfg, st);
    save_checkpoint(make_checkpoint(st), tmp.str(name));
  }
  EXPECT_EQ(slurp(tmp.path() / "a.ckpt"), slurp(tmp.path() / "b.ckpt"));
  TrainConfig other = cfg;
  other.seed = cfg.seed + 1;
  TrainState st = init_train_state(data(), other);
  train(data(), other, st);
  save_checkpoint(make_checkpoint(st), tmp.str("c.ckpt"));
  EXPECT_NE(slurp(tmp.path() / "a.ckpt"), slurp(tmp.path() / "c.ckpt"));
}

TEST_F(SceneTest, ResumedTrainingFollowsTheSameTrajectory) {
  TempDir tmp("resume");
  TrainConfig cfg = small_config();
  cfg.total_steps = 20;
  cfg.resample_period = 7;
  cfg.buffer_size = 3;
  TrainState straight = init_train_state(data(), cfg);
  train(data(), cfg, straight);

  TrainConfig first = cfg;
  first.total_steps = 9;
  TrainState part = init_train_state(data(), first);
  train(data(), first, part);
  save_checkpoint(make_checkpoint(part), tmp.str("mid.ckpt"));
  TrainState resumed = restore_train_state(load_checkpoint(tmp.str("mid.ckpt")), cfg.adam);
  ASSERT_EQ(resumed.step, 9u);
  train(data(), cfg, resumed);
  const Checkpoint a = make_checkpoint(resumed), b = make_checkpoint(straight);
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_EQ(a.density, b.density);
  EXPECT_EQ(a.color, b.color);
  EXPECT_EQ(a.shadow_hash, b.shadow_hash);
  EXPECT_EQ(a.adam_m, b.adam_m);
  EXPECT_EQ(a.adam_v, b.adam_v);
  ASSERT_TRUE(a.occupancy && b.occupancy);
  EXPECT_EQ(a.occupancy->ema, b.occupancy->ema);
  EXPECT_EQ(a.occupancy->bits, b.occupancy->bits);
  EXPECT_EQ(a.occupancy->forced, b.occupancy->forced);
  EXPECT_EQ(a, b);
}

TEST_F(SceneTest, MultiThreadedTrainingStaysFinite) {
  TrainConfig cfg = small_config();
  cfg.threads = 3;
  TrainState st = init_train_state(data(), cfg);
  train(data(), cfg, st);
  for (float v : st.field.params()) ASSERT_TRUE(std::isfinite(v));
}

TEST_F(SceneTest, ShellStartsWithOnlyNearSurfaceCells) {
  TrainConfig cfg = small_config();
  cfg.occupancy_shell = true;
  cfg.shell_width = 0.02;
  const TrainState st = init_train_state(data(), cfg);
  EXPECT_GT(st.grid.occupied_count(), 0u);
  EXPECT_LT(st.grid.occupied_count(), st.grid.cell_count() / 4);
  for (std::size_t c = 0; c < st.grid.cell_count(); ++c) ASSERT_EQ(st.grid.occupied(c), st.grid.forced(c));
}

TEST_F(SceneTest, HoldoutMustLeaveFrames) {
  TrainConfig cfg = small_config();
  cfg.holdout_last = 6;
  EXPECT_EQ(error_kind([&] { training_frame_count(data(), cfg); }), ErrorKind::InvalidArgument);
}

TEST_F(SceneTest, EvaluationOfInitialFieldIsFinite) {
  const TrainState st = init_train_state(data(), small_config());
  const auto m = evaluate_last(data(), 2, st.field.view(), &st.grid);
  EXPECT_EQ(m.frames, 2u);
  EXPECT_TRUE(std::isfinite(m.psnr));
  EXPECT_GT(m.mse, 0.0);
  EXPECT_EQ(error_kind([&] { evaluate_last(data(), 0, st.field.view(), &st.grid); }), ErrorKind::InvalidArgument);
}

// ---------------------------------------------------------------------------
// Synthetic scenes and loading

TEST_F(SceneTest, LoadedCountsMatchTheManifest) {
  const auto manifest = nlohmann::json::parse(slurp(dir() / "manifest"));
  ASSERT_EQ(data().size(), manifest["frames"].size());
  EXPECT_EQ(data().size(), 6u);
  EXPECT_EQ(data().canonical->face_count(), 320u);
  std::size_t mouth = 0;
  for (auto f : data().mouth_faces) mouth += f;
  EXPECT_EQ(mouth, manifest["mouth_faces"].size());
  EXPECT_GT(mouth, 0u);
  for (const FrameRecord& fr : data().frames) {
    EXPECT_EQ(fr.camera.width, 16);
    EXPECT_EQ(fr.color.width, 16);
    EXPECT_EQ(fr.color.channels, 3);
    EXPECT_TRUE(fr.mesh->same_topology(*data().canonical));
    EXPECT_GE(fr.expression[0], 0.0);
    EXPECT_LE(fr.expression[0], 1.0);
    for (std::size_t k = 1; k < kExpressionDim; ++k) EXPECT_EQ(fr.expression[k], 0.0);
    for (std::size_t p = 0; p < fr.mask.data.size(); ++p) {
      EXPECT_TRUE(fr.mask.data[p] == 0.0f || fr.mask.data[p] == 1.0f);
      EXPECT_TRUE(fr.weight.data[p] == 1.0f || fr.weight.data[p] == 40.0f);
      if (fr.weight.data[p] == 40.0f) {
        EXPECT_EQ(fr.mask.data[p], 1.0f);
      }
    }
    for (const Vec3& v : fr.mesh->vertices()) EXPECT_TRUE(data().deformed_box.contains(v));
  }
  for (const Vec3& v : data().canonical->vertices()) EXPECT_TRUE(data().canonical_box.contains(v));
}

TEST_F(SceneTest, DepthMapsMatchIndependentRayCast) {
  Rng rng(7);
  int hits = 0;
  for (int k = 0; k < 100; ++k) {
    const FrameRecord& fr = data().frames[rng.index(data().size())];
    const int x = int(rng.index(16)), y = int(rng.index(16));
    const Vec3 dir = (fr.camera.rotation() * Vec3((x + 0.5 - fr.camera.cx) / fr.camera.fx,
                                                  (y + 0.5 - fr.camera.cy) / fr.camera.fy, 1.0))
                         .normalized();
    const double d = oracle::ray_mesh_depth(*fr.mesh, fr.camera.center(), dir);
    if (std::isinf(d)) {
      EXPECT_EQ(fr.depth.at(x, y), 0.0f);
      EXPECT_EQ(fr.mask.at(x, y), 0.0f);
    } else {
      EXPECT_NEAR(fr.depth.at(x, y), d, 1e-4);
      EXPECT_EQ(fr.mask.at(x, y), 1.0f);
      ++hits;
    }
  }
  EXPECT_GT(hits, 10);
}

TEST(SyntheticScene, ZeroAmplitudeKeepsCanonicalMeshes) {
  TempDir tmp("flat");
  SyntheticSceneOptions o = tiny_scene();
  o.frames = 3;
  o.amplitude = 0.0;
  generate_synthetic_scene(tmp.path(), o);
  const auto d = load_scene(tmp.path());
  for (const FrameRecord& fr : d->frames) EXPECT_EQ(fr.mesh->vertices(), d->canonical->vertices());
}

TEST(SyntheticScene, SameSeedIsByteIdentical) {
  TempDir a("gen_a"), b("gen_b");
  SyntheticSceneOptions o = tiny_scene();
  o.frames = 3;
  generate_synthetic_scene(a.path(), o);
  generate_synthetic_scene(b.path(), o);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a.path());
    ASSERT_TRUE(fs::exists(b.path() / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 2u + 3u * 5u);
  TempDir c("gen_c");
  o.seed = 8;
  generate_synthetic_scene(c.path(), o);
  EXPECT_NE(slurp(a.path() / "frames/0000.png"), slurp(c.path() / "frames/0000.png"));
}

TEST(SyntheticScene, RejectsTooFewFrames) {
  TempDir tmp("few");
  SyntheticSceneOptions o = tiny_scene();
  o.frames = 1;
  EXPECT_EQ(error_kind([&] { generate_synthetic_scene(tmp.path(), o); }), ErrorKind::InvalidArgument);
}

TEST_F(SceneTest, MissingImageIsAManifestError) {
  TempDir tmp("missing");
  const fs::path scene = copy_scene(dir(), tmp);
  fs::remove(scene / "frames/0002.png");
  try {
    load_scene(scene);
    FAIL() << "expected ManifestError";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ManifestError);
    EXPECT_NE(std::string(e.what()).find("0002.png"), std::string::npos) << e.what();
  }
}

TEST_F(SceneTest, MalformedManifestIsAManifestError) {
  TempDir tmp("badjson");
  const fs::path scene = copy_scene(dir(), tmp);
  auto m = nlohmann::json::parse(slurp(scene / "manifest"));
  m["frames"][1]["expression"] = std::vector<double>(3, 0.0);
  spit(scene / "manifest", m.dump());
  EXPECT_EQ(error_kind([&] { load_scene(scene); }), ErrorKind::ManifestError);
  spit(scene / "manifest", "{ not json");
  EXPECT_EQ(error_kind([&] { load_scene(scene); }), ErrorKind::ManifestError);
  EXPECT_EQ(error_kind([&] { load_scene(tmp.path() / "nowhere"); }), ErrorKind::ManifestError);
}

TEST_F(SceneTest, PermutedFacesAreATopologyMismatch) {
  TempDir tmp("permuted");
  const fs::path scene = copy_scene(dir(), tmp);
  const FrameRecord& fr = data().frames[1];
  std::vector<Face> faces = fr.mesh->faces();
  std::swap(faces[0], faces[7]);
  save_obj(TriangleMesh(fr.mesh->vertices(), faces), (scene / "frames/0001.obj").string());
  EXPECT_EQ(error_kind([&] { load_scene(scene); }), ErrorKind::TopologyMismatch);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST_F(SceneTest, CheckpointRoundTripIsBitExact) {
  TempDir tmp("ckpt");
  TrainConfig cfg = small_config();
  cfg.total_steps = 5;
  TrainState st = init_train_state(data(), cfg);
  train(data(), cfg, st);
  const Checkpoint c = make_checkpoint(st);
  save_checkpoint(c, tmp.str("x.ckpt"));
  const Checkpoint back = load_checkpoint(tmp.str("x.ckpt"));
  EXPECT_EQ(back, c);
  save_checkpoint(back, tmp.str("y.ckpt"));
  EXPECT_EQ(slurp(tmp.path() / "x.ckpt"), slurp(tmp.path() / "y.ckpt"));
  const std::string bytes = slurp(tmp.path() / "x.ckpt");
  EXPECT_EQ(bytes.substr(0, 4), "DNRF");
  // Version is a little-endian u32 after the magic.
  EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\x00\x00\x00", 4));

  const TrainState restored = restore_train_state(back, cfg.adam);
  EXPECT_EQ(restored.field.params(), st.field.params());
  EXPECT_EQ(restored.adam.shadow, st.adam.shadow);
  EXPECT_EQ(restored.grid.bits(), st.grid.bits());
  EXPECT_EQ(restored.grid.ema(), st.grid.ema());
  EXPECT_EQ(shadow_parameters(back), st.adam.shadow);
}

TEST_F(SceneTest, CorruptCheckpointsAreRejected) {
  TempDir tmp("corrupt");
  const TrainState st = init_train_state(data(), small_config());
  save_checkpoint(make_checkpoint(st), tmp.str("ok.ckpt"));
  const std::string bytes = slurp(tmp.path() / "ok.ckpt");

  spit(tmp.path() / "trunc.ckpt", bytes.substr(0, bytes.size() / 2));
  EXPECT_EQ(error_kind([&] { load_checkpoint(tmp.str("trunc.ckpt")); }), ErrorKind::CorruptPayload);
  spit(tmp.path() / "tiny.ckpt", bytes.substr(0, 6));
  EXPECT_EQ(error_kind([&] { load_checkpoint(tmp.str("tiny.ckpt")); }), ErrorKind::CorruptPayload);

  std::string magic = bytes;
  magic[0] = 'X';
  spit(tmp.path() / "magic.ckpt", magic);
  EXPECT_EQ(error_kind([&] { load_checkpoint(tmp.str("magic.ckpt")); }), ErrorKind::CorruptPayload);

  std::string version = bytes;
  version[4] = 2;
  spit(tmp.path() / "version.ckpt", version);
  EXPECT_EQ(error_kind([&] { load_checkpoint(tmp.str("version.ckpt")); }), ErrorKind::VersionMismatch);

  spit(tmp.path() / "long.ckpt", bytes + "extra");
  EXPECT_EQ(error_kind([&] { load_checkpoint(tmp.str("long.ckpt")); }), ErrorKind::CorruptPayload);

  EXPECT_EQ(error_kind([&] { load_checkpoint(tmp.str("absent.ckpt")); }), ErrorKind::IoFailure);
}

TEST(Checkpoint, BoundsMustBeFloatExact) {
  TempDir tmp("bounds");
  FieldConfig fc;
  fc.grid.table_size = 1u << 8;
  fc.grid.bounds = {Vec3::Constant(-0.1), Vec3::Constant(0.1)};
  TrainState st;
  st.field = RadianceField<float>(fc);
  st.adam = AdamState<float>(AdamConfig{}, st.field.params());
  EXPECT_EQ(error_kind([&] { save_checkpoint(make_checkpoint(st), tmp.str("b.ckpt")); }),
            ErrorKind::InvalidArgument);
}

// ---------------------------------------------------------------------------
// Image files

TEST(ImageIo, PngRoundTripIsLossless) {
  TempDir tmp("png");
  Rng rng(8);
  for (int channels : {1, 3}) {
    Image img(7, 5, channels);
    for (float& v : img.data) v = float(rng.index(256)) / 255.0f;
    write_png(tmp.str("a.png"), img);
    const Image back = read_png(tmp.str("a.png"), channels);
    EXPECT_EQ(back, img);
  }
  EXPECT_EQ(error_kind([&] { read_png(tmp.str("none.png")); }), ErrorKind::IoFailure);
}

TEST(ImageIo, PfmRoundTripIsExactAndBigEndian) {
  TempDir tmp("pfm");
  Rng rng(9);
  Image img(6, 4, 1);
  for (float& v : img.data) v = float(rng.normal() * 100.0);
  write_pfm(tmp.str("a.pfm"), img);
  EXPECT_EQ(read_pfm(tmp.str("a.pfm")), img);
  const std::string bytes = slurp(tmp.path() / "a.pfm");
  const std::string header = "Pf\n6 4\n1.0\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  // First stored value is the bottom-left pixel, most significant byte first.
  const auto bits = std::bit_cast<std::uint32_t>(img.at(0, 3));
  EXPECT_EQ(static_cast<unsigned char>(bytes[header.size()]), bits >> 24);
  EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + 3]), bits & 0xffu);

  Image rgb(3, 2, 3);
  for (float& v : rgb.data) v = float(rng.uniform());
  write_pfm(tmp.str("b.pfm"), rgb);
  EXPECT_EQ(read_pfm(tmp.str("b.pfm")), rgb);
}

TEST(Metrics, PsnrAndSsimReferenceValues) {
  Image a(16, 16, 3, 0.5f), b(16, 16, 3, 0.6f);
  EXPECT_NEAR(mse(a, b), 0.01, 1e-7);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_LT(ssim(a, b), 1.0);
}
