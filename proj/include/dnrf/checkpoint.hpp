// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/trainer.hpp"

#include <optional>

namespace dnrf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OccupancySnapshot {
  std::uint32_t resolution = 0;
  float decay = 0.0f;
  float threshold = 0.0f;
  std::array<float, 6> box{};  // min xyz, max xyz
  std::vector<float> ema;
  std::vector<std::uint32_t> bits;    // packed, 32 cells per word
  std::vector<std::uint32_t> forced;  // packed
  bool operator==(const OccupancySnapshot&) const = default;
};

/// On-disk layout (all values little-endian, 32 bits wide):
///   "DNRF" version levels table_size features base finest bounds[6] step
///   then u32-count-prefixed arrays: hash, density, color, their EMA shadows,
///   Adam first and second moments; then a u32 flag and the occupancy grid.
struct Checkpoint {
  HashGridConfig grid;
  std::uint32_t step = 0;
  std::vector<float> hash, density, color;
  std::vector<float> shadow_hash, shadow_density, shadow_color;
  std::vector<float> adam_m, adam_v;
  std::optional<OccupancySnapshot> occupancy;
  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline std::vector<std::uint32_t> pack_bits(const std::vector<std::uint8_t>& v) {
  std::vector<std::uint32_t> out((v.size() + 31) / 32, 0u);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i]) out[i / 32] |= 1u << (i % 32);
  return out;
}

inline std::vector<std::uint8_t> unpack_bits(const std::vector<std::uint32_t>& w, std::size_t n) {
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (w[i / 32] >> (i % 32)) & 1u;
  return out;
}

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void floats(const std::vector<float>& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (float x : v) f32(x);
  }
  void words(const std::vector<std::uint32_t>& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (std::uint32_t x : v) u32(x);
  }
  void raw(const char* s, std::size_t n) { bytes_.insert(bytes_.end(), s, s + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::vector<float> floats(std::size_t expected, const char* what) {
    const std::uint32_t n = u32();
    if (n != expected) corrupt(std::string(what) + " has " + std::to_string(n) + " values, expected " +
                               std::to_string(expected));
    need(std::size_t{n} * 4);
    std::vector<float> v(n);
    for (float& x : v) x = f32();
    return v;
  }
  std::vector<std::uint32_t> words(std::size_t expected, const char* what) {
    const std::uint32_t n = u32();
    if (n != expected) corrupt(std::string(what) + " length mismatch");
    need(std::size_t{n} * 4);
    std::vector<std::uint32_t> v(n);
    for (auto& x : v) x = u32();
    return v;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  [[noreturn]] void corrupt(const std::string& why) const { fail(ErrorKind::CorruptPayload, path_ + ": " + why); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) corrupt("truncated at byte " + std::to_string(pos_));
  }
  std::vector<char> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline bool float_representable(double v) { return static_cast<double>(static_cast<float>(v)) == v; }

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const HashGridConfig& g = ckpt.grid;
  for (int a = 0; a < 3; ++a)
    if (!detail::float_representable(g.bounds.min[a]) || !detail::float_representable(g.bounds.max[a]))
      fail(ErrorKind::InvalidArgument, "hash grid bounds must be representable as 32-bit floats");
  detail::Writer w;
  w.raw("DNRF", 4);
  w.u32(kCheckpointVersion);
  w.u32(g.levels);
  w.u32(g.table_size);
  w.u32(g.features_per_entry);
  w.u32(g.base_resolution);
  w.u32(g.finest_resolution);
  for (int a = 0; a < 3; ++a) w.f32(static_cast<float>(g.bounds.min[a]));
  for (int a = 0; a < 3; ++a) w.f32(static_cast<float>(g.bounds.max[a]));
  w.u32(ckpt.step);
  for (const auto* v : {&ckpt.hash, &ckpt.density, &ckpt.color, &ckpt.shadow_hash, &ckpt.shadow_density,
                        &ckpt.shadow_color, &ckpt.adam_m, &ckpt.adam_v})
    w.floats(*v);
  w.u32(ckpt.occupancy ? 1u : 0u);
  if (ckpt.occupancy) {
    const OccupancySnapshot& o = *ckpt.occupancy;
    w.u32(o.resolution);
    w.f32(o.decay);
    w.f32(o.threshold);
    for (float b : o.box) w.f32(b);
    w.floats(o.ema);
    w.words(o.bits);
    w.words(o.forced);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoFailure, "cannot write " + path);
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) fail(ErrorKind::IoFailure, "write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoFailure, "cannot read " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::Reader r(std::move(bytes), path);
  if (r.raw(4) != "DNRF") r.corrupt("bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    fail(ErrorKind::VersionMismatch, path + ": format version " + std::to_string(version) + ", expected " +
                                         std::to_string(kCheckpointVersion));
  Checkpoint c;
  c.grid.levels = r.u32();
  c.grid.table_size = r.u32();
  c.grid.features_per_entry = r.u32();
  c.grid.base_resolution = r.u32();
  c.grid.finest_resolution = r.u32();
  for (int a = 0; a < 3; ++a) c.grid.bounds.min[a] = r.f32();
  for (int a = 0; a < 3; ++a) c.grid.bounds.max[a] = r.f32();
  try {
    c.grid.validate();
  } catch (const Error& e) {
    r.corrupt(std::string("invalid hash grid config: ") + e.what());
  }
  c.step = r.u32();
  const FieldLayout layout(c.grid);
  c.hash = r.floats(layout.hash_count(), "hash tables");
  c.density = r.floats(layout.density_count(), "density network");
  c.color = r.floats(layout.color_count(), "color network");
  c.shadow_hash = r.floats(layout.hash_count(), "hash shadow");
  c.shadow_density = r.floats(layout.density_count(), "density shadow");
  c.shadow_color = r.floats(layout.color_count(), "color shadow");
  c.adam_m = r.floats(layout.total, "first moment");
  c.adam_v = r.floats(layout.total, "second moment");
  const std::uint32_t has_grid = r.u32();
  if (has_grid > 1) r.corrupt("bad occupancy flag");
  if (has_grid) {
    OccupancySnapshot o;
    o.resolution = r.u32();
    if (o.resolution == 0 || o.resolution > 1024) r.corrupt("bad occupancy resolution");
    o.decay = r.f32();
    o.threshold = r.f32();
    for (float& b : o.box) b = r.f32();
    const std::size_t cells = std::size_t{o.resolution} * o.resolution * o.resolution;
    o.ema = r.floats(cells, "occupancy EMA");
    o.bits = r.words((cells + 31) / 32, "occupancy bits");
    o.forced = r.words((cells + 31) / 32, "occupancy forced cells");
    c.occupancy = std::move(o);
  }
  if (!r.at_end()) r.corrupt("trailing bytes");
  return c;
}

// ---------------------------------------------------------------------------
// Conversion to and from training state

inline Checkpoint make_checkpoint(const TrainState& s) {
  const FieldLayout& layout = s.field.layout();
  std::span<const float> p(s.field.params()), sh(s.adam.shadow);
  auto copy = [](std::span<const float> v) { return std::vector<float>(v.begin(), v.end()); };
  Checkpoint c;
  c.grid = s.field.config().grid;
  c.step = s.step;
  c.hash = copy(layout.hash_part(p));
  c.density = copy(layout.density_part(p));
  c.color = copy(layout.color_part(p));
  c.shadow_hash = copy(layout.hash_part(sh));
  c.shadow_density = copy(layout.density_part(sh));
  c.shadow_color = copy(layout.color_part(sh));
  c.adam_m = s.adam.first_moment;
  c.adam_v = s.adam.second_moment;
  if (s.grid.cell_count() > 0) {
    OccupancySnapshot o;
    o.resolution = s.grid.resolution();
    o.decay = static_cast<float>(s.grid.config().decay);
    o.threshold = static_cast<float>(s.grid.config().threshold);
    for (int a = 0; a < 3; ++a) {
      o.box[a] = static_cast<float>(s.grid.box().min[a]);
      o.box[3 + a] = static_cast<float>(s.grid.box().max[a]);
    }
    o.ema = s.grid.ema();
    o.bits = detail::pack_bits(s.grid.bits());
    o.forced = detail::pack_bits(s.grid.forced_cells());
    c.occupancy = std::move(o);
  }
  return c;
}

inline OccupancyGrid restore_grid(const OccupancySnapshot& o) {
  OccupancyConfig cfg;
  cfg.resolution = o.resolution;
  cfg.decay = o.decay;
  cfg.threshold = o.threshold;
  const Aabb box{Vec3(o.box[0], o.box[1], o.box[2]), Vec3(o.box[3], o.box[4], o.box[5])};
  OccupancyGrid grid(box, cfg);
  grid.ema() = o.ema;
  grid.bits() = detail::unpack_bits(o.bits, grid.cell_count());
  grid.forced_cells() = detail::unpack_bits(o.forced, grid.cell_count());
  return grid;
}

/// Rebuilds parameters, optimizer and grid so training can continue.
inline TrainState restore_train_state(const Checkpoint& c, const AdamConfig& adam) {
  FieldConfig fc;
  fc.grid = c.grid;
  TrainState s;
  s.field = RadianceField<float>(fc);
  const FieldLayout& layout = s.field.layout();
  std::span<float> p(s.field.params());
  std::copy(c.hash.begin(), c.hash.end(), layout.hash_part(p).begin());
  std::copy(c.density.begin(), c.density.end(), layout.density_part(p).begin());
  std::copy(c.color.begin(), c.color.end(), layout.color_part(p).begin());
  s.adam = AdamState<float>(adam, s.field.params());
  std::span<float> sh(s.adam.shadow);
  std::copy(c.shadow_hash.begin(), c.shadow_hash.end(), layout.hash_part(sh).begin());
  std::copy(c.shadow_density.begin(), c.shadow_density.end(), layout.density_part(sh).begin());
  std::copy(c.shadow_color.begin(), c.shadow_color.end(), layout.color_part(sh).begin());
  s.adam.first_moment = c.adam_m;
  s.adam.second_moment = c.adam_v;
  s.adam.step = c.step;
  s.step = c.step;
  if (c.occupancy) s.grid = restore_grid(*c.occupancy);
  return s;
}

/// Parameters used for rendering: the EMA shadow.
inline std::vector<float> shadow_parameters(const Checkpoint& c) {
  std::vector<float> p;
  p.reserve(c.shadow_hash.size() + c.shadow_density.size() + c.shadow_color.size());
  p.insert(p.end(), c.shadow_hash.begin(), c.shadow_hash.end());
  p.insert(p.end(), c.shadow_density.begin(), c.shadow_density.end());
  p.insert(p.end(), c.shadow_color.begin(), c.shadow_color.end());
  return p;
}

}  // namespace dnrf
