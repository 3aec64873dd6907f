// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/bvh.hpp"

#include <bit>

namespace dnrf {

struct HashGridConfig {
  std::uint32_t levels = 16;
  std::uint32_t table_size = 1u << 18;
  std::uint32_t features_per_entry = 8;
  std::uint32_t base_resolution = 16;
  std::uint32_t finest_resolution = 2048;
  /// Canonical-space box mapped onto the unit cube before lookup.
  Aabb bounds{Vec3::Constant(-1.0), Vec3::Constant(1.0)};

  std::size_t output_dim() const { return std::size_t{levels} * features_per_entry; }

  void validate() const {
    if (levels < 1) fail(ErrorKind::InvalidArgument, "hash grid needs at least one level");
    if (finest_resolution < base_resolution || base_resolution < 1)
      fail(ErrorKind::InvalidArgument, "finest resolution must be >= base resolution >= 1");
    if (table_size == 0 || !std::has_single_bit(table_size))
      fail(ErrorKind::InvalidArgument, "table size must be a power of two");
    if (features_per_entry < 1) fail(ErrorKind::InvalidArgument, "need at least one feature per entry");
    if (!bounds.valid() || (bounds.extent().array() <= 0.0).any())
      fail(ErrorKind::InvalidArgument, "hash grid bounds must have positive extent");
  }

  bool operator==(const HashGridConfig& o) const {
    return levels == o.levels && table_size == o.table_size &&
           features_per_entry == o.features_per_entry && base_resolution == o.base_resolution &&
           finest_resolution == o.finest_resolution && bounds.min == o.bounds.min &&
           bounds.max == o.bounds.max;
  }
};

inline constexpr std::uint32_t kHashPrimeY = 2654435761u;
inline constexpr std::uint32_t kHashPrimeZ = 805459861u;

/// XOR-of-primes spatial hash with wrapping 32-bit arithmetic.
inline std::uint32_t spatial_hash(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                                  std::uint32_t table_size) {
  return (x ^ (y * kHashPrimeY) ^ (z * kHashPrimeZ)) % table_size;
}

/// Per-level resolutions and table offsets. Feature storage is external so
/// the tables can live inside a larger flat parameter vector.
class HashGridLayout {
 public:
  struct Level {
    std::uint32_t resolution = 0;  // N_l cells per axis, N_l + 1 vertices
    std::size_t offset = 0;        // first entry of this level
    std::size_t entries = 0;
    bool dense = false;
  };

  HashGridLayout() = default;

  explicit HashGridLayout(const HashGridConfig& config) : config_(config) {
    config_.validate();
    const double growth =
        config_.levels > 1 ? std::exp((std::log(double(config_.finest_resolution)) -
                                       std::log(double(config_.base_resolution))) /
                                      double(config_.levels - 1))
                           : 1.0;
    std::size_t offset = 0;
    levels_.resize(config_.levels);
    for (std::uint32_t l = 0; l < config_.levels; ++l) {
      Level& lv = levels_[l];
      // Small epsilon keeps floor() from dropping an exact integer product.
      lv.resolution = static_cast<std::uint32_t>(
          std::floor(double(config_.base_resolution) * std::pow(growth, double(l)) + 1e-9));
      const std::uint64_t vertices = std::uint64_t{lv.resolution} + 1;
      const std::uint64_t dense = vertices * vertices * vertices;
      lv.dense = dense <= config_.table_size;
      lv.entries = lv.dense ? static_cast<std::size_t>(dense) : config_.table_size;
      lv.offset = offset;
      offset += lv.entries;
    }
    total_entries_ = offset;
  }

  const HashGridConfig& config() const { return config_; }
  const std::vector<Level>& levels() const { return levels_; }
  std::size_t total_entries() const { return total_entries_; }
  std::size_t parameter_count() const { return total_entries_ * config_.features_per_entry; }
  std::size_t output_dim() const { return config_.output_dim(); }

  /// Maps a point into the unit cube of the bounds, clamped.
  Vec3 normalize(const Vec3& p) const {
    const Aabb& b = config_.bounds;
    return ((p - b.min).array() / (b.max - b.min).array()).cwiseMax(0.0).cwiseMin(1.0).matrix();
  }

  /// Entry index (within the whole grid) of vertex (x, y, z) on level l.
  std::size_t entry(std::uint32_t l, std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
    const Level& lv = levels_[l];
    if (lv.dense) {
      const std::size_t n = std::size_t{lv.resolution} + 1;
      return lv.offset + x + n * (y + n * std::size_t{z});
    }
    return lv.offset + spatial_hash(x, y, z, config_.table_size);
  }

  /// The eight corners touched by p on level l, with trilinear weights.
  template <typename Scalar>
  void corners(std::uint32_t l, const Vec3& unit, std::array<std::size_t, 8>& idx,
               std::array<Scalar, 8>& weight) const {
    const std::uint32_t n = levels_[l].resolution;
    std::uint32_t cell[3];
    double frac[3];
    for (int a = 0; a < 3; ++a) {
      const double pos = unit[a] * double(n);
      double c = std::floor(pos);
      c = std::min(std::max(c, 0.0), double(n - 1));
      cell[a] = static_cast<std::uint32_t>(c);
      frac[a] = pos - c;
    }
    for (int k = 0; k < 8; ++k) {
      const std::uint32_t dx = k & 1, dy = (k >> 1) & 1, dz = (k >> 2) & 1;
      idx[k] = entry(l, cell[0] + dx, cell[1] + dy, cell[2] + dz);
      const double w = (dx ? frac[0] : 1.0 - frac[0]) * (dy ? frac[1] : 1.0 - frac[1]) *
                       (dz ? frac[2] : 1.0 - frac[2]);
      weight[k] = static_cast<Scalar>(w);
    }
  }

  /// Writes levels * features values to `out`.
  template <typename Scalar>
  void encode(std::span<const Scalar> tables, const Vec3& p, Scalar* out) const {
    const Vec3 unit = normalize(p);
    const std::uint32_t F = config_.features_per_entry;
    std::array<std::size_t, 8> idx;
    std::array<Scalar, 8> w;
    for (std::uint32_t l = 0; l < config_.levels; ++l) {
      corners(l, unit, idx, w);
      Scalar* o = out + std::size_t{l} * F;
      for (std::uint32_t j = 0; j < F; ++j) o[j] = Scalar(0);
      for (int k = 0; k < 8; ++k) {
        const Scalar* entry_ptr = tables.data() + idx[k] * F;
        for (std::uint32_t j = 0; j < F; ++j) o[j] += w[k] * entry_ptr[j];
      }
    }
  }

  /// Accumulates d(out)/d(tables)^T * upstream into a dense gradient.
  template <typename Scalar>
  void backward(const Vec3& p, const Scalar* upstream, std::span<Scalar> grad) const {
    const Vec3 unit = normalize(p);
    const std::uint32_t F = config_.features_per_entry;
    std::array<std::size_t, 8> idx;
    std::array<Scalar, 8> w;
    for (std::uint32_t l = 0; l < config_.levels; ++l) {
      const Scalar* up = upstream + std::size_t{l} * F;
      corners(l, unit, idx, w);
      for (int k = 0; k < 8; ++k) {
        if (w[k] == Scalar(0)) continue;
        Scalar* g = grad.data() + idx[k] * F;
        for (std::uint32_t j = 0; j < F; ++j) g[j] += w[k] * up[j];
      }
    }
  }

 private:
  HashGridConfig config_;
  std::vector<Level> levels_;
  std::size_t total_entries_ = 0;
};

/// Fills tables with U(-scale, scale).
template <typename Scalar>
void init_hash_tables(std::span<Scalar> tables, Rng& rng, double scale = 1e-4) {
  for (Scalar& v : tables) v = static_cast<Scalar>(rng.uniform(-scale, scale));
}

/// One touched parameter of a sparse gradient.
template <typename Scalar>
struct SparseEntry {
  std::size_t index;  // flat parameter index (entry * features + feature)
  Scalar value;
};

/// Multi-resolution hash grid owning its tables.
template <typename Scalar>
class HashGrid {
 public:
  HashGrid() = default;
  explicit HashGrid(const HashGridConfig& config)
      : layout_(config), tables_(layout_.parameter_count(), Scalar(0)) {}

  const HashGridLayout& layout() const { return layout_; }
  const HashGridConfig& config() const { return layout_.config(); }
  std::vector<Scalar>& tables() { return tables_; }
  const std::vector<Scalar>& tables() const { return tables_; }
  std::size_t output_dim() const { return layout_.output_dim(); }

  std::vector<Scalar> encode_position(const Vec3& p) const {
    std::vector<Scalar> out(output_dim());
    layout_.encode(std::span<const Scalar>(tables_), p, out.data());
    return out;
  }

  /// Gradient w.r.t. every touched table entry; untouched entries are absent.
  std::vector<SparseEntry<Scalar>> encode_position_backward(const Vec3& p,
                                                           std::span<const Scalar> upstream) const {
    if (upstream.size() != output_dim()) fail(ErrorKind::ShapeMismatch, "upstream gradient size");
    const Vec3 unit = layout_.normalize(p);
    const std::uint32_t F = layout_.config().features_per_entry;
    std::vector<SparseEntry<Scalar>> out;
    std::array<std::size_t, 8> idx;
    std::array<Scalar, 8> w;
    for (std::uint32_t l = 0; l < layout_.config().levels; ++l) {
      layout_.corners(l, unit, idx, w);
      for (int k = 0; k < 8; ++k) {
        if (w[k] == Scalar(0)) continue;
        for (std::uint32_t j = 0; j < F; ++j) {
          const Scalar g = w[k] * upstream[std::size_t{l} * F + j];
          if (g == Scalar(0)) continue;
          out.push_back({idx[k] * F + j, g});
        }
      }
    }
    // Hash collisions within a level can hit one entry twice; merge them.
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
    std::vector<SparseEntry<Scalar>> merged;
    for (const auto& e : out) {
      if (!merged.empty() && merged.back().index == e.index)
        merged.back().value += e.value;
      else
        merged.push_back(e);
    }
    return merged;
  }

 private:
  HashGridLayout layout_;
  std::vector<Scalar> tables_;
};

// ---------------------------------------------------------------------------
// Spherical harmonics, bands l = 0..3, m ascending within each band.

inline constexpr std::size_t kShDim = 16;

template <typename Scalar = double>
std::array<Scalar, kShDim> encode_direction(const Vec3& v) {
  const double len = v.norm();
  if (!(len > 0.0) || !std::isfinite(len)) fail(ErrorKind::ZeroDirection, "cannot encode a zero direction");
  const double x = v.x() / len, y = v.y() / len, z = v.z() / len;
  const double xx = x * x, yy = y * y, zz = z * z;
  std::array<double, kShDim> r;
  r[0] = 0.28209479177387814;
  r[1] = 0.48860251190291992 * y;
  r[2] = 0.48860251190291992 * z;
  r[3] = 0.48860251190291992 * x;
  r[4] = 1.0925484305920792 * x * y;
  r[5] = 1.0925484305920792 * y * z;
  r[6] = 0.31539156525252005 * (3.0 * zz - 1.0);
  r[7] = 1.0925484305920792 * x * z;
  r[8] = 0.54627421529603959 * (xx - yy);
  r[9] = 0.59004358992664352 * y * (3.0 * xx - yy);
  r[10] = 2.8906114426405538 * x * y * z;
  r[11] = 0.45704579946446572 * y * (5.0 * zz - 1.0);
  r[12] = 0.3731763325901154 * z * (5.0 * zz - 3.0);
  r[13] = 0.45704579946446572 * x * (5.0 * zz - 1.0);
  r[14] = 1.4453057213202769 * z * (xx - yy);
  r[15] = 0.59004358992664352 * x * (xx - 3.0 * yy);
  std::array<Scalar, kShDim> out;
  for (std::size_t i = 0; i < kShDim; ++i) out[i] = static_cast<Scalar>(r[i]);
  return out;
}

}  // namespace dnrf
