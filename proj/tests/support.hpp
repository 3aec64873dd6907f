// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/dnrf.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <string>

namespace testing_support {

using dnrf::Vec3;

inline Vec3 random_vec(dnrf::Rng& rng, double lo = -1.0, double hi = 1.0) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

/// Triangle soup of `faces` random triangles with edges of roughly `size`.
inline dnrf::TriangleMesh random_soup(dnrf::Rng& rng, std::size_t faces, double size = 0.2) {
  std::vector<Vec3> v;
  std::vector<dnrf::Face> f;
  while (f.size() < faces) {
    const Vec3 c = random_vec(rng);
    const Vec3 a = c + size * random_vec(rng), b = c + size * random_vec(rng), d = c + size * random_vec(rng);
    if ((b - a).cross(d - a).norm() < 1e-4 * size * size) continue;
    const auto i = static_cast<std::uint32_t>(v.size());
    v.insert(v.end(), {a, b, d});
    f.push_back({i, i + 1, i + 2});
  }
  return dnrf::TriangleMesh(std::move(v), std::move(f));
}

inline dnrf::Mat3 random_rotation(dnrf::Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}

/// Homogeneous similarity x -> s * R * x + t.
inline dnrf::Mat4 similarity(const dnrf::Mat3& r, const Vec3& t, double s = 1.0) {
  dnrf::Mat4 m = dnrf::Mat4::Identity();
  m.topLeftCorner<3, 3>() = s * r;
  m.topRightCorner<3, 1>() = t;
  return m;
}

inline dnrf::TriangleMesh transformed(const dnrf::TriangleMesh& mesh, const dnrf::Mat4& m) {
  std::vector<Vec3> v;
  for (const Vec3& p : mesh.vertices()) v.push_back((m * p.homogeneous()).head<3>());
  return mesh.with_vertices(std::move(v));
}

/// Fresh directory under the build tree's temp area, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() / ("dnrf_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& child = "") const { return child.empty() ? path_.string() : (path_ / child).string(); }

 private:
  std::filesystem::path path_;
};

template <typename Fn>
dnrf::ErrorKind error_kind(Fn&& fn) {
  try {
    fn();
  } catch (const dnrf::Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a dnrf::Error";
  return dnrf::ErrorKind::InvalidArgument;
}

}  // namespace testing_support
