// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "cycleadapt/diff/graph.hpp"

namespace testutil {

using cycleadapt::diff::Tensor;

inline Tensor random_tensor(cycleadapt::diff::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> g(0.0, scale);
  for (double& x : t.data) x = g(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  return worst;
}

/// Central differences of a scalar node, computed independently of
/// diff::grad_check.
inline Tensor numeric_grad(const cycleadapt::diff::Graph& g, cycleadapt::diff::Bindings bindings,
                           cycleadapt::diff::NodeId loss, const std::string& leaf, double h = 1e-6) {
  Tensor& p = bindings.at(leaf);
  Tensor out(p.shape);
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double orig = p.data[i];
    p.data[i] = orig + h;
    const double up = cycleadapt::diff::evaluate(g, bindings)[loss].item();
    p.data[i] = orig - h;
    const double down = cycleadapt::diff::evaluate(g, bindings)[loss].item();
    p.data[i] = orig;
    out.data[i] = (up - down) / (2.0 * h);
  }
  return out;
}

inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double a = analytic.data[i], n = numeric.data[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}));
  }
  return worst;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("cycleadapt_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
