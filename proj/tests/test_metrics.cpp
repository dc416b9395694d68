// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Geometry>
#include <limits>

#include "doctest.h"

#include "cycleadapt/error.hpp"
#include "cycleadapt/metrics/metrics.hpp"
#include "test_util.hpp"

using namespace cycleadapt;
using diff::Tensor;
using metrics::PointSet;
using testutil::random_tensor;

namespace {

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  return Eigen::Quaterniond(g(rng), g(rng), g(rng), g(rng)).normalized().toRotationMatrix();
}

Tensor transform(const Tensor& seq, double s, const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
  Tensor out = seq;
  for (std::size_t i = 0; i < seq.numel(); i += 3) {
    const Eigen::Vector3d p(seq.data[i], seq.data[i + 1], seq.data[i + 2]);
    const Eigen::Vector3d q = s * R * p + t;
    for (int c = 0; c < 3; ++c) out.data[i + c] = q[c];
  }
  return out;
}

// Closed form from Eigen's own implementation.
double pa_mpjpe_umeyama(const Tensor& pred, const Tensor& gt) {
  const std::size_t N = pred.shape[0], J = pred.shape[1];
  double total = 0.0;
  for (std::size_t f = 0; f < N; ++f) {
    Eigen::Matrix3Xd P(3, J), G(3, J);
    for (std::size_t j = 0; j < J; ++j)
      for (int c = 0; c < 3; ++c) {
        P(c, static_cast<Eigen::Index>(j)) = pred.data[(f * J + j) * 3 + c];
        G(c, static_cast<Eigen::Index>(j)) = gt.data[(f * J + j) * 3 + c];
      }
    const Eigen::Matrix4d T = Eigen::umeyama(P, G, true);
    for (std::size_t j = 0; j < J; ++j) {
      const Eigen::Vector3d q = T.topLeftCorner<3, 3>() * P.col(static_cast<Eigen::Index>(j)) + T.topRightCorner<3, 1>();
      total += (q - G.col(static_cast<Eigen::Index>(j))).norm();
    }
  }
  return 1000.0 * total / static_cast<double>(N * J);
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("mpjpe") {
    std::mt19937_64 rng(0);
    const Tensor gt = random_tensor({4, 6, 3}, rng);
    CHECK(metrics::mpjpe(gt, gt) == 0.0);
    CHECK(metrics::mpjpe(transform(gt, 1.0, Eigen::Matrix3d::Identity(), {10, 0, 0}), gt) < 1e-9);
    Tensor g1({1, 3, 3}, 0.0), p1({1, 3, 3}, 0.0);
    p1.data[3] = 0.003;
    p1.data[7] = 0.004;
    CHECK(metrics::mpjpe(p1, g1) == doctest::Approx(7.0 / 3.0).epsilon(1e-12));
    CHECK_THROWS_AS(metrics::mpjpe(p1, gt), ShapeError);
    CHECK_THROWS_AS(metrics::mpjpe(p1, g1, 3), RangeError);
  }

  TEST_CASE("procrustes recovers exact similarities") {
    std::mt19937_64 rng(1);
    for (int k = 0; k < 20; ++k) {
      PointSet p(6, 3);
      std::normal_distribution<double> g(0.0, 1.0);
      for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = g(rng);
      const Eigen::Matrix3d R0 = random_rotation(rng);
      const Eigen::Vector3d t0(g(rng), g(rng), g(rng));
      PointSet q(6, 3);
      for (Eigen::Index i = 0; i < 6; ++i) q.row(i) = (2.0 * R0 * p.row(i).transpose() + t0).transpose();
      const auto sim = metrics::procrustes_align(p, q);
      CHECK(std::abs(sim.scale - 2.0) < 1e-9);
      CHECK((sim.rotation - R0).cwiseAbs().maxCoeff() < 1e-9);
      CHECK((sim.translation - t0).cwiseAbs().maxCoeff() < 1e-9);
      const auto id = metrics::procrustes_align(p, p);
      CHECK(std::abs(id.scale - 1.0) < 1e-9);
      CHECK((id.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
      CHECK(id.translation.norm() < 1e-9);
    }
  }

  TEST_CASE("procrustes corrects reflections") {
    PointSet p(4, 3), q(4, 3);
    p << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
    q = p;
    q.col(2) *= -1.0;  // a mirror image
    const auto sim = metrics::procrustes_align(p, q);
    CHECK(sim.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("procrustes beats random similarity transforms") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.1, 3.0);
    for (int inst = 0; inst < 10; ++inst) {
      PointSet p(4, 3), q(4, 3);
      for (Eigen::Index i = 0; i < 12; ++i) {
        p.data()[i] = g(rng);
        q.data()[i] = g(rng);
      }
      const auto best = metrics::procrustes_align(p, q);
      const double r0 = metrics::alignment_residual(best, p, q);
      double lowest = std::numeric_limits<double>::infinity();
      for (int trial = 0; trial < 20000; ++trial) {
        metrics::Similarity s;
        if (trial % 2 == 0) {
          s.scale = u(rng);
          s.rotation = random_rotation(rng);
          s.translation = Eigen::Vector3d(g(rng), g(rng), g(rng));
        } else {
          // small perturbations of the optimum
          s.scale = best.scale * (1.0 + 0.01 * g(rng));
          s.rotation = Eigen::AngleAxisd(0.01 * g(rng), Eigen::Vector3d(g(rng), g(rng), g(rng)).normalized()) * best.rotation;
          s.translation = best.translation + 0.01 * Eigen::Vector3d(g(rng), g(rng), g(rng));
        }
        lowest = std::min(lowest, metrics::alignment_residual(s, p, q));
      }
      CHECK(r0 <= lowest + 1e-12);
    }
  }

  TEST_CASE("procrustes rejects degenerate sets") {
    PointSet p = PointSet::Ones(4, 3), q(4, 3);
    q << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
    CHECK_THROWS_AS(metrics::procrustes_align(p, q), DegenerateInputError);
    CHECK_THROWS_AS(metrics::procrustes_align(q, p), DegenerateInputError);
    CHECK_THROWS_AS(metrics::procrustes_align(q.topRows(2), q.topRows(2)), ShapeError);
  }

  TEST_CASE("pa_mpjpe") {
    std::mt19937_64 rng(3);
    const Tensor gt = random_tensor({5, 8, 3}, rng);
    CHECK(metrics::pa_mpjpe(transform(gt, 0.5, random_rotation(rng), {1, 2, 3}), gt) < 1e-9);
    for (int k = 0; k < 50; ++k) {
      const Tensor a = random_tensor({2, 8, 3}, rng), b = random_tensor({2, 8, 3}, rng);
      CHECK(metrics::pa_mpjpe(a, b) <= metrics::mpjpe(a, b) + 1e-9);
      CHECK(std::abs(metrics::pa_mpjpe(a, b) - pa_mpjpe_umeyama(a, b)) < 1e-9);
      // invariant to a similarity transform of the prediction alone
      const Tensor moved = transform(a, 1.7, random_rotation(rng), {0.3, -2, 5});
      CHECK(std::abs(metrics::pa_mpjpe(moved, b) - metrics::pa_mpjpe(a, b)) < 1e-9);
    }
  }

  TEST_CASE("mpvpe") {
    std::mt19937_64 rng(4);
    const Tensor mesh = random_tensor({1, 120, 3}, rng), joints = random_tensor({1, 24, 3}, rng);
    CHECK(metrics::mpvpe(mesh, mesh, joints, joints) == 0.0);
    const Eigen::Vector3d off(0.1, -0.2, 0.3);
    const Tensor m2 = transform(mesh, 1.0, Eigen::Matrix3d::Identity(), off);
    const Tensor j2 = transform(joints, 1.0, Eigen::Matrix3d::Identity(), off);
    CHECK(metrics::mpvpe(m2, mesh, j2, joints) < 1e-9);
    Tensor one = mesh;
    one.data[3 * 17 + 1] += 0.005;
    CHECK(metrics::mpvpe(one, mesh, joints, joints) == doctest::Approx(5.0 / 120.0).epsilon(1e-9));
  }

  TEST_CASE("accel_error") {
    std::mt19937_64 rng(5);
    const Tensor gt = random_tensor({10, 4, 3}, rng);
    CHECK(metrics::accel_error(gt, gt) == 0.0);
    Tensor drift = gt, both_p = random_tensor({10, 4, 3}, rng), both_g = gt;
    for (std::size_t t = 0; t < 10; ++t)
      for (std::size_t i = 0; i < 12; ++i) {
        const double lin = 0.3 + 0.07 * static_cast<double>(t) * static_cast<double>(i % 3 + 1);
        drift.data[t * 12 + i] += lin;
      }
    CHECK(metrics::accel_error(drift, gt) < 1e-9);
    const double base = metrics::accel_error(both_p, both_g);
    for (std::size_t t = 0; t < 10; ++t)
      for (std::size_t i = 0; i < 12; ++i) {
        both_p.data[t * 12 + i] += 0.1 * t - 1.0;
        both_g.data[t * 12 + i] += 0.1 * t - 1.0;
      }
    CHECK(std::abs(metrics::accel_error(both_p, both_g) - base) < 1e-9);
    // 1D example in mm: positions (0,1,4) vs (0,1,2)
    Tensor p({3, 1, 3}, 0.0), g({3, 1, 3}, 0.0);
    p.data[3] = 1;
    p.data[6] = 4;
    g.data[3] = 1;
    g.data[6] = 2;
    CHECK(metrics::accel_error(p, g, 1.0) == doctest::Approx(2.0));
    CHECK_THROWS_AS(metrics::accel_error(random_tensor({2, 4, 3}, rng), random_tensor({2, 4, 3}, rng)), RangeError);
  }

  TEST_CASE("translation invariance and frame order") {
    std::mt19937_64 rng(6);
    const Tensor p = random_tensor({6, 5, 3}, rng), g = random_tensor({6, 5, 3}, rng);
    const Eigen::Vector3d off(4, -1, 2);
    const Tensor ps = transform(p, 1.0, Eigen::Matrix3d::Identity(), off);
    const Tensor gs = transform(g, 1.0, Eigen::Matrix3d::Identity(), off);
    CHECK(std::abs(metrics::mpjpe(ps, gs) - metrics::mpjpe(p, g)) < 1e-9);
    CHECK(std::abs(metrics::pa_mpjpe(ps, gs) - metrics::pa_mpjpe(p, g)) < 1e-9);
    CHECK(std::abs(metrics::accel_error(ps, gs) - metrics::accel_error(p, g)) < 1e-9);
    // reversing frames leaves per-frame metrics alone but not accel
    auto reversed = [](const Tensor& x) {
      Tensor r = x;
      const std::size_t N = x.shape[0], w = x.numel() / N;
      for (std::size_t t = 0; t < N; ++t)
        std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(t * w), w,
                    r.data.begin() + static_cast<std::ptrdiff_t>((N - 1 - t) * w));
      return r;
    };
    CHECK(std::abs(metrics::mpjpe(reversed(p), reversed(g)) - metrics::mpjpe(p, g)) < 1e-9);
    CHECK(std::abs(metrics::pa_mpjpe(reversed(p), reversed(g)) - metrics::pa_mpjpe(p, g)) < 1e-9);
    Tensor swapped_p = p;
    std::swap_ranges(swapped_p.data.begin(), swapped_p.data.begin() + 15, swapped_p.data.begin() + 30);
    Tensor swapped_g = g;
    std::swap_ranges(swapped_g.data.begin(), swapped_g.data.begin() + 15, swapped_g.data.begin() + 30);
    CHECK(std::abs(metrics::mpjpe(swapped_p, swapped_g) - metrics::mpjpe(p, g)) < 1e-9);
    CHECK(std::abs(metrics::accel_error(swapped_p, swapped_g) - metrics::accel_error(p, g)) > 1e-6);
  }

  TEST_CASE("evaluate reports all four metrics") {
    std::mt19937_64 rng(7);
    const Tensor j = random_tensor({4, 5, 3}, rng), m = random_tensor({4, 9, 3}, rng);
    const Tensor jp = random_tensor({4, 5, 3}, rng), mp = random_tensor({4, 9, 3}, rng);
    const auto r = metrics::evaluate(jp, mp, j, m);
    CHECK(r.mpjpe == metrics::mpjpe(jp, j));
    CHECK(r.pa_mpjpe == metrics::pa_mpjpe(jp, j));
    CHECK(r.mpvpe == metrics::mpvpe(mp, m, jp, j));
    CHECK(r.accel == metrics::accel_error(jp, j));
    CHECK(r.pa_mpjpe <= r.mpjpe + 1e-9);
  }
}
