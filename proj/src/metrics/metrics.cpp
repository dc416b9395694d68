// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/metrics/metrics.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include <cmath>

#include "cycleadapt/error.hpp"

namespace cycleadapt::metrics {

using diff::Tensor;

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape != b.shape || a.rank() != 3 || a.shape[2] != 3)
    throw ShapeError(std::string(what) + ": expected matching N x K x 3 tensors, got " + diff::to_string(a.shape) +
                     " and " + diff::to_string(b.shape));
}

Eigen::Vector3d point(const Tensor& t, std::size_t frame, std::size_t k) {
  const std::size_t K = t.shape[1];
  const double* p = &t.data[(frame * K + k) * 3];
  return {p[0], p[1], p[2]};
}

}  // namespace

PointSet frame_points(const Tensor& seq, std::size_t frame) {
  const std::size_t K = seq.shape.at(1);
  PointSet out(static_cast<Eigen::Index>(K), 3);
  for (std::size_t k = 0; k < K; ++k) out.row(static_cast<Eigen::Index>(k)) = point(seq, frame, k).transpose();
  return out;
}

double mpjpe(const Tensor& pred, const Tensor& gt, std::size_t root, double unit_scale) {
  check_pair(pred, gt, "mpjpe");
  const std::size_t N = pred.shape[0], J = pred.shape[1];
  if (root >= J) throw RangeError("mpjpe: root index out of range");
  if (N == 0 || J == 0) return 0.0;
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const Eigen::Vector3d rp = point(pred, n, root), rg = point(gt, n, root);
    for (std::size_t j = 0; j < J; ++j) total += ((point(pred, n, j) - rp) - (point(gt, n, j) - rg)).norm();
  }
  return unit_scale * total / static_cast<double>(N * J);
}

Similarity procrustes_align(const PointSet& pred, const PointSet& gt) {
  if (pred.rows() != gt.rows() || pred.rows() < 3) throw ShapeError("procrustes_align: need matching sets of >= 3 points");
  const Eigen::RowVector3d mp = pred.colwise().mean(), mg = gt.colwise().mean();
  const PointSet p = pred.rowwise() - mp;
  const PointSet q = gt.rowwise() - mg;
  const double var_p = p.squaredNorm();
  if (var_p <= 1e-300 || q.squaredNorm() <= 1e-300) throw DegenerateInputError("procrustes_align: zero-variance point set");
  const Eigen::Matrix3d cov = q.transpose() * p;  // sum_j q_j p_j^T
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d(1.0, 1.0, 1.0);
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2) = -1.0;
  Similarity sim;
  sim.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  sim.scale = svd.singularValues().dot(d) / var_p;
  sim.translation = mg.transpose() - sim.scale * sim.rotation * mp.transpose();
  return sim;
}

double alignment_residual(const Similarity& sim, const PointSet& pred, const PointSet& gt) {
  double r = 0.0;
  for (Eigen::Index j = 0; j < pred.rows(); ++j)
    r += (sim.apply(pred.row(j).transpose()) - gt.row(j).transpose()).squaredNorm();
  return r;
}

double pa_mpjpe(const Tensor& pred, const Tensor& gt, double unit_scale) {
  check_pair(pred, gt, "pa_mpjpe");
  const std::size_t N = pred.shape[0], J = pred.shape[1];
  if (N == 0) return 0.0;
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const PointSet p = frame_points(pred, n), q = frame_points(gt, n);
    const Similarity sim = procrustes_align(p, q);
    for (Eigen::Index j = 0; j < p.rows(); ++j)
      total += (sim.apply(p.row(j).transpose()) - q.row(j).transpose()).norm();
  }
  return unit_scale * total / static_cast<double>(N * J);
}

double mpvpe(const Tensor& pred_mesh, const Tensor& gt_mesh, const Tensor& pred_joints, const Tensor& gt_joints,
             std::size_t root, double unit_scale) {
  check_pair(pred_mesh, gt_mesh, "mpvpe");
  check_pair(pred_joints, gt_joints, "mpvpe");
  const std::size_t N = pred_mesh.shape[0], V = pred_mesh.shape[1];
  if (pred_joints.shape[0] != N) throw ShapeError("mpvpe: joint and mesh frame counts differ");
  if (root >= pred_joints.shape[1]) throw RangeError("mpvpe: root index out of range");
  if (N == 0 || V == 0) return 0.0;
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const Eigen::Vector3d rp = point(pred_joints, n, root), rg = point(gt_joints, n, root);
    for (std::size_t v = 0; v < V; ++v) total += ((point(pred_mesh, n, v) - rp) - (point(gt_mesh, n, v) - rg)).norm();
  }
  return unit_scale * total / static_cast<double>(N * V);
}

double accel_error(const Tensor& pred, const Tensor& gt, double unit_scale) {
  check_pair(pred, gt, "accel_error");
  const std::size_t N = pred.shape[0], J = pred.shape[1];
  if (N < 3) throw RangeError("accel_error: need at least 3 frames");
  if (J == 0) return 0.0;
  double total = 0.0;
  for (std::size_t t = 1; t + 1 < N; ++t)
    for (std::size_t j = 0; j < J; ++j) {
      const Eigen::Vector3d ap = point(pred, t + 1, j) - 2.0 * point(pred, t, j) + point(pred, t - 1, j);
      const Eigen::Vector3d ag = point(gt, t + 1, j) - 2.0 * point(gt, t, j) + point(gt, t - 1, j);
      total += (ap - ag).norm();
    }
  return unit_scale * total / static_cast<double>((N - 2) * J);
}

MetricReport evaluate(const Tensor& pred_joints, const Tensor& pred_mesh, const Tensor& gt_joints,
                      const Tensor& gt_mesh) {
  MetricReport r;
  r.mpjpe = mpjpe(pred_joints, gt_joints);
  r.pa_mpjpe = pa_mpjpe(pred_joints, gt_joints);
  r.mpvpe = mpvpe(pred_mesh, gt_mesh, pred_joints, gt_joints);
  r.accel = pred_joints.shape[0] >= 3 ? accel_error(pred_joints, gt_joints) : 0.0;
  return r;
}

}  // namespace cycleadapt::metrics
