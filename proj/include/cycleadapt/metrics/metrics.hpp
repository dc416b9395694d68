// SPDX-License-Identifier: Apache-2.0
//
// Pose metrics on N x J x 3 tensors in meters, reported in millimeters.
#pragma once

#include <Eigen/Core>

#include "cycleadapt/diff/tensor.hpp"

namespace cycleadapt::metrics {

inline constexpr double kMetersToMm = 1000.0;
inline constexpr std::size_t kRootJoint = 0;

struct MetricReport {
  double mpjpe = 0.0;
  double pa_mpjpe = 0.0;
  double mpvpe = 0.0;
  double accel = 0.0;  // mm / frame^2; 0 when fewer than 3 frames
};

/// Root-aligned mean joint distance.
double mpjpe(const diff::Tensor& pred, const diff::Tensor& gt, std::size_t root = kRootJoint,
             double unit_scale = kMetersToMm);

/// Similarity transform with s * R * pred_j + t ~= gt_j.
struct Similarity {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return scale * rotation * p + translation; }
};

using PointSet = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Least-squares similarity from the covariance SVD with reflection
/// correction. Throws DegenerateInputError when either set has no spread.
Similarity procrustes_align(const PointSet& pred, const PointSet& gt);

/// sum_j |s R p_j + t - g_j|^2
double alignment_residual(const Similarity& sim, const PointSet& pred, const PointSet& gt);

double pa_mpjpe(const diff::Tensor& pred, const diff::Tensor& gt, double unit_scale = kMetersToMm);

/// Vertices aligned by the root joint of their own skeleton.
double mpvpe(const diff::Tensor& pred_mesh, const diff::Tensor& gt_mesh, const diff::Tensor& pred_joints,
             const diff::Tensor& gt_joints, std::size_t root = kRootJoint, double unit_scale = kMetersToMm);

/// Mean over interior frames and joints of |a_pred - a_gt| with
/// a_t = x_{t+1} - 2 x_t + x_{t-1}. Needs N >= 3.
double accel_error(const diff::Tensor& pred, const diff::Tensor& gt, double unit_scale = kMetersToMm);

MetricReport evaluate(const diff::Tensor& pred_joints, const diff::Tensor& pred_mesh, const diff::Tensor& gt_joints,
                      const diff::Tensor& gt_mesh);

PointSet frame_points(const diff::Tensor& seq, std::size_t frame);

}  // namespace cycleadapt::metrics
