// SPDX-License-Identifier: Apache-2.0
//
// A small SMPL-style articulated body: per-joint 6D rotations, linear shape
// blend shapes, forward kinematics along a joint tree, linear blend skinning
// and a joint regressor applied to the skinned mesh.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cycleadapt/diff/graph.hpp"

namespace cycleadapt::body {

inline constexpr std::size_t kRotDim = 6;
inline constexpr std::size_t kShapeDim = 10;
inline constexpr std::size_t kDefaultJoints = 24;
inline constexpr std::size_t kDefaultVertices = 120;
inline constexpr std::size_t kPoseDim = kDefaultJoints * kRotDim;  // 144

/// The 6D code of the identity rotation.
inline constexpr std::array<double, 6> kIdentityRot6d{1, 0, 0, 0, 1, 0};

struct SmplParams {
  std::vector<double> theta;  // joints x 6
  std::vector<double> beta;   // kShapeDim

  /// Identity pose for every joint and zero shape.
  static SmplParams rest(std::size_t joints = kDefaultJoints);
  bool finite() const;
  friend bool operator==(const SmplParams&, const SmplParams&) = default;
};

struct CameraParams {
  double s = 1.0;
  double tx = 0.0;
  double ty = 0.0;
  friend bool operator==(const CameraParams&, const CameraParams&) = default;
};

struct BodyModel {
  std::size_t num_joints = 0;
  std::size_t num_vertices = 0;
  diff::Tensor template_vertices;  // V x 3
  diff::Tensor template_joints;    // J x 3, equals joint_regressor * template_vertices
  std::vector<int> parents;        // parents[0] == -1
  diff::Tensor skin_weights;       // V x J
  diff::Tensor shape_dirs;         // V x 3 x kShapeDim
  diff::Tensor joint_regressor;    // J x V

  std::size_t pose_dim() const { return num_joints * kRotDim; }

  /// Throws InvariantError naming the first violated invariant.
  void validate() const;
};

struct BodyGeometry {
  diff::Tensor vertices;  // V x 3 (or B x V x 3 for batches)
  diff::Tensor joints;    // J x 3 (or B x J x 3)
};

using RotMat = std::array<double, 9>;  // row-major 3x3

RotMat rot6d_to_rotmat(std::span<const double, 6> r);

/// Graph nodes of a batched forward pass.
struct BodyNodes {
  diff::NodeId vertices;  // B x V x 3
  diff::NodeId joints;    // B x J x 3
};

/// Appends the forward pass for a batch of `batch` frames. `theta` must
/// evaluate to B x (6J) and `beta` to B x 10.
BodyNodes build_body_forward(diff::Graph& g, const BodyModel& model, diff::NodeId theta,
                             diff::NodeId beta, std::size_t batch);

/// Weak-perspective projection of B x N x 3 points with per-row cameras B x 3
/// laid out as (s, tx, ty). Returns B x N x 2.
diff::NodeId build_projection(diff::Graph& g, diff::NodeId points, diff::NodeId camera,
                              std::size_t batch, std::size_t count);

/// joint_regressor applied to B x V x 3 vertices, giving B x J x 3.
diff::NodeId build_joint_regression(diff::Graph& g, const BodyModel& model, diff::NodeId vertices,
                                    std::size_t batch);

BodyGeometry body_forward(const BodyModel& model, const SmplParams& params);

/// Batched forward; theta is B x 6J, beta is B x 10.
BodyGeometry body_forward_batch(const BodyModel& model, const diff::Tensor& theta,
                                const diff::Tensor& beta);

/// template + shape blend, before any posing (V x 3).
diff::Tensor shaped_rest_mesh(const BodyModel& model, std::span<const double> beta);

/// points is N x 3; returns N x 2.
diff::Tensor project_weak_perspective(const CameraParams& camera, const diff::Tensor& points);

BodyModel build_toy_body(std::uint64_t seed, std::size_t joints = kDefaultJoints,
                         std::size_t vertices = kDefaultVertices);

void to_json(nlohmann::json& j, const BodyModel& model);
void from_json(const nlohmann::json& j, BodyModel& model);

void save_body_model(const std::string& path, const BodyModel& model);
BodyModel load_body_model(const std::string& path);

}  // namespace cycleadapt::body
