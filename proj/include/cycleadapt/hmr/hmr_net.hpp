// SPDX-License-Identifier: Apache-2.0
//
// Per-frame mesh regressor: an MLP from a feature vector to pose (6D per
// joint), shape and weak-perspective camera, plus its adaptation loss.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "cycleadapt/body/body_model.hpp"
#include "cycleadapt/nn/params.hpp"

namespace cycleadapt::hmr {

inline constexpr nn::Magic kHmrMagic{'C', 'A', 'H', 'M'};
inline constexpr double kDefaultGamma = 0.001;

struct HmrConfig {
  std::size_t feature_dim = 512;
  std::size_t hidden_dim = 256;
  std::size_t num_hidden_layers = 3;
  std::size_t joints = body::kDefaultJoints;

  std::size_t output_dim() const { return joints * body::kRotDim + body::kShapeDim + 3; }
  void validate() const;
};

struct HmrNet {
  HmrConfig config;
  nn::ParamSet params;
};

struct HmrOutput {
  std::vector<double> theta;
  std::vector<double> beta;
  body::CameraParams camera;
};

/// One (x, y, confidence) triple per joint.
struct Keypoints2D {
  std::vector<std::array<double, 3>> points;
};

HmrNet hmr_init(const HmrConfig& config, std::uint64_t seed);

struct HmrNodes {
  diff::NodeId theta;   // B x 6J
  diff::NodeId beta;    // B x 10
  diff::NodeId camera;  // B x 3
};

HmrNodes build_hmr_forward(diff::Graph& g, const HmrNet& net, diff::NodeId features, std::size_t batch);

/// features is B x F.
std::vector<HmrOutput> hmr_forward(const HmrNet& net, const diff::Tensor& features);

/// Stacks outputs into B x 6J, B x 10, B x 3 tensors.
struct HmrBatch {
  diff::Tensor theta, beta, camera;
};
HmrBatch hmr_forward_batch(const HmrNet& net, const diff::Tensor& features);

struct HmrLossOptions {
  double gamma = kDefaultGamma;
  bool first_cycle = false;   // drops the parameter term
  bool use_smpl = true;       // false: 2D-only adaptation
  bool weighted_2d = true;    // confidence-weighted reprojection term
};

struct HmrLossNodes {
  diff::NodeId total;
  std::optional<diff::NodeId> smpl;    // absent when the parameter term is off
  std::optional<diff::NodeId> reproj;  // absent when no keypoint has confidence
};

/// L_HMR = L_SMPL + L_2D for a batch. `pseudo_theta`/`pseudo_beta` are B x 6J
/// and B x 10 targets (ignored when the parameter term is off); `keypoints`
/// is B x J x 3 holding (x, y, confidence).
HmrLossNodes build_hmr_loss(diff::Graph& g, const body::BodyModel& model, const HmrNodes& pred,
                            const diff::Tensor* pseudo_theta, const diff::Tensor* pseudo_beta,
                            const diff::Tensor& keypoints, const HmrLossOptions& options, std::size_t batch);

struct HmrLossValue {
  double total = 0.0;
  double smpl = 0.0;
  double reproj = 0.0;
};

/// Single-output convenience wrapper around build_hmr_loss.
HmrLossValue hmr_loss(const HmrOutput& output, const std::optional<body::SmplParams>& pseudo_gt,
                      const Keypoints2D& keypoints, const body::BodyModel& model, double gamma,
                      bool first_cycle, bool weighted_2d = true);

diff::Tensor keypoints_tensor(const std::vector<Keypoints2D>& keypoints);

struct HmrPretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 32;
  double lr_start = 1e-3;
  double lr_end = 1e-5;
  std::uint64_t seed = 0;
};

/// Supervised source-domain training: L1 on theta and beta against ground
/// truth plus the reprojection term on the given keypoints.
void hmr_pretrain(HmrNet& net, const body::BodyModel& model, const diff::Tensor& features,
                  const diff::Tensor& gt_theta, const diff::Tensor& gt_beta, const diff::Tensor& keypoints,
                  const HmrPretrainConfig& config);

}  // namespace cycleadapt::hmr
