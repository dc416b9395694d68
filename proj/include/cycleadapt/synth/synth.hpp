// SPDX-License-Identifier: Apache-2.0
//
// Synthetic test videos: sinusoidal joint motion, linear feature "images"
// with a per-domain mixing map, and noisy keypoints with binary dropout.
#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "json.hpp"

#include "cycleadapt/body/body_model.hpp"

namespace cycleadapt::synth {

inline constexpr std::uint32_t kVideoVersion = 1;

struct DomainSpec {
  std::string name = "source";
  double freq_min = 0.005;  // cycles per frame
  double freq_max = 0.02;
  double amp_min = 0.0;     // radians
  double amp_max = 0.5;
  /// Nonzero: every joint rotates about a fixed axis drawn from this seed
  /// (shared by all clips); zero: a fresh random axis per joint and clip.
  std::uint64_t axis_seed = 0;
  /// Nonzero: joint angles mix this many latent oscillators through a
  /// weight matrix drawn alongside the axes.
  std::size_t synergies = 0;
  std::uint64_t mixing_seed = 1;
  /// The mixing map is (1 - gap) * A(base_mixing_seed) + gap * A(mixing_seed).
  std::uint64_t base_mixing_seed = 1;
  double gap = 1.0;
  double feature_noise = 0.01;
  double keypoint_noise = 0.02;
  double p_drop = 0.2;
  body::CameraParams camera{0.9, 0.05, -0.02};

  void validate() const;
  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

void to_json(nlohmann::json& j, const DomainSpec& spec);
void from_json(const nlohmann::json& j, DomainSpec& spec);

struct Motion {
  diff::Tensor theta;   // N x 6J
  diff::Tensor beta;    // N x 10, one shape repeated
  diff::Tensor joints;  // N x J x 3
  diff::Tensor mesh;    // N x V x 3
};

/// Axis-angle vector to the 6D code (first two rotation columns).
std::array<double, 6> axis_angle_to_rot6d(const std::array<double, 3>& w);

Motion gen_motion(const body::BodyModel& model, const DomainSpec& spec, std::size_t N, std::uint64_t seed);

/// A and b of the feature map for a given pose dimension and feature width.
struct FeatureMap {
  diff::Tensor A;  // F x (6J + 10)
  diff::Tensor b;  // F
};
FeatureMap feature_map(const DomainSpec& spec, std::size_t pose_dim, std::size_t feature_dim);

std::vector<double> render_features(const FeatureMap& map, std::span<const double> theta,
                                    std::span<const double> beta, double noise_std, std::mt19937_64& rng);

/// Returns J (x, y, confidence) triples; dropped points read (0, 0, 0).
std::vector<std::array<double, 3>> simulate_keypoints(const diff::Tensor& joints3d, const body::CameraParams& camera,
                                                      const DomainSpec& spec, std::mt19937_64& rng);

struct SyntheticVideo {
  DomainSpec spec;
  diff::Tensor features;   // N x F
  diff::Tensor theta;      // N x 6J
  diff::Tensor beta;       // N x 10
  diff::Tensor keypoints;  // N x J x 3
  diff::Tensor joints;     // N x J x 3, ground truth
  diff::Tensor mesh;       // N x V x 3, ground truth
  body::CameraParams camera;

  std::size_t frames() const { return features.shape.empty() ? 0 : features.shape[0]; }
  body::SmplParams params(std::size_t frame) const;
  friend bool operator==(const SyntheticVideo&, const SyntheticVideo&) = default;
};

SyntheticVideo make_video(const body::BodyModel& model, const DomainSpec& spec, std::size_t N, std::size_t F,
                          std::uint64_t seed);

/// Writes `path` (header + frames) and `path + ".gt"` (geometry).
void write_video(const std::string& path, const SyntheticVideo& video);
SyntheticVideo read_video(const std::string& path);

}  // namespace cycleadapt::synth
