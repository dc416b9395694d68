// SPDX-License-Identifier: Apache-2.0
//
// Motion denoiser over T x H pose windows: a feature FC, a transpose, M
// blocks of (layer norm over time, time FC), a transpose back and a final
// feature FC. Every layer maps a dimension onto itself.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "cycleadapt/nn/params.hpp"

namespace cycleadapt::md {

inline constexpr nn::Magic kMdMagic{'C', 'A', 'M', 'D'};
inline constexpr double kDefaultPretrainSigma = 0.01;

struct MdConfig {
  std::size_t T = 49;
  std::size_t H = 144;
  std::size_t M = 4;
  bool relu = false;     // ReLU on each block's FC output
  bool residual = true;  // h + FC(LN(h)); false gives the plain LN(FC(h)) stack
  bool rest_offset = true;  // work on offsets from the identity rotation code; needs H % 6 == 0

  void validate() const;
};

struct MdNet {
  MdConfig config;
  nn::ParamSet params;
};

using Mask = std::vector<std::uint8_t>;  // 1 = masked

MdNet md_init(const MdConfig& config, std::uint64_t seed);

/// `input` evaluates to K x T x H (or T x H); the result has the same shape.
diff::NodeId build_md_forward(diff::Graph& g, const MdNet& net, diff::NodeId input);

/// Zeroes masked rows of a T x H window.
diff::Tensor apply_mask(const diff::Tensor& theta, const Mask& mask);

/// Theta is T x H or K x T x H. A mask (length T, shared by every window)
/// zeroes rows before the network.
diff::Tensor md_forward(const MdNet& net, const diff::Tensor& theta, const Mask* mask = nullptr);

/// Exactly ceil(T/2) ones, positions uniform without replacement.
Mask sample_mask(std::size_t T, std::mt19937_64& rng);

/// Masks ceil(n/2) of the first n rows only; rows n..T-1 are never masked.
Mask sample_mask_prefix(std::size_t T, std::size_t n, std::mt19937_64& rng);

/// (1/norm) * sum_t m_t * mean_h |out_t - target_t| over T x H tensors, with
/// norm = T unless given. Evaluates to an exact zero constant when nothing is
/// masked.
diff::NodeId build_md_selfsup_loss(diff::Graph& g, diff::NodeId out, const diff::Tensor& target,
                                   const Mask& mask, std::size_t norm = 0);

double md_selfsup_loss(const diff::Tensor& theta_out, const diff::Tensor& theta_in, const Mask& mask);

struct MdPretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;  // windows per step
  double lr_start = 1e-3;
  double lr_end = 1e-5;
  double sigma = kDefaultPretrainSigma;
  std::size_t log_every = 0;  // 0 disables the checkpoint log
  std::size_t probe_windows = 16;
  std::uint64_t seed = 0;
};

struct MdPretrainLog {
  std::vector<std::size_t> steps;
  /// mean |net(noisy probe) - clean probe| on a fixed set of training windows
  std::vector<double> probe_error;
};

/// Denoising pre-training on clean sequences (each L x H with L >= T): random
/// windows get i.i.d. N(0, sigma^2) noise and the full unmasked output is
/// supervised against the clean window with the per-frame L1 mean.
MdPretrainLog md_pretrain(MdNet& net, const std::vector<diff::Tensor>& motions, const MdPretrainConfig& config);

/// Per-column temporal Gaussian smoothing of an L x H sequence; radius
/// ceil(3 std), renormalized kernel, replicated edges.
diff::Tensor gaussian_filter_baseline(const diff::Tensor& theta, double std_frames);

std::vector<double> gaussian_kernel(double std_frames);

}  // namespace cycleadapt::md
