// SPDX-License-Identifier: Apache-2.0
//
// Alternating adaptation of the mesh regressor and the motion denoiser on an
// unlabeled video, exchanging per-frame estimates through a result store.
#pragma once

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "cycleadapt/adapt/optim.hpp"
#include "cycleadapt/body/body_model.hpp"
#include "cycleadapt/hmr/hmr_net.hpp"
#include "cycleadapt/md/md_net.hpp"
#include "cycleadapt/metrics/metrics.hpp"

namespace cycleadapt::adapt {

/// Latest (theta, beta) per frame.
struct ResultStore {
  diff::Tensor theta;  // N x 6J
  diff::Tensor beta;   // N x 10
  std::vector<std::uint8_t> md_written;  // frame last written by the denoiser

  static ResultStore zeros(std::size_t frames, std::size_t pose_dim);
  std::size_t frames() const { return theta.shape.empty() ? 0 : theta.shape[0]; }
  friend bool operator==(const ResultStore&, const ResultStore&) = default;
};

struct AdaptConfig {
  std::size_t cycles = 12;
  std::size_t batch = 32;
  double lr_start = 5e-5;
  double lr_end = 1e-6;
  double gamma = hmr::kDefaultGamma;
  std::size_t windows_per_cycle = 0;  // 0: ceil(N / T)
  std::uint64_t seed = 0;

  bool frozen_md = false;       // denoiser never updated; targets fixed after cycle 1
  bool use_smpl = true;         // false: reprojection term only
  bool weighted_2d = true;
  bool freeze_hmr = false;      // regressor never updated
  double gaussian_std = 0.0;    // > 0: temporal Gaussian filter replaces the denoiser stage
  std::size_t online_horizon = 500;  // cosine horizon in frames for online_adapt
  double md_lr_scale = 1.0;     // denoiser steps use this multiple of the shared schedule

  void validate() const;
};

void to_json(nlohmann::json& j, const AdaptConfig& c);
void from_json(const nlohmann::json& j, AdaptConfig& c);

/// What adaptation may see: features and 2D keypoints, never 3D ground truth.
struct AdaptInput {
  diff::Tensor features;   // N x F
  diff::Tensor keypoints;  // N x J x 3
  std::size_t frames() const { return features.shape.at(0); }
};

struct Nets {
  hmr::HmrNet hmr;
  md::MdNet md;
};

struct AdaptState {
  OptState hmr_opt;
  OptState md_opt;
  std::size_t step = 0;         // shared schedule position
  std::size_t total_steps = 1;  // schedule horizon
  std::optional<ResultStore> frozen_targets;
};

struct HmrBatchEvent {
  std::size_t cycle;
  std::vector<std::size_t> frames;
  std::optional<double> smpl;  // absent when the parameter term is off
  double total;
};

struct MdWindowEvent {
  std::size_t cycle;
  std::size_t start;
  std::size_t valid_rows;  // rows backed by real frames
  md::Mask mask;
  double loss;
};

enum class Stage { Hmr, Md };

/// Optional instrumentation; every callback may be empty.
struct Hooks {
  std::function<void(const ResultStore&)> on_store_init;
  std::function<void(const HmrBatchEvent&)> on_hmr_batch;
  std::function<void(const MdWindowEvent&)> on_md_window;
  std::function<void(std::size_t cycle, Stage, const ResultStore& before, const ResultStore& after)> on_stage_end;
};

std::size_t hmr_steps_per_cycle(std::size_t frames, const AdaptConfig& config);
std::size_t md_windows_per_cycle(std::size_t frames, std::size_t T, const AdaptConfig& config);

/// One pass over every frame in a seeded shuffled order (cycle is 1-based).
void hmr_stage(const AdaptInput& input, const body::BodyModel& model, ResultStore& store, Nets& nets,
               AdaptState& state, const AdaptConfig& config, std::size_t cycle, const Hooks& hooks = {});

/// Random windows: masked update, then unmasked write-back of thetas.
void md_stage(ResultStore& store, Nets& nets, AdaptState& state, const AdaptConfig& config, std::size_t cycle,
              const Hooks& hooks = {});

/// Builds the T-row window starting at `start`; when N < T the sequence is
/// edge-replicated and `valid` reports how many rows are real.
diff::Tensor store_window(const ResultStore& store, std::size_t start, std::size_t T, std::size_t& valid);

/// Deterministic full-coverage denoising of an N x H sequence with
/// consecutive windows (the last one aligned to the end).
diff::Tensor md_denoise_sequence(const md::MdNet& net, const diff::Tensor& theta);

/// Maps (theta N x 6J, beta N x 10) to a report. Built by callers holding
/// ground truth; adaptation never sees it.
using Evaluator = std::function<metrics::MetricReport(const diff::Tensor& theta, const diff::Tensor& beta)>;

Evaluator make_evaluator(const body::BodyModel& model, diff::Tensor gt_joints, diff::Tensor gt_mesh);

struct MetricRow {
  std::size_t cycle;
  std::string source;  // "hmrnet" or "store"
  metrics::MetricReport report;
};

struct CycleResult {
  Nets nets;
  ResultStore store;
  std::vector<MetricRow> rows;  // cycle 0 holds the pre-adaptation hmrnet row
};

/// Optional per-cycle callback, e.g. for checkpoints.
using CycleCallback = std::function<void(std::size_t cycle, const Nets&, const ResultStore&)>;

CycleResult cycle_adapt(const AdaptInput& input, const body::BodyModel& model, Nets nets, const AdaptConfig& config,
                        const Evaluator& evaluate, const Hooks& hooks = {}, const CycleCallback& on_cycle = {});

struct OnlineResult {
  Nets nets;
  diff::Tensor theta;  // N x 6J, the regressor output for each frame on arrival
  diff::Tensor beta;
  metrics::MetricReport report;
};

/// Single causal pass; evaluate may be empty (report left zero).
OnlineResult online_adapt(const AdaptInput& input, const body::BodyModel& model, Nets nets, const AdaptConfig& config,
                          const Evaluator& evaluate, const Hooks& hooks = {});

/// Header `cycle,source,mpjpe,pa_mpjpe,mpvpe,accel`, 6 significant digits, LF.
void emit_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::string format_metrics_csv(const std::vector<MetricRow>& rows);

}  // namespace cycleadapt::adapt
