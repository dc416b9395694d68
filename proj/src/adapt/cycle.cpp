// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/adapt/cycle.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "cycleadapt/error.hpp"

namespace cycleadapt::adapt {

using diff::Graph;
using diff::NodeId;
using diff::Tensor;

namespace {

std::mt19937_64 stage_rng(std::uint64_t seed, std::size_t cycle, std::uint32_t stage) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(cycle), stage};
  return std::mt19937_64(seq);
}

enum : std::uint32_t { kHmrOrder = 1, kMdWindows = 2, kOnline = 3 };

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
  const std::size_t width = src.numel() / src.shape[0];
  diff::Shape shape = src.shape;
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * width));
  return out;
}

void scatter_rows(Tensor& dst, const std::vector<std::size_t>& rows, const Tensor& src) {
  const std::size_t width = dst.numel() / dst.shape[0];
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(r * width), width,
                dst.data.begin() + static_cast<std::ptrdiff_t>(rows[r] * width));
}

double scheduled_lr(const AdaptState& state, const AdaptConfig& config) {
  return cosine_lr(std::min(state.step, state.total_steps), state.total_steps, config.lr_start, config.lr_end);
}

struct HmrUpdate {
  std::optional<double> smpl;
  double total = 0.0;
};

/// One optimizer step of the regressor on `rows` against the given targets.
HmrUpdate hmr_update(const AdaptInput& input, const body::BodyModel& model, const ResultStore& targets, Nets& nets,
                     OptState& opt, double lr, const AdaptConfig& config, const std::vector<std::size_t>& rows,
                     bool first_cycle, bool use_smpl) {
  const std::size_t B = rows.size();
  const Tensor theta = gather_rows(targets.theta, rows);
  const Tensor beta = gather_rows(targets.beta, rows);
  Graph g;
  const NodeId x = g.leaf("features", false);
  const hmr::HmrNodes pred = hmr::build_hmr_forward(g, nets.hmr, x, B);
  hmr::HmrLossOptions options;
  options.gamma = config.gamma;
  options.first_cycle = first_cycle;
  options.use_smpl = use_smpl;
  options.weighted_2d = config.weighted_2d;
  const hmr::HmrLossNodes loss =
      hmr::build_hmr_loss(g, model, pred, &theta, &beta, gather_rows(input.keypoints, rows), options, B);
  diff::Bindings bindings{{"features", gather_rows(input.features, rows)}};
  nets.hmr.params.bind(bindings);
  const std::vector<Tensor> values = diff::evaluate(g, bindings);

  HmrUpdate out;
  out.total = values[loss.total].item();
  if (loss.smpl) out.smpl = values[*loss.smpl].item();
  else if (use_smpl) out.smpl = 0.0;  // first cycle: the parameter term is identically zero
  if (!config.freeze_hmr) adam_step(nets.hmr.params, diff::backward(g, values, loss.total), opt, lr);
  return out;
}

void write_hmr_outputs(const AdaptInput& input, const Nets& nets, ResultStore& store,
                       const std::vector<std::size_t>& rows) {
  const hmr::HmrBatch out = hmr::hmr_forward_batch(nets.hmr, gather_rows(input.features, rows));
  scatter_rows(store.theta, rows, out.theta);
  scatter_rows(store.beta, rows, out.beta);
  for (std::size_t r : rows) store.md_written[r] = 0;
}

/// Masked denoiser step on one window, then unmasked write-back.
void md_window(ResultStore& store, Nets& nets, OptState& opt, double lr, const AdaptConfig& config, std::size_t cycle,
               std::size_t start, std::mt19937_64& rng, const Hooks& hooks) {
  const std::size_t T = nets.md.config.T;
  std::size_t valid = 0;
  const Tensor window = store_window(store, start, T, valid);
  const md::Mask mask = md::sample_mask_prefix(T, valid, rng);

  Graph g;
  const NodeId x = g.leaf("window", false);
  const NodeId out = md::build_md_forward(g, nets.md, x);
  const NodeId loss = md::build_md_selfsup_loss(g, out, window, mask, valid);
  diff::Bindings bindings{{"window", md::apply_mask(window, mask)}};
  nets.md.params.bind(bindings);
  const std::vector<Tensor> values = diff::evaluate(g, bindings);
  if (!config.frozen_md) adam_step(nets.md.params, diff::backward(g, values, loss), opt, lr);
  if (hooks.on_md_window) hooks.on_md_window({cycle, start, valid, mask, values[loss].item()});

  const Tensor refined = md::md_forward(nets.md, window);
  const std::size_t H = store.theta.shape[1];
  std::copy_n(refined.data.begin(), valid * H, store.theta.data.begin() + static_cast<std::ptrdiff_t>(start * H));
  std::fill_n(store.md_written.begin() + static_cast<std::ptrdiff_t>(start), valid, std::uint8_t{1});
}

}  // namespace

ResultStore ResultStore::zeros(std::size_t frames, std::size_t pose_dim) {
  return {Tensor({frames, pose_dim}, 0.0), Tensor({frames, body::kShapeDim}, 0.0),
          std::vector<std::uint8_t>(frames, 0)};
}

void AdaptConfig::validate() const {
  if (batch == 0) throw ConfigError("adapt: batch must be positive");
  if (!(lr_start > 0.0) || !(lr_end > 0.0) || lr_start < lr_end)
    throw ConfigError("adapt: need lr_start >= lr_end > 0");
  if (gamma < 0.0) throw ConfigError("adapt: gamma must be non-negative");
  if (gaussian_std < 0.0) throw ConfigError("adapt: gaussian_std must be non-negative");
  if (online_horizon == 0) throw ConfigError("adapt: online_horizon must be positive");
  if (!(md_lr_scale >= 0.0)) throw ConfigError("adapt: md_lr_scale must be non-negative");
}

void to_json(nlohmann::json& j, const AdaptConfig& c) {
  j = nlohmann::json{{"cycles", c.cycles},
                     {"batch", c.batch},
                     {"lr_start", c.lr_start},
                     {"lr_end", c.lr_end},
                     {"gamma", c.gamma},
                     {"windows_per_cycle", c.windows_per_cycle},
                     {"seed", c.seed},
                     {"frozen_md", c.frozen_md},
                     {"use_smpl", c.use_smpl},
                     {"weighted_2d", c.weighted_2d},
                     {"freeze_hmr", c.freeze_hmr},
                     {"gaussian_std", c.gaussian_std},
                     {"online_horizon", c.online_horizon},
                     {"md_lr_scale", c.md_lr_scale}};
}

void from_json(const nlohmann::json& j, AdaptConfig& c) {
  AdaptConfig d;
  d.cycles = j.value("cycles", d.cycles);
  d.batch = j.value("batch", d.batch);
  d.lr_start = j.value("lr_start", d.lr_start);
  d.lr_end = j.value("lr_end", d.lr_end);
  d.gamma = j.value("gamma", d.gamma);
  d.windows_per_cycle = j.value("windows_per_cycle", d.windows_per_cycle);
  d.seed = j.value("seed", d.seed);
  d.frozen_md = j.value("frozen_md", d.frozen_md);
  d.use_smpl = j.value("use_smpl", d.use_smpl);
  d.weighted_2d = j.value("weighted_2d", d.weighted_2d);
  d.freeze_hmr = j.value("freeze_hmr", d.freeze_hmr);
  d.gaussian_std = j.value("gaussian_std", d.gaussian_std);
  d.online_horizon = j.value("online_horizon", d.online_horizon);
  d.md_lr_scale = j.value("md_lr_scale", d.md_lr_scale);
  d.validate();
  c = d;
}

std::size_t hmr_steps_per_cycle(std::size_t frames, const AdaptConfig& config) {
  return (frames + config.batch - 1) / config.batch;
}

std::size_t md_windows_per_cycle(std::size_t frames, std::size_t T, const AdaptConfig& config) {
  if (config.gaussian_std > 0.0) return 0;
  return config.windows_per_cycle ? config.windows_per_cycle : (frames + T - 1) / T;
}

void hmr_stage(const AdaptInput& input, const body::BodyModel& model, ResultStore& store, Nets& nets,
               AdaptState& state, const AdaptConfig& config, std::size_t cycle, const Hooks& hooks) {
  const std::size_t N = input.frames();
  if (store.frames() != N) throw InvariantError("hmr_stage: store size does not match the video");
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  auto rng = stage_rng(config.seed, cycle, kHmrOrder);
  std::shuffle(order.begin(), order.end(), rng);

  for (std::size_t begin = 0; begin < N; begin += config.batch) {
    const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                        order.begin() + static_cast<std::ptrdiff_t>(std::min(N, begin + config.batch)));
    const ResultStore& targets = state.frozen_targets ? *state.frozen_targets : store;
    const HmrUpdate u = hmr_update(input, model, targets, nets, state.hmr_opt, scheduled_lr(state, config), config,
                                   rows, cycle == 1, config.use_smpl);
    ++state.step;
    if (hooks.on_hmr_batch) hooks.on_hmr_batch({cycle, rows, u.smpl, u.total});
    write_hmr_outputs(input, nets, store, rows);
  }
}

Tensor store_window(const ResultStore& store, std::size_t start, std::size_t T, std::size_t& valid) {
  const std::size_t N = store.frames(), H = store.theta.shape.at(1);
  if (N == 0) throw RangeError("store_window: empty store");
  valid = std::min(T, N);
  if (start + valid > N) throw RangeError("store_window: window runs past the end of the store");
  Tensor w({T, H});
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t src = start + std::min(t, valid - 1);
    std::copy_n(store.theta.data.begin() + static_cast<std::ptrdiff_t>(src * H), H,
                w.data.begin() + static_cast<std::ptrdiff_t>(t * H));
  }
  return w;
}

void md_stage(ResultStore& store, Nets& nets, AdaptState& state, const AdaptConfig& config, std::size_t cycle,
              const Hooks& hooks) {
  const std::size_t N = store.frames();
  if (N == 0) throw RangeError("md_stage: empty store");
  if (config.gaussian_std > 0.0) {
    store.theta = md::gaussian_filter_baseline(store.theta, config.gaussian_std);
    std::fill(store.md_written.begin(), store.md_written.end(), std::uint8_t{1});
  } else {
    const std::size_t T = nets.md.config.T;
    auto rng = stage_rng(config.seed, cycle, kMdWindows);
    std::uniform_int_distribution<std::size_t> pick(0, N >= T ? N - T : 0);
    const std::size_t windows = md_windows_per_cycle(N, T, config);
    for (std::size_t w = 0; w < windows; ++w) {
      const std::size_t start = pick(rng);
      md_window(store, nets, state.md_opt, config.md_lr_scale * scheduled_lr(state, config), config, cycle, start, rng, hooks);
      ++state.step;
    }
  }
  if (config.frozen_md && !state.frozen_targets) state.frozen_targets = store;
}

Tensor md_denoise_sequence(const md::MdNet& net, const Tensor& theta) {
  const std::size_t N = theta.shape.at(0), H = theta.shape.at(1), T = net.config.T;
  if (N == 0) return theta;
  ResultStore tmp{theta, Tensor({N, body::kShapeDim}), std::vector<std::uint8_t>(N, 0)};
  std::vector<std::size_t> starts;
  if (N <= T) starts.push_back(0);
  else {
    for (std::size_t s = 0; s + T < N; s += T) starts.push_back(s);
    starts.push_back(N - T);
  }
  Tensor batch({starts.size(), T, H});
  std::size_t valid = 0;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const Tensor w = store_window(tmp, starts[k], T, valid);
    std::copy(w.data.begin(), w.data.end(), batch.data.begin() + static_cast<std::ptrdiff_t>(k * T * H));
  }
  const Tensor out = md::md_forward(net, batch);
  Tensor result = theta;
  for (std::size_t k = 0; k < starts.size(); ++k)
    std::copy_n(out.data.begin() + static_cast<std::ptrdiff_t>(k * T * H), valid * H,
                result.data.begin() + static_cast<std::ptrdiff_t>(starts[k] * H));
  return result;
}

Evaluator make_evaluator(const body::BodyModel& model, Tensor gt_joints, Tensor gt_mesh) {
  return [&model, gj = std::move(gt_joints), gm = std::move(gt_mesh)](const Tensor& theta, const Tensor& beta) {
    const body::BodyGeometry geo = body::body_forward_batch(model, theta, beta);
    return metrics::evaluate(geo.joints, geo.vertices, gj, gm);
  };
}

CycleResult cycle_adapt(const AdaptInput& input, const body::BodyModel& model, Nets nets, const AdaptConfig& config,
                        const Evaluator& evaluate, const Hooks& hooks, const CycleCallback& on_cycle) {
  config.validate();
  const std::size_t N = input.frames();
  if (N == 0) throw RangeError("cycle_adapt: empty video");
  CycleResult result{std::move(nets), ResultStore::zeros(N, model.pose_dim()), {}};
  if (hooks.on_store_init) hooks.on_store_init(result.store);

  AdaptState state;
  const std::size_t per_cycle =
      hmr_steps_per_cycle(N, config) + md_windows_per_cycle(N, result.nets.md.config.T, config);
  state.total_steps = std::max<std::size_t>(1, config.cycles * per_cycle);

  auto hmr_report = [&]() {
    const hmr::HmrBatch out = hmr::hmr_forward_batch(result.nets.hmr, input.features);
    return evaluate(out.theta, out.beta);
  };
  if (evaluate) result.rows.push_back({0, "hmrnet", hmr_report()});

  for (std::size_t c = 1; c <= config.cycles; ++c) {
    ResultStore before;
    if (hooks.on_stage_end) before = result.store;
    hmr_stage(input, model, result.store, result.nets, state, config, c, hooks);
    if (hooks.on_stage_end) {
      hooks.on_stage_end(c, Stage::Hmr, before, result.store);
      before = result.store;
    }
    md_stage(result.store, result.nets, state, config, c, hooks);
    if (hooks.on_stage_end) hooks.on_stage_end(c, Stage::Md, before, result.store);
    if (evaluate) {
      result.rows.push_back({c, "hmrnet", hmr_report()});
      result.rows.push_back({c, "store", evaluate(result.store.theta, result.store.beta)});
    }
    if (on_cycle) on_cycle(c, result.nets, result.store);
  }
  return result;
}

OnlineResult online_adapt(const AdaptInput& input, const body::BodyModel& model, Nets nets, const AdaptConfig& config,
                          const Evaluator& evaluate, const Hooks& hooks) {
  config.validate();
  const std::size_t N = input.frames(), T = nets.md.config.T;
  OnlineResult result{std::move(nets), Tensor({N, model.pose_dim()}), Tensor({N, body::kShapeDim}), {}};
  ResultStore store = ResultStore::zeros(N, model.pose_dim());
  if (hooks.on_store_init) hooks.on_store_init(store);
  OptState hmr_opt, md_opt;
  auto rng = stage_rng(config.seed, 0, kOnline);
  // the horizon is fixed by config so that outputs never depend on the video length
  auto lr_at = [&](std::size_t i) {
    return cosine_lr(std::min(i, config.online_horizon), config.online_horizon, config.lr_start, config.lr_end);
  };

  for (std::size_t i = 0; i < N; ++i) {
    const std::vector<std::size_t> rows{i};
    const bool has_target = store.md_written[i] != 0;
    const HmrUpdate u = hmr_update(input, model, store, result.nets, hmr_opt, lr_at(i), config, rows, !has_target,
                                   config.use_smpl);
    if (hooks.on_hmr_batch) hooks.on_hmr_batch({1, rows, u.smpl, u.total});
    write_hmr_outputs(input, result.nets, store, rows);
    scatter_rows(result.theta, rows, gather_rows(store.theta, rows));
    scatter_rows(result.beta, rows, gather_rows(store.beta, rows));
    if (config.gaussian_std == 0.0 && (i + 1) % T == 0)
      md_window(store, result.nets, md_opt, config.md_lr_scale * lr_at(i), config, 1, i + 1 - T, rng, hooks);
  }
  if (evaluate && N > 0) result.report = evaluate(result.theta, result.beta);
  return result;
}

std::string format_metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "cycle,source,mpjpe,pa_mpjpe,mpvpe,accel\n";
  char buf[256];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.6g,%.6g,%.6g,%.6g\n", r.cycle, r.source.c_str(), r.report.mpjpe,
                  r.report.pa_mpjpe, r.report.mpvpe, r.report.accel);
    out += buf;
  }
  return out;
}

void emit_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << format_metrics_csv(rows);
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace cycleadapt::adapt
