// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/md/md_net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cycleadapt/adapt/optim.hpp"
#include "cycleadapt/body/body_model.hpp"
#include "cycleadapt/error.hpp"

namespace cycleadapt::md {

using diff::Graph;
using diff::NodeId;
using diff::Tensor;

void MdConfig::validate() const {
  if (T == 0 || H == 0 || M == 0) throw ConfigError("md config: T, H and M must be positive");
  if (rest_offset && H % body::kRotDim != 0) throw ConfigError("md config: rest_offset needs H divisible by 6");
}

MdNet md_init(const MdConfig& config, std::uint64_t seed) {
  config.validate();
  MdNet net{config, {}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  // feature layers start at the identity and block branches start small, so
  // the untrained network is close to a pass-through
  auto dense = [&](const std::string& name, std::size_t dim, double scale, bool identity) {
    Tensor w({dim, dim});
    for (double& x : w.data) x = scale * gauss(rng);
    if (identity)
      for (std::size_t i = 0; i < dim; ++i) w.data[i * dim + i] += 1.0;
    net.params.add(name + ".weight", std::move(w));
    net.params.add(name + ".bias", Tensor({dim}, 0.0));
  };
  const double feature_scale = 0.1 / std::sqrt(static_cast<double>(config.H));
  const double block_scale = (config.residual ? 0.1 : 1.0) / std::sqrt(static_cast<double>(config.T));
  dense("md.in", config.H, feature_scale, true);
  for (std::size_t m = 0; m < config.M; ++m) {
    const std::string block = "md.block" + std::to_string(m);
    dense(block + ".fc", config.T, block_scale, !config.residual);
    net.params.add(block + ".norm.gain", Tensor({config.T}, 1.0));
    net.params.add(block + ".norm.bias", Tensor({config.T}, 0.0));
  }
  dense("md.out", config.H, feature_scale, true);
  return net;
}

namespace {

Tensor rest_code(std::size_t H, double sign) {
  Tensor r({H});
  for (std::size_t i = 0; i < H; i += body::kRotDim) {
    r.data[i] = sign;
    r.data[i + 4] = sign;
  }
  return r;
}

}  // namespace

NodeId build_md_forward(Graph& g, const MdNet& net, NodeId input) {
  const std::size_t H = net.config.H;
  // masked rows stay exact zeros in pose space, so they become -rest here
  if (net.config.rest_offset) input = g.add(input, g.constant(rest_code(H, -1.0)));
  auto fc = [&](NodeId x, const std::string& name) {
    return g.add(g.matmul(x, g.leaf(name + ".weight")), g.leaf(name + ".bias"));
  };
  NodeId h = g.transpose(fc(input, "md.in"));  // ... x H x T
  for (std::size_t m = 0; m < net.config.M; ++m) {
    const std::string block = "md.block" + std::to_string(m);
    const NodeId gain = g.leaf(block + ".norm.gain"), bias = g.leaf(block + ".norm.bias");
    if (net.config.residual) {
      NodeId branch = fc(g.layer_norm(h, gain, bias), block + ".fc");
      if (net.config.relu) branch = g.relu(branch);
      h = g.add(h, branch);
    } else {
      h = g.layer_norm(fc(h, block + ".fc"), gain, bias);
      if (net.config.relu) h = g.relu(h);
    }
  }
  NodeId out = fc(g.transpose(h), "md.out");
  if (net.config.rest_offset) out = g.add(out, g.constant(rest_code(H, 1.0)));
  return out;
}

Tensor apply_mask(const Tensor& theta, const Mask& mask) {
  const std::size_t T = mask.size();
  if (theta.rank() < 2 || theta.shape[theta.rank() - 2] != T)
    throw ShapeError("apply_mask: mask length " + std::to_string(T) + " does not match " +
                     diff::to_string(theta.shape));
  const std::size_t H = theta.shape.back();
  Tensor out = theta;
  const std::size_t windows = theta.numel() / (T * H);
  for (std::size_t k = 0; k < windows; ++k)
    for (std::size_t t = 0; t < T; ++t)
      if (mask[t]) std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>((k * T + t) * H), H, 0.0);
  return out;
}

namespace {

void check_window(const MdConfig& config, const Tensor& theta) {
  const bool ok = (theta.rank() == 2 || theta.rank() == 3) && theta.shape[theta.rank() - 2] == config.T &&
                  theta.shape.back() == config.H;
  if (!ok)
    throw ShapeError("md_forward: expected [K x] " + std::to_string(config.T) + " x " + std::to_string(config.H) +
                     ", got " + diff::to_string(theta.shape));
}

}  // namespace

Tensor md_forward(const MdNet& net, const Tensor& theta, const Mask* mask) {
  check_window(net.config, theta);
  Graph g;
  const NodeId x = g.leaf("window", false);
  const NodeId out = build_md_forward(g, net, x);
  diff::Bindings bindings{{"window", mask ? apply_mask(theta, *mask) : theta}};
  net.params.bind(bindings);
  return std::move(diff::evaluate(g, bindings)[out]);
}

Mask sample_mask_prefix(std::size_t T, std::size_t n, std::mt19937_64& rng) {
  if (T == 0 || n == 0 || n > T) throw RangeError("sample_mask: need 1 <= n <= T");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // partial Fisher-Yates: the first ceil(n/2) slots are a uniform subset
  const std::size_t k = (n + 1) / 2;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  Mask m(T, 0);
  for (std::size_t i = 0; i < k; ++i) m[idx[i]] = 1;
  return m;
}

Mask sample_mask(std::size_t T, std::mt19937_64& rng) { return sample_mask_prefix(T, T, rng); }

NodeId build_md_selfsup_loss(Graph& g, NodeId out, const Tensor& target, const Mask& mask, std::size_t norm) {
  const std::size_t T = mask.size();
  if (target.rank() < 2 || target.shape[target.rank() - 2] != T)
    throw ShapeError("md loss: mask length " + std::to_string(T) + " does not match " +
                     diff::to_string(target.shape));
  const std::size_t masked = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  if (masked == 0) return g.constant(Tensor::scalar(0.0));
  if (norm == 0) norm = T;
  const std::size_t axis = target.rank() - 2;
  const NodeId diff = g.sub(out, g.constant(target));
  // mean over masked rows, rescaled so the sum over rows is divided by norm
  const NodeId rows = g.mask_select(diff, axis, mask);
  return g.scale(g.mean_abs(rows), static_cast<double>(masked) / static_cast<double>(norm));
}

double md_selfsup_loss(const Tensor& theta_out, const Tensor& theta_in, const Mask& mask) {
  if (theta_out.shape != theta_in.shape) throw ShapeError("md_selfsup_loss: shapes differ");
  Graph g;
  const NodeId loss = build_md_selfsup_loss(g, g.constant(theta_out), theta_in, mask);
  return diff::evaluate(g, {})[loss].item();
}

MdPretrainLog md_pretrain(MdNet& net, const std::vector<Tensor>& motions, const MdPretrainConfig& config) {
  if (motions.empty()) throw RangeError("md_pretrain: empty dataset");
  if (config.sigma < 0.0) throw RangeError("md_pretrain: sigma must be non-negative");
  const std::size_t T = net.config.T, H = net.config.H;
  for (const Tensor& m : motions)
    if (m.rank() != 2 || m.shape[0] < T || m.shape[1] != H)
      throw ShapeError("md_pretrain: every motion must be L x " + std::to_string(H) + " with L >= " +
                       std::to_string(T) + ", got " + diff::to_string(m.shape));

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto draw_windows = [&](std::size_t count, Tensor& clean, Tensor& noisy) {
    clean = Tensor({count, T, H});
    noisy = Tensor({count, T, H});
    std::uniform_int_distribution<std::size_t> pick_motion(0, motions.size() - 1);
    for (std::size_t k = 0; k < count; ++k) {
      const Tensor& m = motions[pick_motion(rng)];
      std::uniform_int_distribution<std::size_t> pick_start(0, m.shape[0] - T);
      const std::size_t start = pick_start(rng);
      for (std::size_t i = 0; i < T * H; ++i) {
        const double v = m.data[start * H + i];
        clean.data[k * T * H + i] = v;
        noisy.data[k * T * H + i] = v + config.sigma * noise(rng);
      }
    }
  };

  MdPretrainLog log;
  Tensor probe_clean, probe_noisy;
  if (config.log_every > 0) draw_windows(config.probe_windows, probe_clean, probe_noisy);
  auto record = [&](std::size_t step) {
    const Tensor out = md_forward(net, probe_noisy);
    double err = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) err += std::abs(out.data[i] - probe_clean.data[i]);
    log.steps.push_back(step);
    log.probe_error.push_back(err / static_cast<double>(out.numel()));
  };

  adapt::OptState state;
  for (std::size_t step = 0; step < config.steps; ++step) {
    if (config.log_every > 0 && step % config.log_every == 0) record(step);
    Tensor clean, noisy;
    draw_windows(config.batch, clean, noisy);
    Graph g;
    const NodeId x = g.leaf("window", false);
    const NodeId out = build_md_forward(g, net, x);
    // per-frame L1 mean, averaged over frames and windows
    const NodeId loss = g.mean_abs(g.sub(out, g.constant(std::move(clean))));
    diff::Bindings bindings{{"window", std::move(noisy)}};
    net.params.bind(bindings);
    const auto grads = diff::backward(g, bindings, loss);
    adapt::adam_step(net.params, grads, state, adapt::cosine_lr(step, config.steps, config.lr_start, config.lr_end));
  }
  if (config.log_every > 0) record(config.steps);
  return log;
}

std::vector<double> gaussian_kernel(double std_frames) {
  if (!(std_frames > 0.0)) throw RangeError("gaussian filter: std must be positive");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * std_frames));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (std_frames * std_frames));
    k[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (double& w : k) w /= total;
  return k;
}

Tensor gaussian_filter_baseline(const Tensor& theta, double std_frames) {
  if (theta.rank() != 2) throw ShapeError("gaussian filter: expected L x H, got " + diff::to_string(theta.shape));
  const std::vector<double> k = gaussian_kernel(std_frames);
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto L = static_cast<std::ptrdiff_t>(theta.shape[0]);
  const std::size_t H = theta.shape[1];
  Tensor out(theta.shape);
  for (std::ptrdiff_t t = 0; t < L; ++t)
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
      const std::size_t src = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(t + i, 0, L - 1));
      const double w = k[static_cast<std::size_t>(i + radius)];
      for (std::size_t h = 0; h < H; ++h) out.data[static_cast<std::size_t>(t) * H + h] += w * theta.data[src * H + h];
    }
  return out;
}

}  // namespace cycleadapt::md
