// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/hmr/hmr_net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cycleadapt/adapt/optim.hpp"
#include "cycleadapt/error.hpp"

namespace cycleadapt::hmr {

using diff::Graph;
using diff::NodeId;
using diff::Tensor;

void HmrConfig::validate() const {
  if (feature_dim == 0 || hidden_dim == 0 || num_hidden_layers == 0 || joints == 0)
    throw ConfigError("hmr config: all sizes must be positive");
}

namespace {

std::string weight_name(std::size_t layer) { return "hmr.fc" + std::to_string(layer) + ".weight"; }
std::string bias_name(std::size_t layer) { return "hmr.fc" + std::to_string(layer) + ".bias"; }

}  // namespace

HmrNet hmr_init(const HmrConfig& config, std::uint64_t seed) {
  config.validate();
  HmrNet net{config, {}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<std::size_t> widths{config.feature_dim};
  for (std::size_t i = 0; i < config.num_hidden_layers; ++i) widths.push_back(config.hidden_dim);
  widths.push_back(config.output_dim());

  const std::size_t layers = widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t fan_in = widths[l], fan_out = widths[l + 1];
    // the head starts small so that initial predictions sit near the bias
    const double scale = (l + 1 == layers ? 0.1 : 1.0) / std::sqrt(static_cast<double>(fan_in));
    Tensor w({fan_in, fan_out});
    for (double& x : w.data) x = scale * gauss(rng);
    Tensor b({fan_out}, 0.0);
    if (l + 1 == layers) {
      // zero features -> identity rotations, zero shape, unit camera
      for (std::size_t j = 0; j < config.joints; ++j)
        std::copy(body::kIdentityRot6d.begin(), body::kIdentityRot6d.end(), b.data.begin() + static_cast<std::ptrdiff_t>(j * body::kRotDim));
      b.data[config.joints * body::kRotDim + body::kShapeDim] = 1.0;
    }
    net.params.add(weight_name(l), std::move(w));
    net.params.add(bias_name(l), std::move(b));
  }
  return net;
}

HmrNodes build_hmr_forward(Graph& g, const HmrNet& net, NodeId features, std::size_t) {
  const std::size_t layers = net.config.num_hidden_layers + 1;
  NodeId h = features;
  for (std::size_t l = 0; l < layers; ++l) {
    h = g.add(g.matmul(h, g.leaf(weight_name(l))), g.leaf(bias_name(l)));
    if (l + 1 < layers) h = g.relu(h);
  }
  const std::size_t pose = net.config.joints * body::kRotDim;
  return {g.slice(h, 1, 0, pose), g.slice(h, 1, pose, body::kShapeDim), g.slice(h, 1, pose + body::kShapeDim, 3)};
}

HmrBatch hmr_forward_batch(const HmrNet& net, const Tensor& features) {
  if (features.rank() != 2 || features.shape[1] != net.config.feature_dim)
    throw ShapeError("hmr_forward: features must be B x " + std::to_string(net.config.feature_dim) + ", got " +
                     diff::to_string(features.shape));
  Graph g;
  const NodeId x = g.leaf("features", false);
  const HmrNodes out = build_hmr_forward(g, net, x, features.shape[0]);
  diff::Bindings bindings{{"features", features}};
  net.params.bind(bindings);
  auto values = diff::evaluate(g, bindings);
  return {std::move(values[out.theta]), std::move(values[out.beta]), std::move(values[out.camera])};
}

std::vector<HmrOutput> hmr_forward(const HmrNet& net, const Tensor& features) {
  const HmrBatch batch = hmr_forward_batch(net, features);
  const std::size_t B = features.shape[0];
  const std::size_t pose = net.config.joints * body::kRotDim;
  std::vector<HmrOutput> outs(B);
  for (std::size_t i = 0; i < B; ++i) {
    auto row = [&](const Tensor& t, std::size_t width) {
      return std::vector<double>(t.data.begin() + static_cast<std::ptrdiff_t>(i * width),
                                 t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
    };
    outs[i].theta = row(batch.theta, pose);
    outs[i].beta = row(batch.beta, body::kShapeDim);
    outs[i].camera = {batch.camera.data[3 * i], batch.camera.data[3 * i + 1], batch.camera.data[3 * i + 2]};
  }
  return outs;
}

Tensor keypoints_tensor(const std::vector<Keypoints2D>& keypoints) {
  const std::size_t B = keypoints.size();
  const std::size_t J = B ? keypoints[0].points.size() : 0;
  Tensor out({B, J, 3});
  for (std::size_t b = 0; b < B; ++b) {
    if (keypoints[b].points.size() != J) throw ShapeError("keypoints: inconsistent joint counts");
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t c = 0; c < 3; ++c) out.data[(b * J + j) * 3 + c] = keypoints[b].points[j][c];
  }
  return out;
}

HmrLossNodes build_hmr_loss(Graph& g, const body::BodyModel& model, const HmrNodes& pred,
                            const Tensor* pseudo_theta, const Tensor* pseudo_beta, const Tensor& keypoints,
                            const HmrLossOptions& options, std::size_t batch) {
  if (options.gamma < 0.0) throw RangeError("hmr_loss: gamma must be non-negative");
  const std::size_t B = batch, J = model.num_joints;
  if (keypoints.shape != diff::Shape{B, J, 3})
    throw ShapeError("hmr_loss: keypoints must be " + diff::to_string({B, J, 3}) + ", got " +
                     diff::to_string(keypoints.shape));
  HmrLossNodes out{};

  if (options.use_smpl && !options.first_cycle) {
    if (!pseudo_theta || !pseudo_beta) throw ShapeError("hmr_loss: parameter term needs pseudo ground truth");
    const NodeId pose_term = g.mean_abs(g.sub(pred.theta, g.constant(*pseudo_theta)));
    const NodeId shape_term = g.mean_abs(g.sub(pred.beta, g.constant(*pseudo_beta)));
    out.smpl = g.add(pose_term, g.scale(shape_term, options.gamma));
  }

  Tensor xy({B, J, 2});
  Tensor conf({B, J, 1});
  double conf_sum = 0.0;
  for (std::size_t i = 0; i < B * J; ++i) {
    xy.data[2 * i] = keypoints.data[3 * i];
    xy.data[2 * i + 1] = keypoints.data[3 * i + 1];
    conf.data[i] = keypoints.data[3 * i + 2];
    conf_sum += conf.data[i];
  }
  if (!options.weighted_2d || conf_sum > 0.0) {
    const body::BodyNodes geo = build_body_forward(g, model, pred.theta, pred.beta, B);
    const NodeId proj = body::build_projection(g, geo.joints, pred.camera, B, J);
    const NodeId residual = g.sub(proj, g.constant(std::move(xy)));
    if (options.weighted_2d) {
      // sum_k c_k |r_k| / (2 sum_k c_k): a mean over the confident coordinates
      const NodeId weighted = g.mul(residual, g.constant(std::move(conf)));
      out.reproj = g.scale(g.mean_abs(weighted), static_cast<double>(B * J) / conf_sum);
    } else {
      out.reproj = g.mean_abs(residual);
    }
  }

  if (out.smpl && out.reproj) out.total = g.add(*out.smpl, *out.reproj);
  else if (out.smpl) out.total = *out.smpl;
  else if (out.reproj) out.total = *out.reproj;
  else out.total = g.constant(Tensor::scalar(0.0));
  return out;
}

HmrLossValue hmr_loss(const HmrOutput& output, const std::optional<body::SmplParams>& pseudo_gt,
                      const Keypoints2D& keypoints, const body::BodyModel& model, double gamma, bool first_cycle,
                      bool weighted_2d) {
  const std::size_t pose = model.pose_dim();
  if (output.theta.size() != pose || output.beta.size() != body::kShapeDim)
    throw ShapeError("hmr_loss: output does not match the body model");
  Graph g;
  HmrNodes pred{g.constant(Tensor({1, pose}, output.theta)), g.constant(Tensor({1, body::kShapeDim}, output.beta)),
                g.constant(Tensor({1, 3}, {output.camera.s, output.camera.tx, output.camera.ty}))};
  std::optional<Tensor> pt, pb;
  if (pseudo_gt) {
    pt = Tensor({1, pose}, pseudo_gt->theta);
    pb = Tensor({1, body::kShapeDim}, pseudo_gt->beta);
  }
  HmrLossOptions options;
  options.gamma = gamma;
  options.first_cycle = first_cycle;
  options.use_smpl = pseudo_gt.has_value();
  options.weighted_2d = weighted_2d;
  const HmrLossNodes nodes = build_hmr_loss(g, model, pred, pt ? &*pt : nullptr, pb ? &*pb : nullptr,
                                            keypoints_tensor({keypoints}), options, 1);
  const auto values = diff::evaluate(g, {});
  HmrLossValue v;
  v.total = values[nodes.total].item();
  if (nodes.smpl) v.smpl = values[*nodes.smpl].item();
  if (nodes.reproj) v.reproj = values[*nodes.reproj].item();
  return v;
}

void hmr_pretrain(HmrNet& net, const body::BodyModel& model, const Tensor& features, const Tensor& gt_theta,
                  const Tensor& gt_beta, const Tensor& keypoints, const HmrPretrainConfig& config) {
  const std::size_t N = features.shape.at(0);
  const std::size_t F = net.config.feature_dim, P = model.pose_dim(), J = model.num_joints;
  if (N == 0) throw RangeError("hmr_pretrain: empty dataset");
  if (gt_theta.shape != diff::Shape{N, P} || gt_beta.shape != diff::Shape{N, body::kShapeDim} ||
      keypoints.shape != diff::Shape{N, J, 3} || features.shape != diff::Shape{N, F})
    throw ShapeError("hmr_pretrain: inconsistent dataset shapes");

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = N;
  adapt::OptState state;
  const std::size_t B = std::min(config.batch, N);

  auto gather = [&](const Tensor& src, const std::vector<std::size_t>& rows) {
    const std::size_t width = src.numel() / src.shape[0];
    diff::Shape shape = src.shape;
    shape[0] = rows.size();
    Tensor out(shape);
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                  out.data.begin() + static_cast<std::ptrdiff_t>(r * width));
    return out;
  };

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> rows;
    while (rows.size() < B) {
      if (cursor == N) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      rows.push_back(order[cursor++]);
    }
    const Tensor theta = gather(gt_theta, rows);
    const Tensor beta = gather(gt_beta, rows);

    Graph g;
    const NodeId x = g.leaf("features", false);
    const HmrNodes pred = build_hmr_forward(g, net, x, B);
    HmrLossOptions options;
    options.gamma = 1.0;
    const HmrLossNodes loss = build_hmr_loss(g, model, pred, &theta, &beta, gather(keypoints, rows), options, B);

    diff::Bindings bindings{{"features", gather(features, rows)}};
    net.params.bind(bindings);
    const auto grads = diff::backward(g, bindings, loss.total);
    adapt::adam_step(net.params, grads, state, adapt::cosine_lr(step, config.steps, config.lr_start, config.lr_end));
  }
}

}  // namespace cycleadapt::hmr
