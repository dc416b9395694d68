// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/body/body_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "cycleadapt/error.hpp"

namespace cycleadapt::body {

using diff::Graph;
using diff::NodeId;
using diff::Shape;
using diff::Tensor;

SmplParams SmplParams::rest(std::size_t joints) {
  SmplParams p;
  p.theta.reserve(joints * kRotDim);
  for (std::size_t j = 0; j < joints; ++j) p.theta.insert(p.theta.end(), kIdentityRot6d.begin(), kIdentityRot6d.end());
  p.beta.assign(kShapeDim, 0.0);
  return p;
}

bool SmplParams::finite() const {
  auto ok = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  return ok(theta) && ok(beta);
}

void BodyModel::validate() const {
  const std::size_t J = num_joints, V = num_vertices;
  auto fail = [](const std::string& what) { throw InvariantError("body model: " + what); };
  if (J < 1 || V < 1) fail("empty model");
  if (template_vertices.shape != Shape{V, 3}) fail("template_vertices shape");
  if (template_joints.shape != Shape{J, 3}) fail("template_joints shape");
  if (skin_weights.shape != Shape{V, J}) fail("skin_weights shape");
  if (shape_dirs.shape != Shape{V, 3, kShapeDim}) fail("shape_dirs shape");
  if (joint_regressor.shape != Shape{J, V}) fail("joint_regressor shape");
  if (parents.size() != J || parents[0] != -1) fail("parents must have length J with parents[0] = -1");
  for (std::size_t j = 1; j < J; ++j)
    if (parents[j] < 0 || static_cast<std::size_t>(parents[j]) >= j) fail("parents[j] must precede j");
  auto rows_sum_to_one = [&](const Tensor& t, const char* name) {
    const std::size_t rows = t.shape[0], cols = t.shape[1];
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double w = t.data[r * cols + c];
        if (w < 0.0) fail(std::string(name) + " has a negative entry");
        s += w;
      }
      if (std::abs(s - 1.0) > 1e-9) fail(std::string(name) + " row " + std::to_string(r) + " does not sum to 1");
    }
  };
  rows_sum_to_one(skin_weights, "skin_weights");
  rows_sum_to_one(joint_regressor, "joint_regressor");
}

RotMat rot6d_to_rotmat(std::span<const double, 6> r) {
  Graph g;
  const NodeId in = g.constant(Tensor({6}, std::vector<double>(r.begin(), r.end())));
  const NodeId out = g.rot6d(in);
  const auto values = diff::evaluate(g, {});
  RotMat m{};
  std::copy(values[out].data.begin(), values[out].data.end(), m.begin());
  return m;
}

// ---------------------------------------------------------------------------
// Graph construction

namespace {

Tensor transposed(const Tensor& t) {
  const std::size_t r = t.shape[0], c = t.shape[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = t.data[i * c + j];
  return out;
}

}  // namespace

NodeId build_joint_regression(Graph& g, const BodyModel& model, NodeId vertices, std::size_t) {
  const NodeId reg_t = g.constant(transposed(model.joint_regressor));  // V x J
  return g.transpose(g.matmul(g.transpose(vertices), reg_t));
}

BodyNodes build_body_forward(Graph& g, const BodyModel& model, NodeId theta, NodeId beta, std::size_t batch) {
  const std::size_t B = batch, J = model.num_joints, V = model.num_vertices;

  // shape blend: template + beta * dirs
  Tensor dirs_t({kShapeDim, 3 * V});
  for (std::size_t v = 0; v < 3 * V; ++v)
    for (std::size_t k = 0; k < kShapeDim; ++k) dirs_t.data[k * 3 * V + v] = model.shape_dirs.data[v * kShapeDim + k];
  const NodeId tmpl = g.constant(Tensor({3 * V}, model.template_vertices.data));
  const NodeId shaped_flat = g.add(g.matmul(beta, g.constant(std::move(dirs_t))), tmpl);
  const NodeId shaped = g.reshape(shaped_flat, {B, V, 3});
  const NodeId rest_joints = build_joint_regression(g, model, shaped, B);

  // bone offsets J_j - J_parent(j), row 0 keeps J_0
  Tensor diff_t({J, J});
  for (std::size_t j = 0; j < J; ++j) {
    diff_t.data[j * J + j] = 1.0;
    if (j > 0) diff_t.data[static_cast<std::size_t>(model.parents[j]) * J + j] = -1.0;
  }
  const NodeId offsets = g.transpose(g.matmul(g.transpose(rest_joints), g.constant(std::move(diff_t))));

  const NodeId local = g.rot6d(g.reshape(theta, {B, J, kRotDim}));  // B x J x 3 x 3
  const NodeId eye = g.constant(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));

  // Global rotations Rg_j and joint displacements d_j = posed_j - rest_j,
  // kept in "minus identity" form so that the rest pose reproduces the
  // template bit for bit.
  std::vector<NodeId> rot(J), dev(J), disp(J);
  std::vector<bool> has_disp(J, false);
  std::vector<NodeId> blend_rows(J);
  for (std::size_t j = 0; j < J; ++j) {
    const NodeId r_local = g.reshape(g.slice(local, 1, j, 1), {B, 3, 3});
    const NodeId rest_j = g.reshape(g.slice(rest_joints, 1, j, 1), {B, 3, 1});
    if (j == 0) {
      rot[j] = r_local;
    } else {
      const auto p = static_cast<std::size_t>(model.parents[j]);
      rot[j] = g.bmm(rot[p], r_local);
      const NodeId off = g.reshape(g.slice(offsets, 1, j, 1), {B, 3, 1});
      const NodeId step = g.bmm(dev[p], off);
      disp[j] = has_disp[p] ? g.add(disp[p], step) : step;
      has_disp[j] = true;
    }
    dev[j] = g.sub(rot[j], eye);
    // skinning translation e_j = d_j - (Rg_j - I) rest_j
    const NodeId turned = g.bmm(dev[j], rest_j);
    const NodeId e = has_disp[j] ? g.sub(disp[j], turned) : g.scale(turned, -1.0);
    blend_rows[j] = g.concat({g.reshape(dev[j], {B, 1, 9}), g.reshape(e, {B, 1, 3})}, 2);
  }
  const NodeId per_joint = g.concat(blend_rows, 1);  // B x J x 12
  const NodeId weights_t = g.constant(transposed(model.skin_weights));  // J x V
  const NodeId blended = g.transpose(g.matmul(g.transpose(per_joint), weights_t));  // B x V x 12

  const NodeId m_rot = g.reshape(g.slice(blended, 2, 0, 9), {B * V, 3, 3});
  const NodeId m_off = g.reshape(g.slice(blended, 2, 9, 3), {B * V, 3, 1});
  const NodeId delta = g.add(g.bmm(m_rot, g.reshape(shaped, {B * V, 3, 1})), m_off);
  const NodeId posed = g.add(shaped, g.reshape(delta, {B, V, 3}));
  return {posed, build_joint_regression(g, model, posed, B)};
}

NodeId build_projection(Graph& g, NodeId points, NodeId camera, std::size_t batch, std::size_t count) {
  const NodeId xy = g.slice(g.reshape(points, {batch, count, 3}), 2, 0, 2);
  const NodeId s = g.reshape(g.slice(camera, 1, 0, 1), {batch, 1, 1});
  const NodeId t = g.reshape(g.slice(camera, 1, 1, 2), {batch, 1, 2});
  return g.add(g.mul(xy, s), t);
}

BodyGeometry body_forward_batch(const BodyModel& model, const Tensor& theta, const Tensor& beta) {
  if (theta.rank() != 2 || theta.shape[1] != model.pose_dim())
    throw ShapeError("body_forward: theta must be B x " + std::to_string(model.pose_dim()) + ", got " +
                     diff::to_string(theta.shape));
  const std::size_t B = theta.shape[0];
  if (beta.shape != Shape{B, kShapeDim})
    throw ShapeError("body_forward: beta must be B x 10, got " + diff::to_string(beta.shape));
  Graph g;
  const NodeId th = g.leaf("theta", false);
  const NodeId be = g.leaf("beta", false);
  const BodyNodes out = build_body_forward(g, model, th, be, B);
  auto values = diff::evaluate(g, {{"theta", theta}, {"beta", beta}});
  return {std::move(values[out.vertices]), std::move(values[out.joints])};
}

BodyGeometry body_forward(const BodyModel& model, const SmplParams& params) {
  if (params.theta.size() != model.pose_dim() || params.beta.size() != kShapeDim)
    throw ShapeError("body_forward: parameter sizes do not match the model");
  const std::size_t J = model.num_joints, V = model.num_vertices;
  BodyGeometry geo = body_forward_batch(model, Tensor({1, model.pose_dim()}, params.theta),
                                        Tensor({1, kShapeDim}, params.beta));
  geo.vertices.shape = {V, 3};
  geo.joints.shape = {J, 3};
  return geo;
}

Tensor shaped_rest_mesh(const BodyModel& model, std::span<const double> beta) {
  if (beta.size() != kShapeDim) throw ShapeError("shaped_rest_mesh: beta must have 10 entries");
  Tensor out = model.template_vertices;
  for (std::size_t v = 0; v < 3 * model.num_vertices; ++v) {
    double acc = 0.0;
    for (std::size_t k = 0; k < kShapeDim; ++k) acc += model.shape_dirs.data[v * kShapeDim + k] * beta[k];
    out.data[v] += acc;
  }
  return out;
}

Tensor project_weak_perspective(const CameraParams& camera, const Tensor& points) {
  if (points.rank() != 2 || points.shape[1] != 3)
    throw ShapeError("project_weak_perspective: points must be N x 3");
  const std::size_t n = points.shape[0];
  Tensor out({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    out.data[2 * i] = camera.s * points.data[3 * i] + camera.tx;
    out.data[2 * i + 1] = camera.s * points.data[3 * i + 1] + camera.ty;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Procedural body

namespace {

// SMPL-like kinematic tree and rest joints (meters, T-pose facing +z).
constexpr int kSmplParents[24] = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};
constexpr double kSmplJoints[24][3] = {
    {0.00, 0.00, 0.00},   {0.06, -0.09, 0.00},  {-0.06, -0.09, 0.00}, {0.00, 0.11, -0.02},
    {0.10, -0.47, 0.01},  {-0.10, -0.47, 0.01}, {0.00, 0.25, 0.00},   {0.09, -0.87, -0.04},
    {-0.09, -0.87, -0.04}, {0.00, 0.30, 0.03},  {0.12, -0.93, 0.08},  {-0.12, -0.93, 0.08},
    {0.00, 0.51, 0.00},   {0.08, 0.42, 0.00},   {-0.08, 0.42, 0.00},  {0.00, 0.60, 0.05},
    {0.19, 0.45, -0.01},  {-0.19, 0.45, -0.01}, {0.45, 0.43, -0.02},  {-0.45, 0.43, -0.02},
    {0.71, 0.44, 0.00},   {-0.71, 0.44, 0.00},  {0.79, 0.44, 0.00},   {-0.79, 0.44, 0.00},
};

constexpr double kRegressorRadius = 0.05;

}  // namespace

BodyModel build_toy_body(std::uint64_t seed, std::size_t J, std::size_t V) {
  if (J < 2 || V < J) throw RangeError("build_toy_body: need J >= 2 and V >= J");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  BodyModel m;
  m.num_joints = J;
  m.num_vertices = V;
  m.parents.assign(J, -1);

  // skeleton
  std::vector<std::array<double, 3>> bones(J);
  if (J == kDefaultJoints) {
    for (std::size_t j = 0; j < J; ++j) {
      m.parents[j] = kSmplParents[j];
      for (int c = 0; c < 3; ++c) bones[j][c] = kSmplJoints[j][c] + (j ? 0.01 * (2.0 * unit(rng) - 1.0) : 0.0);
    }
  } else {
    bones[0] = {0.0, 0.0, 0.0};
    for (std::size_t j = 1; j < J; ++j) {
      const std::size_t lo = j >= 3 ? j - 3 : 0;
      m.parents[j] = static_cast<int>(lo + static_cast<std::size_t>(unit(rng) * static_cast<double>(j - lo)));
      std::array<double, 3> dir{gauss(rng), gauss(rng), 0.3 * gauss(rng)};
      const double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
      const double len = 0.1 + 0.15 * unit(rng);
      for (int c = 0; c < 3; ++c) bones[j][c] = bones[static_cast<std::size_t>(m.parents[j])][c] + len * dir[c] / n;
    }
  }

  // vertices: even ranks ring their joint, odd ranks sit along the bone to the parent
  m.template_vertices = Tensor({V, 3});
  std::vector<std::size_t> owner(V);
  for (std::size_t k = 0; k < V; ++k) {
    const std::size_t j = k % J;
    const std::size_t rank = k / J;
    owner[k] = j;
    std::array<double, 3> u{gauss(rng), gauss(rng), gauss(rng)};
    const double un = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) + 1e-12;
    const double radius = 0.02 + 0.025 * unit(rng);
    double along = 0.0;
    if (rank % 2 == 1 && j > 0) along = 0.25 + 0.25 * unit(rng);
    const auto& anchor = bones[j];
    const auto& parent = bones[j > 0 ? static_cast<std::size_t>(m.parents[j]) : 0];
    for (int c = 0; c < 3; ++c)
      m.template_vertices.data[3 * k + c] = anchor[c] + along * (parent[c] - anchor[c]) + radius * u[c] / un;
  }

  auto dist2 = [&](std::size_t k, const std::array<double, 3>& p) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = m.template_vertices.data[3 * k + c] - p[c];
      s += d * d;
    }
    return s;
  };

  // softmax skinning weights over squared joint distances
  m.skin_weights = Tensor({V, J});
  constexpr double kTemp2 = 0.05 * 0.05;
  for (std::size_t k = 0; k < V; ++k) {
    std::vector<double> logits(J);
    for (std::size_t j = 0; j < J; ++j) logits[j] = -dist2(k, bones[j]) / kTemp2;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    for (std::size_t j = 0; j < J; ++j) m.skin_weights.data[k * J + j] = logits[j] / z;
  }

  m.shape_dirs = Tensor({V, 3, kShapeDim});
  for (double& x : m.shape_dirs.data) x = 0.03 * (2.0 * unit(rng) - 1.0);

  // regressor: inverse-distance weights over vertices within the radius
  m.joint_regressor = Tensor({J, V});
  for (std::size_t j = 0; j < J; ++j) {
    double z = 0.0;
    for (std::size_t k = 0; k < V; ++k) {
      const double d = std::sqrt(dist2(k, bones[j]));
      if (d < kRegressorRadius) {
        const double w = 1.0 / (d + 1e-3);
        m.joint_regressor.data[j * V + k] = w;
        z += w;
      }
    }
    if (z == 0.0) {
      // fall back to the nearest owned vertex
      std::size_t best = j;
      for (std::size_t k = 0; k < V; ++k)
        if (owner[k] == j && dist2(k, bones[j]) < dist2(best, bones[j])) best = k;
      m.joint_regressor.data[j * V + best] = 1.0;
      z = 1.0;
    }
    for (std::size_t k = 0; k < V; ++k) m.joint_regressor.data[j * V + k] /= z;
  }

  // template joints come from the same regression the forward pass uses
  {
    Graph g;
    const NodeId verts = g.constant(Tensor({1, V, 3}, m.template_vertices.data));
    const NodeId joints = build_joint_regression(g, m, verts, 1);
    auto values = diff::evaluate(g, {});
    m.template_joints = Tensor({J, 3}, std::move(values[joints].data));
  }
  for (std::size_t j = 0; j < J; ++j) {
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = m.template_joints.data[3 * j + c] - bones[j][c];
      d2 += d * d;
    }
    if (std::sqrt(d2) > kRegressorRadius)
      throw InvariantError("build_toy_body: regressed joint " + std::to_string(j) + " is too far from its bone");
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

nlohmann::json matrix_json(const Tensor& t) {
  const std::size_t rows = t.shape[0], cols = t.numel() / std::max<std::size_t>(rows, 1);
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t r = 0; r < rows; ++r)
    out.push_back(std::vector<double>(t.data.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                      t.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols)));
  return out;
}

Tensor matrix_from_json(const nlohmann::json& j, const char* field, Shape shape) {
  const auto& arr = j.at(field);
  std::vector<double> data;
  data.reserve(diff::numel(shape));
  // accepts nested arrays of any depth in row-major order
  auto flatten = [&](const nlohmann::json& node, auto&& self) -> void {
    if (node.is_array())
      for (const auto& e : node) self(e, self);
    else
      data.push_back(node.get<double>());
  };
  flatten(arr, flatten);
  if (data.size() != diff::numel(shape))
    throw FormatError(std::string("body model field '") + field + "' has " + std::to_string(data.size()) +
                      " values, expected " + std::to_string(diff::numel(shape)));
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

void to_json(nlohmann::json& j, const BodyModel& m) {
  nlohmann::json parents = nlohmann::json::array();
  for (int p : m.parents) parents.push_back(p < 0 ? nlohmann::json(nullptr) : nlohmann::json(p));
  nlohmann::json dirs = nlohmann::json::array();
  for (std::size_t v = 0; v < m.num_vertices; ++v) {
    nlohmann::json per_vertex = nlohmann::json::array();
    for (std::size_t c = 0; c < 3; ++c) {
      const auto first = m.shape_dirs.data.begin() + static_cast<std::ptrdiff_t>((v * 3 + c) * kShapeDim);
      per_vertex.push_back(std::vector<double>(first, first + kShapeDim));
    }
    dirs.push_back(std::move(per_vertex));
  }
  j = nlohmann::json{{"template_vertices", matrix_json(m.template_vertices)},
                     {"template_joints", matrix_json(m.template_joints)},
                     {"parents", parents},
                     {"skin_weights", matrix_json(m.skin_weights)},
                     {"shape_dirs", dirs},
                     {"joint_regressor", matrix_json(m.joint_regressor)}};
}

void from_json(const nlohmann::json& j, BodyModel& m) {
  try {
    const auto& parents = j.at("parents");
    m.num_joints = parents.size();
    m.num_vertices = j.at("template_vertices").size();
    m.parents.clear();
    for (const auto& p : parents) m.parents.push_back(p.is_null() ? -1 : p.get<int>());
    const std::size_t J = m.num_joints, V = m.num_vertices;
    m.template_vertices = matrix_from_json(j, "template_vertices", {V, 3});
    m.template_joints = matrix_from_json(j, "template_joints", {J, 3});
    m.skin_weights = matrix_from_json(j, "skin_weights", {V, J});
    m.shape_dirs = matrix_from_json(j, "shape_dirs", {V, 3, kShapeDim});
    m.joint_regressor = matrix_from_json(j, "joint_regressor", {J, V});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("body model json: ") + e.what());
  }
  m.validate();
}

void save_body_model(const std::string& path, const BodyModel& model) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  nlohmann::json j = model;
  out << j.dump() << '\n';
  if (!out) throw IoError("write to '" + path + "' failed");
}

BodyModel load_body_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
  return j.get<BodyModel>();
}

}  // namespace cycleadapt::body
