// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/synth/synth.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "cycleadapt/error.hpp"

namespace cycleadapt::synth {

using diff::Tensor;
using nlohmann::json;

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id)};
  return std::mt19937_64(seq);
}

constexpr double kFeatureGain = 5.0;

enum : std::uint64_t { kMotionStream = 1, kFeatureStream = 2, kKeypointStream = 3, kMixingStream = 4, kAxisStream = 5 };

}  // namespace

void DomainSpec::validate() const {
  if (!(freq_min <= freq_max) || !(amp_min <= amp_max) || freq_min < 0.0 || amp_min < 0.0)
    throw ConfigError("domain '" + name + "': frequency and amplitude ranges must be ordered and non-negative");
  if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw ConfigError("domain '" + name + "': p_drop must lie in [0, 1]");
  if (!(gap >= 0.0 && gap <= 1.0)) throw ConfigError("domain '" + name + "': gap must lie in [0, 1]");
  if (feature_noise < 0.0 || keypoint_noise < 0.0) throw ConfigError("domain '" + name + "': noise must be >= 0");
}

void to_json(json& j, const DomainSpec& s) {
  j = json{{"name", s.name},
           {"freq_min", s.freq_min},
           {"freq_max", s.freq_max},
           {"amp_min", s.amp_min},
           {"amp_max", s.amp_max},
           {"axis_seed", s.axis_seed},
           {"synergies", s.synergies},
           {"mixing_seed", s.mixing_seed},
           {"base_mixing_seed", s.base_mixing_seed},
           {"gap", s.gap},
           {"feature_noise", s.feature_noise},
           {"keypoint_noise", s.keypoint_noise},
           {"p_drop", s.p_drop},
           {"camera", {s.camera.s, s.camera.tx, s.camera.ty}}};
}

void from_json(const json& j, DomainSpec& s) {
  DomainSpec d;
  d.name = j.value("name", d.name);
  d.freq_min = j.value("freq_min", d.freq_min);
  d.freq_max = j.value("freq_max", d.freq_max);
  d.amp_min = j.value("amp_min", d.amp_min);
  d.amp_max = j.value("amp_max", d.amp_max);
  d.axis_seed = j.value("axis_seed", d.axis_seed);
  d.synergies = j.value("synergies", d.synergies);
  d.mixing_seed = j.value("mixing_seed", d.mixing_seed);
  d.base_mixing_seed = j.value("base_mixing_seed", d.base_mixing_seed);
  d.gap = j.value("gap", d.gap);
  d.feature_noise = j.value("feature_noise", d.feature_noise);
  d.keypoint_noise = j.value("keypoint_noise", d.keypoint_noise);
  d.p_drop = j.value("p_drop", d.p_drop);
  if (j.contains("camera")) {
    const auto c = j.at("camera").get<std::vector<double>>();
    if (c.size() != 3) throw ConfigError("domain camera must have 3 entries");
    d.camera = {c[0], c[1], c[2]};
  }
  d.validate();
  s = d;
}

std::array<double, 6> axis_angle_to_rot6d(const std::array<double, 3>& w) {
  const double angle = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
  if (angle == 0.0) return body::kIdentityRot6d;
  const double k[3] = {w[0] / angle, w[1] / angle, w[2] / angle};
  const double c = std::cos(angle), s = std::sin(angle), v = 1.0 - c;
  // Rodrigues; columns 0 and 1 of R
  const double r00 = c + k[0] * k[0] * v, r10 = k[1] * k[0] * v + k[2] * s, r20 = k[2] * k[0] * v - k[1] * s;
  const double r01 = k[0] * k[1] * v - k[2] * s, r11 = c + k[1] * k[1] * v, r21 = k[2] * k[1] * v + k[0] * s;
  return {r00, r10, r20, r01, r11, r21};
}

Motion gen_motion(const body::BodyModel& model, const DomainSpec& spec, std::size_t N, std::uint64_t seed) {
  spec.validate();
  if (N == 0) throw RangeError("gen_motion: need at least one frame");
  const std::size_t J = model.num_joints;
  auto rng = stream(seed, kMotionStream);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // fixed-seed draws come from their own stream so every clip shares them
  auto axis_rng = stream(spec.axis_seed, kAxisStream);
  std::normal_distribution<double> axis_gauss(0.0, 1.0);
  auto shared_gauss = [&] { return spec.axis_seed != 0 ? axis_gauss(axis_rng) : gauss(rng); };

  std::vector<std::array<double, 3>> axes(J);
  for (auto& axis : axes) {
    double n = 0.0;
    do {
      for (double& a : axis) a = shared_gauss();
      n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    } while (n < 1e-6);
    for (double& a : axis) a /= n;
  }
  // joint angles are unit-norm mixtures of K latent oscillators, or one
  // oscillator per joint when synergies == 0
  const std::size_t K = spec.synergies > 0 ? spec.synergies : J;
  std::vector<double> mix(J * K, 0.0);
  if (spec.synergies > 0) {
    for (std::size_t j = 0; j < J; ++j) {
      double n = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        mix[j * K + k] = shared_gauss();
        n += mix[j * K + k] * mix[j * K + k];
      }
      n = std::sqrt(n);
      for (std::size_t k = 0; k < K; ++k) mix[j * K + k] /= n;
    }
  } else {
    for (std::size_t j = 0; j < J; ++j) mix[j * K + j] = 1.0;
  }
  struct Oscillator {
    double amp, freq, phase;
  };
  std::vector<Oscillator> osc(K);
  for (Oscillator& o : osc) {
    o.amp = spec.amp_min + (spec.amp_max - spec.amp_min) * unit(rng);
    o.freq = spec.freq_min + (spec.freq_max - spec.freq_min) * unit(rng);
    o.phase = 2.0 * std::numbers::pi * unit(rng);
  }
  std::array<double, body::kShapeDim> beta{};
  std::normal_distribution<double> shape(0.0, 0.5);
  for (double& b : beta) b = std::clamp(shape(rng), -2.0, 2.0);

  Motion m;
  m.theta = Tensor({N, 6 * J});
  m.beta = Tensor({N, body::kShapeDim});
  std::vector<double> latent(K);
  for (std::size_t t = 0; t < N; ++t) {
    for (std::size_t k = 0; k < K; ++k)
      latent[k] = osc[k].amp * std::sin(2.0 * std::numbers::pi * osc[k].freq * static_cast<double>(t) + osc[k].phase);
    for (std::size_t j = 0; j < J; ++j) {
      double a = 0.0;
      for (std::size_t k = 0; k < K; ++k) a += mix[j * K + k] * latent[k];
      const auto& axis = axes[j];
      const auto code = axis_angle_to_rot6d({a * axis[0], a * axis[1], a * axis[2]});
      std::copy(code.begin(), code.end(), m.theta.data.begin() + static_cast<std::ptrdiff_t>((t * J + j) * 6));
    }
    std::copy(beta.begin(), beta.end(), m.beta.data.begin() + static_cast<std::ptrdiff_t>(t * body::kShapeDim));
  }
  body::BodyGeometry geo = body::body_forward_batch(model, m.theta, m.beta);
  m.joints = std::move(geo.joints);
  m.mesh = std::move(geo.vertices);
  return m;
}

FeatureMap feature_map(const DomainSpec& spec, std::size_t pose_dim, std::size_t feature_dim) {
  const std::size_t D = pose_dim + body::kShapeDim;
  auto draw = [&](std::uint64_t seed) {
    auto rng = stream(seed, kMixingStream);
    std::normal_distribution<double> gauss(0.0, 1.0);
    FeatureMap m{Tensor({feature_dim, D}), Tensor({feature_dim})};
    const double scale = kFeatureGain / std::sqrt(static_cast<double>(D));
    for (double& a : m.A.data) a = scale * gauss(rng);
    // centre the rest pose: b = b0 - A [identity codes; 0]
    for (std::size_t r = 0; r < feature_dim; ++r) {
      double rest = 0.0;
      for (std::size_t c = 0; c < pose_dim; ++c) rest += m.A.data[r * D + c] * body::kIdentityRot6d[c % body::kRotDim];
      m.b.data[r] = 0.1 * gauss(rng) - rest;
    }
    return m;
  };
  FeatureMap own = draw(spec.mixing_seed);
  if (spec.gap == 1.0) return own;
  const FeatureMap base = draw(spec.base_mixing_seed);
  for (std::size_t i = 0; i < own.A.numel(); ++i) own.A.data[i] = (1.0 - spec.gap) * base.A.data[i] + spec.gap * own.A.data[i];
  for (std::size_t i = 0; i < own.b.numel(); ++i) own.b.data[i] = (1.0 - spec.gap) * base.b.data[i] + spec.gap * own.b.data[i];
  return own;
}

std::vector<double> render_features(const FeatureMap& map, std::span<const double> theta, std::span<const double> beta,
                                    double noise_std, std::mt19937_64& rng) {
  const std::size_t F = map.A.shape[0], D = map.A.shape[1];
  if (theta.size() + beta.size() != D) throw ShapeError("render_features: parameter size does not match the map");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> f(F);
  for (std::size_t r = 0; r < F; ++r) {
    const double* a = &map.A.data[r * D];
    double acc = map.b.data[r];
    for (std::size_t c = 0; c < theta.size(); ++c) acc += a[c] * theta[c];
    for (std::size_t c = 0; c < beta.size(); ++c) acc += a[theta.size() + c] * beta[c];
    f[r] = acc + (noise_std > 0.0 ? noise_std * gauss(rng) : 0.0);
  }
  return f;
}

std::vector<std::array<double, 3>> simulate_keypoints(const Tensor& joints3d, const body::CameraParams& camera,
                                                      const DomainSpec& spec, std::mt19937_64& rng) {
  const Tensor proj = body::project_weak_perspective(camera, joints3d);
  const std::size_t J = proj.shape[0];
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::bernoulli_distribution drop(spec.p_drop);
  std::vector<std::array<double, 3>> kp(J);
  for (std::size_t j = 0; j < J; ++j) {
    const double x = proj.data[2 * j] + spec.keypoint_noise * gauss(rng);
    const double y = proj.data[2 * j + 1] + spec.keypoint_noise * gauss(rng);
    kp[j] = drop(rng) ? std::array<double, 3>{0.0, 0.0, 0.0} : std::array<double, 3>{x, y, 1.0};
  }
  return kp;
}

body::SmplParams SyntheticVideo::params(std::size_t frame) const {
  const std::size_t P = theta.shape.at(1), S = beta.shape.at(1);
  return {std::vector<double>(theta.data.begin() + static_cast<std::ptrdiff_t>(frame * P),
                              theta.data.begin() + static_cast<std::ptrdiff_t>((frame + 1) * P)),
          std::vector<double>(beta.data.begin() + static_cast<std::ptrdiff_t>(frame * S),
                              beta.data.begin() + static_cast<std::ptrdiff_t>((frame + 1) * S))};
}

SyntheticVideo make_video(const body::BodyModel& model, const DomainSpec& spec, std::size_t N, std::size_t F,
                          std::uint64_t seed) {
  Motion m = gen_motion(model, spec, N, seed);
  const std::size_t J = model.num_joints, P = model.pose_dim();
  const FeatureMap map = feature_map(spec, P, F);
  auto feat_rng = stream(seed, kFeatureStream);
  auto kp_rng = stream(seed, kKeypointStream);

  SyntheticVideo v;
  v.spec = spec;
  v.camera = spec.camera;
  v.features = Tensor({N, F});
  v.keypoints = Tensor({N, J, 3});
  for (std::size_t t = 0; t < N; ++t) {
    const std::span<const double> th(m.theta.data.data() + t * P, P);
    const std::span<const double> be(m.beta.data.data() + t * body::kShapeDim, body::kShapeDim);
    const auto f = render_features(map, th, be, spec.feature_noise, feat_rng);
    std::copy(f.begin(), f.end(), v.features.data.begin() + static_cast<std::ptrdiff_t>(t * F));
    Tensor joints({J, 3}, std::vector<double>(m.joints.data.begin() + static_cast<std::ptrdiff_t>(t * J * 3),
                                              m.joints.data.begin() + static_cast<std::ptrdiff_t>((t + 1) * J * 3)));
    const auto kp = simulate_keypoints(joints, spec.camera, spec, kp_rng);
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t c = 0; c < 3; ++c) v.keypoints.data[(t * J + j) * 3 + c] = kp[j][c];
  }
  v.theta = std::move(m.theta);
  v.beta = std::move(m.beta);
  v.joints = std::move(m.joints);
  v.mesh = std::move(m.mesh);
  return v;
}

namespace {

std::vector<double> row(const Tensor& t, std::size_t i) {
  const std::size_t w = t.numel() / t.shape[0];
  return {t.data.begin() + static_cast<std::ptrdiff_t>(i * w), t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * w)};
}

void put_row(Tensor& t, std::size_t i, const std::vector<double>& values, const char* field, std::size_t line) {
  const std::size_t w = t.numel() / t.shape[0];
  if (values.size() != w)
    throw FormatError("video line " + std::to_string(line) + ": field '" + field + "' has " +
                      std::to_string(values.size()) + " values, expected " + std::to_string(w));
  std::copy(values.begin(), values.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * w));
}

json read_line(std::istream& in, const std::string& path, std::size_t line) {
  std::string text;
  if (!std::getline(in, text)) throw FormatError(path + ": truncated at line " + std::to_string(line));
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path + ": line " + std::to_string(line) + ": " + e.what());
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

}  // namespace

void write_video(const std::string& path, const SyntheticVideo& v) {
  const std::size_t N = v.frames(), F = v.features.shape.at(1), J = v.keypoints.shape.at(1),
                    V = v.mesh.shape.at(1);
  {
    std::ofstream out = open_out(path);
    out << json{{"version", kVideoVersion}, {"N", N}, {"F", F}, {"J", J}, {"V", V}, {"spec", v.spec},
                {"camera", {v.camera.s, v.camera.tx, v.camera.ty}}}
               .dump()
        << '\n';
    for (std::size_t t = 0; t < N; ++t) {
      json kp = json::array();
      for (std::size_t j = 0; j < J; ++j) {
        const double* p = &v.keypoints.data[(t * J + j) * 3];
        kp.push_back({p[0], p[1], p[2]});
      }
      out << json{{"feat", row(v.features, t)}, {"theta", row(v.theta, t)}, {"beta", row(v.beta, t)}, {"kp", kp}}.dump()
          << '\n';
    }
    if (!out) throw IoError("failed writing " + path);
  }
  std::ofstream out = open_out(path + ".gt");
  out << json{{"version", kVideoVersion}, {"N", N}, {"J", J}, {"V", V}}.dump() << '\n';
  for (std::size_t t = 0; t < N; ++t) out << json{{"joints", row(v.joints, t)}, {"mesh", row(v.mesh, t)}}.dump() << '\n';
  if (!out) throw IoError("failed writing " + path + ".gt");
}

SyntheticVideo read_video(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const json header = read_line(in, path, 1);
  SyntheticVideo v;
  std::size_t N = 0, F = 0, J = 0, V = 0;
  try {
    const auto version = header.at("version").get<std::uint32_t>();
    if (version != kVideoVersion)
      throw VersionError(path + ": unsupported video version " + std::to_string(version));
    N = header.at("N").get<std::size_t>();
    F = header.at("F").get<std::size_t>();
    J = header.at("J").get<std::size_t>();
    V = header.at("V").get<std::size_t>();
    v.spec = header.at("spec").get<DomainSpec>();
    const auto cam = header.at("camera").get<std::vector<double>>();
    if (cam.size() != 3) throw FormatError(path + ": camera must have 3 entries");
    v.camera = {cam[0], cam[1], cam[2]};
  } catch (const json::exception& e) {
    throw FormatError(path + ": bad header: " + e.what());
  }
  v.features = Tensor({N, F});
  v.theta = Tensor({N, 6 * J});
  v.beta = Tensor({N, body::kShapeDim});
  v.keypoints = Tensor({N, J, 3});
  v.joints = Tensor({N, J, 3});
  v.mesh = Tensor({N, V, 3});
  for (std::size_t t = 0; t < N; ++t) {
    const json frame = read_line(in, path, t + 2);
    try {
      put_row(v.features, t, frame.at("feat").get<std::vector<double>>(), "feat", t + 2);
      put_row(v.theta, t, frame.at("theta").get<std::vector<double>>(), "theta", t + 2);
      put_row(v.beta, t, frame.at("beta").get<std::vector<double>>(), "beta", t + 2);
      const auto kp = frame.at("kp").get<std::vector<std::array<double, 3>>>();
      if (kp.size() != J) throw FormatError(path + ": line " + std::to_string(t + 2) + ": wrong keypoint count");
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t c = 0; c < 3; ++c) v.keypoints.data[(t * J + j) * 3 + c] = kp[j][c];
    } catch (const json::exception& e) {
      throw FormatError(path + ": line " + std::to_string(t + 2) + ": " + e.what());
    }
  }
  const std::string gt_path = path + ".gt";
  std::ifstream gt(gt_path, std::ios::binary);
  if (!gt) throw IoError("cannot open " + gt_path);
  const json gh = read_line(gt, gt_path, 1);
  try {
    if (gh.at("version").get<std::uint32_t>() != kVideoVersion) throw VersionError(gt_path + ": unsupported version");
    if (gh.at("N").get<std::size_t>() != N || gh.at("J").get<std::size_t>() != J || gh.at("V").get<std::size_t>() != V)
      throw FormatError(gt_path + ": dimensions do not match " + path);
  } catch (const json::exception& e) {
    throw FormatError(gt_path + ": bad header: " + e.what());
  }
  for (std::size_t t = 0; t < N; ++t) {
    const json frame = read_line(gt, gt_path, t + 2);
    try {
      put_row(v.joints, t, frame.at("joints").get<std::vector<double>>(), "joints", t + 2);
      put_row(v.mesh, t, frame.at("mesh").get<std::vector<double>>(), "mesh", t + 2);
    } catch (const json::exception& e) {
      throw FormatError(gt_path + ": line " + std::to_string(t + 2) + ": " + e.what());
    }
  }
  return v;
}

}  // namespace cycleadapt::synth
