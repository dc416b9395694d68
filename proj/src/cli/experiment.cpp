// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/cli/experiment.hpp"

#include <algorithm>
#include <fstream>

#include "cycleadapt/error.hpp"

namespace cycleadapt::cli {

using diff::Tensor;
using nlohmann::json;

RunConfig RunConfig::standard() {
  RunConfig c;
  c.source.name = "source";
  c.source.mixing_seed = 101;
  c.source.base_mixing_seed = 101;
  c.source.gap = 0.0;
  c.source.keypoint_noise = 0.0;
  c.source.p_drop = 0.0;
  // one hidden layer and independent poses fit the source domain best
  c.hmr.num_hidden_layers = 1;
  c.source_clips = c.source_frames;
  c.source.axis_seed = 7;
  c.target.name = "target";
  c.target.axis_seed = 7;
  c.target.mixing_seed = 202;
  c.target.base_mixing_seed = 101;
  c.target.gap = 0.5;
  c.target.freq_min = 0.01;
  c.target.freq_max = 0.04;
  c.target.amp_min = 0.1;
  c.target.amp_max = 0.7;
  c.target.keypoint_noise = 0.02;
  c.target.p_drop = 0.2;
  // per-frame appearance noise makes the regressor jitter, which is what a
  // temporal denoiser can remove
  c.target.feature_noise = 0.3;
  c.adapt.md_lr_scale = 0.2;
  return c;
}

void RunConfig::validate() const {
  hmr.validate();
  md.validate();
  adapt.validate();
  source.validate();
  target.validate();
  if (md.H != hmr.joints * body::kRotDim) throw ConfigError("md.H must equal 6 x hmr.joints");
  if (frames == 0 || source_frames == 0 || source_clips == 0) throw ConfigError("frame counts must be positive");
  if (vertices < hmr.joints) throw ConfigError("need at least as many vertices as joints");
  if (md_source_sequences == 0 || md_source_length < md.T)
    throw ConfigError("denoiser pre-training needs sequences at least T frames long");
  if (!(gaussian_std > 0.0)) throw ConfigError("gaussian_std must be positive");
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"hmr",
            {{"feature_dim", c.hmr.feature_dim},
             {"hidden_dim", c.hmr.hidden_dim},
             {"num_hidden_layers", c.hmr.num_hidden_layers},
             {"joints", c.hmr.joints}}},
           {"md", {{"T", c.md.T}, {"H", c.md.H}, {"M", c.md.M}, {"relu", c.md.relu}, {"residual", c.md.residual}, {"rest_offset", c.md.rest_offset}}},
           {"adapt", c.adapt},
           {"source", c.source},
           {"target", c.target},
           {"frames", c.frames},
           {"source_frames", c.source_frames},
           {"source_clips", c.source_clips},
           {"vertices", c.vertices},
           {"body_seed", c.body_seed},
           {"seed", c.seed},
           {"hmr_pretrain",
            {{"steps", c.hmr_pretrain.steps},
             {"batch", c.hmr_pretrain.batch},
             {"lr_start", c.hmr_pretrain.lr_start},
             {"lr_end", c.hmr_pretrain.lr_end}}},
           {"md_pretrain",
            {{"steps", c.md_pretrain.steps},
             {"batch", c.md_pretrain.batch},
             {"lr_start", c.md_pretrain.lr_start},
             {"lr_end", c.md_pretrain.lr_end},
             {"sigma", c.md_pretrain.sigma}}},
           {"md_source_sequences", c.md_source_sequences},
           {"md_source_length", c.md_source_length},
           {"gaussian_std", c.gaussian_std}};
}

void from_json(const json& j, RunConfig& out) {
  RunConfig c = RunConfig::standard();
  try {
    if (j.contains("hmr")) {
      const json& h = j.at("hmr");
      c.hmr.feature_dim = h.value("feature_dim", c.hmr.feature_dim);
      c.hmr.hidden_dim = h.value("hidden_dim", c.hmr.hidden_dim);
      c.hmr.num_hidden_layers = h.value("num_hidden_layers", c.hmr.num_hidden_layers);
      c.hmr.joints = h.value("joints", c.hmr.joints);
    }
    if (j.contains("md")) {
      const json& m = j.at("md");
      c.md.T = m.value("T", c.md.T);
      c.md.H = m.value("H", c.hmr.joints * body::kRotDim);
      c.md.M = m.value("M", c.md.M);
      c.md.relu = m.value("relu", c.md.relu);
      c.md.residual = m.value("residual", c.md.residual);
      c.md.rest_offset = m.value("rest_offset", c.md.rest_offset);
    } else {
      c.md.H = c.hmr.joints * body::kRotDim;
    }
    if (j.contains("adapt")) c.adapt = j.at("adapt").get<adapt::AdaptConfig>();
    if (j.contains("source")) c.source = j.at("source").get<synth::DomainSpec>();
    if (j.contains("target")) c.target = j.at("target").get<synth::DomainSpec>();
    c.frames = j.value("frames", c.frames);
    c.source_frames = j.value("source_frames", c.source_frames);
    c.source_clips = j.value("source_clips", c.source_clips);
    c.vertices = j.value("vertices", c.vertices);
    c.body_seed = j.value("body_seed", c.body_seed);
    c.seed = j.value("seed", c.seed);
    if (j.contains("hmr_pretrain")) {
      const json& p = j.at("hmr_pretrain");
      c.hmr_pretrain.steps = p.value("steps", c.hmr_pretrain.steps);
      c.hmr_pretrain.batch = p.value("batch", c.hmr_pretrain.batch);
      c.hmr_pretrain.lr_start = p.value("lr_start", c.hmr_pretrain.lr_start);
      c.hmr_pretrain.lr_end = p.value("lr_end", c.hmr_pretrain.lr_end);
    }
    if (j.contains("md_pretrain")) {
      const json& p = j.at("md_pretrain");
      c.md_pretrain.steps = p.value("steps", c.md_pretrain.steps);
      c.md_pretrain.batch = p.value("batch", c.md_pretrain.batch);
      c.md_pretrain.lr_start = p.value("lr_start", c.md_pretrain.lr_start);
      c.md_pretrain.lr_end = p.value("lr_end", c.md_pretrain.lr_end);
      c.md_pretrain.sigma = p.value("sigma", c.md_pretrain.sigma);
    }
    c.md_source_sequences = j.value("md_source_sequences", c.md_source_sequences);
    c.md_source_length = j.value("md_source_length", c.md_source_length);
    c.gaussian_std = j.value("gaussian_std", c.gaussian_std);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  out = c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  try {
    RunConfig c = j.get<RunConfig>();
    c.validate();
    return c;
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

body::BodyModel make_body(const RunConfig& cfg) {
  return body::build_toy_body(cfg.body_seed, cfg.hmr.joints, cfg.vertices);
}

synth::SyntheticVideo make_source_video(const RunConfig& cfg, const body::BodyModel& body, std::uint64_t seed) {
  const std::size_t clips = std::min(cfg.source_clips, cfg.source_frames);
  std::vector<synth::SyntheticVideo> parts;
  for (std::size_t k = 0; k < clips; ++k) {
    const std::size_t len = cfg.source_frames / clips + (k < cfg.source_frames % clips ? 1 : 0);
    parts.push_back(synth::make_video(body, cfg.source, len, cfg.hmr.feature_dim, 1000 + 1000 * seed + k));
  }
  synth::SyntheticVideo out = parts.front();
  auto append = [](Tensor& dst, const Tensor& src) {
    dst.data.insert(dst.data.end(), src.data.begin(), src.data.end());
    dst.shape[0] += src.shape[0];
  };
  for (std::size_t k = 1; k < parts.size(); ++k) {
    append(out.features, parts[k].features);
    append(out.theta, parts[k].theta);
    append(out.beta, parts[k].beta);
    append(out.keypoints, parts[k].keypoints);
    append(out.joints, parts[k].joints);
    append(out.mesh, parts[k].mesh);
  }
  return out;
}

synth::SyntheticVideo make_target_video(const RunConfig& cfg, const body::BodyModel& body, std::uint64_t seed) {
  return synth::make_video(body, cfg.target, cfg.frames, cfg.hmr.feature_dim, seed);
}

adapt::Nets random_nets(const RunConfig& cfg, std::uint64_t seed) {
  return {hmr::hmr_init(cfg.hmr, 2 * seed + 1), md::md_init(cfg.md, 2 * seed + 2)};
}

adapt::Nets pretrain_nets(const RunConfig& cfg, const body::BodyModel& body, std::uint64_t seed) {
  adapt::Nets nets = random_nets(cfg, seed);
  const synth::SyntheticVideo src = make_source_video(cfg, body, seed);
  hmr::HmrPretrainConfig hp = cfg.hmr_pretrain;
  hp.seed = seed;
  hmr::hmr_pretrain(nets.hmr, body, src.features, src.theta, src.beta, src.keypoints, hp);

  // the regressor's source clip is long and varied; the denoiser sees clean
  // source motions only
  std::vector<Tensor> motions;
  for (std::size_t k = 0; k < cfg.md_source_sequences; ++k)
    motions.push_back(synth::gen_motion(body, cfg.source, cfg.md_source_length, 5000 + 97 * seed + k).theta);
  md::MdPretrainConfig mp = cfg.md_pretrain;
  mp.seed = seed;
  md::md_pretrain(nets.md, motions, mp);
  return nets;
}

Prepared prepare(const RunConfig& cfg, std::uint64_t seed) {
  Prepared p;
  p.body = make_body(cfg);
  p.pretrained = pretrain_nets(cfg, p.body, seed);
  p.target = make_target_video(cfg, p.body, seed);
  return p;
}

adapt::AdaptInput adapt_input(const synth::SyntheticVideo& video) { return {video.features, video.keypoints}; }

adapt::Evaluator video_evaluator(const body::BodyModel& body, const synth::SyntheticVideo& video) {
  return adapt::make_evaluator(body, video.joints, video.mesh);
}

std::vector<std::string> suite_names() { return {"table1", "table2", "table4", "suppE", "online"}; }

std::vector<Variant> suite_variants(const std::string& suite, const RunConfig& cfg) {
  const adapt::AdaptConfig base = cfg.adapt;
  auto with = [&](std::string name, auto edit) {
    Variant v{std::move(name), base};
    edit(v);
    return v;
  };
  auto none = [](Variant&) {};
  const Variant no_adapt = with("base", [](Variant& v) { v.adapt_enabled = false; });
  const Variant full = with("full-cyclic", none);

  if (suite == "table2")
    return {no_adapt, with("2d-only", [](Variant& v) { v.adapt.use_smpl = false; }),
            with("3d-noncyclic", [](Variant& v) { v.adapt.frozen_md = true; }), full};
  if (suite == "table1")
    return {with("hmrnet-frozen",
                 [](Variant& v) {
                   v.adapt_enabled = false;
                   v.metric_source = "hmrnet";
                 }),
            with("mdnet-before",
                 [](Variant& v) {
                   v.adapt_enabled = false;
                   v.metric_source = "denoised";
                 }),
            with("mdnet-after", [](Variant& v) {
              v.adapt.freeze_hmr = true;
              v.metric_source = "denoised";
            })};
  if (suite == "table4")
    return {with("gaussian-filter", [&](Variant& v) { v.adapt.gaussian_std = cfg.gaussian_std; }), full};
  if (suite == "suppE") return {with("random-init", [](Variant& v) { v.random_init = true; }), full};
  if (suite == "online") return {no_adapt, with("online", [](Variant& v) { v.online = true; }), full};
  throw ConfigError("unknown suite '" + suite + "'");
}

VariantResult run_variant(const Prepared& prep, const RunConfig& cfg, const Variant& v, std::uint64_t seed) {
  VariantResult r{v.name, {}, {}};
  adapt::AdaptConfig ac = v.adapt;
  ac.seed = seed;
  adapt::Nets nets = v.random_init ? random_nets(cfg, seed) : prep.pretrained;
  const adapt::AdaptInput input = adapt_input(prep.target);
  const adapt::Evaluator eval = video_evaluator(prep.body, prep.target);

  auto denoised_report = [&](const adapt::Nets& n) {
    const hmr::HmrBatch out = hmr::hmr_forward_batch(n.hmr, input.features);
    return eval(adapt::md_denoise_sequence(n.md, out.theta), out.beta);
  };

  if (!v.adapt_enabled) {
    if (v.metric_source == "denoised") r.report = denoised_report(nets);
    else {
      const hmr::HmrBatch out = hmr::hmr_forward_batch(nets.hmr, input.features);
      r.report = eval(out.theta, out.beta);
    }
    return r;
  }
  if (v.online) {
    r.report = adapt::online_adapt(input, prep.body, std::move(nets), ac, eval).report;
    return r;
  }
  adapt::CycleResult res = adapt::cycle_adapt(input, prep.body, std::move(nets), ac, eval);
  r.rows = res.rows;
  if (v.metric_source == "denoised") r.report = denoised_report(res.nets);
  else {
    for (const adapt::MetricRow& row : res.rows)
      if (row.source == v.metric_source) r.report = row.report;
  }
  return r;
}

}  // namespace cycleadapt::cli
