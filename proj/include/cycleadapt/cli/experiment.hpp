// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and the benchmark pipeline shared by the command line
// tool and the acceptance suite: pre-training on the source domain, target
// video synthesis, and the ablation variants.
#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "cycleadapt/adapt/cycle.hpp"
#include "cycleadapt/synth/synth.hpp"

namespace cycleadapt::cli {

struct RunConfig {
  hmr::HmrConfig hmr;
  md::MdConfig md;
  adapt::AdaptConfig adapt;
  synth::DomainSpec source;
  synth::DomainSpec target;
  std::size_t frames = 500;         // target video length
  std::size_t source_frames = 2000; // regressor pre-training set, split into clips
  std::size_t source_clips = 40;    // independent source motions in that set
  std::size_t vertices = body::kDefaultVertices;
  std::uint64_t body_seed = 42;
  std::uint64_t seed = 0;
  hmr::HmrPretrainConfig hmr_pretrain;
  md::MdPretrainConfig md_pretrain;
  std::size_t md_source_sequences = 8;  // clean source motions for denoiser pre-training
  std::size_t md_source_length = 400;
  double gaussian_std = 2.0;  // filter width for the Gaussian ablation

  /// The standard benchmark: N=500, J=24, V=120, F=512, keypoint noise 0.02, p_drop 0.2.
  static RunConfig standard();
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::string& path);

/// Everything that depends only on (config, seed) before adaptation.
struct Prepared {
  body::BodyModel body;
  adapt::Nets pretrained;
  synth::SyntheticVideo target;
};

body::BodyModel make_body(const RunConfig& cfg);
/// Concatenation of `source_clips` independently seeded source videos.
synth::SyntheticVideo make_source_video(const RunConfig& cfg, const body::BodyModel& body, std::uint64_t seed);
synth::SyntheticVideo make_target_video(const RunConfig& cfg, const body::BodyModel& body, std::uint64_t seed);
adapt::Nets pretrain_nets(const RunConfig& cfg, const body::BodyModel& body, std::uint64_t seed);
adapt::Nets random_nets(const RunConfig& cfg, std::uint64_t seed);
Prepared prepare(const RunConfig& cfg, std::uint64_t seed);

adapt::AdaptInput adapt_input(const synth::SyntheticVideo& video);
adapt::Evaluator video_evaluator(const body::BodyModel& body, const synth::SyntheticVideo& video);

struct Variant {
  std::string name;
  adapt::AdaptConfig adapt;
  bool adapt_enabled = true;  // false: evaluate the pretrained regressor only
  bool online = false;
  bool random_init = false;
  std::string metric_source = "hmrnet";  // which final row is reported
};

/// Named variant groups: table1, table2, table4, suppE, online.
std::vector<Variant> suite_variants(const std::string& suite, const RunConfig& cfg);
std::vector<std::string> suite_names();

struct VariantResult {
  std::string name;
  metrics::MetricReport report;
  std::vector<adapt::MetricRow> rows;  // per-cycle rows (offline variants)
};

VariantResult run_variant(const Prepared& prep, const RunConfig& cfg, const Variant& v, std::uint64_t seed);

}  // namespace cycleadapt::cli
