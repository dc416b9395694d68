// SPDX-License-Identifier: Apache-2.0
//
// cycleadapt: synth | pretrain | adapt | eval | ablate

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cycleadapt/cli/experiment.hpp"
#include "cycleadapt/error.hpp"

namespace fs = std::filesystem;
using namespace cycleadapt;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* sub, Common& c, bool with_out = true) {
  sub->add_option("--config", c.config, "JSON run configuration (defaults to the standard benchmark)");
  sub->add_option("--seed", c.seed, "Seed; overrides the config");
  if (with_out) sub->add_option("--out", c.out, "Output directory");
}

cli::RunConfig resolve_config(const Common& c) {
  cli::RunConfig cfg = c.config.empty() ? cli::RunConfig::standard() : cli::load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

fs::path prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
  return fs::path(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

void echo_config(const fs::path& dir, const cli::RunConfig& cfg) {
  nlohmann::json j = cfg;
  write_text(dir / "config.json", j.dump(2) + "\n");
}

std::size_t thread_count() {
  const char* env = std::getenv("CYCLEADAPT_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n <= 0) throw ConfigError(std::string("CYCLEADAPT_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<std::size_t>(n);
}

std::string report_csv_values(const metrics::MetricReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.6g,%.6g,%.6g,%.6g", r.mpjpe, r.pa_mpjpe, r.mpvpe, r.accel);
  return buf;
}

// ---------------------------------------------------------------- synth

int run_synth(const Common& c) {
  const cli::RunConfig cfg = resolve_config(c);
  const fs::path dir = prepare_dir(c.out);
  const body::BodyModel body = cli::make_body(cfg);
  synth::write_video((dir / "source.jsonl").string(), cli::make_source_video(cfg, body, cfg.seed));
  synth::write_video((dir / "target.jsonl").string(), cli::make_target_video(cfg, body, cfg.seed));
  echo_config(dir, cfg);
  return 0;
}

// ---------------------------------------------------------------- pretrain

int run_pretrain(const Common& c) {
  const cli::RunConfig cfg = resolve_config(c);
  const fs::path dir = prepare_dir(c.out);
  const body::BodyModel body = cli::make_body(cfg);
  const adapt::Nets nets = cli::pretrain_nets(cfg, body, cfg.seed);
  nn::save_params((dir / "hmr.bin").string(), hmr::kHmrMagic, nets.hmr.params);
  nn::save_params((dir / "md.bin").string(), md::kMdMagic, nets.md.params);
  echo_config(dir, cfg);
  return 0;
}

// ---------------------------------------------------------------- adapt

struct AdaptFlags {
  std::string hmr_path, md_path, target_path;
  bool online = false, frozen_md = false, no_3d = false, random_init = false, unweighted_2d = false,
       freeze_hmr = false;
  double gaussian = 0.0;
};

adapt::Nets load_nets(const cli::RunConfig& cfg, const std::string& hmr_path, const std::string& md_path) {
  adapt::Nets nets = cli::random_nets(cfg, cfg.seed);
  nn::load_params(hmr_path, hmr::kHmrMagic, nets.hmr.params);
  nn::load_params(md_path, md::kMdMagic, nets.md.params);
  return nets;
}

int run_adapt(const Common& c, const AdaptFlags& f) {
  cli::RunConfig cfg = resolve_config(c);
  if (f.hmr_path.empty() != f.md_path.empty()) throw ConfigError("--hmr and --md must be given together");
  cfg.adapt.frozen_md = cfg.adapt.frozen_md || f.frozen_md;
  cfg.adapt.use_smpl = cfg.adapt.use_smpl && !f.no_3d;
  cfg.adapt.weighted_2d = cfg.adapt.weighted_2d && !f.unweighted_2d;
  cfg.adapt.freeze_hmr = cfg.adapt.freeze_hmr || f.freeze_hmr;
  if (f.gaussian > 0.0) cfg.adapt.gaussian_std = f.gaussian;
  cfg.adapt.seed = cfg.seed;
  cfg.validate();
  const fs::path dir = prepare_dir(c.out);
  const fs::path ckpt = prepare_dir((dir / "checkpoints").string());

  const body::BodyModel body = cli::make_body(cfg);
  const synth::SyntheticVideo target =
      f.target_path.empty() ? cli::make_target_video(cfg, body, cfg.seed) : synth::read_video(f.target_path);
  adapt::Nets nets = f.random_init             ? cli::random_nets(cfg, cfg.seed)
                     : !f.hmr_path.empty()     ? load_nets(cfg, f.hmr_path, f.md_path)
                                               : cli::pretrain_nets(cfg, body, cfg.seed);
  const adapt::AdaptInput input = cli::adapt_input(target);
  const adapt::Evaluator eval = cli::video_evaluator(body, target);

  std::vector<adapt::MetricRow> rows;
  adapt::Nets final_nets;
  if (f.online) {
    adapt::OnlineResult r = adapt::online_adapt(input, body, std::move(nets), cfg.adapt, eval);
    rows.push_back({1, "hmrnet", r.report});
    final_nets = std::move(r.nets);
  } else {
    auto on_cycle = [&](std::size_t cycle, const adapt::Nets& n, const adapt::ResultStore&) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "cycle_%02zu", cycle);
      nn::save_params((ckpt / (std::string(stem) + ".hmr.bin")).string(), hmr::kHmrMagic, n.hmr.params);
      nn::save_params((ckpt / (std::string(stem) + ".md.bin")).string(), md::kMdMagic, n.md.params);
    };
    adapt::CycleResult r = adapt::cycle_adapt(input, body, std::move(nets), cfg.adapt, eval, {}, on_cycle);
    rows = std::move(r.rows);
    final_nets = std::move(r.nets);
  }
  adapt::emit_metrics_csv((dir / "metrics.csv").string(), rows);
  nn::save_params((dir / "hmr.bin").string(), hmr::kHmrMagic, final_nets.hmr.params);
  nn::save_params((dir / "md.bin").string(), md::kMdMagic, final_nets.md.params);
  echo_config(dir, cfg);
  return 0;
}

// ---------------------------------------------------------------- eval

int run_eval(const Common& c, const std::string& hmr_path, const std::string& md_path,
             const std::string& target_path, const std::string& out_path) {
  const cli::RunConfig cfg = resolve_config(c);
  const body::BodyModel body = cli::make_body(cfg);
  const synth::SyntheticVideo target =
      target_path.empty() ? cli::make_target_video(cfg, body, cfg.seed) : synth::read_video(target_path);
  adapt::Nets nets = cli::random_nets(cfg, cfg.seed);
  nn::load_params(hmr_path, hmr::kHmrMagic, nets.hmr.params);
  const adapt::Evaluator eval = cli::video_evaluator(body, target);
  const hmr::HmrBatch out = hmr::hmr_forward_batch(nets.hmr, target.features);

  std::string text = "source,mpjpe,pa_mpjpe,mpvpe,accel\n";
  text += "hmrnet," + report_csv_values(eval(out.theta, out.beta)) + "\n";
  if (!md_path.empty()) {
    nn::load_params(md_path, md::kMdMagic, nets.md.params);
    text += "denoised," + report_csv_values(eval(adapt::md_denoise_sequence(nets.md, out.theta), out.beta)) + "\n";
  }
  if (out_path.empty()) std::cout << text;
  else write_text(out_path, text);
  return 0;
}

// ---------------------------------------------------------------- ablate

int run_ablate(const Common& c, const std::string& suite) {
  const cli::RunConfig cfg = resolve_config(c);
  const std::vector<cli::Variant> variants = cli::suite_variants(suite, cfg);
  const std::size_t threads = thread_count();
  const fs::path dir = prepare_dir(c.out);
  const cli::Prepared prep = cli::prepare(cfg, cfg.seed);

  // variants only read the prepared state, so they can run side by side
  std::vector<cli::VariantResult> results(variants.size());
  std::vector<std::exception_ptr> errors(variants.size());
  auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < variants.size(); i += threads) {
      try {
        results[i] = cli::run_variant(prep, cfg, variants[i], cfg.seed);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(threads, variants.size()); ++t) pool.emplace_back(work, t);
  work(0);
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);

  std::string text = "suite,variant,mpjpe,pa_mpjpe,mpvpe,accel\n";
  for (const cli::VariantResult& r : results) text += suite + "," + r.name + "," + report_csv_values(r.report) + "\n";
  write_text(dir / ("ablate_" + suite + ".csv"), text);
  echo_config(dir, cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cyclic test-time adaptation on synthetic videos"};
  app.require_subcommand(1);

  Common synth_c, pre_c, adapt_c, eval_c, ablate_c;
  AdaptFlags flags;
  std::string eval_hmr, eval_md, eval_target, eval_out, suite;

  CLI::App* synth = app.add_subcommand("synth", "Write source and target videos");
  add_common(synth, synth_c);

  CLI::App* pretrain = app.add_subcommand("pretrain", "Pre-train both networks on the source domain");
  add_common(pretrain, pre_c);

  CLI::App* adapt_cmd = app.add_subcommand("adapt", "Adapt to the target video and write metrics.csv");
  add_common(adapt_cmd, adapt_c);
  adapt_cmd->add_option("--hmr", flags.hmr_path, "Pre-trained regressor checkpoint");
  adapt_cmd->add_option("--md", flags.md_path, "Pre-trained denoiser checkpoint");
  adapt_cmd->add_option("--target", flags.target_path, "Target video (synthesized from the config if absent)");
  adapt_cmd->add_flag("--online", flags.online, "Single causal pass instead of cycles");
  adapt_cmd->add_flag("--frozen-md", flags.frozen_md, "Never update the denoiser (non-cyclic)");
  adapt_cmd->add_flag("--no-3d", flags.no_3d, "Drop the parameter loss (2D only)");
  adapt_cmd->add_flag("--random-init", flags.random_init, "Start from untrained networks");
  adapt_cmd->add_flag("--unweighted-2d", flags.unweighted_2d, "Ignore keypoint confidences");
  adapt_cmd->add_flag("--freeze-hmr", flags.freeze_hmr, "Never update the regressor");
  adapt_cmd->add_option("--gaussian", flags.gaussian, "Replace the denoiser stage by a Gaussian filter of this std");

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a target video");
  add_common(eval_cmd, eval_c, false);
  eval_cmd->add_option("--hmr", eval_hmr, "Regressor checkpoint")->required();
  eval_cmd->add_option("--md", eval_md, "Denoiser checkpoint; adds a denoised row");
  eval_cmd->add_option("--target", eval_target, "Target video (synthesized from the config if absent)");
  eval_cmd->add_option("--out", eval_out, "Write the CSV here instead of stdout");

  CLI::App* ablate = app.add_subcommand("ablate", "Run one ablation suite and write a combined CSV");
  add_common(ablate, ablate_c);
  ablate->add_option("--suite", suite, "table1 | table2 | table4 | suppE | online")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    thread_count();
    if (*synth) return run_synth(synth_c);
    if (*pretrain) return run_pretrain(pre_c);
    if (*adapt_cmd) return run_adapt(adapt_c, flags);
    if (*eval_cmd) return run_eval(eval_c, eval_hmr, eval_md, eval_target, eval_out);
    if (*ablate) return run_ablate(ablate_c, suite);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
