// tseg: command-line front end for the segmentation pipeline.
#include "tseg/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct CommonFlags {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string matching;
  std::optional<double> background_percentile;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "flat key = value config file");
  cmd->add_option("--data", f.data, "dataset root (overrides data_dir)");
  cmd->add_option("--out", f.out, "output directory (overrides out_dir)");
  cmd->add_option("--seed", f.seed, "master seed (overrides seed)");
  cmd->add_option("--matching", f.matching, "global or per-video")->check(CLI::IsMember({"global", "per-video"}));
  cmd->add_option("--background-percentile", f.background_percentile, "percent of frames labelled background")
      ->check(CLI::Range(0.0, 100.0));
}

tseg::AppConfig resolve(const CommonFlags& f) {
  tseg::AppConfig cfg;
  if (!f.config.empty()) {
    cfg = tseg::load_config(f.config);
  } else {
    std::istringstream empty;
    cfg = tseg::parse_config(empty, [](const char* k) { return std::getenv(k); });
  }
  if (!f.data.empty()) cfg.data_dir = f.data;
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (f.seed) cfg.pipeline.seed = *f.seed;
  if (!f.matching.empty()) cfg.matching = tseg::parse_scope(f.matching);
  if (f.background_percentile) cfg.pipeline.background_percentile = *f.background_percentile;
  cfg.pipeline.validate();
  return cfg;
}

void log_stderr(const std::string& msg) { std::cerr << msg << '\n'; }

void print_evaluation(const tseg::PipelineSummary& s) {
  for (const auto& e : s.evaluations) {
    std::cout << e.activity << ": MoF " << tseg::detail::format_double(e.result.mof) << "  F1 "
              << tseg::detail::format_double(e.result.f1.f1) << "  (" << tseg::scope_name(e.result.scope) << ")\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised temporal action segmentation"};
  app.require_subcommand(1);

  CommonFlags synth_f, train_f, segment_f, pipeline_f, sweep_f, ablate_f;

  auto* synth = app.add_subcommand("synth", "generate a synthetic labelled activity");
  add_common(synth, synth_f);

  auto* train = app.add_subcommand("train", "normalize and train both stages; write checkpoints");
  add_common(train, train_f);

  auto* segment = app.add_subcommand("segment", "embed, cluster, and decode with checkpoints from 'train'");
  add_common(segment, segment_f);

  auto* pipeline = app.add_subcommand("pipeline", "train, segment, and evaluate every activity");
  add_common(pipeline, pipeline_f);

  auto* sweep = app.add_subcommand("sweep-step", "run the pipeline for several prediction steps");
  add_common(sweep, sweep_f);
  std::vector<int> steps;
  sweep->add_option("--steps", steps, "step sizes, e.g. 0,1,3,5")->delimiter(',')->required();

  auto* ablate = app.add_subcommand("ablate-embedding", "compare raw, stage-1 and stage-2 embeddings");
  add_common(ablate, ablate_f);

  auto* evaluate = app.add_subcommand("evaluate", "score .seg files against .labels files");
  std::string pred_dir, gt_dir, eval_matching = "global", eval_out;
  std::optional<int> eval_background;
  evaluate->add_option("--pred", pred_dir, "directory of <video>.seg files")->required();
  evaluate->add_option("--gt", gt_dir, "directory of <video>.labels files")->required();
  evaluate->add_option("--matching", eval_matching, "global or per-video")->check(CLI::IsMember({"global", "per-video"}));
  evaluate->add_option("--background-id", eval_background, "ground-truth label treated as background");
  evaluate->add_option("--out", eval_out, "write the report CSV here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      auto cfg = resolve(synth_f);
      if (synth_f.seed) cfg.synth.seed = *synth_f.seed;
      tseg::ArtifactLog log(cfg.out_dir);
      const auto ds = tseg::generate(tseg::synth_spec_from(cfg.synth));
      const auto dir = cfg.out_dir / ds.activity;
      for (const auto& v : ds.videos) {
        log.path(tseg::fs::path(ds.activity) / (v.video_id + ".tseg"));
        log.path(tseg::fs::path(ds.activity) / (v.video_id + ".labels"));
      }
      log.path(tseg::fs::path(ds.activity) / "label_names.txt");
      tseg::save_activity(dir, ds);
      std::cout << "wrote " << ds.videos.size() << " videos (" << ds.total_frames() << " frames) to " << dir.string()
                << '\n';
    } else if (*train) {
      tseg::run_train(resolve(train_f), log_stderr);
    } else if (*segment) {
      print_evaluation(tseg::run_segment(resolve(segment_f), log_stderr));
    } else if (*pipeline) {
      print_evaluation(tseg::run_pipeline(resolve(pipeline_f), log_stderr));
    } else if (*sweep) {
      for (const auto& r : tseg::run_step_sweep(resolve(sweep_f), steps, log_stderr)) {
        std::cout << "s=" << r.step << "  " << r.activity << "  MoF " << tseg::detail::format_double(r.mof) << "  F1 "
                  << tseg::detail::format_double(r.f1) << '\n';
      }
    } else if (*ablate) {
      for (const auto& r : tseg::run_embedding_ablation(resolve(ablate_f), log_stderr)) {
        std::cout << r.activity << "  " << tseg::source_name(r.source) << "  MoF " << tseg::detail::format_double(r.mof)
                  << "  F1 " << tseg::detail::format_double(r.f1) << "  train " << r.train_seconds << "s\n";
      }
    } else if (*evaluate) {
      const auto res = tseg::evaluate_directories(pred_dir, gt_dir, tseg::parse_scope(eval_matching), eval_background);
      std::vector<tseg::ActivityEvaluation> evals{{tseg::fs::path(gt_dir).filename().string(), res, 0}};
      evals[0].frames = 1;
      if (!eval_out.empty()) {
        tseg::save_evaluation_report(eval_out, evals);
      } else {
        tseg::write_evaluation_report(std::cout, evals);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
