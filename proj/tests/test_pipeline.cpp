#include "tseg/pipeline.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

using namespace tseg;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tseg_pipe_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ActivityDataset toy_activity(std::uint64_t seed, int videos = 4) {
  auto spec = make_synth_spec(videos, 3, 4, 12, 2, 0.5, 2.0, 0.02, seed);
  spec.activity = "toy";
  return generate(spec);
}

/// Writes data_root/toy and returns a fast config pointing at it.
AppConfig toy_setup(const fs::path& root) {
  save_activity(root / "data" / "toy", toy_activity(1));
  AppConfig cfg;
  cfg.data_dir = root / "data";
  cfg.out_dir = root / "out";
  auto& p = cfg.pipeline;
  p.step_s = 2;
  p.k_clusters = 3;
  p.stage1_visual_epochs = 2;
  p.stage1_temporal_epochs = 2;
  p.stage2_total_epochs = 3;
  p.stage2_visual_block = 2;
  p.stage2_temporal_block = 1;
  p.embed_dim = 2;
  p.seed = 5;
  return cfg;
}

void write_config(const fs::path& path, const AppConfig& cfg) { std::ofstream(path) << config_to_text(cfg); }

struct CliResult {
  int status = 0;
  std::string output;
};

CliResult run_cli(const std::string& args, const fs::path& scratch_dir) {
  const auto log = scratch_dir / "cli.log";
  const std::string cmd = std::string(TSEG_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  CliResult r;
  r.status = std::system(cmd.c_str());
  r.output = read_file(log);
  return r;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
  }
  return out;
}

}  // namespace

TEST(Config, ParsesKeysAndComments) {
  std::istringstream in("# comment\nstep_s = 3\nk_clusters=7  # trailing\nmatching = per-video\nactivities = a,b\n"
                        "background_percentile = 25\nnormalize = false\n");
  const auto c = parse_config(in);
  EXPECT_EQ(c.pipeline.step_s, 3);
  EXPECT_EQ(c.pipeline.k_clusters, 7);
  EXPECT_EQ(c.matching, MatchScope::per_video);
  EXPECT_EQ(c.activities, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(c.pipeline.background_percentile, 25.0);
  EXPECT_FALSE(c.pipeline.normalize);
}

TEST(Config, EnvironmentOverridesFile) {
  std::istringstream in("step_s = 3\nseed = 1\n");
  const auto c = parse_config(in, [](const char* k) -> const char* {
    if (std::string(k) == "TSEG_STEP_S") return "4";
    if (std::string(k) == "TSEG_SYNTH_ORDERING") return "weak";
    return nullptr;
  });
  EXPECT_EQ(c.pipeline.step_s, 4);
  EXPECT_EQ(c.pipeline.seed, 1u);
  EXPECT_EQ(c.synth.ordering, OrderingMode::weak);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  std::istringstream unknown("stepsize = 3\n");
  EXPECT_THROW(parse_config(unknown), Error);
  std::istringstream bad("step_s = three\n");
  EXPECT_THROW(parse_config(bad), Error);
  std::istringstream no_eq("step_s 3\n");
  EXPECT_THROW(parse_config(no_eq), Error);
  std::istringstream invalid("stride_gamma = 0\n");
  EXPECT_THROW(parse_config(invalid), Error);
}

TEST(Config, SnapshotRoundTrips) {
  AppConfig c;
  c.data_dir = "/data/x";
  c.activities = {"coffee", "tea"};
  c.background_id = 0;
  c.pipeline.background_percentile = 12.5;
  c.pipeline.learning_rate = 3e-4;
  c.pipeline.stage2_count_cycles = true;
  c.synth.noise = 0.7;
  const auto text = config_to_text(c);
  std::istringstream in(text);
  const auto back = parse_config(in);
  EXPECT_EQ(config_to_text(back), text);
  EXPECT_EQ(back.background_id, 0);
  EXPECT_EQ(back.pipeline.learning_rate, 3e-4);
}

TEST(Artifacts, RefusesPathsOutsideRoot) {
  const auto root = scratch("escape");
  ArtifactLog log(root / "out");
  EXPECT_THROW(log.path("../evil.txt"), Error);
  EXPECT_THROW(log.path("a/../../evil.txt"), Error);
  EXPECT_NO_THROW(log.path("a/ok.txt"));
  EXPECT_FALSE(fs::exists(root / "evil.txt"));
}

TEST(Pipeline, EmitsArtifactsListedInManifest) {
  const auto root = scratch("smoke");
  const auto cfg = toy_setup(root);
  write_config(root / "run.cfg", cfg);
  const auto r = run_cli("pipeline --config " + (root / "run.cfg").string(), root);
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("toy: MoF"), std::string::npos) << r.output;

  const auto out = cfg.out_dir;
  for (const char* f : {"manifest.json", "config.snapshot", "evaluation.csv", "toy/norm_stats.csv", "toy/gmm.bin",
                        "toy/visual_stage1.ckpt", "toy/visual_stage2.ckpt", "toy/temporal_stage1.ckpt",
                        "toy/temporal_stage2.ckpt", "toy/training_report.csv", "toy/training_timing.csv",
                        "toy/segmentation.svg", "toy/segmentation/video_000.seg", "toy/segmentation/video_000.segments",
                        "toy/embeddings/video_003.tseg"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto manifest = nlohmann::json::parse(read_file(out / "manifest.json"));
  std::set<std::string> listed;
  for (const auto& o : manifest["outputs"]) listed.insert(o.get<std::string>());
  for (const auto& [rel, _] : tree(out)) EXPECT_TRUE(listed.count(rel)) << rel << " missing from manifest";
  EXPECT_EQ(manifest["seed"].get<std::uint64_t>(), 5u);
  ASSERT_EQ(manifest["inputs"].size(), 9u);  // 4 features, 4 labels, label names
  EXPECT_EQ(manifest["inputs"][0]["sha256"].get<std::string>().size(), 64u);
  EXPECT_TRUE(manifest["timing_seconds"].contains("toy/train"));

  const auto svg = read_file(out / "toy/segmentation.svg");
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  const auto report = read_file(out / "toy/training_report.csv");
  EXPECT_EQ(report.substr(0, report.find('\n')),
            "epoch,stage,component,loss_vis,loss_temp,loss_trec,loss_joint,tqual_raw,tqual,loss_mlp");
}

TEST(Pipeline, WritesOnlyInsideOutputDirectory) {
  const auto root = scratch("confine");
  const auto cfg = toy_setup(root);
  write_config(root / "run.cfg", cfg);
  const auto before = tree(root);
  ASSERT_EQ(run_cli("pipeline --config " + (root / "run.cfg").string(), scratch("confine_log")).status, 0);
  auto after = tree(root);
  for (auto it = after.begin(); it != after.end();) {
    it = it->first.rfind("out/", 0) == 0 ? after.erase(it) : std::next(it);
  }
  EXPECT_EQ(after, before);
}

TEST(Pipeline, MissingFeatureDirectoryFailsWithPath) {
  const auto root = scratch("missing");
  auto cfg = toy_setup(root);
  cfg.activities = {"ghost"};
  write_config(root / "run.cfg", cfg);
  const auto r = run_cli("pipeline --config " + (root / "run.cfg").string(), root);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find((root / "data" / "ghost").string()), std::string::npos) << r.output;
}

TEST(Pipeline, CorruptFeatureFileNamesActivityAndFile) {
  const auto root = scratch("corrupt");
  const auto cfg = toy_setup(root);
  std::ofstream(root / "data" / "toy" / "video_001.tseg", std::ios::trunc) << "TSEG";
  write_config(root / "run.cfg", cfg);
  const auto r = run_cli("pipeline --config " + (root / "run.cfg").string(), root);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("activity 'toy'"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("video_001.tseg"), std::string::npos) << r.output;
}

TEST(Pipeline, IdenticalRunsGiveIdenticalOutputs) {
  const auto root = scratch("determinism");
  auto cfg = toy_setup(root);
  cfg.out_dir = root / "a";
  run_pipeline(cfg);
  cfg.out_dir = root / "b";
  run_pipeline(cfg);
  auto a = tree(root / "a"), b = tree(root / "b");
  for (auto* t : {&a, &b}) {
    for (const char* skip : {"manifest.json", "config.snapshot", "toy/training_timing.csv"}) t->erase(skip);
  }
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [rel, bytes] : a) EXPECT_TRUE(b.count(rel) && b.at(rel) == bytes) << rel;
}

TEST(Pipeline, TrainThenSegmentMatchesCheckpoints) {
  const auto root = scratch("train_segment");
  const auto cfg = toy_setup(root);
  write_config(root / "run.cfg", cfg);
  ASSERT_EQ(run_cli("train --config " + (root / "run.cfg").string(), root).status, 0);
  EXPECT_TRUE(fs::exists(cfg.out_dir / "toy" / "visual_stage2.ckpt"));
  EXPECT_FALSE(fs::exists(cfg.out_dir / "toy" / "segmentation"));
  const auto r = run_cli("segment --config " + (root / "run.cfg").string() + " --matching per-video", root);
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("(per-video)"), std::string::npos) << r.output;
  EXPECT_TRUE(fs::exists(cfg.out_dir / "toy" / "segmentation" / "video_002.seg"));
}

TEST(Pipeline, SegmentWithoutCheckpointFails) {
  const auto root = scratch("no_ckpt");
  const auto cfg = toy_setup(root);
  write_config(root / "run.cfg", cfg);
  const auto r = run_cli("segment --config " + (root / "run.cfg").string(), root);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("train"), std::string::npos) << r.output;
}

TEST(Cli, SynthWritesLoadableActivity) {
  const auto root = scratch("synth");
  const auto r = run_cli("synth --out " + (root / "gen").string() + " --seed 3", root);
  ASSERT_EQ(r.status, 0) << r.output;
  const auto ds = load_activity(root / "gen" / "synthetic", "synthetic");
  EXPECT_EQ(ds.videos.size(), 20u);
  EXPECT_EQ(ds.dim(), 16u);
  ASSERT_TRUE(ds.labels);
}

TEST(Cli, UnknownConfigKeyFails) {
  const auto root = scratch("badkey");
  std::ofstream(root / "bad.cfg") << "no_such_key = 1\n";
  const auto r = run_cli("pipeline --config " + (root / "bad.cfg").string(), root);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("no_such_key"), std::string::npos) << r.output;
}

TEST(Sweep, InvalidStepRejectedBeforeTraining) {
  const auto root = scratch("sweep_bad");
  const auto cfg = toy_setup(root);
  write_config(root / "run.cfg", cfg);
  const auto r = run_cli("sweep-step --config " + (root / "run.cfg").string() + " --steps 0,500", root);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("step 500"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(cfg.out_dir / "step_0"));
}

TEST(Sweep, SingleStepGivesSingleRow) {
  const auto root = scratch("sweep_one");
  const auto cfg = toy_setup(root);
  const auto rows = run_step_sweep(cfg, {1});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].step, 1);
  const auto table = read_file(cfg.out_dir / "sweep_step.csv");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 2);
  EXPECT_TRUE(fs::exists(cfg.out_dir / "step_1" / "toy" / "segmentation" / "video_000.seg"));
}

TEST(Ablation, FourArmsAndRawArmIsCheapest) {
  const auto root = scratch("ablate");
  const auto cfg = toy_setup(root);
  const auto rows = run_embedding_ablation(cfg);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].source, EmbeddingSource::raw_features);
  EXPECT_EQ(rows[0].train_seconds, 0.0);
  for (std::size_t i = 1; i < 4; ++i) {
    EXPECT_GT(rows[i].train_seconds, 0.0);
    EXPECT_LT(rows[0].total_seconds, rows[i].total_seconds);
  }
  const auto table = read_file(cfg.out_dir / "ablation.csv");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 5);
  for (const char* src : {"raw_features", "stage1_unet", "stage1_mlp", "stage2_unet"}) {
    EXPECT_TRUE(fs::exists(cfg.out_dir / "ablation" / "toy" / src / "video_000.seg")) << src;
  }
}

TEST(Evaluate, PredictionEqualToTruthScoresOne) {
  const auto root = scratch("eval_same");
  const auto ds = toy_activity(2);
  fs::create_directories(root / "pred");
  save_activity(root / "gt", ds);
  for (std::size_t v = 0; v < ds.videos.size(); ++v) {
    Segmentation s;
    s.labels = (*ds.labels)[v];
    save_segmentation(root / "pred" / (ds.videos[v].video_id + ".seg"), s);
  }
  for (auto scope : {MatchScope::global, MatchScope::per_video}) {
    const auto r = evaluate_directories(root / "pred", root / "gt", scope);
    EXPECT_EQ(r.mof, 1.0);
    EXPECT_EQ(r.f1.f1, 1.0);
  }
  const auto cli = run_cli("evaluate --pred " + (root / "pred").string() + " --gt " + (root / "gt").string() +
                               " --matching per-video",
                           root);
  ASSERT_EQ(cli.status, 0) << cli.output;
  EXPECT_EQ(cli.output.rfind("activity,matching,row,cluster,label,precision,recall,mof,f1,mapping", 0), 0u) << cli.output;
}

TEST(Evaluate, SwappedClustersFavourPerVideoMatching) {
  const auto root = scratch("eval_swap");
  fs::create_directories(root / "pred");
  fs::create_directories(root / "gt");
  save_labels(root / "gt" / "a.labels", {0, 0, 1, 1});
  save_labels(root / "gt" / "b.labels", {0, 0, 1, 1});
  Segmentation a, b;
  a.labels = {0, 0, 1, 1};
  b.labels = {1, 1, 0, 0};
  save_segmentation(root / "pred" / "a.seg", a);
  save_segmentation(root / "pred" / "b.seg", b);
  const auto g = evaluate_directories(root / "pred", root / "gt", MatchScope::global);
  const auto v = evaluate_directories(root / "pred", root / "gt", MatchScope::per_video);
  EXPECT_GT(v.mof, g.mof);
}

TEST(Evaluate, UnmatchedAndEmptyDirectories) {
  const auto root = scratch("eval_bad");
  fs::create_directories(root / "pred");
  fs::create_directories(root / "gt");
  EXPECT_THROW(evaluate_directories(root / "pred", root / "gt", MatchScope::global), Error);
  Segmentation s;
  s.labels = {0, 1};
  save_segmentation(root / "pred" / "x.seg", s);
  save_labels(root / "gt" / "y.labels", {0, 1});
  try {
    evaluate_directories(root / "pred", root / "gt", MatchScope::global);
    FAIL() << "expected unmatched ids";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("x (no ground truth)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("y (no prediction)"), std::string::npos) << msg;
  }
  const auto cli = run_cli("evaluate --pred " + (root / "pred").string() + " --gt " + (root / "gt").string(), root);
  EXPECT_NE(cli.status, 0);
}
