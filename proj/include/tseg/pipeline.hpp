// End-to-end orchestration: config files, per-activity training, clustering,
// decoding, evaluation, sweeps, and artifact/manifest emission.
#pragma once

#include "tseg/clustering.hpp"
#include "tseg/core.hpp"
#include "tseg/datagen.hpp"
#include "tseg/decoding.hpp"
#include "tseg/evaluation.hpp"
#include "tseg/models.hpp"
#include "tseg/training.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace tseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config: flat "key = value" lines, '#' comments. Every key can be overridden
// by the environment variable TSEG_<KEY> (upper case).
// ---------------------------------------------------------------------------

struct SynthSettings {
  int videos = 20;
  int k = 5;
  int dim = 16;
  int duration = 40;
  int jitter = 8;
  double noise = 1.0;
  double separation = 1.0;
  double drift = 0.0;
  OrderingMode ordering = OrderingMode::strict;
  double swap_probability = 0.5;
  std::string activity = "synthetic";
  std::uint64_t seed = 0;
};

struct AppConfig {
  PipelineConfig pipeline;
  fs::path data_dir;
  std::vector<std::string> activities;
  fs::path out_dir = "out";
  MatchScope matching = MatchScope::global;
  std::optional<int> background_id;
  bool write_embeddings = true;
  bool write_svg = true;
  bool export_scores = false;
  SynthSettings synth;
};

inline constexpr std::string_view kEnvPrefix = "TSEG_";

namespace detail {

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const auto l = lower(v);
  if (l == "1" || l == "true" || l == "yes" || l == "on") return true;
  if (l == "0" || l == "false" || l == "no" || l == "off") return false;
  throw Error("config key '" + key + "': expected a boolean, got '" + v + "'");
}

inline long long parse_int_value(const std::string& key, const std::string& v) {
  long long out;
  if (!parse_int(v, out)) throw Error("config key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

inline double parse_real_value(const std::string& key, const std::string& v) {
  double out;
  if (!parse_double(v, out)) throw Error("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = std::string(trim(item));
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

}  // namespace detail

inline MatchScope parse_scope(const std::string& v) {
  if (v == "global") return MatchScope::global;
  if (v == "per-video" || v == "per_video") return MatchScope::per_video;
  throw Error("matching must be 'global' or 'per-video', got '" + v + "'");
}

/// Applies one key. Unknown keys are errors.
inline void set_config_key(AppConfig& c, const std::string& raw_key, const std::string& value) {
  using namespace detail;
  const auto key = lower(raw_key);
  auto& p = c.pipeline;
  auto as_int = [&] { return static_cast<int>(parse_int_value(key, value)); };
  if (key == "data_dir") c.data_dir = value;
  else if (key == "out_dir") c.out_dir = value;
  else if (key == "activities") c.activities = split_list(value);
  else if (key == "matching") c.matching = parse_scope(value);
  else if (key == "background_id") c.background_id = as_int();
  else if (key == "background_percentile") {
    if (lower(value) == "none" || value.empty()) p.background_percentile.reset();
    else p.background_percentile = parse_real_value(key, value);
  }
  else if (key == "step_s") p.step_s = as_int();
  else if (key == "k_clusters") p.k_clusters = as_int();
  else if (key == "stage1_visual_epochs") p.stage1_visual_epochs = as_int();
  else if (key == "stage1_temporal_epochs") p.stage1_temporal_epochs = as_int();
  else if (key == "stage2_total_epochs") p.stage2_total_epochs = as_int();
  else if (key == "stage2_visual_block") p.stage2_visual_block = as_int();
  else if (key == "stage2_temporal_block") p.stage2_temporal_block = as_int();
  else if (key == "stage2_count_cycles") p.stage2_count_cycles = parse_bool(key, value);
  else if (key == "embed_dim") p.embed_dim = as_int();
  else if (key == "learning_rate") p.learning_rate = parse_real_value(key, value);
  else if (key == "seed") p.seed = static_cast<std::uint64_t>(parse_int_value(key, value));
  else if (key == "stride_gamma") p.stride_gamma = as_int();
  else if (key == "trec_weight") p.trec_weight = parse_real_value(key, value);
  else if (key == "normalize") p.normalize = parse_bool(key, value);
  else if (key == "length_model") p.length_model = parse_bool(key, value);
  else if (key == "length_reestimate_iterations") p.length_reestimate_iterations = as_int();
  else if (key == "full_transcript") p.full_transcript = parse_bool(key, value);
  else if (key == "write_embeddings") c.write_embeddings = parse_bool(key, value);
  else if (key == "write_svg") c.write_svg = parse_bool(key, value);
  else if (key == "export_scores") c.export_scores = parse_bool(key, value);
  else if (key == "synth_videos") c.synth.videos = as_int();
  else if (key == "synth_k") c.synth.k = as_int();
  else if (key == "synth_dim") c.synth.dim = as_int();
  else if (key == "synth_duration") c.synth.duration = as_int();
  else if (key == "synth_jitter") c.synth.jitter = as_int();
  else if (key == "synth_noise") c.synth.noise = parse_real_value(key, value);
  else if (key == "synth_separation") c.synth.separation = parse_real_value(key, value);
  else if (key == "synth_drift") c.synth.drift = parse_real_value(key, value);
  else if (key == "synth_ordering") {
    if (value == "strict") c.synth.ordering = OrderingMode::strict;
    else if (value == "weak") c.synth.ordering = OrderingMode::weak;
    else throw Error("synth_ordering must be 'strict' or 'weak'");
  }
  else if (key == "synth_swap_probability") c.synth.swap_probability = parse_real_value(key, value);
  else if (key == "synth_activity") c.synth.activity = value;
  else if (key == "synth_seed") c.synth.seed = static_cast<std::uint64_t>(parse_int_value(key, value));
  else throw Error("unknown config key '" + raw_key + "'");
}

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "data_dir", "out_dir", "activities", "matching", "background_id", "background_percentile", "step_s",
      "k_clusters", "stage1_visual_epochs", "stage1_temporal_epochs", "stage2_total_epochs", "stage2_visual_block",
      "stage2_temporal_block", "stage2_count_cycles", "embed_dim", "learning_rate", "seed", "stride_gamma",
      "trec_weight", "normalize", "length_model", "length_reestimate_iterations", "full_transcript",
      "write_embeddings", "write_svg", "export_scores", "synth_videos", "synth_k", "synth_dim", "synth_duration",
      "synth_jitter", "synth_noise", "synth_separation", "synth_drift", "synth_ordering", "synth_swap_probability",
      "synth_activity", "synth_seed"};
  return keys;
}

/// Parses config text; `env` (usually std::getenv) supplies TSEG_* overrides.
inline AppConfig parse_config(std::istream& in, const std::function<const char*(const char*)>& env = nullptr) {
  AppConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    auto t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_key(c, std::string(detail::trim(t.substr(0, eq))), std::string(detail::trim(t.substr(eq + 1))));
  }
  if (env) {
    for (const auto& key : config_keys()) {
      const auto var = std::string(kEnvPrefix) + detail::upper(key);
      if (const char* v = env(var.c_str())) set_config_key(c, key, v);
    }
  }
  c.pipeline.validate();
  return c;
}

inline AppConfig load_config(const fs::path& path, bool use_env = true) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path.string());
  return parse_config(in, use_env ? std::function<const char*(const char*)>([](const char* k) { return std::getenv(k); })
                                  : nullptr);
}

/// Flat key = value text that parse_config reads back to the same config.
inline std::string config_to_text(const AppConfig& c) {
  const auto& p = c.pipeline;
  std::ostringstream o;
  auto kv = [&](const char* k, const auto& v) { o << k << " = " << v << '\n'; };
  auto real = [](double v) { return detail::format_double(v); };
  kv("data_dir", c.data_dir.string());
  kv("out_dir", c.out_dir.string());
  std::string acts;
  for (const auto& a : c.activities) acts += (acts.empty() ? "" : ",") + a;
  kv("activities", acts);
  kv("matching", scope_name(c.matching));
  if (c.background_id) kv("background_id", *c.background_id);
  kv("background_percentile", p.background_percentile ? real(*p.background_percentile) : std::string("none"));
  kv("step_s", p.step_s);
  kv("k_clusters", p.k_clusters);
  kv("stage1_visual_epochs", p.stage1_visual_epochs);
  kv("stage1_temporal_epochs", p.stage1_temporal_epochs);
  kv("stage2_total_epochs", p.stage2_total_epochs);
  kv("stage2_visual_block", p.stage2_visual_block);
  kv("stage2_temporal_block", p.stage2_temporal_block);
  kv("stage2_count_cycles", p.stage2_count_cycles ? "true" : "false");
  kv("embed_dim", p.embed_dim);
  kv("learning_rate", real(p.learning_rate));
  kv("seed", p.seed);
  kv("stride_gamma", p.stride_gamma);
  kv("trec_weight", real(p.trec_weight));
  kv("normalize", p.normalize ? "true" : "false");
  kv("length_model", p.length_model ? "true" : "false");
  kv("length_reestimate_iterations", p.length_reestimate_iterations);
  kv("full_transcript", p.full_transcript ? "true" : "false");
  kv("write_embeddings", c.write_embeddings ? "true" : "false");
  kv("write_svg", c.write_svg ? "true" : "false");
  kv("export_scores", c.export_scores ? "true" : "false");
  kv("synth_videos", c.synth.videos);
  kv("synth_k", c.synth.k);
  kv("synth_dim", c.synth.dim);
  kv("synth_duration", c.synth.duration);
  kv("synth_jitter", c.synth.jitter);
  kv("synth_noise", real(c.synth.noise));
  kv("synth_separation", real(c.synth.separation));
  kv("synth_drift", real(c.synth.drift));
  kv("synth_ordering", c.synth.ordering == OrderingMode::strict ? "strict" : "weak");
  kv("synth_swap_probability", real(c.synth.swap_probability));
  kv("synth_activity", c.synth.activity);
  kv("synth_seed", c.synth.seed);
  return o.str();
}

inline SynthSpec synth_spec_from(const SynthSettings& s) {
  auto spec = make_synth_spec(s.videos, s.k, s.dim, s.duration, s.jitter, s.noise, s.separation, s.drift, s.seed);
  spec.activity = s.activity;
  spec.ordering = s.ordering;
  spec.swap_probability = s.ordering == OrderingMode::weak ? s.swap_probability : 0.0;
  return spec;
}

// ---------------------------------------------------------------------------
// Artifact bookkeeping
// ---------------------------------------------------------------------------

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot hash " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 15];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

/// Records every file written under the output directory.
class ArtifactLog {
 public:
  explicit ArtifactLog(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }

  /// Resolves a relative artifact path, refusing anything that escapes root.
  fs::path path(const fs::path& rel) {
    const auto full = (root_ / rel).lexically_normal();
    const auto back = full.lexically_relative(root_.lexically_normal());
    if (back.empty() || *back.begin() == "..") throw Error("refusing to write outside the output directory: " + rel.string());
    fs::create_directories(full.parent_path());
    written_.push_back(back.generic_string());
    return full;
  }

  void add_input(const fs::path& p) { inputs_.push_back(p); }
  void add_timing(const std::string& key, double seconds) { timing_[key] = seconds; }

  const std::vector<std::string>& written() const { return written_; }

  void write_manifest(const AppConfig& cfg) {
    nlohmann::json j;
    nlohmann::json config;
    std::istringstream text(config_to_text(cfg));
    std::string line;
    while (std::getline(text, line)) {
      const auto eq = line.find(" = ");
      if (eq != std::string::npos) config[line.substr(0, eq)] = line.substr(eq + 3);
    }
    j["config"] = config;
    j["seed"] = cfg.pipeline.seed;
    j["inputs"] = nlohmann::json::array();
    for (const auto& in : inputs_) j["inputs"].push_back({{"path", in.generic_string()}, {"sha256", sha256_file(in)}});
    auto outputs = written_;
    std::sort(outputs.begin(), outputs.end());
    outputs.erase(std::unique(outputs.begin(), outputs.end()), outputs.end());
    outputs.push_back("config.snapshot");
    outputs.push_back("manifest.json");
    j["outputs"] = outputs;
    j["timing_seconds"] = timing_;
    std::ofstream(root_ / "config.snapshot", std::ios::trunc) << config_to_text(cfg);
    std::ofstream(root_ / "manifest.json", std::ios::trunc) << j.dump(2) << '\n';
  }

 private:
  fs::path root_;
  std::vector<std::string> written_;
  std::vector<fs::path> inputs_;
  std::map<std::string, double> timing_;
};

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Activity names under data_dir: the configured list, or every subdirectory
/// (or data_dir itself when it directly holds feature files).
inline std::vector<std::pair<std::string, fs::path>> resolve_activities(const AppConfig& cfg) {
  if (cfg.data_dir.empty()) throw Error("config: data_dir is not set");
  if (!fs::exists(cfg.data_dir)) throw Error("data_dir not found: " + cfg.data_dir.string());
  std::vector<std::pair<std::string, fs::path>> out;
  if (!cfg.activities.empty()) {
    for (const auto& a : cfg.activities) {
      const auto p = cfg.data_dir / a;
      if (!fs::is_directory(p)) throw Error("activity directory not found: " + p.string());
      out.emplace_back(a, p);
    }
    return out;
  }
  for (const auto& e : fs::directory_iterator(cfg.data_dir)) {
    if (e.is_directory()) out.emplace_back(e.path().filename().string(), e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) out.emplace_back(cfg.data_dir.filename().string(), cfg.data_dir);
  return out;
}

inline std::vector<fs::path> dataset_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

// ---------------------------------------------------------------------------
// Per-activity stages
// ---------------------------------------------------------------------------

struct SegmentationResult {
  ClusterModel gmm;
  ScoreMatrix scores;
  ClusterOrdering ordering;
  std::vector<Segmentation> segmentations;
  std::optional<FrameMasks> background;
};

inline std::uint64_t gmm_seed(std::uint64_t seed) { return seed * 0x9E3779B97F4A7C15ull + 0x6a6au; }

/// Cluster, order, and decode one activity's embeddings.
inline SegmentationResult segment_embeddings(const EmbeddingSet& emb, const PipelineConfig& cfg) {
  SegmentationResult r;
  r.gmm = fit_gmm(emb, cfg.k_clusters, gmm_seed(cfg.seed));
  r.scores = score_frames(r.gmm, emb);
  r.ordering = order_clusters(r.gmm, r.scores, emb);
  std::vector<LengthModel> lms;
  for (const auto& v : emb.videos) {
    lms.push_back(fit_length_model(cfg.k_clusters, v.num_frames(), cfg.stride_gamma, cfg.length_model));
  }
  DecodeOptions opt{cfg.full_transcript};
  for (int pass = 0; pass <= cfg.length_reestimate_iterations; ++pass) {
    r.segmentations.clear();
    for (std::size_t v = 0; v < emb.videos.size(); ++v) {
      auto seg = viterbi_decode(r.scores.videos[v], r.ordering, lms[v], cfg.stride_gamma, opt);
      seg.video_id = emb.videos[v].video_id;
      r.segmentations.push_back(std::move(seg));
    }
    if (pass < cfg.length_reestimate_iterations && cfg.length_model) {
      lms = reestimate_length_models(r.segmentations, cfg.k_clusters, cfg.stride_gamma);
    }
  }
  if (cfg.background_percentile) r.background = assign_background(r.scores, *cfg.background_percentile);
  return r;
}

inline LabelSeqs predicted_labels(const std::vector<Segmentation>& segs) {
  LabelSeqs out;
  for (const auto& s : segs) out.push_back(s.labels);
  return out;
}

inline std::set<int> background_set(const std::optional<int>& id) {
  return id ? std::set<int>{*id} : std::set<int>{};
}

inline EvaluationResult evaluate_segmentation(const SegmentationResult& seg, const ActivityDataset& ds,
                                              const PipelineConfig& cfg, MatchScope scope,
                                              const std::optional<int>& background_id) {
  if (!ds.labels) throw Error("activity '" + ds.activity + "' has no ground-truth labels");
  std::vector<std::string> ids;
  for (const auto& v : ds.videos) ids.push_back(v.video_id);
  return evaluate_activity(predicted_labels(seg.segmentations), *ds.labels, cfg.k_clusters, scope,
                           background_set(background_id), seg.background ? &*seg.background : nullptr, ids);
}

struct ActivityRun {
  ActivityDataset data;  // normalized when cfg.normalize
  std::optional<NormStats> norm;
  TrainedModels stage1;
  std::optional<TrainedModels> stage2;
  EmbeddingSet embeddings;
  SegmentationResult segmentation;
  std::optional<EvaluationResult> evaluation;
  double train_seconds = 0.0;
};

using Logger = std::function<void(const std::string&)>;

inline void log_line(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

/// normalize -> stage 1 -> stage 2 (optional).
inline ActivityRun train_activity(ActivityDataset raw, const PipelineConfig& cfg, bool with_stage2,
                                  const Logger& log = nullptr) {
  cfg.validate_for(raw);
  ActivityRun run;
  if (cfg.normalize) {
    auto [ds, stats] = normalize_dataset(std::move(raw));
    run.data = std::move(ds);
    run.norm = std::move(stats);
  } else {
    run.data = std::move(raw);
  }
  const auto t0 = detail::Clock::now();
  log_line(log, "[" + run.data.activity + "] stage 1: visual " + std::to_string(cfg.stage1_visual_epochs) +
                    " epochs, temporal " + std::to_string(cfg.stage1_temporal_epochs) + " epochs");
  run.stage1 = train_stage1(run.data, cfg, cfg.seed);
  if (with_stage2) {
    log_line(log, "[" + run.data.activity + "] stage 2: " + std::to_string(cfg.stage2_total_epochs) +
                      (cfg.stage2_count_cycles ? " cycles" : " epochs"));
    run.stage2 = train_stage2(run.stage1, run.data, cfg, cfg.seed);
  }
  run.train_seconds = detail::seconds_since(t0);
  return run;
}

inline const TrainedModels& final_models(const ActivityRun& run) { return run.stage2 ? *run.stage2 : run.stage1; }

/// Full per-activity pipeline in memory.
inline ActivityRun run_activity(ActivityDataset raw, const PipelineConfig& cfg, MatchScope scope,
                                const std::optional<int>& background_id, bool with_stage2 = true,
                                const Logger& log = nullptr) {
  auto run = train_activity(std::move(raw), cfg, with_stage2, log);
  run.embeddings = extract_embeddings(final_models(run).visual, run.data);
  run.segmentation = segment_embeddings(run.embeddings, cfg);
  if (run.data.labels) run.evaluation = evaluate_segmentation(run.segmentation, run.data, cfg, scope, background_id);
  return run;
}

// ---------------------------------------------------------------------------
// Reports and figures
// ---------------------------------------------------------------------------

struct ActivityEvaluation {
  std::string activity;
  EvaluationResult result;
  std::size_t frames = 0;
};

inline std::string mapping_text(const Mapping& m) {
  std::string s;
  for (std::size_t c = 0; c < m.cluster_to_label.size(); ++c) {
    if (m.cluster_to_label[c] < 0) continue;
    if (!s.empty()) s += ';';
    s += std::to_string(c) + ":" + std::to_string(m.cluster_to_label[c]);
  }
  return s;
}

/// CSV per activity (summary row plus one row per cluster) and an aggregate row.
inline void write_evaluation_report(std::ostream& out, const std::vector<ActivityEvaluation>& evals) {
  out << "activity,matching,row,cluster,label,precision,recall,mof,f1,mapping\n";
  double weighted_mof = 0.0, f1_sum = 0.0;
  std::size_t frames = 0;
  std::string scope = "global";
  for (const auto& e : evals) {
    const auto& r = e.result;
    scope = scope_name(r.scope);
    out << e.activity << ',' << scope << ",summary,,," << detail::format_double(r.f1.precision) << ','
        << detail::format_double(r.f1.recall) << ',' << detail::format_double(r.mof) << ','
        << detail::format_double(r.f1.f1) << ',' << (r.mappings.size() == 1 ? mapping_text(r.mappings[0]) : "per-video")
        << '\n';
    for (const auto& c : r.clusters) {
      out << e.activity << ',' << scope << ",cluster," << c.cluster << ',' << (c.label >= 0 ? std::to_string(c.label) : "")
          << ',' << detail::format_double(c.precision) << ',' << detail::format_double(c.recall) << ",,,\n";
    }
    weighted_mof += r.mof * static_cast<double>(e.frames);
    f1_sum += r.f1.f1;
    frames += e.frames;
  }
  if (!evals.empty()) {
    out << "ALL," << scope << ",aggregate,,,,," << detail::format_double(frames ? weighted_mof / static_cast<double>(frames) : 0.0)
        << ',' << detail::format_double(f1_sum / static_cast<double>(evals.size())) << ",\n";
  }
}

inline void save_evaluation_report(const fs::path& path, const std::vector<ActivityEvaluation>& evals) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  write_evaluation_report(out, evals);
}

inline std::string palette(int label) {
  static const char* colors[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1",
                                 "#ff9da7", "#9c755f", "#bab0ac", "#1b9e77", "#d95f02", "#7570b3", "#e7298a"};
  if (label < 0) return "#000000";
  return colors[static_cast<std::size_t>(label) % (sizeof(colors) / sizeof(colors[0]))];
}

/// One band per video: predicted segments (coloured by mapped label when a
/// mapping is given) above the ground truth. Background is black.
inline void save_segmentation_svg(const fs::path& path, const std::vector<Segmentation>& segs,
                                  const LabelSeqs* gt = nullptr, const std::vector<Mapping>* mappings = nullptr,
                                  const FrameMasks* masks = nullptr, const std::set<int>& background_ids = {}) {
  constexpr double kWidth = 800.0, kBand = 12.0, kGap = 10.0, kLabel = 90.0;
  const double rows_per_video = gt ? 2.0 : 1.0;
  const double height = static_cast<double>(segs.size()) * (rows_per_video * kBand + kGap) + kGap;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth + kLabel << "\" height=\"" << height << "\">\n";
  auto band = [&](const std::vector<int>& labels, double y, auto color_of) {
    const double scale = kWidth / static_cast<double>(std::max<std::size_t>(labels.size(), 1));
    std::size_t i = 0;
    while (i < labels.size()) {
      std::size_t j = i;
      const auto color = color_of(i);
      while (j < labels.size() && color_of(j) == color) ++j;
      out << "  <rect x=\"" << kLabel + static_cast<double>(i) * scale << "\" y=\"" << y << "\" width=\""
          << static_cast<double>(j - i) * scale << "\" height=\"" << kBand << "\" fill=\"" << color << "\"/>\n";
      i = j;
    }
  };
  double y = kGap;
  for (std::size_t v = 0; v < segs.size(); ++v) {
    const auto& s = segs[v];
    const Mapping* m = mappings && !mappings->empty() ? &(*mappings)[mappings->size() == 1 ? 0 : v] : nullptr;
    out << "  <text x=\"2\" y=\"" << y + kBand - 2 << "\" font-size=\"10\">" << s.video_id << "</text>\n";
    band(s.labels, y, [&](std::size_t i) {
      if (masks && !(*masks)[v].empty() && (*masks)[v][i]) return std::string("#000000");
      return palette(m ? (*m)(s.labels[i]) : s.labels[i]);
    });
    y += kBand;
    if (gt) {
      band((*gt)[v], y, [&](std::size_t i) {
        const int l = (*gt)[v][i];
        return background_ids.count(l) ? std::string("#000000") : palette(l);
      });
      y += kBand;
    }
    y += kGap;
  }
  out << "</svg>\n";
}

inline void write_segmentation_files(ArtifactLog& log, const fs::path& rel_dir, const SegmentationResult& seg) {
  for (std::size_t v = 0; v < seg.segmentations.size(); ++v) {
    const auto& s = seg.segmentations[v];
    save_segmentation(log.path(rel_dir / (s.video_id + ".seg")), s);
    save_segments(log.path(rel_dir / (s.video_id + ".segments")), s);
    if (seg.background) {
      std::ofstream bg(log.path(rel_dir / (s.video_id + ".bg")), std::ios::trunc);
      for (bool b : (*seg.background)[v]) bg << (b ? 1 : 0) << '\n';
    }
  }
}

inline void write_training_outputs(ArtifactLog& log, const fs::path& rel, const ActivityRun& run) {
  if (run.norm) save_norm_stats(log.path(rel / "norm_stats.csv"), *run.norm);
  save_visual_model(log.path(rel / "visual_stage1.ckpt"), run.stage1.visual);
  save_temporal_model(log.path(rel / "temporal_stage1.ckpt"), run.stage1.temporal);
  if (run.stage2) {
    save_visual_model(log.path(rel / "visual_stage2.ckpt"), run.stage2->visual);
    save_temporal_model(log.path(rel / "temporal_stage2.ckpt"), run.stage2->temporal);
  }
  const auto& report = final_models(run).report;
  save_training_report(log.path(rel / "training_report.csv"), report);
  save_training_timing(log.path(rel / "training_timing.csv"), report);
}

inline void write_segment_outputs(ArtifactLog& log, const fs::path& rel, const ActivityRun& run,
                                  const AppConfig& cfg) {
  if (cfg.write_embeddings) {
    for (const auto& v : run.embeddings.videos) save_feature_sequence(log.path(rel / "embeddings" / (v.video_id + ".tseg")), v);
  }
  save_cluster_model(log.path(rel / "gmm.bin"), run.segmentation.gmm);
  if (cfg.export_scores) {
    std::vector<std::string> ids;
    for (const auto& v : run.data.videos) ids.push_back(v.video_id);
    save_scores_csv(log.path(rel / "scores.csv"), run.segmentation.scores, ids);
  }
  write_segmentation_files(log, rel / "segmentation", run.segmentation);
  if (cfg.write_svg) {
    const LabelSeqs* gt = run.data.labels ? &*run.data.labels : nullptr;
    const auto* maps = run.evaluation ? &run.evaluation->mappings : nullptr;
    save_segmentation_svg(log.path(rel / "segmentation.svg"), run.segmentation.segmentations, gt, maps,
                          run.segmentation.background ? &*run.segmentation.background : nullptr,
                          background_set(cfg.background_id));
  }
}

struct PipelineSummary {
  std::vector<ActivityEvaluation> evaluations;
  std::vector<std::string> activities;
};

inline ActivityDataset load_for_config(const std::string& name, const fs::path& dir, const AppConfig& cfg,
                                       ArtifactLog* log) {
  auto ds = load_activity(dir, name);
  ds.background_id = cfg.background_id;
  if (log) {
    for (const auto& f : dataset_files(dir)) log->add_input(f);
  }
  return ds;
}

inline void with_activity_context(const std::string& activity, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    throw Error("activity '" + activity + "': " + e.what());
  }
}

/// `pipeline` subcommand: every activity end to end.
inline PipelineSummary run_pipeline(const AppConfig& cfg, const Logger& logger = nullptr) {
  cfg.pipeline.validate();
  ArtifactLog log(cfg.out_dir);
  PipelineSummary summary;
  for (const auto& [name, dir] : resolve_activities(cfg)) {
    with_activity_context(name, [&] {
      const auto t0 = detail::Clock::now();
      auto run = run_activity(load_for_config(name, dir, cfg, &log), cfg.pipeline, cfg.matching, cfg.background_id,
                              true, logger);
      write_training_outputs(log, name, run);
      write_segment_outputs(log, name, run, cfg);
      if (run.evaluation) {
        summary.evaluations.push_back({name, *run.evaluation, run.data.total_frames()});
        log_line(logger, "[" + name + "] MoF " + detail::format_double(run.evaluation->mof) + ", F1 " +
                             detail::format_double(run.evaluation->f1.f1));
      }
      summary.activities.push_back(name);
      log.add_timing(name + "/train", run.train_seconds);
      log.add_timing(name + "/total", detail::seconds_since(t0));
    });
  }
  if (!summary.evaluations.empty()) save_evaluation_report(log.path("evaluation.csv"), summary.evaluations);
  log.write_manifest(cfg);
  return summary;
}

/// `train` subcommand: normalization stats, checkpoints, and reports.
inline void run_train(const AppConfig& cfg, const Logger& logger = nullptr) {
  cfg.pipeline.validate();
  ArtifactLog log(cfg.out_dir);
  for (const auto& [name, dir] : resolve_activities(cfg)) {
    with_activity_context(name, [&] {
      auto run = train_activity(load_for_config(name, dir, cfg, &log), cfg.pipeline, true, logger);
      write_training_outputs(log, name, run);
      log.add_timing(name + "/train", run.train_seconds);
    });
  }
  log.write_manifest(cfg);
}

/// `segment` subcommand: reuses checkpoints written by `train` in out_dir.
inline PipelineSummary run_segment(const AppConfig& cfg, const Logger& logger = nullptr) {
  cfg.pipeline.validate();
  ArtifactLog log(cfg.out_dir);
  PipelineSummary summary;
  for (const auto& [name, dir] : resolve_activities(cfg)) {
    with_activity_context(name, [&] {
      const auto model_dir = cfg.out_dir / name;
      auto ckpt = model_dir / "visual_stage2.ckpt";
      if (!fs::exists(ckpt)) ckpt = model_dir / "visual_stage1.ckpt";
      if (!fs::exists(ckpt)) throw Error("no visual checkpoint in " + model_dir.string() + " (run 'train' first)");
      ActivityRun run;
      run.data = load_for_config(name, dir, cfg, &log);
      if (cfg.pipeline.normalize) {
        const auto stats_path = model_dir / "norm_stats.csv";
        if (!fs::exists(stats_path)) throw Error("missing " + stats_path.string());
        run.norm = load_norm_stats(stats_path);
        run.data = apply_norm(std::move(run.data), *run.norm);
      }
      const auto vm = load_visual_model(ckpt);
      log_line(logger, "[" + name + "] segmenting with " + ckpt.filename().string());
      run.embeddings = extract_embeddings(vm, run.data);
      run.segmentation = segment_embeddings(run.embeddings, cfg.pipeline);
      if (run.data.labels) {
        run.evaluation = evaluate_segmentation(run.segmentation, run.data, cfg.pipeline, cfg.matching, cfg.background_id);
        summary.evaluations.push_back({name, *run.evaluation, run.data.total_frames()});
      }
      write_segment_outputs(log, name, run, cfg);
      summary.activities.push_back(name);
    });
  }
  if (!summary.evaluations.empty()) save_evaluation_report(log.path("evaluation.csv"), summary.evaluations);
  log.write_manifest(cfg);
  return summary;
}

// ---------------------------------------------------------------------------
// Sweeps and ablations
// ---------------------------------------------------------------------------

struct SweepRow {
  std::string activity;
  int step = 0;
  double mof = 0.0;
  double f1 = 0.0;
};

inline void check_steps(const std::vector<int>& steps, const ActivityDataset& ds) {
  if (steps.empty()) throw Error("sweep-step: no step sizes given");
  for (int s : steps) {
    if (s < 0 || static_cast<std::size_t>(s) + 2 > ds.min_length()) {
      throw Error("sweep-step: step " + std::to_string(s) + " is invalid for activity '" + ds.activity +
                  "' (shortest video has " + std::to_string(ds.min_length()) + " frames)");
    }
  }
}

/// `sweep-step` subcommand: the pipeline once per step size.
inline std::vector<SweepRow> run_step_sweep(const AppConfig& cfg, const std::vector<int>& steps,
                                            const Logger& logger = nullptr) {
  cfg.pipeline.validate();
  ArtifactLog log(cfg.out_dir);
  std::vector<std::pair<std::string, ActivityDataset>> data;
  for (const auto& [name, dir] : resolve_activities(cfg)) {
    auto ds = load_for_config(name, dir, cfg, &log);
    check_steps(steps, ds);
    if (!ds.labels) throw Error("sweep-step: activity '" + name + "' has no labels");
    data.emplace_back(name, std::move(ds));
  }
  std::vector<SweepRow> rows;
  for (int s : steps) {
    for (const auto& [name, ds] : data) {
      with_activity_context(name, [&] {
        auto pc = cfg.pipeline;
        pc.step_s = s;
        log_line(logger, "[" + name + "] step s=" + std::to_string(s));
        const auto run = run_activity(ds, pc, cfg.matching, cfg.background_id, true, logger);
        const auto rel = fs::path("step_" + std::to_string(s)) / name;
        save_training_report(log.path(rel / "training_report.csv"), final_models(run).report);
        write_segmentation_files(log, rel / "segmentation", run.segmentation);
        rows.push_back({name, s, run.evaluation->mof, run.evaluation->f1.f1});
      });
    }
  }
  std::ofstream out(log.path("sweep_step.csv"), std::ios::trunc);
  out << "step,activity,mof,f1\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.activity << ',' << detail::format_double(r.mof) << ',' << detail::format_double(r.f1) << '\n';
  }
  out.close();
  log.write_manifest(cfg);
  return rows;
}

enum class EmbeddingSource { raw_features, stage1_visual, stage1_temporal, stage2_visual };

inline const char* source_name(EmbeddingSource s) {
  switch (s) {
    case EmbeddingSource::raw_features: return "raw_features";
    case EmbeddingSource::stage1_visual: return "stage1_unet";
    case EmbeddingSource::stage1_temporal: return "stage1_mlp";
    case EmbeddingSource::stage2_visual: return "stage2_unet";
  }
  return "?";
}

struct AblationRow {
  std::string activity;
  EmbeddingSource source = EmbeddingSource::raw_features;
  double mof = 0.0;
  double f1 = 0.0;
  /// Training time needed to produce this arm's embedding (0 for raw features).
  double train_seconds = 0.0;
  double total_seconds = 0.0;
};

/// Clusters and decodes four embedding sources of the same activity. The raw
/// arm runs before and independently of any training.
inline std::vector<AblationRow> ablate_activity(const ActivityDataset& raw, const PipelineConfig& cfg,
                                                MatchScope scope, const std::optional<int>& background_id,
                                                const Logger& logger = nullptr,
                                                std::vector<SegmentationResult>* segs_out = nullptr) {
  cfg.validate_for(raw);
  if (!raw.labels) throw Error("ablate-embedding: activity '" + raw.activity + "' has no labels");
  std::vector<AblationRow> rows;
  auto arm = [&](EmbeddingSource src, const EmbeddingSet& emb, const ActivityDataset& ds, double train_s,
                 detail::Clock::time_point started) {
    auto seg = segment_embeddings(emb, cfg);
    const auto ev = evaluate_segmentation(seg, ds, cfg, scope, background_id);
    rows.push_back({raw.activity, src, ev.mof, ev.f1.f1, train_s, detail::seconds_since(started)});
    log_line(logger, "[" + raw.activity + "] " + source_name(src) + ": MoF " + detail::format_double(ev.mof));
    if (segs_out) segs_out->push_back(std::move(seg));
  };

  ActivityDataset data = raw;
  if (cfg.normalize) data = normalize_dataset(std::move(data)).first;
  auto t_raw = detail::Clock::now();
  arm(EmbeddingSource::raw_features, EmbeddingSet::from_dataset(data), data, 0.0, t_raw);

  const auto t0 = detail::Clock::now();
  const auto stage1 = train_stage1(data, cfg, cfg.seed);
  const double s1 = detail::seconds_since(t0);
  arm(EmbeddingSource::stage1_visual, extract_embeddings(stage1.visual, data), data, s1, t0);
  arm(EmbeddingSource::stage1_temporal, extract_temporal_embeddings(stage1.temporal, data), data, s1, t0);
  const auto stage2 = train_stage2(stage1, data, cfg, cfg.seed);
  const double s2 = detail::seconds_since(t0);
  arm(EmbeddingSource::stage2_visual, extract_embeddings(stage2.visual, data), data, s2, t0);
  return rows;
}

/// `ablate-embedding` subcommand.
inline std::vector<AblationRow> run_embedding_ablation(const AppConfig& cfg, const Logger& logger = nullptr) {
  cfg.pipeline.validate();
  ArtifactLog log(cfg.out_dir);
  std::vector<AblationRow> rows;
  for (const auto& [name, dir] : resolve_activities(cfg)) {
    with_activity_context(name, [&] {
      const auto ds = load_for_config(name, dir, cfg, &log);
      std::vector<SegmentationResult> segs;
      auto r = ablate_activity(ds, cfg.pipeline, cfg.matching, cfg.background_id, logger, &segs);
      for (std::size_t i = 0; i < r.size(); ++i) {
        write_segmentation_files(log, fs::path("ablation") / name / source_name(r[i].source), segs[i]);
        log.add_timing(name + "/" + source_name(r[i].source), r[i].total_seconds);
      }
      rows.insert(rows.end(), r.begin(), r.end());
    });
  }
  std::ofstream out(log.path("ablation.csv"), std::ios::trunc);
  out << "activity,source,mof,f1\n";
  for (const auto& r : rows) {
    out << r.activity << ',' << source_name(r.source) << ',' << detail::format_double(r.mof) << ','
        << detail::format_double(r.f1) << '\n';
  }
  out.close();
  log.write_manifest(cfg);
  return rows;
}

// ---------------------------------------------------------------------------
// Offline evaluation of segmentation files
// ---------------------------------------------------------------------------

/// Pairs <id>.seg files in pred_dir with <id>.labels files in gt_dir.
inline EvaluationResult evaluate_directories(const fs::path& pred_dir, const fs::path& gt_dir, MatchScope scope,
                                             const std::optional<int>& background_id = std::nullopt) {
  auto collect = [](const fs::path& dir, const char* ext) {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(dir)) throw Error("not a directory: " + dir.string());
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ext) out[e.path().stem().string()] = e.path();
    }
    return out;
  };
  const auto preds = collect(pred_dir, ".seg");
  const auto gts = collect(gt_dir, ".labels");
  if (preds.empty()) throw Error("no .seg files in " + pred_dir.string());
  if (gts.empty()) throw Error("no .labels files in " + gt_dir.string());
  std::vector<std::string> missing;
  for (const auto& [id, _] : preds) {
    if (!gts.count(id)) missing.push_back(id + " (no ground truth)");
  }
  for (const auto& [id, _] : gts) {
    if (!preds.count(id)) missing.push_back(id + " (no prediction)");
  }
  if (!missing.empty()) throw Error("unmatched video ids: " + detail::concat_ids(missing));

  LabelSeqs pred, gt;
  FrameMasks masks;
  std::vector<std::string> ids;
  bool any_mask = false;
  int k = 0;
  for (const auto& [id, path] : preds) {
    ids.push_back(id);
    pred.push_back(load_segmentation(path));
    gt.push_back(load_labels(gts.at(id)));
    for (int l : pred.back()) k = std::max(k, l + 1);
    const auto bg = pred_dir / (id + ".bg");
    masks.emplace_back();
    if (fs::exists(bg)) {
      any_mask = true;
      for (int b : load_labels(bg)) masks.back().push_back(b != 0);
    }
  }
  return evaluate_activity(pred, gt, k, scope, background_set(background_id), any_mask ? &masks : nullptr, ids);
}

}  // namespace tseg
