// Data model, feature/label file ingestion, and per-activity normalization.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tseg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
/// Frames are stored one per row so a frame is a contiguous slice.
using FrameMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Base error for every failure surfaced by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file.
class ParseError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string concat_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (const auto& id : ids) {
    if (!out.empty()) out += ", ";
    out += id;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

inline bool parse_int(std::string_view s, long long& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline bool get_f32(std::istream& is, float& v) {
  std::uint32_t bits;
  if (!get_u32(is, bits)) return false;
  v = std::bit_cast<float>(bits);
  return true;
}

inline bool has_magic(std::istream& is, std::string_view magic) {
  std::string buf(magic.size(), '\0');
  if (!is.read(buf.data(), static_cast<std::streamsize>(buf.size()))) return false;
  return buf == magic;
}

}  // namespace detail

/// One video: N frames of D-dim features plus relative timestamps i/N.
struct FeatureSequence {
  std::string video_id;
  FrameMatrix frames;
  Vector rel_timestamps;

  std::size_t num_frames() const { return static_cast<std::size_t>(frames.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(frames.cols()); }
  Vector frame(std::size_t i) const { return frames.row(static_cast<Eigen::Index>(i)).transpose(); }

  /// Validates shape and finiteness and fills rel_timestamps.
  static FeatureSequence from_frames(std::string video_id, FrameMatrix frames) {
    if (frames.rows() < 2) {
      throw Error("video '" + video_id + "': need at least 2 frames, got " + std::to_string(frames.rows()));
    }
    if (frames.cols() < 1) throw Error("video '" + video_id + "': feature dimension must be >= 1");
    for (Eigen::Index r = 0; r < frames.rows(); ++r) {
      for (Eigen::Index c = 0; c < frames.cols(); ++c) {
        if (!std::isfinite(frames(r, c))) {
          throw Error("video '" + video_id + "': non-finite value at row " + std::to_string(r) + ", column " +
                      std::to_string(c));
        }
      }
    }
    FeatureSequence seq;
    seq.video_id = std::move(video_id);
    seq.rel_timestamps = Vector(frames.rows());
    const double n = static_cast<double>(frames.rows());
    for (Eigen::Index i = 0; i < frames.rows(); ++i) seq.rel_timestamps[i] = static_cast<double>(i) / n;
    seq.frames = std::move(frames);
    return seq;
  }
};

/// All videos of one activity class, optionally with per-frame ground truth.
struct ActivityDataset {
  std::string activity;
  std::vector<FeatureSequence> videos;
  std::optional<std::vector<std::vector<int>>> labels;
  std::map<int, std::string> label_names;
  std::optional<int> background_id;

  std::size_t dim() const { return videos.empty() ? 0 : videos.front().dim(); }

  std::size_t total_frames() const {
    std::size_t n = 0;
    for (const auto& v : videos) n += v.num_frames();
    return n;
  }

  std::size_t min_length() const {
    std::size_t n = std::numeric_limits<std::size_t>::max();
    for (const auto& v : videos) n = std::min(n, v.num_frames());
    return videos.empty() ? 0 : n;
  }

  void validate() const {
    if (videos.empty()) throw Error("activity '" + activity + "': no videos");
    const auto d = dim();
    for (const auto& v : videos) {
      if (v.dim() != d) {
        throw Error("activity '" + activity + "': video '" + v.video_id + "' has dimension " +
                    std::to_string(v.dim()) + ", expected " + std::to_string(d));
      }
    }
    if (labels) {
      if (labels->size() != videos.size()) throw Error("activity '" + activity + "': label/video count mismatch");
      for (std::size_t i = 0; i < videos.size(); ++i) {
        if ((*labels)[i].size() != videos[i].num_frames()) {
          throw Error("video '" + videos[i].video_id + "': " + std::to_string((*labels)[i].size()) +
                      " labels for " + std::to_string(videos[i].num_frames()) + " frames");
        }
      }
    }
  }
};

/// Run parameters shared by training, clustering, and decoding.
struct PipelineConfig {
  int step_s = 5;
  int k_clusters = 5;
  int stage1_visual_epochs = 160;
  int stage1_temporal_epochs = 30;
  int stage2_total_epochs = 60;
  int stage2_visual_block = 40;
  int stage2_temporal_block = 5;
  /// When true, stage2_total_epochs counts visual+temporal cycles instead of epochs.
  bool stage2_count_cycles = false;
  /// 0 picks D/2 (at least 1).
  int embed_dim = 0;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int stride_gamma = 1;
  std::optional<double> background_percentile;
  double trec_weight = 1.0;
  bool normalize = true;
  bool length_model = true;
  int length_reestimate_iterations = 0;
  bool full_transcript = true;

  std::size_t resolved_embed_dim(std::size_t d) const {
    return embed_dim > 0 ? static_cast<std::size_t>(embed_dim) : std::max<std::size_t>(1, d / 2);
  }

  void validate() const {
    if (step_s < 0) throw Error("step_s must be >= 0");
    if (k_clusters < 1) throw Error("k_clusters must be >= 1");
    if (stage1_visual_epochs < 0 || stage1_temporal_epochs < 0 || stage2_total_epochs < 0) {
      throw Error("epoch counts must be >= 0");
    }
    if (stage2_visual_block < 0 || stage2_temporal_block < 0 ||
        (stage2_total_epochs > 0 && stage2_visual_block + stage2_temporal_block == 0)) {
      throw Error("stage-2 block lengths must be non-negative and not both zero");
    }
    if (embed_dim < 0) throw Error("embed_dim must be >= 0 (0 = half the feature dimension)");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be positive");
    if (stride_gamma < 1) throw Error("stride_gamma must be >= 1");
    if (background_percentile && !(*background_percentile > 0.0 && *background_percentile < 100.0)) {
      throw Error("background_percentile must lie in (0, 100)");
    }
    if (length_reestimate_iterations < 0) throw Error("length_reestimate_iterations must be >= 0");
  }

  void validate_for(const ActivityDataset& ds) const {
    validate();
    const auto min_len = ds.min_length();
    if (static_cast<std::size_t>(step_s) >= min_len) {
      throw Error("step_s=" + std::to_string(step_s) + " must be smaller than the shortest video (" +
                  std::to_string(min_len) + " frames) of activity '" + ds.activity + "'");
    }
  }
};

/// Prediction step expressed in relative-timestamp units for a video of n frames.
inline double relative_offset(int step_s, std::size_t n) { return static_cast<double>(step_s) / static_cast<double>(n); }

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

enum class FeatureFormat { binary, csv };

inline constexpr std::string_view kFeatureMagic = "TSEG";

inline FeatureFormat guess_format(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? FeatureFormat::csv : FeatureFormat::binary;
}

/// Binary: "TSEG", u32 N, u32 D, N*D little-endian float32, row-major.
inline FrameMatrix read_binary_frames(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open feature file " + path.string());
  if (!detail::has_magic(in, kFeatureMagic)) throw ParseError(path.string() + ": bad magic, expected TSEG");
  std::uint32_t n = 0, d = 0;
  if (!detail::get_u32(in, n) || !detail::get_u32(in, d)) throw ParseError(path.string() + ": truncated header");
  if (d == 0) throw ParseError(path.string() + ": header declares D=0");
  FrameMatrix frames(n, d);
  for (std::uint32_t r = 0; r < n; ++r) {
    for (std::uint32_t c = 0; c < d; ++c) {
      float v;
      if (!detail::get_f32(in, v)) {
        throw ParseError(path.string() + ": row " + std::to_string(r) + " truncated (header declares N=" +
                         std::to_string(n) + ", D=" + std::to_string(d) + ")");
      }
      if (!std::isfinite(v)) {
        throw ParseError(path.string() + ": non-finite value at row " + std::to_string(r) + ", column " +
                         std::to_string(c));
      }
      frames(r, c) = v;
    }
  }
  char extra;
  if (in.read(&extra, 1)) throw ParseError(path.string() + ": trailing data after N*D values");
  return frames;
}

inline FrameMatrix read_csv_frames(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open feature file " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    std::vector<double> values;
    std::string_view rest(line);
    std::size_t col = 0;
    while (true) {
      const auto comma = rest.find(',');
      const auto field = rest.substr(0, comma);
      double v;
      if (!detail::parse_double(field, v)) {
        throw ParseError(path.string() + ": row " + std::to_string(row) + ", column " + std::to_string(col) +
                         ": cannot parse '" + std::string(detail::trim(field)) + "'");
      }
      if (!std::isfinite(v)) {
        throw ParseError(path.string() + ": non-finite value at row " + std::to_string(row) + ", column " +
                         std::to_string(col));
      }
      values.push_back(v);
      ++col;
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (!rows.empty() && values.size() != rows.front().size()) {
      throw ParseError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(values.size()) +
                       " values, expected " + std::to_string(rows.front().size()));
    }
    rows.push_back(std::move(values));
    ++row;
  }
  if (rows.empty()) throw ParseError(path.string() + ": empty feature file");
  FrameMatrix frames(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) frames(r, c) = rows[r][c];
  }
  return frames;
}

inline FeatureSequence load_feature_sequence(const std::filesystem::path& path, std::string video_id) {
  auto frames = guess_format(path) == FeatureFormat::csv ? read_csv_frames(path) : read_binary_frames(path);
  try {
    return FeatureSequence::from_frames(std::move(video_id), std::move(frames));
  } catch (const Error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline void write_binary_frames(const std::filesystem::path& path, const FrameMatrix& frames) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kFeatureMagic.data(), static_cast<std::streamsize>(kFeatureMagic.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(frames.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(frames.cols()));
  for (Eigen::Index r = 0; r < frames.rows(); ++r) {
    for (Eigen::Index c = 0; c < frames.cols(); ++c) detail::put_f32(out, static_cast<float>(frames(r, c)));
  }
  if (!out) throw Error("short write to " + path.string());
}

inline void write_csv_frames(const std::filesystem::path& path, const FrameMatrix& frames) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (Eigen::Index r = 0; r < frames.rows(); ++r) {
    for (Eigen::Index c = 0; c < frames.cols(); ++c) {
      if (c) out << ',';
      out << detail::format_double(frames(r, c));
    }
    out << '\n';
  }
}

inline void save_feature_sequence(const std::filesystem::path& path, const FeatureSequence& seq,
                                  FeatureFormat format = FeatureFormat::binary) {
  if (format == FeatureFormat::csv) {
    write_csv_frames(path, seq.frames);
  } else {
    write_binary_frames(path, seq.frames);
  }
}

// ---------------------------------------------------------------------------
// Label files: one integer id per line.
// ---------------------------------------------------------------------------

inline std::vector<int> load_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open label file " + path.string());
  std::vector<int> labels;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) {
      ++row;
      continue;
    }
    long long v;
    if (!detail::parse_int(line, v)) {
      throw ParseError(path.string() + ": line " + std::to_string(row) + ": not an integer label");
    }
    labels.push_back(static_cast<int>(v));
    ++row;
  }
  return labels;
}

inline void save_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (int l : labels) out << l << '\n';
}

/// Reads "id<TAB or space>name" lines.
inline std::map<int, std::string> load_label_names(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::map<int, std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    auto t = detail::trim(line);
    if (t.empty()) continue;
    const auto sep = t.find_first_of(" \t");
    long long id;
    if (!detail::parse_int(t.substr(0, sep), id)) throw ParseError(path.string() + ": bad label id in '" + line + "'");
    names[static_cast<int>(id)] = sep == std::string_view::npos ? "" : std::string(detail::trim(t.substr(sep)));
  }
  return names;
}

/// Loads every *.tseg / *.csv feature file in `dir` (sorted by name) as one activity.
/// Labels are read from <video>.labels when present for every video.
inline ActivityDataset load_activity(const std::filesystem::path& dir, std::string activity) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error("activity directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".tseg" || ext == ".csv")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("no feature files (*.tseg, *.csv) in " + dir.string());

  ActivityDataset ds;
  ds.activity = std::move(activity);
  std::vector<std::vector<int>> labels;
  std::size_t with_labels = 0;
  for (const auto& f : files) {
    auto id = f.stem().string();
    ds.videos.push_back(load_feature_sequence(f, id));
    const auto label_path = dir / (id + ".labels");
    if (fs::exists(label_path)) {
      labels.push_back(load_labels(label_path));
      ++with_labels;
    } else {
      labels.emplace_back();
    }
  }
  if (with_labels == files.size()) {
    ds.labels = std::move(labels);
  } else if (with_labels != 0) {
    throw Error("activity '" + ds.activity + "': label files exist for only " + std::to_string(with_labels) +
                " of " + std::to_string(files.size()) + " videos");
  }
  if (fs::exists(dir / "label_names.txt")) ds.label_names = load_label_names(dir / "label_names.txt");
  ds.validate();
  return ds;
}

/// Writes an activity in the same layout load_activity reads.
inline void save_activity(const std::filesystem::path& dir, const ActivityDataset& ds) {
  std::filesystem::create_directories(dir);
  for (std::size_t v = 0; v < ds.videos.size(); ++v) {
    const auto& seq = ds.videos[v];
    save_feature_sequence(dir / (seq.video_id + ".tseg"), seq);
    if (ds.labels) save_labels(dir / (seq.video_id + ".labels"), (*ds.labels)[v]);
  }
  if (!ds.label_names.empty()) {
    std::ofstream out(dir / "label_names.txt", std::ios::trunc);
    for (const auto& [id, name] : ds.label_names) out << id << '\t' << name << '\n';
  }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct NormStats {
  Vector mean;
  Vector stddev;
};

inline constexpr double kDegenerateStd = 1e-8;

inline ActivityDataset apply_norm(ActivityDataset ds, const NormStats& stats) {
  for (auto& v : ds.videos) {
    if (v.dim() != static_cast<std::size_t>(stats.mean.size())) {
      throw Error("normalization stats have dimension " + std::to_string(stats.mean.size()) + ", video '" +
                  v.video_id + "' has " + std::to_string(v.dim()));
    }
    for (Eigen::Index c = 0; c < v.frames.cols(); ++c) {
      const double scale = stats.stddev[c] < kDegenerateStd ? 1.0 : stats.stddev[c];
      v.frames.col(c) = (v.frames.col(c).array() - stats.mean[c]) / scale;
    }
  }
  return ds;
}

/// Per-dimension z-score over every frame of every video. Dimensions with
/// std < 1e-8 are centred only.
inline std::pair<ActivityDataset, NormStats> normalize_dataset(ActivityDataset ds) {
  if (ds.videos.empty() || ds.total_frames() == 0) throw Error("normalize_dataset: empty dataset");
  const auto d = static_cast<Eigen::Index>(ds.dim());
  const double n = static_cast<double>(ds.total_frames());
  NormStats stats{Vector::Zero(d), Vector::Zero(d)};
  for (const auto& v : ds.videos) stats.mean += v.frames.colwise().sum().transpose();
  stats.mean /= n;
  for (const auto& v : ds.videos) {
    stats.stddev += (v.frames.rowwise() - stats.mean.transpose()).array().square().colwise().sum().matrix().transpose();
  }
  stats.stddev = (stats.stddev / n).array().sqrt();
  auto out = apply_norm(std::move(ds), stats);
  return {std::move(out), std::move(stats)};
}

/// 2 x D CSV: means row then stds row.
inline void save_norm_stats(const std::filesystem::path& path, const NormStats& stats) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const Vector* row : {&stats.mean, &stats.stddev}) {
    for (Eigen::Index c = 0; c < row->size(); ++c) {
      if (c) out << ',';
      out << detail::format_double((*row)[c]);
    }
    out << '\n';
  }
}

inline NormStats load_norm_stats(const std::filesystem::path& path) {
  const auto m = read_csv_frames(path);
  if (m.rows() != 2) throw ParseError(path.string() + ": expected 2 rows (means, stds)");
  return {m.row(0).transpose(), m.row(1).transpose()};
}

}  // namespace tseg
