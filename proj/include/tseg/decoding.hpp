// Order-constrained Viterbi decoding with a Poisson segment-length model.
#pragma once

#include "tseg/clustering.hpp"
#include "tseg/core.hpp"

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace tseg {

/// Poisson duration prior per ordering rank, in stride units.
struct LengthModel {
  std::vector<double> means;
  bool enabled = true;

  /// log Poisson(len; mean) for the segment at `rank`, or 0 when disabled.
  double log_prob(std::size_t rank, std::size_t len) const {
    if (!enabled) return 0.0;
    const double lambda = means.at(rank);
    const double l = static_cast<double>(len);
    return l * std::log(lambda) - lambda - std::lgamma(l + 1.0);
  }
};

/// Uniform split: every mean is n / (k * gamma).
inline LengthModel fit_length_model(int k, std::size_t n_frames, int gamma = 1, bool enabled = true) {
  if (k < 1) throw Error("fit_length_model: k must be >= 1");
  if (gamma < 1) throw Error("fit_length_model: gamma must be >= 1");
  const double mean = static_cast<double>(n_frames) / (static_cast<double>(k) * static_cast<double>(gamma));
  return {std::vector<double>(static_cast<std::size_t>(k), std::max(mean, 1e-6)), enabled};
}

struct Segment {
  int cluster = 0;  // ordering rank
  std::size_t start = 0;
  std::size_t length = 0;
  bool operator==(const Segment&) const = default;
};

/// Per-frame labels are ranks in the cluster ordering (0 = earliest).
struct Segmentation {
  std::string video_id;
  std::vector<int> labels;
  std::vector<Segment> segments;
  double score = 0.0;
};

struct DecodeOptions {
  /// Every cluster must be visited and the path must end in the last one.
  bool full_transcript = true;
};

inline std::vector<Segment> segments_from_labels(const std::vector<int>& labels) {
  std::vector<Segment> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (out.empty() || out.back().cluster != labels[i]) {
      out.push_back({labels[i], i, 1});
    } else {
      ++out.back().length;
    }
  }
  return out;
}

inline std::vector<int> labels_from_segments(const std::vector<Segment>& segs) {
  std::vector<int> out;
  for (const auto& s : segs) {
    if (s.start != out.size()) throw Error("segment list is not contiguous");
    out.insert(out.end(), s.length, s.cluster);
  }
  return out;
}

/// Labels start at rank 0 and only stay or advance by one.
inline bool is_order_monotone(const std::vector<int>& labels) {
  if (labels.empty()) return true;
  if (labels.front() != 0) return false;
  for (std::size_t i = 1; i < labels.size(); ++i) {
    const int step = labels[i] - labels[i - 1];
    if (step != 0 && step != 1) return false;
  }
  return true;
}

/// Checks the monotone-order and reconstruction invariants.
inline bool segmentation_valid(const Segmentation& s, int k, bool full_transcript) {
  if (!is_order_monotone(s.labels)) return false;
  if (!s.labels.empty() && s.labels.back() >= k) return false;
  if (full_transcript && !s.labels.empty() && s.labels.back() != k - 1) return false;
  try {
    return labels_from_segments(s.segments) == s.labels;
  } catch (const Error&) {
    return false;
  }
}

/// Scores of one video's frames (N x k, columns indexed by GMM cluster),
/// decoded along `ordering`.
///
/// Frames are grouped into blocks of `gamma`; a block's score is the
/// left-to-right sum of its frames' scores. The path score of a labeling is
/// accumulated segment by segment, left to right:
///   total = total + (sum of the segment's block scores + length term)
/// Among equally scored labelings the one whose last segment starts earliest
/// wins, then the second to last, and so on (a "stay" is preferred over an
/// "advance" when backtracking). In relaxed mode a path ending at a lower
/// rank wins ties.
inline Segmentation viterbi_decode(const Matrix& scores, const ClusterOrdering& ordering, const LengthModel& lm,
                                   int gamma = 1, const DecodeOptions& opt = {}) {
  const auto k = ordering.order.size();
  const auto n = static_cast<std::size_t>(scores.rows());
  if (gamma < 1) throw Error("viterbi_decode: gamma must be >= 1");
  if (k == 0 || static_cast<std::size_t>(scores.cols()) != k) throw Error("viterbi_decode: ordering/score width mismatch");
  if (lm.enabled && lm.means.size() != k) throw Error("viterbi_decode: length model has wrong cluster count");
  if (n == 0) throw Error("viterbi_decode: no frames");
  const auto g = static_cast<std::size_t>(gamma);
  const std::size_t blocks = (n + g - 1) / g;
  if (opt.full_transcript && blocks < k) {
    throw Error("viterbi_decode: " + std::to_string(n) + " frames (" + std::to_string(blocks) +
                " sampled) cannot visit all k=" + std::to_string(k) +
                " clusters; use a smaller k or relax the full-transcript constraint");
  }

  // block_score[m * k + r]
  std::vector<double> block_score(blocks * k, 0.0);
  for (std::size_t m = 0; m < blocks; ++m) {
    for (std::size_t r = 0; r < k; ++r) {
      const auto col = static_cast<Eigen::Index>(ordering.order[r]);
      double acc = 0.0;
      for (std::size_t f = m * g; f < std::min(n, (m + 1) * g); ++f) acc += scores(static_cast<Eigen::Index>(f), col);
      block_score[m * k + r] = acc;
    }
  }

  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> best(blocks * k, kNegInf);
  std::vector<std::size_t> start(blocks * k, 0);
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t a = 0; a < blocks; ++a) {
      double prev;
      if (r == 0) {
        if (a != 0) break;
        prev = 0.0;
      } else {
        if (a == 0) continue;
        prev = best[(a - 1) * k + (r - 1)];
        if (prev == kNegInf) continue;
      }
      double acc = 0.0;
      for (std::size_t t = a; t < blocks; ++t) {
        acc += block_score[t * k + r];
        const double cand = prev + (acc + lm.log_prob(r, t - a + 1));
        if (cand > best[t * k + r]) {
          best[t * k + r] = cand;
          start[t * k + r] = a;
        }
      }
    }
  }

  std::size_t end_rank = k - 1;
  if (!opt.full_transcript) {
    end_rank = 0;
    for (std::size_t r = 1; r < k; ++r) {
      if (best[(blocks - 1) * k + r] > best[(blocks - 1) * k + end_rank]) end_rank = r;
    }
  }
  Segmentation out;
  out.score = best[(blocks - 1) * k + end_rank];
  if (out.score == kNegInf) throw Error("viterbi_decode: no feasible path");

  std::vector<std::pair<std::size_t, std::size_t>> block_segments;  // (start block, end block) per rank
  std::size_t t = blocks - 1;
  for (std::size_t r = end_rank + 1; r-- > 0;) {
    const std::size_t a = start[t * k + r];
    block_segments.emplace_back(a, t);
    if (r == 0) break;
    t = a - 1;
  }
  out.labels.assign(n, 0);
  for (std::size_t i = block_segments.size(); i-- > 0;) {
    const auto rank = static_cast<int>(block_segments.size() - 1 - i);
    const auto [a, b] = block_segments[i];
    const std::size_t f0 = a * g, f1 = std::min(n, (b + 1) * g);
    for (std::size_t f = f0; f < f1; ++f) out.labels[f] = rank;
    out.segments.push_back({rank, f0, f1 - f0});
  }
  return out;
}

/// Pools decoded segment proportions across videos and rescales them into
/// per-video Poisson means (in stride units).
inline std::vector<LengthModel> reestimate_length_models(const std::vector<Segmentation>& segs, int k, int gamma) {
  std::vector<double> frac(static_cast<std::size_t>(k), 0.0);
  for (const auto& s : segs) {
    for (const auto& seg : s.segments) {
      frac[static_cast<std::size_t>(seg.cluster)] += static_cast<double>(seg.length) / static_cast<double>(s.labels.size());
    }
  }
  for (auto& f : frac) f /= static_cast<double>(std::max<std::size_t>(segs.size(), 1));
  std::vector<LengthModel> out;
  for (const auto& s : segs) {
    LengthModel lm;
    const double blocks = static_cast<double>(s.labels.size()) / static_cast<double>(gamma);
    for (double f : frac) lm.means.push_back(std::max(f * blocks, 0.5));
    out.push_back(std::move(lm));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline void save_segmentation(const std::filesystem::path& path, const Segmentation& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t i = 0; i < s.labels.size(); ++i) out << i << '\t' << s.labels[i] << '\n';
}

inline void save_segments(const std::filesystem::path& path, const Segmentation& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& seg : s.segments) out << seg.cluster << '\t' << seg.start << '\t' << seg.length << '\n';
}

/// Reads "frame_idx<TAB>cluster_id" lines; frame indices must be 0..N-1 in order.
inline std::vector<int> load_segmentation(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open segmentation " + path.string());
  std::vector<int> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto tab = line.find('\t');
    long long idx, label;
    if (tab == std::string::npos || !detail::parse_int(std::string_view(line).substr(0, tab), idx) ||
        !detail::parse_int(std::string_view(line).substr(tab + 1), label)) {
      throw ParseError(path.string() + ": malformed line '" + line + "'");
    }
    if (idx != static_cast<long long>(labels.size())) {
      throw ParseError(path.string() + ": expected frame index " + std::to_string(labels.size()) + ", got " +
                       std::to_string(idx));
    }
    labels.push_back(static_cast<int>(label));
  }
  return labels;
}

}  // namespace tseg
