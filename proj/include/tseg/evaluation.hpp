// Cluster-to-label Hungarian matching (global or per video), MoF, frame-level
// F1 with background exclusion, and percentile-based background masking.
#pragma once

#include "tseg/clustering.hpp"
#include "tseg/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace tseg {

enum class MatchScope { global, per_video };

inline const char* scope_name(MatchScope s) { return s == MatchScope::global ? "global" : "per-video"; }

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Rows are predicted clusters, columns ground-truth labels (ids in `labels`).
struct ConfusionMatrix {
  CountMatrix counts;
  std::vector<int> labels;
  MatchScope scope = MatchScope::global;

  std::int64_t total() const { return counts.sum(); }
};

/// Injective partial map cluster -> ground-truth label id (-1 = unmatched).
struct Mapping {
  std::vector<int> cluster_to_label;
  std::int64_t matched_frames = 0;

  int operator()(int cluster) const {
    return cluster >= 0 && static_cast<std::size_t>(cluster) < cluster_to_label.size()
               ? cluster_to_label[static_cast<std::size_t>(cluster)]
               : -1;
  }
  std::size_t size() const {
    return static_cast<std::size_t>(std::count_if(cluster_to_label.begin(), cluster_to_label.end(), [](int l) { return l >= 0; }));
  }
};

using LabelSeqs = std::vector<std::vector<int>>;
using FrameMasks = std::vector<std::vector<bool>>;

namespace detail {

inline bool masked(const FrameMasks* masks, std::size_t v, std::size_t i) {
  return masks && !(*masks)[v].empty() && (*masks)[v][i];
}

inline void check_aligned(const LabelSeqs& pred, const LabelSeqs& gt, std::span<const std::string> ids,
                          const FrameMasks* masks) {
  if (pred.size() != gt.size()) throw Error("prediction/ground-truth video count mismatch");
  for (std::size_t v = 0; v < pred.size(); ++v) {
    const std::string id = v < ids.size() ? ids[v] : "#" + std::to_string(v);
    if (pred[v].size() != gt[v].size()) {
      throw Error("video " + id + ": " + std::to_string(pred[v].size()) + " predicted frames vs " +
                  std::to_string(gt[v].size()) + " ground-truth frames");
    }
    if (masks && !(*masks)[v].empty() && (*masks)[v].size() != pred[v].size()) {
      throw Error("video " + id + ": background mask length mismatch");
    }
  }
}

}  // namespace detail

/// Ground-truth label ids present in `gt`, minus the background ids, sorted.
inline std::vector<int> label_set(const LabelSeqs& gt, const std::set<int>& background_ids = {}) {
  std::set<int> s;
  for (const auto& v : gt) {
    for (int l : v) {
      if (!background_ids.count(l)) s.insert(l);
    }
  }
  return {s.begin(), s.end()};
}

/// Co-occurrence counts. Frames masked as background and frames whose ground
/// truth is a background id are left out. Global scope yields one matrix,
/// per-video scope one per video.
inline std::vector<ConfusionMatrix> build_confusion(const LabelSeqs& pred, const LabelSeqs& gt, int k,
                                                    MatchScope scope, const std::set<int>& background_ids = {},
                                                    const FrameMasks* masks = nullptr,
                                                    std::span<const std::string> video_ids = {}) {
  detail::check_aligned(pred, gt, video_ids, masks);
  const auto labels = label_set(gt, background_ids);
  auto column = [&](int label) -> Eigen::Index {
    const auto it = std::lower_bound(labels.begin(), labels.end(), label);
    return it != labels.end() && *it == label ? it - labels.begin() : -1;
  };
  auto fresh = [&] {
    ConfusionMatrix cm;
    cm.counts = CountMatrix::Zero(k, static_cast<Eigen::Index>(labels.size()));
    cm.labels = labels;
    cm.scope = scope;
    return cm;
  };
  std::vector<ConfusionMatrix> out;
  if (scope == MatchScope::global) out.push_back(fresh());
  for (std::size_t v = 0; v < pred.size(); ++v) {
    if (scope == MatchScope::per_video) out.push_back(fresh());
    auto& cm = out.back();
    for (std::size_t i = 0; i < pred[v].size(); ++i) {
      if (detail::masked(masks, v, i)) continue;
      const int p = pred[v][i];
      if (p < 0 || p >= k) throw Error("predicted cluster " + std::to_string(p) + " outside 0.." + std::to_string(k - 1));
      const auto c = column(gt[v][i]);
      if (c >= 0) ++cm.counts(p, c);
    }
  }
  return out;
}

/// Maximum-weight assignment value over a square int64 matrix (O(n^3)).
inline std::int64_t max_assignment(const CountMatrix& w, std::vector<int>* row_to_col = nullptr) {
  const auto n = static_cast<std::size_t>(w.rows());
  if (static_cast<std::size_t>(w.cols()) != n) throw Error("max_assignment: matrix must be square");
  if (n == 0) {
    if (row_to_col) row_to_col->clear();
    return 0;
  }
  // Minimize (max - w) with the shortest augmenting path method; 1-based.
  const std::int64_t top = w.maxCoeff();
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> u(n + 1, 0), v(n + 1, 0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<bool> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      std::int64_t delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const std::int64_t cur = (top - w(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1))) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assign(n, -1);
  std::int64_t total = 0;
  for (std::size_t j = 1; j <= n; ++j) {
    assign[p[j] - 1] = static_cast<int>(j - 1);
    total += w(static_cast<Eigen::Index>(p[j] - 1), static_cast<Eigen::Index>(j - 1));
  }
  if (row_to_col) *row_to_col = std::move(assign);
  return total;
}

namespace detail {

/// Best assignment value over the rows/columns still free.
inline std::int64_t restricted_value(const CountMatrix& c, const std::vector<bool>& row_free,
                                     const std::vector<bool>& col_free) {
  std::vector<Eigen::Index> rows, cols;
  for (std::size_t i = 0; i < row_free.size(); ++i) {
    if (row_free[i]) rows.push_back(static_cast<Eigen::Index>(i));
  }
  for (std::size_t j = 0; j < col_free.size(); ++j) {
    if (col_free[j]) cols.push_back(static_cast<Eigen::Index>(j));
  }
  const auto n = static_cast<Eigen::Index>(std::max(rows.size(), cols.size()));
  CountMatrix sq = CountMatrix::Zero(n, n);
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = 0; b < cols.size(); ++b) sq(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = c(rows[a], cols[b]);
  }
  return max_assignment(sq);
}

}  // namespace detail

/// One-to-one cluster/label assignment maximizing matched frames. Among
/// optimal assignments the lexicographically smallest (cluster 0's label
/// first, "unmatched" ordered after every label) is returned; min(k, g)
/// clusters are always matched.
inline Mapping hungarian_match(const ConfusionMatrix& cm) {
  const auto k = static_cast<std::size_t>(cm.counts.rows());
  const auto g = static_cast<std::size_t>(cm.counts.cols());
  if ((cm.counts.array() < 0).any()) throw Error("hungarian_match: negative count");
  std::vector<bool> row_free(k, true), col_free(g, true);
  const std::int64_t best = detail::restricted_value(cm.counts, row_free, col_free);
  Mapping m;
  m.cluster_to_label.assign(k, -1);
  m.matched_frames = best;
  std::int64_t fixed = 0;
  std::size_t matched = 0;
  const std::size_t want = std::min(k, g);
  for (std::size_t i = 0; i < k; ++i) {
    row_free[i] = false;
    bool placed = false;
    for (std::size_t j = 0; j < g && !placed; ++j) {
      if (!col_free[j]) continue;
      col_free[j] = false;
      const auto val = cm.counts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (fixed + val + detail::restricted_value(cm.counts, row_free, col_free) == best) {
        m.cluster_to_label[i] = cm.labels[j];
        fixed += val;
        ++matched;
        placed = true;
      } else {
        col_free[j] = true;
      }
    }
    // Leaving cluster i unmatched is only allowed while enough clusters remain.
    if (!placed && matched + (k - i - 1) < want) throw Error("hungarian_match: internal tie-break failure");
  }
  return m;
}

/// Fraction of frames whose mapped prediction equals the ground truth.
/// `mappings` holds one mapping for all videos, or one per video. Masked
/// frames count as predicted background and are correct only on background
/// ground truth.
inline double mof(const LabelSeqs& pred, const LabelSeqs& gt, std::span<const Mapping> mappings,
                  const std::set<int>& background_ids = {}, const FrameMasks* masks = nullptr) {
  detail::check_aligned(pred, gt, {}, masks);
  if (mappings.size() != 1 && mappings.size() != pred.size()) throw Error("mof: need one mapping or one per video");
  std::size_t correct = 0, total = 0;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    const auto& m = mappings.size() == 1 ? mappings[0] : mappings[v];
    for (std::size_t i = 0; i < pred[v].size(); ++i) {
      ++total;
      if (detail::masked(masks, v, i)) {
        correct += background_ids.count(gt[v][i]) ? 1 : 0;
      } else {
        const int mapped = m(pred[v][i]);
        correct += mapped >= 0 && mapped == gt[v][i] ? 1 : 0;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

inline double mof(const LabelSeqs& pred, const LabelSeqs& gt, const Mapping& mapping) {
  return mof(pred, gt, std::span<const Mapping>(&mapping, 1));
}

struct F1Score {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Frame-level F1 after mapping. Frames predicted as background (masked) are
/// removed from the prediction set; ground-truth background frames are
/// removed from the recall denominator.
inline F1Score f1_frames(const LabelSeqs& pred, const LabelSeqs& gt, std::span<const Mapping> mappings,
                         const std::set<int>& background_ids = {}, const FrameMasks* masks = nullptr) {
  detail::check_aligned(pred, gt, {}, masks);
  if (mappings.size() != 1 && mappings.size() != pred.size()) throw Error("f1_frames: need one mapping or one per video");
  std::size_t correct = 0, predicted = 0, relevant = 0;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    const auto& m = mappings.size() == 1 ? mappings[0] : mappings[v];
    for (std::size_t i = 0; i < pred[v].size(); ++i) {
      const bool gt_bg = background_ids.count(gt[v][i]) > 0;
      relevant += gt_bg ? 0 : 1;
      if (detail::masked(masks, v, i)) continue;
      ++predicted;
      const int mapped = m(pred[v][i]);
      if (!gt_bg && mapped >= 0 && mapped == gt[v][i]) ++correct;
    }
  }
  F1Score s;
  s.precision = predicted ? static_cast<double>(correct) / static_cast<double>(predicted) : 0.0;
  s.recall = relevant ? static_cast<double>(correct) / static_cast<double>(relevant) : 0.0;
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline F1Score f1_frames(const LabelSeqs& pred, const LabelSeqs& gt, const Mapping& mapping,
                         const std::set<int>& background_ids = {}) {
  return f1_frames(pred, gt, std::span<const Mapping>(&mapping, 1), background_ids);
}

/// Masks the ceil(p/100 * total) frames with the lowest best-cluster score
/// across the activity (ties by global frame index).
inline FrameMasks assign_background(const ScoreMatrix& scores, double percentile) {
  if (!(percentile > 0.0 && percentile < 100.0)) throw Error("assign_background: percentile must lie in (0, 100)");
  struct Entry {
    double score;
    std::size_t video, frame;
  };
  std::vector<Entry> all;
  FrameMasks masks;
  for (std::size_t v = 0; v < scores.videos.size(); ++v) {
    masks.emplace_back(static_cast<std::size_t>(scores.videos[v].rows()), false);
    for (Eigen::Index i = 0; i < scores.videos[v].rows(); ++i) {
      all.push_back({scores.videos[v].row(i).maxCoeff(), v, static_cast<std::size_t>(i)});
    }
  }
  const auto count = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(all.size())));
  std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });
  for (std::size_t i = 0; i < std::min(count, all.size()); ++i) masks[all[i].video][all[i].frame] = true;
  return masks;
}

struct ClusterStats {
  int cluster = 0;
  int label = -1;
  double precision = 0.0;
  double recall = 0.0;
};

struct EvaluationResult {
  MatchScope scope = MatchScope::global;
  double mof = 0.0;
  F1Score f1;
  std::vector<Mapping> mappings;  // one (global) or one per video
  std::vector<ClusterStats> clusters;
};

/// Matching plus every metric for one activity.
inline EvaluationResult evaluate_activity(const LabelSeqs& pred, const LabelSeqs& gt, int k, MatchScope scope,
                                          const std::set<int>& background_ids = {}, const FrameMasks* masks = nullptr,
                                          std::span<const std::string> video_ids = {}) {
  if (pred.empty()) throw Error("evaluate: no videos");
  EvaluationResult r;
  r.scope = scope;
  for (const auto& cm : build_confusion(pred, gt, k, scope, background_ids, masks, video_ids)) {
    r.mappings.push_back(hungarian_match(cm));
  }
  r.mof = mof(pred, gt, r.mappings, background_ids, masks);
  r.f1 = f1_frames(pred, gt, r.mappings, background_ids, masks);

  // Per-cluster precision/recall pooled over videos.
  std::vector<std::size_t> predicted(static_cast<std::size_t>(k), 0), correct(static_cast<std::size_t>(k), 0),
      relevant(static_cast<std::size_t>(k), 0);
  for (std::size_t v = 0; v < pred.size(); ++v) {
    const auto& m = r.mappings.size() == 1 ? r.mappings[0] : r.mappings[v];
    for (std::size_t i = 0; i < pred[v].size(); ++i) {
      for (int c = 0; c < k; ++c) {
        if (m(c) >= 0 && gt[v][i] == m(c)) ++relevant[static_cast<std::size_t>(c)];
      }
      if (detail::masked(masks, v, i)) continue;
      const auto c = static_cast<std::size_t>(pred[v][i]);
      ++predicted[c];
      if (m(pred[v][i]) >= 0 && m(pred[v][i]) == gt[v][i]) ++correct[c];
    }
  }
  for (int c = 0; c < k; ++c) {
    const auto i = static_cast<std::size_t>(c);
    ClusterStats s;
    s.cluster = c;
    s.label = r.mappings.size() == 1 ? r.mappings[0](c) : -1;
    s.precision = predicted[i] ? static_cast<double>(correct[i]) / static_cast<double>(predicted[i]) : 0.0;
    s.recall = relevant[i] ? static_cast<double>(correct[i]) / static_cast<double>(relevant[i]) : 0.0;
    r.clusters.push_back(s);
  }
  return r;
}

}  // namespace tseg
