// Diagonal-covariance Gaussian mixture over the embedded frames of one
// activity, per-frame cluster scores, and temporal ordering of clusters.
#pragma once

#include "tseg/core.hpp"
#include "tseg/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tseg {

struct GmmOptions {
  int max_iterations = 300;
  /// Stop when the mean per-frame log-likelihood improves by less than this.
  double tolerance = 1e-6;
  double variance_floor = 1e-6;
  /// Lloyd refinements after k-means++ seeding.
  int kmeans_iterations = 10;
  double collapse_weight = 1e-8;
};

struct ClusterModel {
  int k = 0;
  Vector weights;    // k
  Matrix means;      // k x d
  Matrix variances;  // k x d, floored
  /// Mean per-frame log-likelihood after each M-step.
  std::vector<double> loglik_trace;
  bool reseeded = false;

  std::size_t dim() const { return static_cast<std::size_t>(means.cols()); }
};

/// Per video, an N x k matrix of log weight_c + log N(frame; mean_c, var_c).
struct ScoreMatrix {
  std::vector<Matrix> videos;

  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& m : videos) n += static_cast<std::size_t>(m.rows());
    return n;
  }
};

struct ClusterOrdering {
  /// order[r] = cluster placed at rank r.
  std::vector<int> order;
  /// Mean relative timestamp per cluster (indexed by cluster, not rank).
  std::vector<double> mean_timestamps;
  /// Clusters with no argmax frames, timed by responsibility-weighted mean.
  std::vector<bool> used_fallback;

  std::vector<int> rank_of() const {
    std::vector<int> rank(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) rank[static_cast<std::size_t>(order[r])] = static_cast<int>(r);
    return rank;
  }
};

namespace detail {

inline constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

/// log N(x; mean, diag(var)) for one cluster.
inline double diag_log_density(const Eigen::Ref<const Eigen::RowVectorXd>& x, const Eigen::Ref<const Eigen::RowVectorXd>& mean,
                               const Eigen::Ref<const Eigen::RowVectorXd>& var) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double diff = x[j] - mean[j];
    acc += kLog2Pi + std::log(var[j]) + diff * diff / var[j];
  }
  return -0.5 * acc;
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double m = row.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((row.array() - m).exp().sum());
}

/// Joint log-probabilities (n x k) of every row under every component.
inline Matrix joint_log_prob(const FrameMatrix& x, const ClusterModel& m) {
  Matrix out(x.rows(), m.k);
  for (int c = 0; c < m.k; ++c) {
    const double lw = std::log(m.weights[c]);
    const Eigen::RowVectorXd mean = m.means.row(c);
    const Eigen::RowVectorXd var = m.variances.row(c);
    for (Eigen::Index i = 0; i < x.rows(); ++i) out(i, c) = lw + diag_log_density(x.row(i), mean, var);
  }
  return out;
}

/// k-means++ seeding followed by Lloyd refinement; returns hard assignments.
inline std::vector<int> kmeans_assign(const FrameMatrix& x, int k, int lloyd_iterations, std::mt19937_64& rng) {
  const auto n = x.rows();
  Matrix centers(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = x.row(pick(rng));
  Vector d2 = (x.rowwise() - Eigen::RowVectorXd(centers.row(0))).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      for (chosen = 0; chosen < n - 1; ++chosen) {
        r -= d2[chosen];
        if (r < 0.0) break;
      }
    } else {
      chosen = pick(rng);
    }
    centers.row(c) = x.row(chosen);
    d2 = d2.cwiseMin((x.rowwise() - Eigen::RowVectorXd(centers.row(c))).rowwise().squaredNorm());
  }

  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  auto reassign = [&] {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (x.row(i) - centers.row(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double d = (x.row(i) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[static_cast<std::size_t>(i)] != best) changed = true;
      assign[static_cast<std::size_t>(i)] = best;
    }
    return changed;
  };
  reassign();
  for (int it = 0; it < lloyd_iterations; ++it) {
    Matrix sums = Matrix::Zero(k, x.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
    if (!reassign()) break;
  }
  return assign;
}

/// M-step from responsibilities (n x k). Returns false on a collapsed component.
inline bool m_step(const FrameMatrix& x, const Matrix& resp, const GmmOptions& opt, ClusterModel& m) {
  const double n = static_cast<double>(x.rows());
  const Vector nk = resp.colwise().sum().transpose();
  m.weights = nk / n;
  m.means = Matrix(m.k, x.cols());
  m.variances = Matrix(m.k, x.cols());
  bool ok = true;
  for (int c = 0; c < m.k; ++c) {
    if (m.weights[c] < opt.collapse_weight) {
      ok = false;
      m.means.row(c).setZero();
      m.variances.row(c).setConstant(1.0);
      continue;
    }
    const Eigen::RowVectorXd mean = (resp.col(c).transpose() * x) / nk[c];
    Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) var += resp(i, c) * (x.row(i) - mean).array().square().matrix();
    var /= nk[c];
    m.means.row(c) = mean;
    m.variances.row(c) = var.cwiseMax(opt.variance_floor);
  }
  return ok;
}

}  // namespace detail

/// EM fit with k-means++ initialization. A collapsed component triggers one
/// re-seeded restart; a second collapse is an error.
inline ClusterModel fit_gmm(const FrameMatrix& x, int k, std::uint64_t seed, const GmmOptions& opt = {}) {
  if (k < 1) throw Error("fit_gmm: k must be >= 1");
  if (x.cols() < 1) throw Error("fit_gmm: embedding dimension must be >= 1");
  if (x.rows() < k) {
    throw Error("fit_gmm: k=" + std::to_string(k) + " exceeds the number of frames (" + std::to_string(x.rows()) + ")");
  }
  if (!x.allFinite()) throw Error("fit_gmm: non-finite embedding values");

  for (int attempt = 0; attempt < 2; ++attempt) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(attempt), 0x474du};
    std::mt19937_64 rng(seq);
    ClusterModel m;
    m.k = k;
    m.reseeded = attempt > 0;
    const auto assign = detail::kmeans_assign(x, k, opt.kmeans_iterations, rng);
    Matrix resp = Matrix::Zero(x.rows(), k);
    for (Eigen::Index i = 0; i < x.rows(); ++i) resp(i, assign[static_cast<std::size_t>(i)]) = 1.0;
    if (!detail::m_step(x, resp, opt, m)) continue;

    bool collapsed = false;
    for (int it = 0; it < opt.max_iterations; ++it) {
      const Matrix lp = detail::joint_log_prob(x, m);
      double ll = 0.0;
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double lse = detail::log_sum_exp(lp.row(i));
        ll += lse;
        resp.row(i) = (lp.row(i).array() - lse).exp();
      }
      ll /= static_cast<double>(x.rows());
      m.loglik_trace.push_back(ll);
      if (m.loglik_trace.size() >= 2 && ll - m.loglik_trace[m.loglik_trace.size() - 2] < opt.tolerance) break;
      if (it + 1 == opt.max_iterations) break;
      ClusterModel next = m;
      if (!detail::m_step(x, resp, opt, next)) {
        collapsed = true;
        break;
      }
      m = std::move(next);
    }
    if (!collapsed) return m;
  }
  throw Error("fit_gmm: a mixture component collapsed (weight < " + std::to_string(opt.collapse_weight) +
              ") after re-seeding; try a smaller k");
}

inline ClusterModel fit_gmm(const EmbeddingSet& emb, int k, std::uint64_t seed, const GmmOptions& opt = {}) {
  return fit_gmm(emb.stacked(), k, seed, opt);
}

inline Matrix score_rows(const ClusterModel& m, const FrameMatrix& rows) {
  if (static_cast<std::size_t>(rows.cols()) != m.dim()) {
    throw Error("score_frames: model dimension " + std::to_string(m.dim()) + " does not match embedding dimension " +
                std::to_string(rows.cols()));
  }
  return detail::joint_log_prob(rows, m);
}

inline ScoreMatrix score_frames(const ClusterModel& m, const EmbeddingSet& emb) {
  ScoreMatrix s;
  for (const auto& v : emb.videos) s.videos.push_back(score_rows(m, v.frames));
  return s;
}

/// Sorts clusters by the mean relative timestamp of their argmax frames
/// (ties by cluster index). Clusters that win no frame use the
/// responsibility-weighted mean timestamp instead.
inline ClusterOrdering order_clusters(const ClusterModel& m, const ScoreMatrix& scores,
                                      std::span<const Vector> timestamps) {
  if (scores.videos.size() != timestamps.size()) throw Error("order_clusters: scores/timestamps video count mismatch");
  const auto k = static_cast<std::size_t>(m.k);
  std::vector<double> hard_sum(k, 0.0), soft_sum(k, 0.0), soft_w(k, 0.0);
  std::vector<std::size_t> hard_n(k, 0);
  for (std::size_t v = 0; v < scores.videos.size(); ++v) {
    const auto& s = scores.videos[v];
    if (s.rows() != timestamps[v].size() || static_cast<std::size_t>(s.cols()) != k) {
      throw Error("order_clusters: score rows do not align with timestamps in video " + std::to_string(v));
    }
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      Eigen::Index best;
      s.row(i).maxCoeff(&best);  // first maximum on ties
      hard_sum[static_cast<std::size_t>(best)] += timestamps[v][i];
      ++hard_n[static_cast<std::size_t>(best)];
      const double lse = detail::log_sum_exp(s.row(i));
      for (std::size_t c = 0; c < k; ++c) {
        const double r = std::exp(s(i, static_cast<Eigen::Index>(c)) - lse);
        soft_sum[c] += r * timestamps[v][i];
        soft_w[c] += r;
      }
    }
  }
  ClusterOrdering out;
  out.mean_timestamps.resize(k);
  out.used_fallback.assign(k, false);
  for (std::size_t c = 0; c < k; ++c) {
    if (hard_n[c] > 0) {
      out.mean_timestamps[c] = hard_sum[c] / static_cast<double>(hard_n[c]);
    } else {
      out.used_fallback[c] = true;
      out.mean_timestamps[c] = soft_w[c] > 0.0 ? soft_sum[c] / soft_w[c] : 0.0;
    }
  }
  out.order.resize(k);
  std::iota(out.order.begin(), out.order.end(), 0);
  std::stable_sort(out.order.begin(), out.order.end(), [&](int a, int b) {
    return out.mean_timestamps[static_cast<std::size_t>(a)] < out.mean_timestamps[static_cast<std::size_t>(b)];
  });
  return out;
}

inline ClusterOrdering order_clusters(const ClusterModel& m, const ScoreMatrix& scores, const EmbeddingSet& emb) {
  std::vector<Vector> ts;
  for (const auto& v : emb.videos) ts.push_back(v.rel_timestamps);
  return order_clusters(m, scores, ts);
}

// ---------------------------------------------------------------------------
// Persistence: "TSGM", u32 version, u32 k, u32 d, float64 weights, means,
// variances (row-major), little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kGmmMagic = "TSGM";
inline constexpr std::uint32_t kGmmVersion = 1;

namespace detail {

inline void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  put_u32(os, static_cast<std::uint32_t>(bits));
  put_u32(os, static_cast<std::uint32_t>(bits >> 32));
}

inline bool get_f64(std::istream& is, double& v) {
  std::uint32_t lo, hi;
  if (!get_u32(is, lo) || !get_u32(is, hi)) return false;
  v = std::bit_cast<double>(static_cast<std::uint64_t>(lo) | (static_cast<std::uint64_t>(hi) << 32));
  return true;
}

}  // namespace detail

inline void save_cluster_model(const std::filesystem::path& path, const ClusterModel& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kGmmMagic.data(), 4);
  detail::put_u32(out, kGmmVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.k));
  detail::put_u32(out, static_cast<std::uint32_t>(m.dim()));
  for (int c = 0; c < m.k; ++c) detail::put_f64(out, m.weights[c]);
  for (const Matrix* mat : {&m.means, &m.variances}) {
    for (Eigen::Index r = 0; r < mat->rows(); ++r) {
      for (Eigen::Index c = 0; c < mat->cols(); ++c) detail::put_f64(out, (*mat)(r, c));
    }
  }
}

inline ClusterModel load_cluster_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  if (!detail::has_magic(in, kGmmMagic)) throw ParseError(path.string() + ": not a TSGM file");
  std::uint32_t version, k, d;
  if (!detail::get_u32(in, version) || !detail::get_u32(in, k) || !detail::get_u32(in, d)) {
    throw ParseError(path.string() + ": truncated header");
  }
  if (version != kGmmVersion) throw ParseError(path.string() + ": unsupported version");
  ClusterModel m;
  m.k = static_cast<int>(k);
  m.weights = Vector(k);
  m.means = Matrix(k, d);
  m.variances = Matrix(k, d);
  auto get = [&](double& v) {
    if (!detail::get_f64(in, v)) throw ParseError(path.string() + ": truncated body");
  };
  for (std::uint32_t c = 0; c < k; ++c) get(m.weights[c]);
  for (Matrix* mat : {&m.means, &m.variances}) {
    for (Eigen::Index r = 0; r < mat->rows(); ++r) {
      for (Eigen::Index c = 0; c < mat->cols(); ++c) get((*mat)(r, c));
    }
  }
  return m;
}

/// Debug export: one row per frame, "video,frame,score_0,...".
inline void save_scores_csv(const std::filesystem::path& path, const ScoreMatrix& s,
                            std::span<const std::string> video_ids) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t v = 0; v < s.videos.size(); ++v) {
    for (Eigen::Index i = 0; i < s.videos[v].rows(); ++i) {
      out << (v < video_ids.size() ? video_ids[v] : std::to_string(v)) << ',' << i;
      for (Eigen::Index c = 0; c < s.videos[v].cols(); ++c) out << ',' << detail::format_double(s.videos[v](i, c));
      out << '\n';
    }
  }
}

}  // namespace tseg
