// Independent reference implementations used as test oracles.
#pragma once

#include "tseg/clustering.hpp"
#include "tseg/decoding.hpp"
#include "tseg/evaluation.hpp"
#include "tseg/neuralnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

using tseg::Matrix;
using tseg::Vector;

/// Plain loops, no Eigen expressions: y = act(W x + b) layer by layer.
inline std::vector<double> forward(const tseg::nn::Network& net, std::vector<double> x) {
  for (const auto& l : net.layers) {
    std::vector<double> y(l.out_dim());
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      double acc = l.bias[static_cast<Eigen::Index>(r)];
      for (std::size_t c = 0; c < l.in_dim(); ++c) acc += l.weights(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * x[c];
      switch (l.activation) {
        case tseg::nn::Activation::linear: y[r] = acc; break;
        case tseg::nn::Activation::leaky_relu: y[r] = acc > 0 ? acc : 0.01 * acc; break;
        case tseg::nn::Activation::sigmoid: y[r] = 1.0 / (1.0 + std::exp(-acc)); break;
      }
    }
    x = std::move(y);
  }
  return x;
}

/// log(w_c) + sum_j log N(x_j; mu_cj, var_cj), written out term by term.
inline double joint_log_density(const tseg::ClusterModel& m, int c, const std::vector<double>& x) {
  double s = std::log(m.weights[c]);
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double var = m.variances(c, static_cast<Eigen::Index>(j));
    const double d = x[j] - m.means(c, static_cast<Eigen::Index>(j));
    s += -0.5 * std::log(2.0 * M_PI * var) - d * d / (2.0 * var);
  }
  return s;
}

struct Labeling {
  std::vector<int> labels;  // ordering ranks per frame
  double score = -INFINITY;
  bool found = false;
};

/// Exhaustive search over every order-constrained labeling of the blocks.
/// Score accumulation and tie-break follow the documented decoder contract:
/// higher score, then lower end rank (relaxed mode), then earliest start of
/// the last segment, then of the one before, and so on.
inline Labeling viterbi(const Matrix& scores, const tseg::ClusterOrdering& ord, const tseg::LengthModel& lm, int gamma,
                        bool full) {
  const auto n = static_cast<std::size_t>(scores.rows());
  const auto k = ord.order.size();
  const auto g = static_cast<std::size_t>(gamma);
  const std::size_t blocks = (n + g - 1) / g;
  std::vector<std::vector<double>> bs(blocks, std::vector<double>(k, 0.0));
  for (std::size_t m = 0; m < blocks; ++m) {
    for (std::size_t r = 0; r < k; ++r) {
      double acc = 0.0;
      for (std::size_t f = m * g; f < std::min(n, (m + 1) * g); ++f) {
        acc += scores(static_cast<Eigen::Index>(f), ord.order[r]);
      }
      bs[m][r] = acc;
    }
  }

  Labeling best;
  std::vector<std::size_t> best_starts;
  std::size_t best_end = 0;
  // Enumerate segment counts (ranks 0..end) and all compositions of blocks.
  for (std::size_t end = full ? k - 1 : 0; end < k; ++end) {
    const std::size_t segs = end + 1;
    if (segs > blocks) break;
    // starts[0]=0 < starts[1] < ... < starts[segs-1] <= blocks-1: choose segs-1 cut points from 1..blocks-1.
    std::vector<bool> pick(blocks - 1, false);
    std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(segs - 1), true);
    do {
      std::vector<std::size_t> starts{0};
      for (std::size_t i = 0; i < pick.size(); ++i) {
        if (pick[i]) starts.push_back(i + 1);
      }
      double total = 0.0;
      for (std::size_t s = 0; s < segs; ++s) {
        const std::size_t a = starts[s], b = s + 1 < segs ? starts[s + 1] : blocks;
        double acc = 0.0;
        for (std::size_t t = a; t < b; ++t) acc += bs[t][s];
        total = total + (acc + lm.log_prob(s, b - a));
      }
      bool better = !best.found || total > best.score;
      if (!better && total == best.score) {
        if (end != best_end) {
          better = end < best_end;
        } else {
          for (std::size_t s = segs; s-- > 0;) {
            if (starts[s] != best_starts[s]) {
              better = starts[s] < best_starts[s];
              break;
            }
          }
        }
      }
      if (better) {
        best.found = true;
        best.score = total;
        best_starts = starts;
        best_end = end;
      }
    } while (std::prev_permutation(pick.begin(), pick.end()));
  }
  if (best.found) {
    best.labels.assign(n, 0);
    for (std::size_t s = 0; s < best_starts.size(); ++s) {
      const std::size_t a = best_starts[s] * g;
      const std::size_t b = s + 1 < best_starts.size() ? best_starts[s + 1] * g : n;
      for (std::size_t f = a; f < b; ++f) best.labels[f] = static_cast<int>(s);
    }
  }
  return best;
}

struct Assignment {
  std::int64_t value = -1;
  std::vector<int> cluster_to_label;  // -1 = unmatched
};

/// Every permutation of the zero-padded square matrix; the first optimum in
/// lexicographic order wins (padding columns sort after real labels).
inline Assignment assignment(const tseg::CountMatrix& c, const std::vector<int>& labels) {
  const auto k = static_cast<std::size_t>(c.rows()), g = static_cast<std::size_t>(c.cols());
  const std::size_t n = std::max(k, g);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Assignment best;
  do {
    std::int64_t v = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (perm[i] < g) v += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i]));
    }
    if (v > best.value) {
      best.value = v;
      best.cluster_to_label.assign(k, -1);
      for (std::size_t i = 0; i < k; ++i) {
        if (perm[i] < g) best.cluster_to_label[i] = labels[perm[i]];
      }
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline tseg::CountMatrix random_counts(std::mt19937_64& rng, int k, int g, int hi) {
  std::uniform_int_distribution<int> u(0, hi);
  tseg::CountMatrix c(k, g);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < g; ++j) c(i, j) = u(rng);
  }
  return c;
}

/// Small random ordering-constrained decode instance.
struct DecodeCase {
  Matrix scores;
  tseg::ClusterOrdering ordering;
  tseg::LengthModel lm;
  int gamma = 1;
  bool full = true;
};

inline DecodeCase random_decode_case(std::mt19937_64& rng, bool length_model) {
  std::uniform_int_distribution<int> kd(1, 4), gd(1, 2), coin(0, 3);
  DecodeCase c;
  const int k = kd(rng);
  c.gamma = gd(rng);
  std::uniform_int_distribution<int> nd(k * c.gamma, 12);
  const int n = nd(rng);
  c.full = coin(rng) != 0;
  c.scores = Matrix(n, k);
  std::normal_distribution<double> gauss(0.0, 2.0);
  std::uniform_int_distribution<int> small(-2, 2);
  const bool integral = coin(rng) == 0;  // many exact ties
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) c.scores(i, j) = integral ? small(rng) : gauss(rng);
  }
  c.ordering.order.resize(static_cast<std::size_t>(k));
  std::iota(c.ordering.order.begin(), c.ordering.order.end(), 0);
  std::shuffle(c.ordering.order.begin(), c.ordering.order.end(), rng);
  c.lm = tseg::fit_length_model(k, static_cast<std::size_t>(n), c.gamma, length_model);
  if (length_model) {
    std::uniform_real_distribution<double> mean(0.5, 6.0);
    for (auto& m : c.lm.means) m = mean(rng);
  }
  return c;
}

}  // namespace oracle
