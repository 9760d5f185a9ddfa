// Seeded synthetic activities with known sub-activity structure.
#pragma once

#include "tseg/core.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace tseg {

struct SubActivitySpec {
  Vector mean;  // D
  double noise_std = 1.0;
  int duration_mean = 40;
  int duration_jitter = 0;
};

enum class OrderingMode { strict, weak };

struct SynthSpec {
  std::string activity = "synthetic";
  int num_videos = 10;
  int dim = 16;
  std::vector<SubActivitySpec> sub_activities;
  /// Per-frame additive drift along a fixed unit direction.
  double drift = 0.0;
  OrderingMode ordering = OrderingMode::strict;
  /// Weak mode: probability of swapping each adjacent pair of sub-activities.
  double swap_probability = 0.0;
  std::uint64_t seed = 0;

  int k_true() const { return static_cast<int>(sub_activities.size()); }

  void validate(int step_s = 0) const {
    if (num_videos < 1) throw Error("SynthSpec: num_videos must be >= 1");
    if (dim < 1) throw Error("SynthSpec: dim must be >= 1");
    if (sub_activities.empty()) throw Error("SynthSpec: need at least one sub-activity");
    for (std::size_t i = 0; i < sub_activities.size(); ++i) {
      const auto& a = sub_activities[i];
      if (a.mean.size() != dim) {
        throw Error("SynthSpec: sub-activity " + std::to_string(i) + " mean has " + std::to_string(a.mean.size()) +
                    " dims, expected " + std::to_string(dim));
      }
      if (!(a.noise_std >= 0.0)) throw Error("SynthSpec: noise_std must be >= 0");
      if (a.duration_jitter < 0 || a.duration_mean - a.duration_jitter < step_s + 2) {
        throw Error("SynthSpec: sub-activity " + std::to_string(i) + " can be shorter than s+2 frames");
      }
    }
    if (!(swap_probability >= 0.0 && swap_probability <= 1.0)) throw Error("SynthSpec: swap_probability outside [0,1]");
  }
};

/// Spec with k sub-activities whose means are Gaussian with std `separation`
/// and shared noise, duration and jitter.
inline SynthSpec make_synth_spec(int num_videos, int k, int dim, int duration_mean, int duration_jitter,
                                 double noise_std, double separation, double drift, std::uint64_t seed) {
  SynthSpec spec;
  spec.num_videos = num_videos;
  spec.dim = dim;
  spec.drift = drift;
  spec.seed = seed;
  std::mt19937_64 rng(seed ^ 0x5eedu);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int c = 0; c < k; ++c) {
    SubActivitySpec a;
    a.mean = Vector(dim);
    for (int j = 0; j < dim; ++j) a.mean[j] = separation * gauss(rng);
    a.noise_std = noise_std;
    a.duration_mean = duration_mean;
    a.duration_jitter = duration_jitter;
    spec.sub_activities.push_back(std::move(a));
  }
  return spec;
}

/// Each video concatenates the sub-activities (adjacent pairs possibly
/// swapped in weak mode), emitting mean + noise + drift * frame_index * u.
inline ActivityDataset generate(const SynthSpec& spec) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), 0x6e6eu};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Vector direction(spec.dim);
  for (int j = 0; j < spec.dim; ++j) direction[j] = gauss(rng);
  direction /= direction.norm();

  ActivityDataset ds;
  ds.activity = spec.activity;
  ds.labels.emplace();
  for (int c = 0; c < spec.k_true(); ++c) ds.label_names[c] = "step" + std::to_string(c);

  const int width = std::max(3, static_cast<int>(std::to_string(spec.num_videos - 1).size()));
  for (int v = 0; v < spec.num_videos; ++v) {
    std::vector<int> order(static_cast<std::size_t>(spec.k_true()));
    for (int c = 0; c < spec.k_true(); ++c) order[static_cast<std::size_t>(c)] = c;
    if (spec.ordering == OrderingMode::weak) {
      for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        if (unit(rng) < spec.swap_probability) {
          std::swap(order[i], order[i + 1]);
          ++i;
        }
      }
    }
    std::vector<int> labels;
    for (int c : order) {
      const auto& a = spec.sub_activities[static_cast<std::size_t>(c)];
      std::uniform_int_distribution<int> len(a.duration_mean - a.duration_jitter, a.duration_mean + a.duration_jitter);
      labels.insert(labels.end(), static_cast<std::size_t>(len(rng)), c);
    }
    FrameMatrix frames(static_cast<Eigen::Index>(labels.size()), spec.dim);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto& a = spec.sub_activities[static_cast<std::size_t>(labels[i])];
      for (int j = 0; j < spec.dim; ++j) {
        frames(static_cast<Eigen::Index>(i), j) =
            a.mean[j] + a.noise_std * gauss(rng) + spec.drift * static_cast<double>(i) * direction[j];
      }
    }
    std::string id = std::to_string(v);
    id = "video_" + std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(id.size(), width), '0') + id;
    ds.videos.push_back(FeatureSequence::from_frames(std::move(id), std::move(frames)));
    ds.labels->push_back(std::move(labels));
  }
  ds.validate();
  return ds;
}

}  // namespace tseg
