// Loss equations and the two-stage training schedule.
//
// Stage 1 trains the U-Net on future-frame prediction and the MLP on
// timestamp regression, independently. Stage 2 alternates blocks: the U-Net
// on prediction + temporal reconstruction with the MLP frozen, then the MLP
// on its real-frame loss divided by the temporal quality of generated frames
// with the U-Net frozen.
#pragma once

#include "tseg/core.hpp"
#include "tseg/models.hpp"
#include "tseg/neuralnet.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tseg {

inline constexpr double kTQualFloor = 1e-3;

// ---------------------------------------------------------------------------
// Losses. All are means over the batch, so they do not depend on its order.
// ---------------------------------------------------------------------------

/// Mean over frames of the per-frame mean squared error over dimensions.
inline double loss_vis(std::span<const Vector> pred, std::span<const Vector> target) {
  if (pred.empty()) throw Error("loss_vis: empty batch");
  if (pred.size() != target.size()) throw Error("loss_vis: prediction/target count mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != target[i].size() || pred[i].size() == 0) throw Error("loss_vis: frame shape mismatch");
    sum += (pred[i] - target[i]).squaredNorm() / static_cast<double>(pred[i].size());
  }
  return sum / static_cast<double>(pred.size());
}

namespace detail {

inline double mean_squared_diff(std::span<const double> a, std::span<const double> b, const char* who) {
  if (a.empty()) throw Error(std::string(who) + ": empty batch");
  if (a.size() != b.size()) throw Error(std::string(who) + ": length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
  return sum / static_cast<double>(a.size());
}

}  // namespace detail

/// Timestamp regression error on real frames.
inline double loss_temp(std::span<const double> preds, std::span<const double> targets) {
  return detail::mean_squared_diff(preds, targets, "loss_temp");
}

/// Discrepancy between the MLP's timestamps for real and predicted future frames.
inline double loss_trec(std::span<const double> t_real, std::span<const double> t_pred) {
  return detail::mean_squared_diff(t_real, t_pred, "loss_trec");
}

inline double loss_joint(double lv, double lt, double trec_weight = 1.0) { return lv + trec_weight * lt; }

struct TQual {
  double raw = 1.0;
  double clamped = 1.0;
};

/// 1 - MSE between timestamps predicted for generated frames and the true
/// relative timestamps (t+s)/N; the clamped value is floored at 1e-3.
inline TQual tqual(std::span<const double> t_pred, std::span<const double> targets) {
  const double raw = 1.0 - detail::mean_squared_diff(t_pred, targets, "tqual");
  return {raw, std::max(raw, kTQualFloor)};
}

inline double loss_mlp(double lreal, double tq) {
  if (!(tq >= kTQualFloor)) throw Error("loss_mlp: temporal quality " + std::to_string(tq) + " below floor");
  return lreal / tq;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct LossSnapshot {
  double loss_vis = 0.0;
  double loss_temp = 0.0;
  double loss_trec = 0.0;
  double loss_joint = 0.0;
  double tqual_raw = 0.0;
  double tqual = 0.0;
  double loss_mlp = 0.0;

  bool operator==(const LossSnapshot&) const = default;
};

struct EpochRecord {
  int epoch = 0;          // running index across the run
  std::string stage;      // init | stage1 | stage2
  std::string component;  // none | visual | temporal | start
  LossSnapshot losses;
  double seconds = 0.0;
};

struct ScheduleBlock {
  std::string component;  // visual | temporal
  int epochs = 0;
  bool operator==(const ScheduleBlock&) const = default;
};

struct TrainingReport {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::vector<ScheduleBlock> stage2_schedule;

  const EpochRecord* find(std::string_view stage, std::string_view component) const {
    for (const auto& e : epochs) {
      if (e.stage == stage && e.component == component) return &e;
    }
    return nullptr;
  }
  const EpochRecord* last_of_stage(std::string_view stage) const {
    for (auto it = epochs.rbegin(); it != epochs.rend(); ++it) {
      if (it->stage == stage) return &*it;
    }
    return nullptr;
  }

  /// Realized (component, epochs) runs of one stage, from the epoch records.
  std::vector<ScheduleBlock> realized(std::string_view stage) const {
    std::vector<ScheduleBlock> out;
    for (const auto& e : epochs) {
      if (e.stage != stage || (e.component != "visual" && e.component != "temporal")) continue;
      if (!out.empty() && out.back().component == e.component) {
        ++out.back().epochs;
      } else {
        out.push_back({e.component, 1});
      }
    }
    return out;
  }

  void append(const TrainingReport& o) {
    for (auto e : o.epochs) {
      e.epoch = static_cast<int>(epochs.size());
      epochs.push_back(std::move(e));
    }
    if (!o.stage2_schedule.empty()) stage2_schedule = o.stage2_schedule;
  }
};

/// CSV: epoch,stage,component,loss columns. Timing goes in a separate file.
inline void save_training_report(const std::filesystem::path& path, const TrainingReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,stage,component,loss_vis,loss_temp,loss_trec,loss_joint,tqual_raw,tqual,loss_mlp\n";
  for (const auto& e : r.epochs) {
    const auto& l = e.losses;
    out << e.epoch << ',' << e.stage << ',' << e.component;
    for (double v : {l.loss_vis, l.loss_temp, l.loss_trec, l.loss_joint, l.tqual_raw, l.tqual, l.loss_mlp}) {
      out << ',' << detail::format_double(v);
    }
    out << '\n';
  }
}

inline void save_training_timing(const std::filesystem::path& path, const TrainingReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,stage,component,seconds\n";
  for (const auto& e : r.epochs) out << e.epoch << ',' << e.stage << ',' << e.component << ',' << e.seconds << '\n';
}

// ---------------------------------------------------------------------------
// Batch evaluation of every loss over an activity.
// ---------------------------------------------------------------------------

inline LossSnapshot evaluate_losses(const VisualModel& vm, const TemporalModel& tm, const ActivityDataset& ds,
                                    int step_s, double trec_weight = 1.0) {
  std::vector<Vector> preds, targets;
  std::vector<double> t_real_frames, t_targets, t_real_future, t_pred_future, future_targets;
  for (const auto& v : ds.videos) {
    const auto n = v.num_frames();
    for (std::size_t t = 0; t < n; ++t) {
      const Vector f = v.frame(t);
      t_real_frames.push_back(temporal_forward(tm, f));
      t_targets.push_back(v.rel_timestamps[static_cast<Eigen::Index>(t)]);
      if (t + static_cast<std::size_t>(step_s) < n) {
        const auto future = t + static_cast<std::size_t>(step_s);
        Vector pred = visual_forward(vm, f).prediction;
        Vector target = v.frame(future);
        t_pred_future.push_back(temporal_forward(tm, pred));
        t_real_future.push_back(temporal_forward(tm, target));
        future_targets.push_back(v.rel_timestamps[static_cast<Eigen::Index>(future)]);
        preds.push_back(std::move(pred));
        targets.push_back(std::move(target));
      }
    }
  }
  LossSnapshot s;
  s.loss_vis = loss_vis(preds, targets);
  s.loss_temp = loss_temp(t_real_frames, t_targets);
  s.loss_trec = loss_trec(t_real_future, t_pred_future);
  s.loss_joint = loss_joint(s.loss_vis, s.loss_trec, trec_weight);
  const auto q = tqual(t_pred_future, future_targets);
  s.tqual_raw = q.raw;
  s.tqual = q.clamped;
  s.loss_mlp = loss_mlp(s.loss_temp, s.tqual);
  return s;
}

// ---------------------------------------------------------------------------
// Schedules and epochs
// ---------------------------------------------------------------------------

/// Stage-2 alternation. By default the total counts epochs and the final
/// block is truncated (60 -> visual 40, temporal 5, visual 15); with
/// stage2_count_cycles it counts visual+temporal cycles.
inline std::vector<ScheduleBlock> build_stage2_schedule(const PipelineConfig& cfg) {
  std::vector<ScheduleBlock> out;
  auto push = [&](const char* c, int n) {
    if (n <= 0) return;
    if (!out.empty() && out.back().component == c) {
      out.back().epochs += n;
    } else {
      out.push_back({c, n});
    }
  };
  if (cfg.stage2_count_cycles) {
    for (int c = 0; c < cfg.stage2_total_epochs; ++c) {
      push("visual", cfg.stage2_visual_block);
      push("temporal", cfg.stage2_temporal_block);
    }
    return out;
  }
  int remaining = cfg.stage2_total_epochs;
  if (remaining > 0 && cfg.stage2_visual_block + cfg.stage2_temporal_block <= 0) {
    throw Error("stage-2 block lengths are both zero");
  }
  while (remaining > 0) {
    const int v = std::min(cfg.stage2_visual_block, remaining);
    push("visual", v);
    remaining -= v;
    const int t = std::min(cfg.stage2_temporal_block, remaining);
    push("temporal", t);
    remaining -= t;
  }
  return out;
}

namespace detail {

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x7453u};
  return std::mt19937_64(seq);
}

inline void check_lengths(const ActivityDataset& ds, int step_s) {
  std::vector<std::string> short_videos;
  for (const auto& v : ds.videos) {
    if (v.num_frames() < static_cast<std::size_t>(step_s) + 2) short_videos.push_back(v.video_id);
  }
  if (!short_videos.empty()) {
    throw Error("videos shorter than s+2=" + std::to_string(step_s + 2) + " frames: " + concat_ids(short_videos));
  }
}

inline std::vector<std::size_t> shuffled_videos(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace detail

/// Per-frame visual objective |y - f_{t+s}|^2 / D, plus, with a frozen
/// temporal model, w * (T(f_{t+s}) - T(y))^2 differentiated through that
/// model. Accumulates parameter gradients into `tape` when given.
inline double visual_frame_loss(const VisualModel& vm, const Vector& frame, const Vector& target,
                                const TemporalModel* frozen_tm = nullptr, double trec_weight = 1.0,
                                nn::GradientTape* tape = nullptr) {
  VisualTrace trace;
  const auto out = visual_forward(vm, frame, tape ? &trace : nullptr);
  const Vector diff = out.prediction - target;
  const double d = static_cast<double>(frame.size());
  double loss = diff.squaredNorm() / d;
  Vector grad = (2.0 / d) * diff;
  if (frozen_tm) {
    nn::ForwardCache mlp_cache;
    const double t_real = temporal_forward(*frozen_tm, target);
    const double t_pred = temporal_forward(*frozen_tm, out.prediction, tape ? &mlp_cache : nullptr);
    loss += trec_weight * (t_real - t_pred) * (t_real - t_pred);
    if (tape) {
      const Vector dt_dy = nn::input_gradient(frozen_tm->net, mlp_cache, Vector::Constant(1, 1.0));
      grad += trec_weight * (-2.0 * (t_real - t_pred)) * dt_dy;
    }
  }
  if (tape) visual_backward(vm, trace, grad, *tape);
  return loss;
}

/// One epoch of per-frame future-frame prediction updates. With a temporal
/// model, the temporal reconstruction term is added (stage 2).
inline void visual_epoch(VisualModel& vm, nn::AdamState& adam, const ActivityDataset& ds,
                         std::span<const std::size_t> order, const TemporalModel* frozen_tm = nullptr,
                         double trec_weight = 1.0) {
  const auto s = static_cast<std::size_t>(vm.step_s);
  auto tape = nn::GradientTape::zeros_like(vm.net);
  for (const auto vi : order) {
    const auto& v = ds.videos[vi];
    const auto n = v.num_frames();
    for (std::size_t t = 0; t + s < n; ++t) {
      tape.scale(0.0);
      visual_frame_loss(vm, v.frame(t), v.frame(t + s), frozen_tm, trec_weight, &tape);
      nn::adam_step(vm.net, tape, adam);
    }
  }
}

/// One epoch of per-frame timestamp regression on real frames.
inline void temporal_epoch(TemporalModel& tm, nn::AdamState& adam, const ActivityDataset& ds,
                           std::span<const std::size_t> order) {
  nn::ForwardCache cache;
  for (const auto vi : order) {
    const auto& v = ds.videos[vi];
    for (std::size_t t = 0; t < v.num_frames(); ++t) {
      const double pred = temporal_forward(tm, v.frame(t), &cache);
      const double target = v.rel_timestamps[static_cast<Eigen::Index>(t)];
      const auto tape = nn::backward(tm.net, cache, Vector::Constant(1, 2.0 * (pred - target)));
      nn::adam_step(tm.net, tape, adam);
    }
  }
}

/// Discriminator objective Loss_temp / TQual split into per-frame terms.
/// With l_t the real-frame error and e_t the generated-frame error,
///   g_t = grad(l_t) / Q + (L / Q^2) * (N_all / N_valid) * grad(e_t)
/// and the mean of g_t over all frames is the gradient of L / Q. When Q is
/// clamped at its floor the second term vanishes.
struct DiscriminatorBatch {
  std::vector<std::vector<Vector>> generated;  // per video, frames 0..N-s-1
  double loss_temp = 0.0;
  TQual quality;
  double real_scale = 1.0;
  double generated_scale = 0.0;
  std::size_t frames = 0;

  double ratio() const { return loss_mlp(loss_temp, quality.clamped); }
};

inline DiscriminatorBatch discriminator_batch(const TemporalModel& tm, const VisualModel& frozen_vm,
                                              const ActivityDataset& ds) {
  const auto s = static_cast<std::size_t>(frozen_vm.step_s);
  DiscriminatorBatch b;
  b.generated.resize(ds.videos.size());
  std::vector<double> real_pred, real_target, gen_pred, gen_target;
  for (std::size_t vi = 0; vi < ds.videos.size(); ++vi) {
    const auto& v = ds.videos[vi];
    for (std::size_t t = 0; t < v.num_frames(); ++t) {
      const Vector f = v.frame(t);
      real_pred.push_back(temporal_forward(tm, f));
      real_target.push_back(v.rel_timestamps[static_cast<Eigen::Index>(t)]);
      if (t + s < v.num_frames()) {
        b.generated[vi].push_back(visual_forward(frozen_vm, f).prediction);
        gen_pred.push_back(temporal_forward(tm, b.generated[vi].back()));
        gen_target.push_back(v.rel_timestamps[static_cast<Eigen::Index>(t + s)]);
      }
    }
  }
  b.frames = real_pred.size();
  b.loss_temp = loss_temp(real_pred, real_target);
  b.quality = tqual(gen_pred, gen_target);
  b.real_scale = 1.0 / b.quality.clamped;
  b.generated_scale = b.quality.raw < kTQualFloor
                          ? 0.0
                          : b.loss_temp / (b.quality.clamped * b.quality.clamped) * static_cast<double>(real_pred.size()) /
                                static_cast<double>(gen_pred.size());
  return b;
}

/// Accumulates g_t for frame t of video vi into `tape`.
inline void discriminator_frame_gradient(const TemporalModel& tm, const DiscriminatorBatch& b,
                                         const ActivityDataset& ds, std::size_t vi, std::size_t t,
                                         nn::GradientTape& tape) {
  const auto& v = ds.videos[vi];
  nn::ForwardCache cache;
  const double pred = temporal_forward(tm, v.frame(t), &cache);
  const double target = v.rel_timestamps[static_cast<Eigen::Index>(t)];
  nn::backward_into(tm.net, cache, Vector::Constant(1, b.real_scale * 2.0 * (pred - target)), tape);
  if (b.generated_scale != 0.0 && t < b.generated[vi].size()) {
    const auto s = v.num_frames() - b.generated[vi].size();
    const double gp = temporal_forward(tm, b.generated[vi][t], &cache);
    const double gt = v.rel_timestamps[static_cast<Eigen::Index>(t + s)];
    nn::backward_into(tm.net, cache, Vector::Constant(1, b.generated_scale * 2.0 * (gp - gt)), tape);
  }
}

/// One epoch of the discriminator objective with the visual model frozen;
/// the batch terms L and Q are fixed at epoch start.
inline void discriminator_epoch(TemporalModel& tm, nn::AdamState& adam, const VisualModel& frozen_vm,
                                const ActivityDataset& ds, std::span<const std::size_t> order) {
  const auto batch = discriminator_batch(tm, frozen_vm, ds);
  auto tape = nn::GradientTape::zeros_like(tm.net);
  for (const auto vi : order) {
    for (std::size_t t = 0; t < ds.videos[vi].num_frames(); ++t) {
      tape.scale(0.0);
      discriminator_frame_gradient(tm, batch, ds, vi, t, tape);
      nn::adam_step(tm.net, tape, adam);
    }
  }
}

struct TrainedModels {
  VisualModel visual;
  TemporalModel temporal;
  TrainingReport report;
};

namespace detail {

inline EpochRecord record(const TrainedModels& m, const ActivityDataset& ds, const PipelineConfig& cfg,
                          const char* stage, const char* component, double seconds) {
  EpochRecord r;
  r.stage = stage;
  r.component = component;
  r.losses = evaluate_losses(m.visual, m.temporal, ds, cfg.step_s, cfg.trec_weight);
  r.seconds = seconds;
  return r;
}

inline void push_record(TrainingReport& report, EpochRecord r) {
  r.epoch = static_cast<int>(report.epochs.size());
  report.epochs.push_back(std::move(r));
}

}  // namespace detail

/// Initializes both models from the seed and trains them independently.
inline TrainedModels train_stage1(const ActivityDataset& ds, const PipelineConfig& cfg, std::uint64_t seed) {
  ds.validate();
  cfg.validate();
  detail::check_lengths(ds, cfg.step_s);
  auto init_rng = detail::make_rng(seed, 1);
  auto shuffle_rng = detail::make_rng(seed, 2);
  TrainedModels m{VisualModel::create(ds.dim(), cfg.resolved_embed_dim(ds.dim()), cfg.step_s, init_rng),
                  TemporalModel::create(ds.dim(), init_rng),
                  {}};
  m.report.seed = seed;
  detail::push_record(m.report, detail::record(m, ds, cfg, "init", "none", 0.0));

  auto adam_v = nn::AdamState::for_network(m.visual.net, cfg.learning_rate);
  for (int e = 0; e < cfg.stage1_visual_epochs; ++e) {
    const auto t0 = detail::Clock::now();
    const auto order = detail::shuffled_videos(ds.videos.size(), shuffle_rng);
    visual_epoch(m.visual, adam_v, ds, order);
    detail::push_record(m.report, detail::record(m, ds, cfg, "stage1", "visual", detail::seconds_since(t0)));
  }
  auto adam_t = nn::AdamState::for_network(m.temporal.net, cfg.learning_rate);
  for (int e = 0; e < cfg.stage1_temporal_epochs; ++e) {
    const auto t0 = detail::Clock::now();
    const auto order = detail::shuffled_videos(ds.videos.size(), shuffle_rng);
    temporal_epoch(m.temporal, adam_t, ds, order);
    detail::push_record(m.report, detail::record(m, ds, cfg, "stage1", "temporal", detail::seconds_since(t0)));
  }
  return m;
}

/// Alternating joint training starting from stage-1 models.
inline TrainedModels train_stage2(TrainedModels m, const ActivityDataset& ds, const PipelineConfig& cfg,
                                  std::uint64_t seed) {
  ds.validate();
  cfg.validate();
  detail::check_lengths(ds, cfg.step_s);
  if (m.visual.input_dim() != ds.dim() || m.temporal.input_dim() != ds.dim()) {
    throw Error("train_stage2: model dimensions do not match the dataset");
  }
  if (m.visual.step_s != cfg.step_s) throw Error("train_stage2: visual model was trained with a different step");
  auto shuffle_rng = detail::make_rng(seed, 3);
  TrainingReport report;
  report.seed = seed;
  report.stage2_schedule = build_stage2_schedule(cfg);
  detail::push_record(report, detail::record(m, ds, cfg, "stage2", "start", 0.0));

  auto adam_v = nn::AdamState::for_network(m.visual.net, cfg.learning_rate);
  auto adam_t = nn::AdamState::for_network(m.temporal.net, cfg.learning_rate);
  for (const auto& block : report.stage2_schedule) {
    for (int e = 0; e < block.epochs; ++e) {
      const auto t0 = detail::Clock::now();
      const auto order = detail::shuffled_videos(ds.videos.size(), shuffle_rng);
      if (block.component == "visual") {
        visual_epoch(m.visual, adam_v, ds, order, &m.temporal, cfg.trec_weight);
      } else {
        discriminator_epoch(m.temporal, adam_t, m.visual, ds, order);
      }
      detail::push_record(report,
                          detail::record(m, ds, cfg, "stage2", block.component.c_str(), detail::seconds_since(t0)));
    }
  }
  m.report.append(report);
  return m;
}

}  // namespace tseg
