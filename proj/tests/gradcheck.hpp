// Finite-difference checks for the two models, shared by unit and acceptance tests.
#pragma once

#include "tseg/models.hpp"
#include "tseg/training.hpp"

#include <random>

namespace gradcheck {

using namespace tseg;

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

/// Moves leaky-ReLU pre-activations of the U-Net at least `margin` away from zero.
inline void nudge_visual(VisualModel& m, const Vector& frame, double margin = 1e-2) {
  for (int pass = 0; pass < 64; ++pass) {
    VisualTrace trace;
    visual_forward(m, frame, &trace);
    bool moved = false;
    for (std::size_t i = 0; i < m.net.layers.size() && !moved; ++i) {
      auto& l = m.net.layers[i];
      if (l.activation != nn::Activation::leaky_relu) continue;
      const auto& pre = trace.layers[i].pre;
      for (Eigen::Index j = 0; j < pre.size(); ++j) {
        if (std::abs(pre[j]) < margin) {
          l.bias[j] += (pre[j] >= 0.0 ? 2.0 : -2.0) * margin;
          moved = true;
        }
      }
    }
    if (!moved) return;
  }
}

inline std::vector<nn::LayerGrad> tape_layers(const nn::GradientTape& t) { return t.layers; }

/// Max relative error of the U-Net gradient for
///   0.5 |y - target|^2 + w . x   (y prediction, x embedding).
inline double visual_error(VisualModel m, const Vector& frame, const Vector& target, const Vector& w) {
  nudge_visual(m, frame);
  VisualTrace trace;
  const auto out = visual_forward(m, frame, &trace);
  auto tape = nn::GradientTape::zeros_like(m.net);
  const Vector pred_grad = out.prediction - target;
  visual_backward(m, trace, pred_grad, tape, &w);
  VisualModel probe = m;
  auto loss = [&] {
    const auto o = visual_forward(probe, frame);
    return 0.5 * (o.prediction - target).squaredNorm() + w.dot(o.embedding);
  };
  return nn::finite_diff_params(probe.net.layers, tape.layers, loss);
}

/// Max relative error of the stage-2 visual objective (prediction error plus
/// temporal reconstruction through a frozen MLP).
inline double joint_error(VisualModel vm, TemporalModel tm, const Vector& frame, const Vector& target, double w) {
  nudge_visual(vm, frame);
  // The frozen MLP sees the prediction; keep it off its kinks too.
  nn::nudge_away_from_kinks(tm.net, visual_forward(vm, frame).prediction);
  auto tape = nn::GradientTape::zeros_like(vm.net);
  visual_frame_loss(vm, frame, target, &tm, w, &tape);
  VisualModel probe = vm;
  return nn::finite_diff_params(probe.net.layers, tape.layers,
                                [&] { return visual_frame_loss(probe, frame, target, &tm, w); });
}

/// Max relative error of the MLP timestamp regression gradient.
inline double temporal_error(TemporalModel m, const Vector& frame, double target) {
  nn::nudge_away_from_kinks(m.net, frame);
  return nn::finite_diff_check(m.net, frame, [target](const Vector& y, Vector* g) {
    if (g) *g = Vector::Constant(1, 2.0 * (y[0] - target));
    return (y[0] - target) * (y[0] - target);
  });
}

/// Max relative error of the averaged per-frame discriminator gradients
/// against a finite difference of Loss_temp / TQual.
inline double discriminator_error(TemporalModel tm, const VisualModel& vm, const ActivityDataset& ds) {
  const auto generated = discriminator_batch(tm, vm, ds).generated;
  for (int pass = 0; pass < 32; ++pass) {
    const auto before = tm.net.layers;
    for (std::size_t v = 0; v < ds.videos.size(); ++v) {
      for (std::size_t t = 0; t < ds.videos[v].num_frames(); ++t) nn::nudge_away_from_kinks(tm.net, ds.videos[v].frame(t), 1e-3);
      for (const auto& g : generated[v]) nn::nudge_away_from_kinks(tm.net, g, 1e-3);
    }
    if (tm.net.layers == before) break;
  }
  const auto batch = discriminator_batch(tm, vm, ds);
  auto total = nn::GradientTape::zeros_like(tm.net);
  for (std::size_t v = 0; v < ds.videos.size(); ++v) {
    for (std::size_t t = 0; t < ds.videos[v].num_frames(); ++t) discriminator_frame_gradient(tm, batch, ds, v, t, total);
  }
  total.scale(1.0 / static_cast<double>(batch.frames));
  auto probe = tm;
  return nn::finite_diff_params(probe.net.layers, total.layers, [&] { return discriminator_batch(probe, vm, ds).ratio(); },
                                1e-5);
}

}  // namespace gradcheck
