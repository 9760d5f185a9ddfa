// The visual frame-prediction U-Net and the timestamp-regression MLP.
#pragma once

#include "tseg/core.hpp"
#include "tseg/neuralnet.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace tseg {

/// Dense U-Net over feature vectors.
///
/// Layers 0..2 form the encoder (D -> 2E -> ceil(1.5E) -> E), layers 3..5 the
/// decoder. Layer 2's output is the bottleneck embedding. With skip
/// connections the decoder inputs are concatenations [decoder activation,
/// mirrored encoder activation]:
///
///   layer 3: E                   -> ceil(1.5E)
///   layer 4: ceil(1.5E) + ceil(1.5E) -> 2E
///   layer 5: 2E + 2E              -> D   (linear)
struct VisualModel {
  nn::Network net;
  int step_s = 0;
  bool skip_connections = true;

  static constexpr std::size_t kEncoderDepth = 3;

  std::size_t input_dim() const { return net.layers.at(0).in_dim(); }
  std::size_t embed_dim() const { return net.layers.at(2).out_dim(); }

  template <class Rng>
  static VisualModel create(std::size_t d, std::size_t embed, int step_s, Rng& rng, bool skip = true) {
    if (d < 1 || embed < 1) throw Error("VisualModel: dimensions must be >= 1");
    const std::size_t wide = 2 * embed;
    const std::size_t mid = (3 * embed + 1) / 2;  // ceil(1.5 * embed)
    using nn::Activation;
    using nn::DenseLayer;
    VisualModel m;
    m.step_s = step_s;
    m.skip_connections = skip;
    m.net.layers.push_back(DenseLayer::he_uniform(d, wide, Activation::leaky_relu, rng));
    m.net.layers.push_back(DenseLayer::he_uniform(wide, mid, Activation::leaky_relu, rng));
    m.net.layers.push_back(DenseLayer::he_uniform(mid, embed, Activation::leaky_relu, rng));
    m.net.layers.push_back(DenseLayer::he_uniform(embed, mid, Activation::leaky_relu, rng));
    m.net.layers.push_back(DenseLayer::he_uniform(skip ? 2 * mid : mid, wide, Activation::leaky_relu, rng));
    m.net.layers.push_back(DenseLayer::he_uniform(skip ? 2 * wide : wide, d, Activation::linear, rng));
    return m;
  }
};

struct VisualTrace {
  std::array<nn::LayerTrace, 6> layers;
  std::uint64_t version = 0;
};

struct VisualOutput {
  Vector embedding;   // bottleneck x_t
  Vector prediction;  // predicted features of frame t+s
};

namespace detail {

inline Vector concat(const Vector& a, const Vector& b) {
  Vector out(a.size() + b.size());
  out << a, b;
  return out;
}

}  // namespace detail

inline VisualOutput visual_forward(const VisualModel& m, const Vector& frame, VisualTrace* trace = nullptr) {
  const auto& L = m.net.layers;
  if (L.size() != 6) throw Error("visual_forward: model must have 6 layers");
  if (static_cast<std::size_t>(frame.size()) != m.input_dim()) {
    throw Error("visual_forward: expected frame of size " + std::to_string(m.input_dim()) + ", got " +
                std::to_string(frame.size()));
  }
  auto* t = trace ? trace->layers.data() : nullptr;
  if (trace) trace->version = m.net.version;
  const Vector e1 = nn::layer_forward(L[0], frame, t ? &t[0] : nullptr);
  const Vector e2 = nn::layer_forward(L[1], e1, t ? &t[1] : nullptr);
  Vector x = nn::layer_forward(L[2], e2, t ? &t[2] : nullptr);
  const Vector d1 = nn::layer_forward(L[3], x, t ? &t[3] : nullptr);
  const Vector d2 = nn::layer_forward(L[4], m.skip_connections ? detail::concat(d1, e2) : d1, t ? &t[4] : nullptr);
  Vector y = nn::layer_forward(L[5], m.skip_connections ? detail::concat(d2, e1) : d2, t ? &t[5] : nullptr);
  return {std::move(x), std::move(y)};
}

/// Accumulates d loss / d params given d loss / d prediction (and optionally
/// d loss / d embedding). Returns d loss / d input frame.
inline Vector visual_backward(const VisualModel& m, const VisualTrace& trace, const Vector& prediction_grad,
                              nn::GradientTape& tape, const Vector* embedding_grad = nullptr) {
  const auto& L = m.net.layers;
  const auto& t = trace.layers;
  if (trace.version != m.net.version) throw Error("visual_backward: trace is stale");
  if (tape.layers.size() != 6) throw Error("visual_backward: tape must have 6 layers");
  const auto mid = static_cast<Eigen::Index>(L[1].out_dim());
  const auto wide = static_cast<Eigen::Index>(L[0].out_dim());

  Vector g5 = nn::layer_backward(L[5], t[5], prediction_grad, tape.layers[5]);
  Vector g_d2 = m.skip_connections ? Vector(g5.head(wide)) : g5;
  Vector g_e1_skip = m.skip_connections ? Vector(g5.tail(wide)) : Vector::Zero(wide);

  Vector g4 = nn::layer_backward(L[4], t[4], g_d2, tape.layers[4]);
  Vector g_d1 = m.skip_connections ? Vector(g4.head(mid)) : g4;
  Vector g_e2_skip = m.skip_connections ? Vector(g4.tail(mid)) : Vector::Zero(mid);

  Vector g_x = nn::layer_backward(L[3], t[3], g_d1, tape.layers[3]);
  if (embedding_grad) g_x += *embedding_grad;

  Vector g_e2 = nn::layer_backward(L[2], t[2], g_x, tape.layers[2]) + g_e2_skip;
  Vector g_e1 = nn::layer_backward(L[1], t[1], g_e2, tape.layers[1]) + g_e1_skip;
  return nn::layer_backward(L[0], t[0], g_e1, tape.layers[0]);
}

/// Three-layer MLP regressing the relative timestamp: D -> 64 -> 32 -> 1 (sigmoid).
struct TemporalModel {
  nn::Network net;

  static constexpr std::size_t kHidden1 = 64;
  static constexpr std::size_t kHidden2 = 32;

  std::size_t input_dim() const { return net.in_dim(); }

  template <class Rng>
  static TemporalModel create(std::size_t d, Rng& rng) {
    using nn::Activation;
    using nn::DenseLayer;
    TemporalModel m;
    m.net.layers.push_back(DenseLayer::he_uniform(d, kHidden1, Activation::leaky_relu, rng));
    m.net.layers.push_back(DenseLayer::he_uniform(kHidden1, kHidden2, Activation::leaky_relu, rng));
    m.net.layers.push_back(DenseLayer::he_uniform(kHidden2, 1, Activation::sigmoid, rng));
    return m;
  }
};

inline double temporal_forward(const TemporalModel& m, const Vector& frame, nn::ForwardCache* cache = nullptr) {
  if (static_cast<std::size_t>(frame.size()) != m.input_dim()) {
    throw Error("temporal_forward: expected frame of size " + std::to_string(m.input_dim()) + ", got " +
                std::to_string(frame.size()));
  }
  return nn::forward(m.net, frame, cache)[0];
}

/// Output of the MLP's second layer (its inner embedding).
inline Vector temporal_hidden(const TemporalModel& m, const Vector& frame) {
  if (static_cast<std::size_t>(frame.size()) != m.input_dim()) {
    throw Error("temporal_hidden: expected frame of size " + std::to_string(m.input_dim()));
  }
  return nn::layer_forward(m.net.layers[1], nn::layer_forward(m.net.layers[0], frame));
}

/// Per-video embedding rows aligned with relative timestamps.
struct EmbeddingSet {
  std::vector<FeatureSequence> videos;

  std::size_t dim() const { return videos.empty() ? 0 : videos.front().dim(); }
  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& v : videos) n += v.num_frames();
    return n;
  }

  /// All rows stacked in video order.
  FrameMatrix stacked() const {
    FrameMatrix out(static_cast<Eigen::Index>(total_rows()), static_cast<Eigen::Index>(dim()));
    Eigen::Index r = 0;
    for (const auto& v : videos) {
      out.middleRows(r, v.frames.rows()) = v.frames;
      r += v.frames.rows();
    }
    return out;
  }

  static EmbeddingSet from_dataset(const ActivityDataset& ds) {
    EmbeddingSet e;
    e.videos = ds.videos;
    return e;
  }
};

namespace detail {

template <class RowFn>
EmbeddingSet embed_rows(const ActivityDataset& ds, std::size_t out_dim, RowFn&& fn) {
  EmbeddingSet out;
  for (const auto& v : ds.videos) {
    FrameMatrix rows(v.frames.rows(), static_cast<Eigen::Index>(out_dim));
    for (Eigen::Index i = 0; i < v.frames.rows(); ++i) rows.row(i) = fn(Vector(v.frames.row(i).transpose())).transpose();
    FeatureSequence seq;
    seq.video_id = v.video_id;
    seq.frames = std::move(rows);
    seq.rel_timestamps = v.rel_timestamps;
    out.videos.push_back(std::move(seq));
  }
  return out;
}

}  // namespace detail

/// Bottleneck embedding of every frame (the last s frames included).
inline EmbeddingSet extract_embeddings(const VisualModel& m, const ActivityDataset& ds) {
  if (ds.dim() != m.input_dim()) {
    throw Error("extract_embeddings: model expects D=" + std::to_string(m.input_dim()) + ", dataset has D=" +
                std::to_string(ds.dim()));
  }
  return detail::embed_rows(ds, m.embed_dim(), [&](const Vector& f) { return visual_forward(m, f).embedding; });
}

inline EmbeddingSet extract_temporal_embeddings(const TemporalModel& m, const ActivityDataset& ds) {
  if (ds.dim() != m.input_dim()) {
    throw Error("extract_temporal_embeddings: model expects D=" + std::to_string(m.input_dim()) +
                ", dataset has D=" + std::to_string(ds.dim()));
  }
  return detail::embed_rows(ds, TemporalModel::kHidden2, [&](const Vector& f) { return temporal_hidden(m, f); });
}

// Checkpoint topology tags.
inline constexpr std::uint32_t kTopologyMlp = 0;
inline constexpr std::uint32_t kTopologyUnetSkip = 1;
inline constexpr std::uint32_t kTopologyUnetPlain = 2;

inline void save_visual_model(const std::filesystem::path& path, const VisualModel& m) {
  nn::save_network(path, m.net,
                   {m.skip_connections ? kTopologyUnetSkip : kTopologyUnetPlain, static_cast<std::uint32_t>(m.step_s)});
}

inline VisualModel load_visual_model(const std::filesystem::path& path) {
  nn::CheckpointHeader h;
  VisualModel m;
  m.net = nn::load_network(path, &h);
  if ((h.topology != kTopologyUnetSkip && h.topology != kTopologyUnetPlain) || m.net.layers.size() != 6) {
    throw ParseError(path.string() + ": not a visual model checkpoint");
  }
  m.skip_connections = h.topology == kTopologyUnetSkip;
  m.step_s = static_cast<int>(h.aux);
  return m;
}

inline void save_temporal_model(const std::filesystem::path& path, const TemporalModel& m) {
  nn::save_network(path, m.net, {kTopologyMlp, 0});
}

inline TemporalModel load_temporal_model(const std::filesystem::path& path) {
  nn::CheckpointHeader h;
  TemporalModel m;
  m.net = nn::load_network(path, &h);
  if (h.topology != kTopologyMlp || m.net.layers.size() != 3 || m.net.out_dim() != 1) {
    throw ParseError(path.string() + ": not a temporal model checkpoint");
  }
  return m;
}

/// Writes each video's embedding rows as <dir>/<video>.tseg.
inline void save_embeddings(const std::filesystem::path& dir, const EmbeddingSet& e) {
  std::filesystem::create_directories(dir);
  for (const auto& v : e.videos) save_feature_sequence(dir / (v.video_id + ".tseg"), v);
}

}  // namespace tseg
