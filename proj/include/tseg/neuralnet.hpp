// Minimal dense-network kernel: layers, reverse-mode gradients, Adam, and a
// central finite-difference gradient checker.
#pragma once

#include "tseg/core.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tseg::nn {

enum class Activation : std::uint32_t { linear = 0, leaky_relu = 1, sigmoid = 2 };

inline constexpr double kLeakySlope = 0.01;

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::linear: return x;
    case Activation::leaky_relu: return x >= 0.0 ? x : kLeakySlope * x;
    case Activation::sigmoid:
      // Split by sign so exp() never overflows.
      if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
      {
        const double e = std::exp(x);
        return e / (1.0 + e);
      }
  }
  return x;
}

/// d activation / d pre-activation, given the pre-activation and its output.
inline double activation_slope(Activation a, double pre, double out) {
  switch (a) {
    case Activation::linear: return 1.0;
    case Activation::leaky_relu: return pre >= 0.0 ? 1.0 : kLeakySlope;
    case Activation::sigmoid: return out * (1.0 - out);
  }
  return 1.0;
}

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out
  Activation activation = Activation::linear;

  std::size_t in_dim() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weights.rows()); }
  std::size_t num_params() const { return static_cast<std::size_t>(weights.size() + bias.size()); }

  /// Uniform He-style fan-in init, zero bias.
  template <class Rng>
  static DenseLayer he_uniform(std::size_t in, std::size_t out, Activation act, Rng& rng) {
    DenseLayer l;
    l.weights = Matrix(out, in);
    l.bias = Vector::Zero(static_cast<Eigen::Index>(out));
    l.activation = act;
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = dist(rng);
    }
    return l;
  }

  bool operator==(const DenseLayer& o) const {
    return activation == o.activation && weights.rows() == o.weights.rows() && weights.cols() == o.weights.cols() &&
           weights == o.weights && bias == o.bias;
  }
};

/// Per-layer values a backward pass needs.
struct LayerTrace {
  Vector input;
  Vector pre;
  Vector output;
};

struct LayerGrad {
  Matrix dweights;
  Vector dbias;

  static LayerGrad zeros_like(const DenseLayer& l) {
    return {Matrix::Zero(l.weights.rows(), l.weights.cols()), Vector::Zero(l.bias.size())};
  }
};

inline Vector layer_forward(const DenseLayer& layer, const Vector& input, LayerTrace* trace = nullptr) {
  if (static_cast<std::size_t>(input.size()) != layer.in_dim()) {
    throw Error("dense layer expects input of size " + std::to_string(layer.in_dim()) + ", got " +
                std::to_string(input.size()));
  }
  Vector pre = layer.weights * input + layer.bias;
  Vector out(pre.size());
  for (Eigen::Index i = 0; i < pre.size(); ++i) out[i] = activate(layer.activation, pre[i]);
  if (trace) {
    trace->input = input;
    trace->pre = std::move(pre);
    trace->output = out;
  }
  return out;
}

/// Accumulates parameter gradients into `grad` and returns d loss / d input.
inline Vector layer_backward(const DenseLayer& layer, const LayerTrace& trace, const Vector& out_grad,
                             LayerGrad& grad) {
  if (static_cast<std::size_t>(out_grad.size()) != layer.out_dim() ||
      static_cast<std::size_t>(trace.input.size()) != layer.in_dim() ||
      static_cast<std::size_t>(trace.pre.size()) != layer.out_dim()) {
    throw Error("layer_backward: trace/gradient shapes do not match the layer");
  }
  Vector delta(out_grad.size());
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    delta[i] = out_grad[i] * activation_slope(layer.activation, trace.pre[i], trace.output[i]);
  }
  grad.dweights.noalias() += delta * trace.input.transpose();
  grad.dbias += delta;
  return layer.weights.transpose() * delta;
}

/// Ordered stack of dense layers. `version` is bumped by every optimizer step
/// so forward caches taken before an update are detected as stale.
struct Network {
  std::vector<DenseLayer> layers;
  std::uint64_t version = 0;

  std::size_t in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.num_params();
    return n;
  }

  bool same_parameters(const Network& o) const { return layers == o.layers; }
};

struct ForwardCache {
  std::vector<LayerTrace> layers;
  std::uint64_t version = 0;
};

struct GradientTape {
  std::vector<LayerGrad> layers;

  static GradientTape zeros_like(const Network& net) {
    GradientTape t;
    for (const auto& l : net.layers) t.layers.push_back(LayerGrad::zeros_like(l));
    return t;
  }

  void scale(double s) {
    for (auto& g : layers) {
      g.dweights *= s;
      g.dbias *= s;
    }
  }

  void add(const GradientTape& o, double s = 1.0) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].dweights += s * o.layers[i].dweights;
      layers[i].dbias += s * o.layers[i].dbias;
    }
  }
};

inline Vector forward(const Network& net, const Vector& input, ForwardCache* cache = nullptr) {
  if (net.layers.empty()) throw Error("forward: empty network");
  if (static_cast<std::size_t>(input.size()) != net.in_dim()) {
    throw Error("forward: network expects input of size " + std::to_string(net.in_dim()) + ", got " +
                std::to_string(input.size()));
  }
  if (cache) {
    cache->layers.assign(net.layers.size(), {});
    cache->version = net.version;
  }
  Vector x = input;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    x = layer_forward(net.layers[i], x, cache ? &cache->layers[i] : nullptr);
  }
  return x;
}

inline void check_cache(const Network& net, const ForwardCache& cache) {
  if (cache.version != net.version) throw Error("backward: forward cache is stale (network was updated since)");
  if (cache.layers.size() != net.layers.size()) throw Error("backward: cache does not match network depth");
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& t = cache.layers[i];
    if (static_cast<std::size_t>(t.input.size()) != net.layers[i].in_dim() ||
        static_cast<std::size_t>(t.output.size()) != net.layers[i].out_dim()) {
      throw Error("backward: cache shapes do not match layer " + std::to_string(i));
    }
  }
}

/// Accumulating backward pass. Returns d loss / d input.
inline Vector backward_into(const Network& net, const ForwardCache& cache, const Vector& output_grad,
                            GradientTape& tape) {
  check_cache(net, cache);
  if (static_cast<std::size_t>(output_grad.size()) != net.out_dim()) {
    throw Error("backward: output gradient has size " + std::to_string(output_grad.size()) + ", expected " +
                std::to_string(net.out_dim()));
  }
  if (tape.layers.size() != net.layers.size()) throw Error("backward: tape does not match network depth");
  Vector g = output_grad;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    g = layer_backward(net.layers[i], cache.layers[i], g, tape.layers[i]);
  }
  return g;
}

inline GradientTape backward(const Network& net, const ForwardCache& cache, const Vector& output_grad,
                             Vector* input_grad = nullptr) {
  auto tape = GradientTape::zeros_like(net);
  Vector g = backward_into(net, cache, output_grad, tape);
  if (input_grad) *input_grad = std::move(g);
  return tape;
}

/// d loss / d input only; parameter gradients are not formed.
inline Vector input_gradient(const Network& net, const ForwardCache& cache, const Vector& output_grad) {
  check_cache(net, cache);
  if (static_cast<std::size_t>(output_grad.size()) != net.out_dim()) {
    throw Error("input_gradient: output gradient has the wrong size");
  }
  Vector g = output_grad;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const auto& l = net.layers[i];
    const auto& t = cache.layers[i];
    for (Eigen::Index j = 0; j < g.size(); ++j) g[j] *= activation_slope(l.activation, t.pre[j], t.output[j]);
    g = l.weights.transpose() * g;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<LayerGrad> m;
  std::vector<LayerGrad> v;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_network(const Network& net, double lr = 1e-3) {
    AdamState s;
    s.learning_rate = lr;
    for (const auto& l : net.layers) {
      s.m.push_back(LayerGrad::zeros_like(l));
      s.v.push_back(LayerGrad::zeros_like(l));
    }
    return s;
  }
};

namespace detail {

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace detail

/// One bias-corrected Adam update. Throws (leaving everything untouched) on
/// non-finite gradients or if the update would produce non-finite values.
inline void adam_step(Network& net, const GradientTape& tape, AdamState& state) {
  if (tape.layers.size() != net.layers.size() || state.m.size() != net.layers.size()) {
    throw Error("adam_step: gradient/state depth does not match network");
  }
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& g = tape.layers[i];
    const auto& l = net.layers[i];
    if (g.dweights.rows() != l.weights.rows() || g.dweights.cols() != l.weights.cols() ||
        g.dbias.size() != l.bias.size()) {
      throw Error("adam_step: gradient shape mismatch in layer " + std::to_string(i));
    }
    if (!detail::all_finite(g.dweights) || !detail::all_finite(g.dbias)) {
      throw Error("adam_step: non-finite gradient in layer " + std::to_string(i));
    }
  }
  const auto t = state.step + 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  const double b1 = state.beta1, b2 = state.beta2, lr = state.learning_rate, eps = state.epsilon;

  std::vector<DenseLayer> next = net.layers;
  std::vector<LayerGrad> m = state.m, v = state.v;
  for (std::size_t i = 0; i < next.size(); ++i) {
    const auto& g = tape.layers[i];
    m[i].dweights = b1 * m[i].dweights + (1.0 - b1) * g.dweights;
    m[i].dbias = b1 * m[i].dbias + (1.0 - b1) * g.dbias;
    v[i].dweights = b2 * v[i].dweights + (1.0 - b2) * g.dweights.cwiseProduct(g.dweights);
    v[i].dbias = b2 * v[i].dbias + (1.0 - b2) * g.dbias.cwiseProduct(g.dbias);
    next[i].weights.array() -=
        lr * (m[i].dweights.array() / c1) / ((v[i].dweights.array() / c2).sqrt() + eps);
    next[i].bias.array() -= lr * (m[i].dbias.array() / c1) / ((v[i].dbias.array() / c2).sqrt() + eps);
    if (!detail::all_finite(next[i].weights) || !detail::all_finite(next[i].bias) ||
        !detail::all_finite(v[i].dweights) || !detail::all_finite(v[i].dbias)) {
      throw Error("adam_step: update overflowed in layer " + std::to_string(i));
    }
  }
  net.layers = std::move(next);
  state.m = std::move(m);
  state.v = std::move(v);
  state.step = t;
  ++net.version;
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compares an analytic gradient against central differences of `loss` over
/// every parameter of `layers`. `loss` must read the (perturbed) layers.
inline double finite_diff_params(std::span<DenseLayer> layers, const std::vector<LayerGrad>& analytic,
                                 const std::function<double()>& loss, double h = 1e-4) {
  if (analytic.size() != layers.size()) throw Error("finite_diff_params: gradient depth mismatch");
  double worst = 0.0;
  auto probe = [&](double& param, double grad) {
    const double saved = param;
    param = saved + h;
    const double up = loss();
    param = saved - h;
    const double down = loss();
    param = saved;
    worst = std::max(worst, relative_error(grad, (up - down) / (2.0 * h)));
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) probe(l.weights(r, c), analytic[i].dweights(r, c));
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) probe(l.bias[r], analytic[i].dbias[r]);
  }
  return worst;
}

/// Scalar loss of a network output; fills d loss / d output when asked.
using OutputLoss = std::function<double(const Vector& output, Vector* grad)>;

inline double finite_diff_check(const Network& net, const Vector& input, const OutputLoss& loss, double h = 1e-4) {
  ForwardCache cache;
  const Vector out = forward(net, input, &cache);
  Vector out_grad;
  loss(out, &out_grad);
  const auto tape = backward(net, cache, out_grad);
  Network probe = net;
  return finite_diff_params(probe.layers, tape.layers, [&] { return loss(forward(probe, input), nullptr); }, h);
}

/// Shifts biases so that no leaky-ReLU pre-activation lies within `margin`
/// of the kink for this input.
inline void nudge_away_from_kinks(Network& net, const Vector& input, double margin = 1e-2) {
  Vector x = input;
  for (auto& l : net.layers) {
    Vector pre = l.weights * x + l.bias;
    if (l.activation == Activation::leaky_relu) {
      for (Eigen::Index i = 0; i < pre.size(); ++i) {
        if (std::abs(pre[i]) < margin) {
          const double shift = (pre[i] >= 0.0 ? margin : -margin) * 2.0;
          l.bias[i] += shift;
          pre[i] += shift;
        }
      }
    }
    for (Eigen::Index i = 0; i < pre.size(); ++i) pre[i] = activate(l.activation, pre[i]);
    x = std::move(pre);
  }
}

/// Squared-error loss against a fixed target, 0.5 * |y - t|^2.
inline OutputLoss half_squared_error(Vector target) {
  return [target = std::move(target)](const Vector& y, Vector* grad) {
    const Vector diff = y - target;
    if (grad) *grad = diff;
    return 0.5 * diff.squaredNorm();
  };
}

// ---------------------------------------------------------------------------
// Checkpoints: "TSNN", u32 version, u32 topology, u32 aux, u32 layer count,
// then per layer u32 in, u32 out, u32 activation, out*in float32 weights
// (row-major), out float32 biases. Little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "TSNN";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint32_t topology = 0;
  std::uint32_t aux = 0;
};

inline void save_network(const std::filesystem::path& path, const Network& net, CheckpointHeader header = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic.data(), 4);
  tseg::detail::put_u32(out, kCheckpointVersion);
  tseg::detail::put_u32(out, header.topology);
  tseg::detail::put_u32(out, header.aux);
  tseg::detail::put_u32(out, static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    tseg::detail::put_u32(out, static_cast<std::uint32_t>(l.in_dim()));
    tseg::detail::put_u32(out, static_cast<std::uint32_t>(l.out_dim()));
    tseg::detail::put_u32(out, static_cast<std::uint32_t>(l.activation));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) tseg::detail::put_f32(out, static_cast<float>(l.weights(r, c)));
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) tseg::detail::put_f32(out, static_cast<float>(l.bias[r]));
  }
  if (!out) throw Error("short write to " + path.string());
}

inline Network load_network(const std::filesystem::path& path, CheckpointHeader* header = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  if (!tseg::detail::has_magic(in, kCheckpointMagic)) throw ParseError(path.string() + ": not a TSNN checkpoint");
  std::uint32_t version, topology, aux, count;
  if (!tseg::detail::get_u32(in, version) || !tseg::detail::get_u32(in, topology) ||
      !tseg::detail::get_u32(in, aux) || !tseg::detail::get_u32(in, count)) {
    throw ParseError(path.string() + ": truncated header");
  }
  if (version != kCheckpointVersion) {
    throw ParseError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Network net;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t in_dim, out_dim, act;
    if (!tseg::detail::get_u32(in, in_dim) || !tseg::detail::get_u32(in, out_dim) || !tseg::detail::get_u32(in, act)) {
      throw ParseError(path.string() + ": truncated layer header " + std::to_string(i));
    }
    if (act > 2) throw ParseError(path.string() + ": unknown activation tag " + std::to_string(act));
    DenseLayer l;
    l.weights = Matrix(out_dim, in_dim);
    l.bias = Vector(out_dim);
    l.activation = static_cast<Activation>(act);
    float v;
    for (std::uint32_t r = 0; r < out_dim; ++r) {
      for (std::uint32_t c = 0; c < in_dim; ++c) {
        if (!tseg::detail::get_f32(in, v)) throw ParseError(path.string() + ": truncated weights in layer " + std::to_string(i));
        l.weights(r, c) = v;
      }
    }
    for (std::uint32_t r = 0; r < out_dim; ++r) {
      if (!tseg::detail::get_f32(in, v)) throw ParseError(path.string() + ": truncated bias in layer " + std::to_string(i));
      l.bias[r] = v;
    }
    net.layers.push_back(std::move(l));
  }
  if (header) *header = {topology, aux};
  return net;
}

}  // namespace tseg::nn
