#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "pudnet/data.hpp"
#include "pudnet/rng.hpp"
#include "pudnet/targetnet.hpp"
#include "pudnet/tensor.hpp"

namespace pudnet::hyper {

/// Recurrent cell weights shared by every target layer and every dataset.
/// W_r, W_z, W_h act on the concatenation [d, a] (2m); W_o on d (m).
template <class T>
struct AhruWeights {
  Tensor<T> W_r, W_z, W_h, W_o;

  static AhruWeights init(std::size_t m, Rng& rng);
  std::size_t dim() const { return W_o.dim(0); }
};

template <class T>
struct HyperState {
  Tensor<T> d;  // hidden state [m]
  Tensor<T> a;  // parameter representation [m]
};

/// r = σ(W_r[d,a]), z = σ(W_z[d,a]), d~ = tanh(W_h[r*d, a]),
/// d' = (1-z)*d + z*d~, a' = σ(W_o d').
template <class T>
HyperState<T> ahru_step(const AhruWeights<T>& w, const HyperState<T>& state);

/// d_0 = sketch, a_0 = 0.
template <class T>
HyperState<T> init_state(const Tensor<T>& sketch);

/// a*(1-eta) + sketch*eta. eta must lie in [0,1]; the endpoints return the
/// corresponding input unchanged.
template <class T>
Tensor<T> residual_mix(const Tensor<T>& a, const Tensor<T>& sketch, double eta);

/// Per-layer map from an m-vector to a [c_out, c_in, k, k] kernel:
/// linear m -> p·k², reshape (p, k²), 1×1 conv p -> p_mid, leaky_relu,
/// 1×1 conv p_mid -> c_out·c_in, reshape.
template <class T>
struct WeightGenerator {
  std::size_t c_out = 0, c_in = 0, kernel = 0, p = 0, p_mid = 0;
  Tensor<T> linear_w;  // [p·k², m]
  Tensor<T> linear_b;  // [p·k²]
  Tensor<T> conv1_w;   // [p_mid, p]
  Tensor<T> conv1_b;   // [p_mid]
  Tensor<T> conv2_w;   // [c_out·c_in, p_mid]
  Tensor<T> conv2_b;   // [c_out·c_in]

  static WeightGenerator init(const target::LayerSpec& layer, std::size_t m, std::size_t p,
                              std::size_t p_mid, Rng& rng);
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters(const std::string& prefix);
};

template <class T>
Tensor<T> generate_layer(const WeightGenerator<T>& gen, const Tensor<T>& a_hat, T slope = T(0.01));

struct HyperConfig {
  std::size_t p = 16;
  std::size_t p_mid = 16;
  double eta = 0.1;
  double tau = 10.0;
  bool learn_tau = false;
  bool no_context = false;  // bypass the recurrent cell: every generator sees the sketch
  double slope = 0.01;
  data::SketchExtractorConfig extractor;

  std::size_t m() const { return extractor.sketch_dim; }
  void validate() const;
};

/// All learnable state of the hypernetwork (θ = {φ, AHRU, ψ_t, τ}).
template <class T>
struct PudNet {
  HyperConfig config;
  data::SketchExtractor<T> extractor;
  AhruWeights<T> ahru;
  std::vector<WeightGenerator<T>> generators;
  Tensor<T> tau;  // [1]; requires_grad only when config.learn_tau

  static PudNet init(const HyperConfig& config, const target::TargetSpec& spec, Rng& rng);

  T temperature() const { return tau.item(); }
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
  std::vector<std::pair<std::string, std::vector<T>*>> named_buffers();
};

struct PredictStats {
  std::size_t ahru_steps = 0;
  std::size_t generator_calls = 0;
};

/// One forward pass sketch -> ParamSet, one recurrent step and one generator
/// call per target layer.
template <class T>
target::ParamSet<T> predict_params(const PudNet<T>& pud, const target::TargetSpec& spec,
                                   const Tensor<T>& sketch, PredictStats* stats = nullptr);

}  // namespace pudnet::hyper
