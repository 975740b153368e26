#pragma once

#include <cstddef>
#include <vector>

#include "pudnet/rng.hpp"
#include "pudnet/tensor.hpp"

namespace pudnet::target {

struct LayerSpec {
  std::size_t c_in = 1;
  std::size_t c_out = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  bool norm = true;   // parameter-free per-channel standardisation
  bool leaky = true;  // leaky_relu activation
  bool pool = true;   // 2×2 average pool

  std::size_t param_count() const { return c_out * c_in * kernel * kernel; }
  Shape kernel_shape() const { return {c_out, c_in, kernel, kernel}; }
};

/// The fixed architecture Ω. Kernels are its only learnable tensors.
struct TargetSpec {
  std::vector<LayerSpec> layers;
  std::size_t embedding_dim = 0;
  double slope = 0.01;
  double norm_eps = 1e-5;

  /// Throws ConfigError when channels do not chain or a kernel is even.
  void validate() const;
  std::size_t param_count() const;
};

TargetSpec convnet3_spec(std::size_t in_channels, std::size_t width, std::size_t embedding_dim);

template <class T>
using ParamSet = std::vector<Tensor<T>>;

/// Throws DimensionError naming the first layer whose kernel does not match.
template <class T>
void check_params(const TargetSpec& spec, const ParamSet<T>& params);

/// Embeddings [B, embedding_dim]; differentiable w.r.t. params and x.
template <class T>
Tensor<T> forward(const TargetSpec& spec, const ParamSet<T>& params, const Tensor<T>& x);

/// Ω with a fixed parameter set.
template <class T>
class BoundNetwork {
 public:
  BoundNetwork(TargetSpec spec, ParamSet<T> params);

  Tensor<T> operator()(const Tensor<T>& x) const { return forward(spec_, params_, x); }

  const TargetSpec& spec() const { return spec_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  TargetSpec spec_;
  ParamSet<T> params_;
};

template <class T>
BoundNetwork<T> inject(const TargetSpec& spec, const ParamSet<T>& params) {
  return BoundNetwork<T>(spec, params);
}

/// Kernels drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), marked requires_grad.
template <class T>
ParamSet<T> random_params(const TargetSpec& spec, Rng& rng);

}  // namespace pudnet::target
