#include "pudnet/targetnet.hpp"

#include <cmath>
#include <string>

#include "pudnet/errors.hpp"
#include "pudnet/ops.hpp"

namespace pudnet::target {

void TargetSpec::validate() const {
  if (layers.empty()) throw ConfigError("target spec needs at least one conv layer");
  for (std::size_t t = 0; t < layers.size(); ++t) {
    const auto& l = layers[t];
    if (l.c_in == 0 || l.c_out == 0) throw ConfigError("layer " + std::to_string(t) + ": channel counts must be >= 1");
    if (l.kernel % 2 == 0) throw ConfigError("layer " + std::to_string(t) + ": kernel size must be odd");
    if (l.stride == 0) throw ConfigError("layer " + std::to_string(t) + ": stride must be >= 1");
    if (t > 0 && layers[t - 1].c_out != l.c_in) {
      throw ConfigError("layer " + std::to_string(t) + ": c_in " + std::to_string(l.c_in) +
                        " does not chain from previous c_out " + std::to_string(layers[t - 1].c_out));
    }
  }
  if (embedding_dim != layers.back().c_out) {
    throw ConfigError("embedding_dim must equal the last layer's c_out");
  }
}

std::size_t TargetSpec::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return n;
}

TargetSpec convnet3_spec(std::size_t in_channels, std::size_t width, std::size_t embedding_dim) {
  if (width == 0) throw ConfigError("ConvNet-3 width must be >= 1");
  if (in_channels == 0) throw ConfigError("ConvNet-3 needs at least one input channel");
  if (embedding_dim != width) throw ConfigError("ConvNet-3 embedding_dim must equal its width");
  TargetSpec spec;
  spec.embedding_dim = embedding_dim;
  std::size_t cin = in_channels;
  for (int i = 0; i < 3; ++i) {
    spec.layers.push_back(LayerSpec{cin, width, 3, 1, 1, true, true, true});
    cin = width;
  }
  spec.validate();
  return spec;
}

template <class T>
void check_params(const TargetSpec& spec, const ParamSet<T>& params) {
  if (params.size() != spec.layers.size()) {
    throw DimensionError("parameter set has " + std::to_string(params.size()) + " tensors for " +
                         std::to_string(spec.layers.size()) + " layers");
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (!params[t].defined() || params[t].shape() != spec.layers[t].kernel_shape()) {
      throw DimensionError("layer " + std::to_string(t) + ": kernel shape " +
                           (params[t].defined() ? shape_str(params[t].shape()) : std::string("<undefined>")) +
                           " does not match expected " + shape_str(spec.layers[t].kernel_shape()));
    }
  }
}

template <class T>
Tensor<T> forward(const TargetSpec& spec, const ParamSet<T>& params, const Tensor<T>& x) {
  check_params(spec, params);
  if (x.rank() != 4 || x.dim(1) != spec.layers[0].c_in) {
    throw DimensionError("layer 0: input " + shape_str(x.shape()) + " does not have " +
                         std::to_string(spec.layers[0].c_in) + " channels");
  }
  Tensor<T> h = x;
  for (std::size_t t = 0; t < spec.layers.size(); ++t) {
    const auto& l = spec.layers[t];
    try {
      h = ops::conv2d(h, params[t], l.stride, l.pad);
      if (l.norm) h = ops::instance_norm(h, static_cast<T>(spec.norm_eps));
      if (l.leaky) h = ops::leaky_relu(h, static_cast<T>(spec.slope));
      if (l.pool) h = ops::avg_pool2d(h, 2);
    } catch (const DimensionError& e) {
      throw DimensionError("layer " + std::to_string(t) + ": " + e.what());
    }
  }
  return ops::global_avg_pool(h);
}

template <class T>
BoundNetwork<T>::BoundNetwork(TargetSpec spec, ParamSet<T> params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  check_params(spec_, params_);
}

template <class T>
ParamSet<T> random_params(const TargetSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet<T> out;
  for (const auto& l : spec.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.c_in * l.kernel * l.kernel));
    std::vector<T> w(l.param_count());
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    Tensor<T> k(l.kernel_shape(), std::move(w));
    k.set_requires_grad(true);
    out.push_back(std::move(k));
  }
  return out;
}

template void check_params<float>(const TargetSpec&, const ParamSet<float>&);
template void check_params<double>(const TargetSpec&, const ParamSet<double>&);
template Tensor<float> forward<float>(const TargetSpec&, const ParamSet<float>&, const Tensor<float>&);
template Tensor<double> forward<double>(const TargetSpec&, const ParamSet<double>&, const Tensor<double>&);
template class BoundNetwork<float>;
template class BoundNetwork<double>;
template ParamSet<float> random_params<float>(const TargetSpec&, Rng&);
template ParamSet<double> random_params<double>(const TargetSpec&, Rng&);

}  // namespace pudnet::target
