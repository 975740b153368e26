#include "pudnet/hypernet.hpp"

#include <cmath>

#include "pudnet/errors.hpp"
#include "pudnet/ops.hpp"

namespace pudnet::hyper {

namespace {

template <class T>
Tensor<T> uniform_leaf(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

// W [r, n] applied to a vector [n] -> [r]
template <class T>
Tensor<T> matvec(const Tensor<T>& w, const Tensor<T>& x) {
  return ops::reshape(ops::matmul(w, ops::reshape(x, {x.numel(), 1})), {w.dim(0)});
}

template <class T>
void require_vector(const Tensor<T>& v, std::size_t m, const char* what) {
  if (!v.defined() || v.rank() != 1 || v.dim(0) != m) {
    throw DimensionError(std::string(what) + " must be a vector of length " + std::to_string(m) +
                         (v.defined() ? ", got " + shape_str(v.shape()) : std::string()));
  }
}

}  // namespace

template <class T>
AhruWeights<T> AhruWeights<T>::init(std::size_t m, Rng& rng) {
  if (m == 0) throw ConfigError("AHRU dimension must be >= 1");
  AhruWeights w;
  w.W_r = uniform_leaf<T>({m, 2 * m}, 2 * m, rng);
  w.W_z = uniform_leaf<T>({m, 2 * m}, 2 * m, rng);
  w.W_h = uniform_leaf<T>({m, 2 * m}, 2 * m, rng);
  w.W_o = uniform_leaf<T>({m, m}, m, rng);
  return w;
}

template <class T>
HyperState<T> ahru_step(const AhruWeights<T>& w, const HyperState<T>& state) {
  const std::size_t m = w.dim();
  if (w.W_r.shape() != Shape{m, 2 * m} || w.W_z.shape() != Shape{m, 2 * m} ||
      w.W_h.shape() != Shape{m, 2 * m} || w.W_o.shape() != Shape{m, m}) {
    throw DimensionError("AHRU weights are inconsistent with m=" + std::to_string(m));
  }
  require_vector(state.d, m, "AHRU hidden state");
  require_vector(state.a, m, "AHRU parameter representation");
  const Tensor<T> da = ops::concat<T>({state.d, state.a}, 0);
  const Tensor<T> r = ops::sigmoid(matvec(w.W_r, da));
  const Tensor<T> z = ops::sigmoid(matvec(w.W_z, da));
  const Tensor<T> candidate = ops::tanh(matvec(w.W_h, ops::concat<T>({ops::mul(r, state.d), state.a}, 0)));
  const Tensor<T> d_next =
      ops::add(ops::sub(state.d, ops::mul(z, state.d)), ops::mul(z, candidate));
  return HyperState<T>{d_next, ops::sigmoid(matvec(w.W_o, d_next))};
}

template <class T>
HyperState<T> init_state(const Tensor<T>& sketch) {
  if (!sketch.defined() || sketch.rank() != 1) throw DimensionError("sketch must be a vector");
  return HyperState<T>{sketch, Tensor<T>::zeros({sketch.dim(0)})};
}

template <class T>
Tensor<T> residual_mix(const Tensor<T>& a, const Tensor<T>& sketch, double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0,1], got " + std::to_string(eta));
  if (a.shape() != sketch.shape()) {
    throw DimensionError("residual_mix: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(sketch.shape()) + " differ");
  }
  if (eta == 0.0) return a;
  if (eta == 1.0) return sketch;
  return ops::add(ops::scale(a, static_cast<T>(1.0 - eta)), ops::scale(sketch, static_cast<T>(eta)));
}

template <class T>
WeightGenerator<T> WeightGenerator<T>::init(const target::LayerSpec& layer, std::size_t m,
                                            std::size_t p, std::size_t p_mid, Rng& rng) {
  if (p == 0 || p_mid == 0 || m == 0) throw ConfigError("generator sizes p, p_mid and m must be >= 1");
  WeightGenerator g;
  g.c_out = layer.c_out;
  g.c_in = layer.c_in;
  g.kernel = layer.kernel;
  g.p = p;
  g.p_mid = p_mid;
  const std::size_t kk = layer.kernel * layer.kernel;
  const std::size_t pairs = layer.c_out * layer.c_in;
  g.linear_w = uniform_leaf<T>({p * kk, m}, m, rng);
  g.linear_b = uniform_leaf<T>({p * kk}, m, rng);
  g.conv1_w = uniform_leaf<T>({p_mid, p}, p, rng);
  g.conv1_b = uniform_leaf<T>({p_mid}, p, rng);
  g.conv2_w = uniform_leaf<T>({pairs, p_mid}, p_mid, rng);
  g.conv2_b = uniform_leaf<T>({pairs}, p_mid, rng);
  return g;
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> WeightGenerator<T>::named_parameters(const std::string& prefix) {
  return {{prefix + "linear_w", &linear_w}, {prefix + "linear_b", &linear_b},
          {prefix + "conv1_w", &conv1_w},   {prefix + "conv1_b", &conv1_b},
          {prefix + "conv2_w", &conv2_w},   {prefix + "conv2_b", &conv2_b}};
}

template <class T>
Tensor<T> generate_layer(const WeightGenerator<T>& gen, const Tensor<T>& a_hat, T slope) {
  const std::size_t m = gen.linear_w.dim(1);
  require_vector(a_hat, m, "generator input");
  const std::size_t kk = gen.kernel * gen.kernel;
  const std::size_t pairs = gen.c_out * gen.c_in;
  // linear -> p flattened kernels of length k²
  Tensor<T> emb = ops::add(matvec(gen.linear_w, a_hat), gen.linear_b);
  emb = ops::reshape(emb, {gen.p, kk});
  // 1×1 convolutions over the channel axis are matrix products on [channels, k²]
  Tensor<T> h = ops::add(ops::matmul(gen.conv1_w, emb), ops::reshape(gen.conv1_b, {gen.p_mid, 1}));
  h = ops::leaky_relu(h, slope);
  Tensor<T> w = ops::add(ops::matmul(gen.conv2_w, h), ops::reshape(gen.conv2_b, {pairs, 1}));
  return ops::reshape(w, {gen.c_out, gen.c_in, gen.kernel, gen.kernel});
}

void HyperConfig::validate() const {
  if (p == 0 || p_mid == 0) throw ConfigError("p and p_mid must be >= 1");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0,1]");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (extractor.sketch_dim == 0) throw ConfigError("sketch dimension m must be >= 1");
}

template <class T>
PudNet<T> PudNet<T>::init(const HyperConfig& config, const target::TargetSpec& spec, Rng& rng) {
  config.validate();
  spec.validate();
  if (config.extractor.in_channels != spec.layers[0].c_in) {
    throw ConfigError("sketch extractor input channels differ from the target network's");
  }
  PudNet pud;
  pud.config = config;
  Rng ex_rng = rng.split("init/T_phi");
  pud.extractor = data::SketchExtractor<T>::init(config.extractor, ex_rng);
  Rng ahru_rng = rng.split("init/ahru");
  pud.ahru = AhruWeights<T>::init(config.m(), ahru_rng);
  for (std::size_t t = 0; t < spec.layers.size(); ++t) {
    Rng g_rng = rng.split("init/gen", t);
    pud.generators.push_back(WeightGenerator<T>::init(spec.layers[t], config.m(), config.p, config.p_mid, g_rng));
  }
  pud.tau = Tensor<T>({1}, {static_cast<T>(config.tau)});
  pud.tau.set_requires_grad(config.learn_tau);
  return pud;
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> PudNet<T>::named_parameters() {
  auto out = extractor.named_parameters();
  out.emplace_back("ahru/W_r", &ahru.W_r);
  out.emplace_back("ahru/W_z", &ahru.W_z);
  out.emplace_back("ahru/W_h", &ahru.W_h);
  out.emplace_back("ahru/W_o", &ahru.W_o);
  for (std::size_t t = 0; t < generators.size(); ++t) {
    auto g = generators[t].named_parameters("gen/" + std::to_string(t) + "/");
    out.insert(out.end(), g.begin(), g.end());
  }
  out.emplace_back("tau", &tau);
  return out;
}

template <class T>
std::vector<std::pair<std::string, std::vector<T>*>> PudNet<T>::named_buffers() {
  return extractor.named_buffers();
}

template <class T>
target::ParamSet<T> predict_params(const PudNet<T>& pud, const target::TargetSpec& spec,
                                   const Tensor<T>& sketch, PredictStats* stats) {
  if (pud.generators.size() != spec.layers.size()) {
    throw ConfigError("hypernetwork has " + std::to_string(pud.generators.size()) +
                      " generators for a " + std::to_string(spec.layers.size()) + "-layer target");
  }
  for (std::size_t t = 0; t < spec.layers.size(); ++t) {
    const auto& g = pud.generators[t];
    const auto& l = spec.layers[t];
    if (g.c_out != l.c_out || g.c_in != l.c_in || g.kernel != l.kernel) {
      throw ConfigError("generator " + std::to_string(t) + " does not match target layer shape");
    }
  }
  require_vector(sketch, pud.config.m(), "sketch");
  const T slope = static_cast<T>(pud.config.slope);
  target::ParamSet<T> params;
  HyperState<T> state = init_state(sketch);
  for (std::size_t t = 0; t < spec.layers.size(); ++t) {
    Tensor<T> a_hat;
    if (pud.config.no_context) {
      a_hat = sketch;
    } else {
      state = ahru_step(pud.ahru, state);
      if (stats) ++stats->ahru_steps;
      a_hat = residual_mix(state.a, sketch, pud.config.eta);
    }
    params.push_back(generate_layer(pud.generators[t], a_hat, slope));
    if (stats) ++stats->generator_calls;
  }
  return params;
}

#define PUDNET_INSTANTIATE_HYPER(T)                                                              \
  template struct AhruWeights<T>;                                                                \
  template struct WeightGenerator<T>;                                                            \
  template struct PudNet<T>;                                                                     \
  template HyperState<T> ahru_step<T>(const AhruWeights<T>&, const HyperState<T>&);              \
  template HyperState<T> init_state<T>(const Tensor<T>&);                                        \
  template Tensor<T> residual_mix<T>(const Tensor<T>&, const Tensor<T>&, double);                \
  template Tensor<T> generate_layer<T>(const WeightGenerator<T>&, const Tensor<T>&, T);          \
  template target::ParamSet<T> predict_params<T>(const PudNet<T>&, const target::TargetSpec&,    \
                                                 const Tensor<T>&, PredictStats*);

PUDNET_INSTANTIATE_HYPER(float)
PUDNET_INSTANTIATE_HYPER(double)

#undef PUDNET_INSTANTIATE_HYPER

}  // namespace pudnet::hyper
