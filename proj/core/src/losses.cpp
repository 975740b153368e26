#include "pudnet/losses.hpp"

#include <cmath>
#include <string>

#include "pudnet/errors.hpp"
#include "pudnet/ops.hpp"

namespace pudnet::losses {

std::vector<std::size_t> centroid_sample_indices(std::span<const std::size_t> labels,
                                                 std::size_t n_way, std::size_t shots) {
  if (shots == 0) throw ConfigError("centroid shots must be >= 1");
  std::vector<std::vector<std::size_t>> per_class(n_way);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_way) {
      throw IndexError("support label " + std::to_string(labels[i]) + " outside " + std::to_string(n_way) + " classes");
    }
    if (per_class[labels[i]].size() < shots) per_class[labels[i]].push_back(i);
  }
  std::vector<std::size_t> out;
  out.reserve(n_way * shots);
  for (std::size_t k = 0; k < n_way; ++k) {
    if (per_class[k].size() < shots) {
      throw ConfigError("class " + std::to_string(k) + " has " + std::to_string(per_class[k].size()) +
                        " support samples, centroids need " + std::to_string(shots));
    }
    out.insert(out.end(), per_class[k].begin(), per_class[k].end());
  }
  return out;
}

template <class T>
Centroids<T> compute_centroids(const Tensor<T>& embeddings, std::span<const std::size_t> labels,
                               std::span<const std::size_t> class_map, std::size_t shots) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw DimensionError("centroids: embeddings " + shape_str(embeddings.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n_way = class_map.size();
  const auto picked = centroid_sample_indices(labels, n_way, shots);
  std::vector<Tensor<T>> rows;
  rows.reserve(n_way);
  for (std::size_t k = 0; k < n_way; ++k) {
    std::span<const std::size_t> idx(picked.data() + k * shots, shots);
    rows.push_back(ops::reshape(ops::mean(ops::gather_rows(embeddings, idx), 0), {1, embeddings.dim(1)}));
  }
  return Centroids<T>{ops::concat(rows, 0), {class_map.begin(), class_map.end()}};
}

template <class T>
Centroids<T> compute_centroids(const target::BoundNetwork<T>& net, const Tensor<T>& images,
                               std::span<const std::size_t> labels,
                               std::span<const std::size_t> class_map, std::size_t shots) {
  const std::size_t n_way = class_map.size();
  const auto picked = centroid_sample_indices(labels, n_way, shots);
  const Tensor<T> emb = net(ops::gather_rows(images, picked));
  std::vector<std::size_t> picked_labels(picked.size());
  for (std::size_t i = 0; i < picked.size(); ++i) picked_labels[i] = i / shots;
  return compute_centroids(emb, picked_labels, class_map, shots);
}

template <class T>
Tensor<T> metric_logits(const Tensor<T>& embeddings, const Centroids<T>& centroids, const Tensor<T>& tau) {
  if (tau.numel() != 1) throw DimensionError("tau must hold a single value");
  if (tau.item() < T(0)) throw ConfigError("tau must be >= 0");
  const Tensor<T> cos = ops::cosine_matrix(embeddings, centroids.u);
  return ops::mul(cos, tau.rank() == 0 ? ops::reshape(tau, {1}) : tau);
}

template <class T>
Tensor<T> metric_logits(const Tensor<T>& embeddings, const Centroids<T>& centroids, T tau) {
  return metric_logits(embeddings, centroids, Tensor<T>({1}, {tau}));
}

template <class T>
Tensor<T> loss_metric(const Tensor<T>& embeddings, const Centroids<T>& centroids,
                      std::span<const std::size_t> local_labels, const Tensor<T>& tau) {
  const std::size_t n_way = centroids.class_map.size();
  for (std::size_t y : local_labels) {
    if (y >= n_way) throw IndexError("query label " + std::to_string(y) + " outside the task's " + std::to_string(n_way) + " classes");
  }
  return ops::softmax_cross_entropy(metric_logits(embeddings, centroids, tau), local_labels);
}

template <class T>
FullHead<T> FullHead<T>::init(std::size_t embedding_dim, std::size_t n_classes, Rng& rng) {
  if (embedding_dim == 0 || n_classes == 0) throw ConfigError("full head needs positive dimensions");
  const double bound = 1.0 / std::sqrt(static_cast<double>(embedding_dim));
  std::vector<T> w(embedding_dim * n_classes), b(n_classes);
  for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& v : b) v = static_cast<T>(rng.uniform(-bound, bound));
  FullHead h;
  h.W = Tensor<T>({embedding_dim, n_classes}, std::move(w));
  h.b = Tensor<T>({n_classes}, std::move(b));
  h.W.set_requires_grad(true);
  h.b.set_requires_grad(true);
  return h;
}

template <class T>
FullHead<T> FullHead<T>::zeros(std::size_t embedding_dim, std::size_t n_classes) {
  if (embedding_dim == 0 || n_classes == 0) throw ConfigError("full head needs positive dimensions");
  FullHead h;
  h.W = Tensor<T>::zeros({embedding_dim, n_classes});
  h.b = Tensor<T>::zeros({n_classes});
  h.W.set_requires_grad(true);
  h.b.set_requires_grad(true);
  return h;
}

template <class T>
Tensor<T> FullHead<T>::logits(const Tensor<T>& embeddings) const {
  if (embeddings.rank() != 2 || embeddings.dim(1) != W.dim(0)) {
    throw DimensionError("full head expects [B, " + std::to_string(W.dim(0)) + "] embeddings, got " +
                         shape_str(embeddings.shape()));
  }
  return ops::add(ops::matmul(embeddings, W), b);
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> FullHead<T>::named_parameters() {
  return {{"head/W", &W}, {"head/b", &b}};
}

template <class T>
Tensor<T> loss_full(const FullHead<T>& head, const Tensor<T>& embeddings,
                    std::span<const std::size_t> global_labels) {
  return ops::softmax_cross_entropy(head.logits(embeddings), global_labels);
}

template <class T>
Tensor<T> loss_consistency(const Tensor<T>& metric_probs, const Tensor<T>& full_probs,
                           std::span<const std::size_t> class_map, T eps) {
  return ops::kl_div_padded(full_probs, metric_probs, class_map, eps);
}

template <class T>
Tensor<T> loss_total(const Tensor<T>& l1, const Tensor<T>& l2, const Tensor<T>& l3) {
  Tensor<T> total = l1;
  for (const Tensor<T>* t : {&l2, &l3}) {
    if (!t->defined()) continue;
    total = total.defined() ? ops::add(total, *t) : *t;
  }
  if (!total.defined()) throw ContractError("loss_total needs at least one term");
  return total;
}

#define PUDNET_INSTANTIATE_LOSSES(T)                                                                     \
  template struct FullHead<T>;                                                                           \
  template Centroids<T> compute_centroids<T>(const Tensor<T>&, std::span<const std::size_t>,             \
                                             std::span<const std::size_t>, std::size_t);                 \
  template Centroids<T> compute_centroids<T>(const target::BoundNetwork<T>&, const Tensor<T>&,           \
                                             std::span<const std::size_t>, std::span<const std::size_t>, \
                                             std::size_t);                                               \
  template Tensor<T> metric_logits<T>(const Tensor<T>&, const Centroids<T>&, const Tensor<T>&);          \
  template Tensor<T> metric_logits<T>(const Tensor<T>&, const Centroids<T>&, T);                         \
  template Tensor<T> loss_metric<T>(const Tensor<T>&, const Centroids<T>&, std::span<const std::size_t>, \
                                    const Tensor<T>&);                                                   \
  template Tensor<T> loss_full<T>(const FullHead<T>&, const Tensor<T>&, std::span<const std::size_t>);   \
  template Tensor<T> loss_consistency<T>(const Tensor<T>&, const Tensor<T>&, std::span<const std::size_t>, T); \
  template Tensor<T> loss_total<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

PUDNET_INSTANTIATE_LOSSES(float)
PUDNET_INSTANTIATE_LOSSES(double)

#undef PUDNET_INSTANTIATE_LOSSES

}  // namespace pudnet::losses
