#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pudnet/rng.hpp"
#include "pudnet/targetnet.hpp"
#include "pudnet/tensor.hpp"

namespace pudnet::losses {

template <class T>
struct Centroids {
  Tensor<T> u;                         // [n_way, embedding_dim]
  std::vector<std::size_t> class_map;  // local -> global
};

/// u_k = mean embedding of the first `shots` samples of local class k, in the
/// order given. Throws ConfigError when a class has fewer than `shots`.
template <class T>
Centroids<T> compute_centroids(const Tensor<T>& embeddings, std::span<const std::size_t> labels,
                               std::span<const std::size_t> class_map, std::size_t shots);

/// Same, embedding only the selected samples with `net`.
template <class T>
Centroids<T> compute_centroids(const target::BoundNetwork<T>& net, const Tensor<T>& images,
                               std::span<const std::size_t> labels,
                               std::span<const std::size_t> class_map, std::size_t shots);

/// Indices of the first `shots` samples of each class (class order 0..n_way-1).
std::vector<std::size_t> centroid_sample_indices(std::span<const std::size_t> labels,
                                                 std::size_t n_way, std::size_t shots);

/// logit[b,k] = tau · cos(embedding_b, u_k). tau is a [1] or scalar tensor.
template <class T>
Tensor<T> metric_logits(const Tensor<T>& embeddings, const Centroids<T>& centroids, const Tensor<T>& tau);
template <class T>
Tensor<T> metric_logits(const Tensor<T>& embeddings, const Centroids<T>& centroids, T tau);

/// L1: cross-entropy of the metric probabilities against local labels.
template <class T>
Tensor<T> loss_metric(const Tensor<T>& embeddings, const Centroids<T>& centroids,
                      std::span<const std::size_t> local_labels, const Tensor<T>& tau);

/// Linear classifier over the global training classes, used only in meta-training.
template <class T>
struct FullHead {
  Tensor<T> W;  // [embedding_dim, n_classes]
  Tensor<T> b;  // [n_classes]

  static FullHead init(std::size_t embedding_dim, std::size_t n_classes, Rng& rng);
  static FullHead zeros(std::size_t embedding_dim, std::size_t n_classes);

  std::size_t n_classes() const { return b.dim(0); }
  Tensor<T> logits(const Tensor<T>& embeddings) const;
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
};

/// L2: cross-entropy of the head's logits against global class indices.
template <class T>
Tensor<T> loss_full(const FullHead<T>& head, const Tensor<T>& embeddings,
                    std::span<const std::size_t> global_labels);

/// L3: mean_b KL(full ‖ padded metric), eps inside the log of the padded side.
template <class T>
Tensor<T> loss_consistency(const Tensor<T>& metric_probs, const Tensor<T>& full_probs,
                           std::span<const std::size_t> class_map, T eps = T(1e-8));

/// L1 + L2 + L3. Undefined terms are treated as absent.
template <class T>
Tensor<T> loss_total(const Tensor<T>& l1, const Tensor<T>& l2, const Tensor<T>& l3);

}  // namespace pudnet::losses
