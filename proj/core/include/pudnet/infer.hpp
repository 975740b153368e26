#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pudnet/data.hpp"
#include "pudnet/hypernet.hpp"
#include "pudnet/losses.hpp"
#include "pudnet/targetnet.hpp"

namespace pudnet::infer {

struct PredictResult {
  double accuracy = 0.0;
  double predict_seconds = 0.0;  // support batching + sketch + parameter prediction
};

/// Generates parameters from the support set in one forward pass, then labels
/// every query by its nearest centroid in cosine similarity. Records no tape.
template <class T>
PredictResult predict_and_eval(hyper::PudNet<T>& pud, const target::TargetSpec& spec,
                               const data::ImageCorpus& corpus, const data::TaskGroup& group,
                               std::size_t shots = 10);

/// Fraction of queries whose nearest centroid (cosine) is their own class.
template <class T>
double centroid_accuracy(const target::BoundNetwork<T>& net, const data::ImageCorpus& corpus,
                         const data::TaskGroup& group, std::size_t shots);

struct ScratchConfig {
  std::size_t epochs = 30;
  double lr = 1e-3;
  double tau = 10.0;
  std::size_t batch_size = 0;  // support samples per step; 0 = whole support set
  std::size_t shots = 10;
  std::uint64_t seed = 0;
};

struct ScratchResult {
  double accuracy = 0.0;
  double train_seconds = 0.0;
};

/// Trains a randomly initialised parameter set for `epochs` passes over the
/// support set with the metric loss (centroids recomputed each step), then
/// evaluates on the query set.
template <class T>
ScratchResult baseline_scratch(const target::TargetSpec& spec, const data::ImageCorpus& corpus,
                               const data::TaskGroup& group, const ScratchConfig& cfg);

/// The scratch training loop on an arbitrary labelled image batch. `params`
/// is updated in place; returns the wall time spent.
template <class T>
double train_scratch(const target::TargetSpec& spec, target::ParamSet<T>& params, const Tensor<T>& images,
                     std::span<const std::size_t> labels, std::size_t n_way, const ScratchConfig& cfg);

struct EvalRow {
  std::string method;  // "pudnet" or "scratch"
  std::size_t epochs = 0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  double seconds = 0.0;  // mean per task
  double speedup = 0.0;  // baseline seconds / pudnet seconds; 0 for the pudnet row
  std::vector<double> accuracies;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  std::string csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Mean and population standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);

/// Accuracy of predicted parameters on every task. `threads` > 1 evaluates
/// tasks concurrently.
template <class T>
std::vector<double> evaluate_tasks(hyper::PudNet<T>& pud, const target::TargetSpec& spec,
                                   const data::ImageCorpus& corpus,
                                   const std::vector<data::TaskGroup>& tasks, std::size_t shots = 10,
                                   std::size_t threads = 1);

/// One "pudnet" row followed by one "scratch" row per entry of epochs_list.
/// Runs sequentially so the timings are comparable.
template <class T>
EvalReport compare(hyper::PudNet<T>& pud, const target::TargetSpec& spec, const data::ImageCorpus& corpus,
                   const std::vector<data::TaskGroup>& tasks, std::span<const std::size_t> epochs_list,
                   const ScratchConfig& scratch);

}  // namespace pudnet::infer
