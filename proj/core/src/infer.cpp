#include "pudnet/infer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <mutex>
#include <thread>
#include <tuple>

#include "pudnet/errors.hpp"
#include "pudnet/ops.hpp"
#include "pudnet/train.hpp"

namespace pudnet::infer {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class T>
double nearest_centroid_accuracy(const Tensor<T>& emb, const losses::Centroids<T>& cents,
                                 std::span<const std::size_t> labels) {
  const Tensor<T> cos = ops::cosine_matrix(emb, cents.u);
  const std::size_t k = cents.u.dim(0);
  auto c = cos.data();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = c.subspan(b * k, k);
    const std::size_t pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += pred == labels[b];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

template <class T>
double centroid_accuracy(const target::BoundNetwork<T>& net, const data::ImageCorpus& corpus,
                         const data::TaskGroup& group, std::size_t shots) {
  NoGradScope<T> no_grad;
  const Tensor<T> support = data::batch_images<T>(corpus, group.support);
  const auto cents = losses::compute_centroids(net, support, group.support_labels, group.class_map, shots);
  const Tensor<T> emb = net(data::batch_images<T>(corpus, group.query));
  return nearest_centroid_accuracy(emb, cents, group.query_labels);
}

template <class T>
PredictResult predict_and_eval(hyper::PudNet<T>& pud, const target::TargetSpec& spec,
                               const data::ImageCorpus& corpus, const data::TaskGroup& group,
                               std::size_t shots) {
  NoGradScope<T> no_grad;
  const auto t0 = Clock::now();
  const Tensor<T> support = data::batch_images<T>(corpus, group.support);
  const Tensor<T> sketch = data::compute_sketch(pud.extractor, support, data::Mode::Eval);
  const auto kernels = hyper::predict_params(pud, spec, sketch);
  PredictResult r;
  r.predict_seconds = seconds_since(t0);
  r.accuracy = centroid_accuracy(target::inject(spec, kernels), corpus, group, shots);
  return r;
}

template <class T>
double train_scratch(const target::TargetSpec& spec, target::ParamSet<T>& params, const Tensor<T>& images,
                     std::span<const std::size_t> labels, std::size_t n_way, const ScratchConfig& cfg) {
  if (cfg.epochs == 0) throw ContractError("scratch training needs epochs >= 1");
  const std::size_t n = images.dim(0);
  if (labels.size() != n) throw DimensionError("scratch training: label count mismatch");
  const std::size_t bs = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  std::vector<std::size_t> class_map(n_way);
  std::iota(class_map.begin(), class_map.end(), std::size_t{0});
  const Tensor<T> tau({1}, {static_cast<T>(cfg.tau)});
  train::AdamState<T> adam;
  std::vector<Tensor<T>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  const Rng root(cfg.seed);
  const auto t0 = Clock::now();
  std::vector<std::size_t> order(n);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (bs < n) {
      Rng rng = root.split("scratch-epoch", e);
      rng.shuffle(std::span<std::size_t>(order));
    }
    for (std::size_t lo = 0; lo < n; lo += bs) {
      const std::size_t hi = std::min(lo + bs, n);
      std::vector<std::size_t> idx(order.begin() + lo, order.begin() + hi);
      // a batch missing a class cannot form its centroid; fall back to the
      // whole set for that step
      std::vector<std::size_t> counts(n_way, 0);
      for (auto i : idx) ++counts[labels[i]];
      const std::size_t min_count = *std::min_element(counts.begin(), counts.end());
      if (min_count == 0) {
        idx.resize(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
      }
      std::vector<std::size_t> y;
      for (auto i : idx) y.push_back(labels[i]);
      std::size_t shots = cfg.shots;
      for (std::size_t k = 0; k < n_way; ++k) shots = std::min(shots, static_cast<std::size_t>(std::count(y.begin(), y.end(), k)));
      GradTape<T> tape;
      {
        TapeScope<T> scope(tape);
        const Tensor<T> emb = target::forward(spec, params, ops::gather_rows(images, idx));
        const auto cents = losses::compute_centroids(emb, y, class_map, shots);
        backward(losses::loss_metric(emb, cents, y, tau));
      }
      std::vector<std::vector<T>> grads;
      for (auto& p : params) {
        grads.push_back(p.grad());
        p.zero_grad();
      }
      train::adam_step<T>(adam, ptrs, grads, train::AdamConfig{cfg.lr});
    }
  }
  return seconds_since(t0);
}

template <class T>
ScratchResult baseline_scratch(const target::TargetSpec& spec, const data::ImageCorpus& corpus,
                               const data::TaskGroup& group, const ScratchConfig& cfg) {
  if (cfg.epochs == 0) throw ContractError("baseline_scratch needs epochs >= 1");
  Rng rng = Rng(cfg.seed).split("scratch-init", group.id);
  auto params = target::random_params<T>(spec, rng);
  const auto t0 = Clock::now();
  const Tensor<T> support = data::batch_images<T>(corpus, group.support);
  train_scratch(spec, params, support, group.support_labels, group.n_way(), cfg);
  ScratchResult r;
  r.train_seconds = seconds_since(t0);
  r.accuracy = centroid_accuracy(target::inject(spec, params), corpus, group, cfg.shots);
  return r;
}

template <class T>
std::vector<double> evaluate_tasks(hyper::PudNet<T>& pud, const target::TargetSpec& spec,
                                   const data::ImageCorpus& corpus,
                                   const std::vector<data::TaskGroup>& tasks, std::size_t shots,
                                   std::size_t threads) {
  std::vector<double> acc(tasks.size(), 0.0);
  threads = std::max<std::size_t>(1, std::min(threads, tasks.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) acc[i] = predict_and_eval(pud, spec, corpus, tasks[i], shots).accuracy;
    return acc;
  }
  // Eval mode leaves the extractor untouched, so workers share it read-only.
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mu;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      try {
        for (std::size_t i = next++; i < tasks.size(); i = next++) {
          acc[i] = predict_and_eval(pud, spec, corpus, tasks[i], shots).accuracy;
        }
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return acc;
}

std::string EvalReport::csv() const {
  std::ostringstream os;
  os << "method,epochs,acc_mean,acc_std,seconds,speedup\n" << std::setprecision(6);
  for (const auto& r : rows) {
    os << r.method << ',' << r.epochs << ',' << r.acc_mean << ',' << r.acc_std << ',' << r.seconds << ','
       << r.speedup << '\n';
  }
  return os.str();
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << csv();
}

template <class T>
EvalReport compare(hyper::PudNet<T>& pud, const target::TargetSpec& spec, const data::ImageCorpus& corpus,
                   const std::vector<data::TaskGroup>& tasks, std::span<const std::size_t> epochs_list,
                   const ScratchConfig& scratch) {
  if (tasks.empty()) throw ConfigError("compare needs at least one task");
  EvalReport report;
  EvalRow pud_row;
  pud_row.method = "pudnet";
  double secs = 0.0;
  for (const auto& g : tasks) {
    const auto r = predict_and_eval(pud, spec, corpus, g, scratch.shots);
    pud_row.accuracies.push_back(r.accuracy);
    secs += r.predict_seconds;
  }
  std::tie(pud_row.acc_mean, pud_row.acc_std) = mean_std(pud_row.accuracies);
  pud_row.seconds = secs / static_cast<double>(tasks.size());
  report.rows.push_back(pud_row);
  for (std::size_t epochs : epochs_list) {
    ScratchConfig cfg = scratch;
    cfg.epochs = epochs;
    EvalRow row;
    row.method = "scratch";
    row.epochs = epochs;
    double s = 0.0;
    for (const auto& g : tasks) {
      const auto r = baseline_scratch<T>(spec, corpus, g, cfg);
      row.accuracies.push_back(r.accuracy);
      s += r.train_seconds;
    }
    std::tie(row.acc_mean, row.acc_std) = mean_std(row.accuracies);
    row.seconds = s / static_cast<double>(tasks.size());
    row.speedup = pud_row.seconds > 0.0 ? row.seconds / pud_row.seconds : 0.0;
    report.rows.push_back(row);
  }
  return report;
}

#define PUDNET_INSTANTIATE_INFER(T)                                                                     \
  template PredictResult predict_and_eval<T>(hyper::PudNet<T>&, const target::TargetSpec&,             \
                                             const data::ImageCorpus&, const data::TaskGroup&, std::size_t); \
  template double centroid_accuracy<T>(const target::BoundNetwork<T>&, const data::ImageCorpus&,       \
                                       const data::TaskGroup&, std::size_t);                           \
  template ScratchResult baseline_scratch<T>(const target::TargetSpec&, const data::ImageCorpus&,      \
                                             const data::TaskGroup&, const ScratchConfig&);            \
  template double train_scratch<T>(const target::TargetSpec&, target::ParamSet<T>&, const Tensor<T>&,  \
                                   std::span<const std::size_t>, std::size_t, const ScratchConfig&);   \
  template std::vector<double> evaluate_tasks<T>(hyper::PudNet<T>&, const target::TargetSpec&,         \
                                                 const data::ImageCorpus&,                             \
                                                 const std::vector<data::TaskGroup>&, std::size_t,     \
                                                 std::size_t);                                         \
  template EvalReport compare<T>(hyper::PudNet<T>&, const target::TargetSpec&, const data::ImageCorpus&, \
                                 const std::vector<data::TaskGroup>&, std::span<const std::size_t>,    \
                                 const ScratchConfig&);

PUDNET_INSTANTIATE_INFER(float)
PUDNET_INSTANTIATE_INFER(double)

#undef PUDNET_INSTANTIATE_INFER

}  // namespace pudnet::infer
