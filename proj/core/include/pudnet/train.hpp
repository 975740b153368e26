#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pudnet/data.hpp"
#include "pudnet/hypernet.hpp"
#include "pudnet/losses.hpp"
#include "pudnet/serialize.hpp"
#include "pudnet/targetnet.hpp"

namespace pudnet::train {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 0;  // query samples per step; 0 = the whole query set
  std::size_t epochs = 1;      // passes over the task list
  std::size_t max_steps = 0;   // 0 = no cap beyond epochs
  std::uint64_t seed = 0;
  std::size_t shots = 10;      // support samples per class used for centroids
  double clip_norm = 10.0;     // global gradient-norm clip; <= 0 disables
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;
  bool no_context = false;
  bool metric_only = false;  // L1 only
  bool no_kl = false;        // L1 + L2

  void validate() const;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t t = 0;
};

/// One Adam update of `params` (bias-corrected moments). Buffers are created
/// lazily on the first call and must keep mirroring the parameter shapes.
template <class T>
void adam_step(AdamState<T>& state, std::span<Tensor<T>* const> params,
               std::span<const std::vector<T>> grads, const AdamConfig& cfg);

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::span<std::vector<T>> grads, double max_norm);

struct LossRecord {
  std::size_t step = 0;
  std::uint32_t task_id = 0;
  double l1 = 0, l2 = 0, l3 = 0, total = 0;
};

struct LossLog {
  std::vector<LossRecord> records;
  std::size_t clip_events = 0;

  std::string csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Meta-training over task groups. A step is one query batch of one task
/// visit: sketch -> predicted parameters -> centroids -> losses -> update.
/// The visit order of each epoch is a function of (seed, epoch) only, so the
/// step counter alone locates the position in the schedule.
template <class T>
class Trainer {
 public:
  Trainer(hyper::PudNet<T>& pud, losses::FullHead<T>& head, target::TargetSpec spec,
          const data::ImageCorpus& corpus, std::vector<data::TaskGroup> tasks, TrainConfig cfg);

  std::size_t total_steps() const { return total_steps_; }
  std::size_t step() const { return step_; }
  bool done() const { return step_ >= total_steps_; }

  LossRecord step_once();
  /// Runs up to `n` further steps (all remaining by default).
  void run(std::size_t n = static_cast<std::size_t>(-1),
           const std::function<void(const LossRecord&)>& on_step = {});

  const LossLog& log() const { return log_; }

  std::vector<NamedTensor> state() const;
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  struct Slot {
    std::size_t task;
    std::size_t batch;
    std::size_t visit;  // global visit index, seeds the query shuffle
  };
  Slot locate(std::size_t step) const;
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;
  std::vector<std::pair<std::string, Tensor<T>*>> trainable();

  hyper::PudNet<T>& pud_;
  losses::FullHead<T>& head_;
  target::TargetSpec spec_;
  const data::ImageCorpus& corpus_;
  std::vector<data::TaskGroup> tasks_;
  TrainConfig cfg_;
  std::vector<std::size_t> batches_per_task_;
  std::size_t steps_per_epoch_ = 0;
  std::size_t total_steps_ = 0;
  std::size_t step_ = 0;
  AdamState<T> adam_;
  LossLog log_;
};

template <class T>
LossLog train(hyper::PudNet<T>& pud, losses::FullHead<T>& head, const target::TargetSpec& spec,
              const data::ImageCorpus& corpus, const std::vector<data::TaskGroup>& tasks,
              const TrainConfig& cfg);

/// Model tensors (hypernetwork parameters, batch-norm buffers, head).
template <class T>
std::vector<NamedTensor> model_state(hyper::PudNet<T>& pud, losses::FullHead<T>* head);

/// Assigns every tensor of `state` to the model. Unknown names, missing names
/// and shape mismatches raise FormatError. Names under `ignore_prefixes` are skipped.
template <class T>
void load_model_state(hyper::PudNet<T>& pud, losses::FullHead<T>* head,
                      std::span<const NamedTensor> state,
                      std::span<const std::string> ignore_prefixes = {});

}  // namespace pudnet::train
