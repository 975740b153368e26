#include "pudnet/train.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "pudnet/errors.hpp"
#include "pudnet/ops.hpp"

namespace pudnet::train {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be > 0");
  if (shots == 0) throw ConfigError("train.shots must be >= 1");
  if (!std::isfinite(clip_norm)) throw ConfigError("train.clip_norm must be finite");
}

template <class T>
void adam_step(AdamState<T>& state, std::span<Tensor<T>* const> params,
               std::span<const std::vector<T>> grads, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ContractError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (Tensor<T>* p : params) {
      state.m.emplace_back(p->numel(), T(0));
      state.v.emplace_back(p->numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    if (g.size() != m.size() || params[i]->numel() != m.size()) {
      throw ContractError("adam_step: buffer shape differs from parameter " + std::to_string(i));
    }
    auto w = params[i]->mutable_data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <class T>
double clip_grad_norm(std::span<std::vector<T>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (T& v : g) v *= factor;
  }
  return norm;
}

std::string LossLog::csv() const {
  std::ostringstream os;
  os << "step,task_id,l1,l2,l3,total\n" << std::setprecision(9);
  for (const auto& r : records) {
    os << r.step << ',' << r.task_id << ',' << r.l1 << ',' << r.l2 << ',' << r.l3 << ',' << r.total << '\n';
  }
  return os.str();
}

void LossLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << csv();
}

namespace {

void check_tasks(const std::vector<data::TaskGroup>& tasks, const data::ImageCorpus& corpus) {
  if (tasks.empty()) throw ConfigError("training needs at least one task group");
  for (const auto& g : tasks) {
    if (g.support.empty() || g.query.empty()) {
      throw ConfigError("task " + std::to_string(g.id) + " has an empty support or query set");
    }
    for (auto c : g.class_map) {
      if (c >= corpus.num_classes()) {
        throw ConfigError("task " + std::to_string(g.id) + " references class " + std::to_string(c) +
                          " outside the corpus");
      }
    }
  }
}

}  // namespace

template <class T>
Trainer<T>::Trainer(hyper::PudNet<T>& pud, losses::FullHead<T>& head, target::TargetSpec spec,
                    const data::ImageCorpus& corpus, std::vector<data::TaskGroup> tasks, TrainConfig cfg)
    : pud_(pud), head_(head), spec_(std::move(spec)), corpus_(corpus), tasks_(std::move(tasks)), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.checkpoint_every > 0 && cfg_.checkpoint_path.empty()) {
    throw ConfigError("train.checkpoint_every needs a checkpoint path");
  }
  spec_.validate();
  check_tasks(tasks_, corpus_);
  if (pud_.generators.size() != spec_.layers.size()) {
    throw ConfigError("hypernetwork generators do not match the target spec");
  }
  if (head_.W.dim(0) != spec_.embedding_dim || head_.n_classes() != corpus_.num_classes()) {
    throw ConfigError("full head must map embedding_dim to the corpus class count");
  }
  pud_.config.no_context = cfg_.no_context;
  for (const auto& g : tasks_) {
    const std::size_t q = g.query.size();
    const std::size_t bs = cfg_.batch_size == 0 ? q : cfg_.batch_size;
    batches_per_task_.push_back((q + bs - 1) / bs);
  }
  steps_per_epoch_ = std::accumulate(batches_per_task_.begin(), batches_per_task_.end(), std::size_t{0});
  total_steps_ = steps_per_epoch_ * cfg_.epochs;
  if (cfg_.max_steps > 0) total_steps_ = std::min(total_steps_, cfg_.max_steps);
}

template <class T>
std::vector<std::size_t> Trainer<T>::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(tasks_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(cfg_.seed).split("epoch", epoch);
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

template <class T>
typename Trainer<T>::Slot Trainer<T>::locate(std::size_t step) const {
  const std::size_t epoch = step / steps_per_epoch_;
  std::size_t r = step % steps_per_epoch_;
  const auto order = epoch_order(epoch);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t nb = batches_per_task_[order[pos]];
    if (r < nb) return Slot{order[pos], r, epoch * order.size() + pos};
    r -= nb;
  }
  throw ContractError("step outside the schedule");
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> Trainer<T>::trainable() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (auto& [name, t] : pud_.named_parameters())
    if (t->requires_grad()) out.emplace_back(name, t);
  for (auto& [name, t] : head_.named_parameters())
    if (t->requires_grad()) out.emplace_back(name, t);
  return out;
}

template <class T>
LossRecord Trainer<T>::step_once() {
  if (done()) throw ContractError("training schedule already complete");
  const Slot slot = locate(step_);
  const data::TaskGroup& g = tasks_[slot.task];

  std::vector<std::size_t> qpos(g.query.size());
  std::iota(qpos.begin(), qpos.end(), std::size_t{0});
  const std::size_t nb = batches_per_task_[slot.task];
  if (nb > 1) {
    Rng rng = Rng(cfg_.seed).split("query-order", slot.visit);
    rng.shuffle(std::span<std::size_t>(qpos));
  }
  const std::size_t bs = cfg_.batch_size == 0 ? g.query.size() : cfg_.batch_size;
  const std::size_t lo = slot.batch * bs;
  const std::size_t hi = std::min(lo + bs, g.query.size());
  std::vector<std::size_t> q_idx, q_local, q_global;
  for (std::size_t i = lo; i < hi; ++i) {
    q_idx.push_back(g.query[qpos[i]]);
    q_local.push_back(g.query_labels[qpos[i]]);
    q_global.push_back(g.class_map[g.query_labels[qpos[i]]]);
  }

  auto params = trainable();
  LossRecord rec;
  rec.step = step_;
  rec.task_id = g.id;
  {
    GradTape<T> tape;
    TapeScope<T> scope(tape);
    try {
      const Tensor<T> support = data::batch_images<T>(corpus_, g.support);
      const Tensor<T> sketch = data::compute_sketch(pud_.extractor, support, data::Mode::Train);
      const auto kernels = hyper::predict_params(pud_, spec_, sketch);
      const auto net = target::inject(spec_, kernels);
      const auto cents = losses::compute_centroids(net, support, g.support_labels, g.class_map, cfg_.shots);
      const Tensor<T> emb = net(data::batch_images<T>(corpus_, q_idx));
      const Tensor<T> logits = losses::metric_logits(emb, cents, pud_.tau);
      const Tensor<T> l1 = ops::softmax_cross_entropy(logits, q_local);
      Tensor<T> l2, l3;
      if (!cfg_.metric_only) {
        const Tensor<T> full = head_.logits(emb);
        l2 = ops::softmax_cross_entropy(full, q_global);
        if (!cfg_.no_kl) l3 = losses::loss_consistency(ops::softmax(logits), ops::softmax(full), g.class_map);
      }
      const Tensor<T> total = losses::loss_total(l1, l2, l3);
      rec.l1 = l1.item();
      rec.l2 = l2.defined() ? l2.item() : 0.0;
      rec.l3 = l3.defined() ? l3.item() : 0.0;
      rec.total = total.item();
      if (!std::isfinite(rec.total)) throw NumericError("total loss is not finite");
      backward(total);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step_) + " (task " +
                         std::to_string(g.id) + "): " + e.what());
    }
  }

  std::vector<Tensor<T>*> ptrs;
  std::vector<std::vector<T>> grads;
  for (auto& [name, t] : params) {
    ptrs.push_back(t);
    grads.push_back(t->grad());
    t->zero_grad();
  }
  const double norm = clip_grad_norm<T>(grads, cfg_.clip_norm);
  if (!std::isfinite(norm)) {
    throw NumericError("training diverged at step " + std::to_string(step_) + ": gradient norm is not finite");
  }
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ++log_.clip_events;
  adam_step<T>(adam_, ptrs, grads, AdamConfig{cfg_.lr});

  log_.records.push_back(rec);
  ++step_;
  if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) save_checkpoint(cfg_.checkpoint_path);
  return rec;
}

template <class T>
void Trainer<T>::run(std::size_t n, const std::function<void(const LossRecord&)>& on_step) {
  for (std::size_t i = 0; i < n && !done(); ++i) {
    const LossRecord rec = step_once();
    if (on_step) on_step(rec);
  }
}

template <class T>
std::vector<NamedTensor> model_state(hyper::PudNet<T>& pud, losses::FullHead<T>* head) {
  std::vector<NamedTensor> out;
  for (auto& [name, t] : pud.named_parameters()) out.push_back(to_named(name, *t));
  for (auto& [name, buf] : pud.named_buffers()) {
    out.push_back(to_named(name, Tensor<T>({buf->size()}, *buf)));
  }
  if (head) {
    for (auto& [name, t] : head->named_parameters()) out.push_back(to_named(name, *t));
  }
  return out;
}

template <class T>
void load_model_state(hyper::PudNet<T>& pud, losses::FullHead<T>* head, std::span<const NamedTensor> state,
                      std::span<const std::string> ignore_prefixes) {
  std::map<std::string, Tensor<T>*> params;
  std::map<std::string, std::vector<T>*> buffers;
  for (auto& [name, t] : pud.named_parameters()) params[name] = t;
  for (auto& [name, b] : pud.named_buffers()) buffers[name] = b;
  if (head) {
    for (auto& [name, t] : head->named_parameters()) params[name] = t;
  }
  std::map<std::string, bool> seen;
  for (const auto& nt : state) {
    bool skip = !head && nt.name.starts_with("head/");
    for (const auto& p : ignore_prefixes) skip = skip || nt.name.starts_with(p);
    if (skip) continue;
    if (seen[nt.name]) throw FormatError("checkpoint repeats tensor '" + nt.name + "'");
    seen[nt.name] = true;
    if (auto it = params.find(nt.name); it != params.end()) {
      Tensor<T>& dst = *it->second;
      if (dst.shape() != nt.shape) {
        throw FormatError("checkpoint tensor '" + nt.name + "' has shape " + shape_str(nt.shape) +
                          ", model expects " + shape_str(dst.shape()));
      }
      const bool rg = dst.requires_grad();
      dst = from_named<T>(nt);
      dst.set_requires_grad(rg);
    } else if (auto bt = buffers.find(nt.name); bt != buffers.end()) {
      if (nt.values.size() != bt->second->size()) {
        throw FormatError("checkpoint buffer '" + nt.name + "' has the wrong length");
      }
      std::copy(nt.values.begin(), nt.values.end(), bt->second->begin());
    } else {
      throw FormatError("checkpoint contains unknown tensor '" + nt.name + "'");
    }
  }
  for (const auto& [name, _] : params)
    if (!seen[name]) throw FormatError("checkpoint is missing tensor '" + name + "'");
  for (const auto& [name, _] : buffers)
    if (!seen[name]) throw FormatError("checkpoint is missing buffer '" + name + "'");
}

template <class T>
std::vector<NamedTensor> Trainer<T>::state() const {
  auto& self = const_cast<Trainer&>(*this);
  auto out = model_state(self.pud_, &self.head_);
  out.push_back(to_named("train/step", Tensor<T>({1}, {static_cast<T>(step_)})));
  out.push_back(to_named("train/clip_events", Tensor<T>({1}, {static_cast<T>(log_.clip_events)})));
  out.push_back(to_named("adam/t", Tensor<T>({1}, {static_cast<T>(adam_.t)})));
  const auto params = self.trainable();
  if (!adam_.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back(to_named("adam/m/" + params[i].first, Tensor<T>(params[i].second->shape(), adam_.m[i])));
      out.push_back(to_named("adam/v/" + params[i].first, Tensor<T>(params[i].second->shape(), adam_.v[i])));
    }
  }
  return out;
}

template <class T>
void Trainer<T>::save_checkpoint(const std::filesystem::path& path) const {
  save_named_tensors(path, state());
}

template <class T>
void Trainer<T>::load_checkpoint(const std::filesystem::path& path) {
  const auto tensors = load_named_tensors(path);
  const std::vector<std::string> ignore = {"adam/", "train/"};
  load_model_state(pud_, &head_, tensors, ignore);
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& nt : tensors) by_name[nt.name] = &nt;
  auto scalar = [&](const std::string& name) -> std::size_t {
    auto it = by_name.find(name);
    if (it == by_name.end() || it->second->values.size() != 1) {
      throw FormatError("checkpoint is missing '" + name + "'");
    }
    return static_cast<std::size_t>(it->second->values[0]);
  };
  step_ = scalar("train/step");
  log_.clip_events = scalar("train/clip_events");
  adam_ = AdamState<T>{};
  adam_.t = scalar("adam/t");
  if (adam_.t > 0) {
    for (auto& [name, t] : trainable()) {
      auto m = by_name.find("adam/m/" + name);
      auto v = by_name.find("adam/v/" + name);
      if (m == by_name.end() || v == by_name.end()) throw FormatError("checkpoint lacks optimizer moments for '" + name + "'");
      if (m->second->values.size() != t->numel() || v->second->values.size() != t->numel()) {
        throw FormatError("optimizer moments for '" + name + "' have the wrong length");
      }
      adam_.m.emplace_back(m->second->values.begin(), m->second->values.end());
      adam_.v.emplace_back(v->second->values.begin(), v->second->values.end());
    }
  }
  for (const auto& nt : tensors) {
    if (!nt.name.starts_with("adam/") && !nt.name.starts_with("train/")) continue;
    if (nt.name == "adam/t" || nt.name == "train/step" || nt.name == "train/clip_events") continue;
    if (!nt.name.starts_with("adam/m/") && !nt.name.starts_with("adam/v/")) {
      throw FormatError("checkpoint contains unknown tensor '" + nt.name + "'");
    }
  }
  log_.records.clear();
}

template <class T>
LossLog train(hyper::PudNet<T>& pud, losses::FullHead<T>& head, const target::TargetSpec& spec,
              const data::ImageCorpus& corpus, const std::vector<data::TaskGroup>& tasks,
              const TrainConfig& cfg) {
  Trainer<T> trainer(pud, head, spec, corpus, tasks, cfg);
  trainer.run();
  return trainer.log();
}

#define PUDNET_INSTANTIATE_TRAIN(T)                                                                    \
  template void adam_step<T>(AdamState<T>&, std::span<Tensor<T>* const>, std::span<const std::vector<T>>, \
                             const AdamConfig&);                                                       \
  template double clip_grad_norm<T>(std::span<std::vector<T>>, double);                                \
  template class Trainer<T>;                                                                           \
  template LossLog train<T>(hyper::PudNet<T>&, losses::FullHead<T>&, const target::TargetSpec&,        \
                            const data::ImageCorpus&, const std::vector<data::TaskGroup>&,             \
                            const TrainConfig&);                                                       \
  template std::vector<NamedTensor> model_state<T>(hyper::PudNet<T>&, losses::FullHead<T>*);           \
  template void load_model_state<T>(hyper::PudNet<T>&, losses::FullHead<T>*, std::span<const NamedTensor>, \
                                    std::span<const std::string>);

PUDNET_INSTANTIATE_TRAIN(float)
PUDNET_INSTANTIATE_TRAIN(double)

#undef PUDNET_INSTANTIATE_TRAIN

}  // namespace pudnet::train
