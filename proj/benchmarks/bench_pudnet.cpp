#include <benchmark/benchmark.h>

#include "pudnet/data.hpp"
#include "pudnet/hypernet.hpp"
#include "pudnet/infer.hpp"
#include "pudnet/losses.hpp"
#include "pudnet/ops.hpp"
#include "pudnet/targetnet.hpp"
#include "pudnet/train.hpp"

using namespace pudnet;

namespace {

Tensorf uniform(Shape shape, Rng& rng) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensorf(std::move(shape), std::move(v));
}

// 3×3 conv, batch 40 at 16×16, `range(0)` channels in and out.
void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto x = uniform({40, c, 16, 16}, rng), w = uniform({c, c, 3, 3}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(1)->Arg(8)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_Conv2dBackward(benchmark::State& state) {
  Rng rng(2);
  auto x = uniform({40, 32, 16, 16}, rng), w = uniform({32, 32, 3, 3}, rng);
  w.set_requires_grad(true);
  for (auto _ : state) {
    GradTape<float> tape;
    TapeScope<float> scope(tape);
    backward(ops::sum(ops::conv2d(x, w, 1, 1)));
    w.zero_grad();
  }
}
BENCHMARK(BM_Conv2dBackward)->Unit(benchmark::kMillisecond);

struct Model {
  data::ImageCorpus corpus;
  target::TargetSpec spec = target::convnet3_spec(1, 32, 32);
  hyper::PudNet<float> pud;
  losses::FullHead<float> head;
  std::vector<data::TaskGroup> tasks;

  Model() {
    data::SyntheticSpec s;
    s.n_classes = 6;
    s.per_class = 40;
    s.clutter = 0.7;
    corpus = data::make_synthetic_corpus(s);
    tasks = data::sample_task_groups(corpus, {4, 10, 30, 8, 3});
    Rng rng(4);
    pud = hyper::PudNet<float>::init(hyper::HyperConfig{}, spec, rng);
    head = losses::FullHead<float>::init(spec.embedding_dim, corpus.num_classes(), rng);
  }
};

// Support set -> sketch -> three generated kernels.
void BM_PredictParams(benchmark::State& state) {
  Model m;
  NoGradScope<float> no_grad;
  const auto support = data::batch_images<float>(m.corpus, m.tasks[0].support);
  for (auto _ : state) {
    const auto sketch = data::compute_sketch(m.pud.extractor, support, data::Mode::Eval);
    benchmark::DoNotOptimize(hyper::predict_params(m.pud, m.spec, sketch));
  }
}
BENCHMARK(BM_PredictParams)->Unit(benchmark::kMillisecond);

void BM_PredictAndEval(benchmark::State& state) {
  Model m;
  for (auto _ : state) benchmark::DoNotOptimize(infer::predict_and_eval(m.pud, m.spec, m.corpus, m.tasks[0]));
}
BENCHMARK(BM_PredictAndEval)->Unit(benchmark::kMillisecond);

// One meta-training step over a whole 120-image query set.
void BM_TrainStep(benchmark::State& state) {
  Model m;
  train::TrainConfig cfg;
  cfg.epochs = 1000000;
  train::Trainer<float> trainer(m.pud, m.head, m.spec, m.corpus, m.tasks, cfg);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step_once());
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_ScratchBaseline30(benchmark::State& state) {
  Model m;
  infer::ScratchConfig sc;
  sc.epochs = 30;
  for (auto _ : state) benchmark::DoNotOptimize(infer::baseline_scratch<float>(m.spec, m.corpus, m.tasks[0], sc));
}
BENCHMARK(BM_ScratchBaseline30)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
