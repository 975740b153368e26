#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "pudnet/serialize.hpp"
#include "pudnet/train.hpp"

using namespace pudnet;
using namespace pudnet::train;
using pudnet::testing::Tiny;
namespace fs = std::filesystem;

namespace {

std::vector<NamedTensor> snapshot(hyper::PudNet<float>& pud, losses::FullHead<float>& head) {
  return model_state(pud, &head);
}

bool same(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].name != b[i].name || a[i].values != b[i].values) return false;
  return true;
}

fs::path temp(const std::string& name) { return fs::temp_directory_path() / ("pudnet_train_" + name); }

}  // namespace

TEST(Adam, HandComputedScalarStep) {
  Tensord x({1}, {1.0});
  Tensord* p = &x;
  AdamState<double> st;
  const std::vector<std::vector<double>> g{{0.5}};
  adam_step<double>(st, std::span<Tensord* const>(&p, 1), g, AdamConfig{0.1});
  // m = 0.05, v = 0.00025; m^ = 0.5, v^ = 0.25
  EXPECT_NEAR(x.item(), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-10);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensord x({3}, {1, -2, 3});
  Tensord* p = &x;
  AdamState<double> st;
  const std::vector<std::vector<double>> g{{0, 0, 0}};
  for (int i = 0; i < 5; ++i) adam_step<double>(st, std::span<Tensord* const>(&p, 1), g, AdamConfig{0.1});
  EXPECT_EQ(x.data()[1], -2.0);
}

TEST(Adam, ConstantGradientStepApproachesLr) {
  Tensord x({1}, {0.0});
  Tensord* p = &x;
  AdamState<double> st;
  const std::vector<std::vector<double>> g{{3.7}};
  double prev = 0.0, step = 0.0;
  for (int i = 0; i < 200; ++i) {
    adam_step<double>(st, std::span<Tensord* const>(&p, 1), g, AdamConfig{0.01});
    step = prev - x.item();
    prev = x.item();
    EXPECT_LE(step, 0.01 + 1e-12);
  }
  EXPECT_NEAR(step, 0.01, 1e-8);
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
  std::vector<std::vector<double>> g{{3, 0}, {4}};
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>(g, 10.0), 5.0);
  EXPECT_EQ(g[0][0], 3.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[1][0], 0.8, 1e-15);
}

TEST(Trainer, ZeroStepsLeaveParametersBitwise) {
  Tiny tiny;
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  const auto before = snapshot(pud, head);
  Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, TrainConfig{});
  tr.run(0);
  EXPECT_TRUE(same(before, snapshot(pud, head)));
  EXPECT_TRUE(tr.log().records.empty());
}

TEST(Trainer, SeparableTaskMetricLossHalves) {
  Tiny tiny(1, 2);
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.shots = 5;
  cfg.lr = 3e-3;
  cfg.metric_only = true;
  Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  tr.run();
  const auto& r = tr.log().records;
  ASSERT_EQ(r.size(), 200u);
  EXPECT_LT(r.back().l1, 0.5 * r.front().l1);
}

TEST(Trainer, TotalLossFallsWithAllTerms) {
  Tiny tiny(1, 2);
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.shots = 5;
  Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  tr.run();
  const auto& r = tr.log().records;
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 20; ++i) first += r[i].total, last += r[180 + i].total;
  EXPECT_LT(last, first);
}

TEST(Trainer, DeterministicLossLog) {
  Tiny tiny;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.shots = 5;
  cfg.seed = 9;
  std::string csv[2];
  for (auto& c : csv) {
    auto pud = tiny.pudnet<float>();
    auto head = tiny.head<float>();
    Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
    tr.run();
    c = tr.log().csv();
  }
  EXPECT_EQ(csv[0], csv[1]);
  EXPECT_EQ(csv[0].substr(0, csv[0].find('\n')), "step,task_id,l1,l2,l3,total");
}

TEST(Trainer, CheckpointResumeReproducesLosses) {
  Tiny tiny;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 5;
  cfg.shots = 5;
  cfg.seed = 4;
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  Trainer<float> full(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  full.run();

  auto pud2 = tiny.pudnet<float>();
  auto head2 = tiny.head<float>();
  Trainer<float> first(pud2, head2, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  first.run(7);
  const auto ckpt = temp("resume.pudn");
  first.save_checkpoint(ckpt);

  auto pud3 = tiny.pudnet<float>(77);  // different init, overwritten by the checkpoint
  auto head3 = tiny.head<float>(78);
  Trainer<float> resumed(pud3, head3, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  resumed.load_checkpoint(ckpt);
  EXPECT_EQ(resumed.step(), 7u);
  resumed.run();
  const auto& a = full.log().records;
  const auto& b = resumed.log().records;
  ASSERT_EQ(b.size(), a.size() - 7);
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(b[i].step, a[7 + i].step);
    EXPECT_NEAR(b[i].total, a[7 + i].total, 1e-6);
  }
  fs::remove(ckpt);
}

TEST(Trainer, CorruptCheckpointIsFormatError) {
  Tiny tiny;
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  TrainConfig cfg;
  cfg.shots = 5;
  Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  const auto path = temp("corrupt.pudn");
  tr.save_checkpoint(path);
  fs::resize_file(path, fs::file_size(path) / 2);
  EXPECT_THROW(tr.load_checkpoint(path), FormatError);
  {
    std::ofstream os(path, std::ios::binary);
    os << "garbage";
  }
  EXPECT_THROW(tr.load_checkpoint(path), FormatError);
  fs::remove(path);
  EXPECT_THROW(tr.load_checkpoint(path), NotFoundError);
}

TEST(ModelState, FreshInitRoundTrip) {
  Tiny tiny;
  auto pud = tiny.pudnet<float>(1);
  auto head = tiny.head<float>(2);
  const auto path = temp("model.pudn");
  save_named_tensors(path, model_state(pud, &head));
  auto other = tiny.pudnet<float>(5);
  auto other_head = tiny.head<float>(6);
  EXPECT_FALSE(same(snapshot(pud, head), snapshot(other, other_head)));
  load_model_state(other, &other_head, load_named_tensors(path));
  EXPECT_TRUE(same(snapshot(pud, head), snapshot(other, other_head)));

  auto state = model_state(pud, &head);
  state.pop_back();
  EXPECT_THROW(load_model_state(other, &other_head, state), FormatError);
  state = model_state(pud, &head);
  state[0].shape.push_back(1);
  EXPECT_THROW(load_model_state(other, &other_head, state), FormatError);
  state = model_state(pud, &head);
  state.push_back({"bogus", {1}, {0.0f}});
  EXPECT_THROW(load_model_state(other, &other_head, state), FormatError);
  fs::remove(path);
}

TEST(Trainer, MetricOnlyLeavesHeadUntouched) {
  Tiny tiny;
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  const std::vector<float> w(head.W.data().begin(), head.W.data().end());
  TrainConfig cfg;
  cfg.shots = 5;
  cfg.metric_only = true;
  Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  tr.run();
  EXPECT_EQ(std::vector<float>(head.W.data().begin(), head.W.data().end()), w);
  for (const auto& r : tr.log().records) {
    EXPECT_EQ(r.l2, 0.0);
    EXPECT_EQ(r.l3, 0.0);
    EXPECT_EQ(r.total, r.l1);
  }
}

TEST(Trainer, NoContextBypassesRecurrence) {
  Tiny tiny;
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  TrainConfig cfg;
  cfg.shots = 5;
  cfg.no_context = true;
  Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  tr.run(2);
  hyper::PredictStats stats;
  hyper::predict_params(pud, tiny.spec, Tensorf::zeros({8}), &stats);
  EXPECT_EQ(stats.ahru_steps, 0u);
  EXPECT_EQ(stats.generator_calls, 3u);
}

TEST(Trainer, DivergenceNamesTheStep) {
  Tiny tiny;
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  TrainConfig cfg;
  cfg.shots = 5;
  cfg.epochs = 50;
  cfg.lr = 1e30;
  Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  try {
    tr.run();
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at step"), std::string::npos) << e.what();
  }
}

TEST(Trainer, Preconditions) {
  Tiny tiny;
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  TrainConfig cfg;
  cfg.shots = 5;
  EXPECT_THROW(Trainer<float>(pud, head, tiny.spec, tiny.corpus, {}, cfg), ConfigError);
  cfg.lr = 0.0;
  EXPECT_THROW(Trainer<float>(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg), ConfigError);
  cfg.lr = 1e-3;
  cfg.checkpoint_every = 3;
  EXPECT_THROW(Trainer<float>(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg), ConfigError);
  auto wrong = losses::FullHead<float>::zeros(8, 5);
  cfg.checkpoint_every = 0;
  EXPECT_THROW(Trainer<float>(pud, wrong, tiny.spec, tiny.corpus, tiny.tasks, cfg), ConfigError);
}

TEST(Trainer, ClipEventsAreCounted) {
  Tiny tiny;
  auto pud = tiny.pudnet<float>();
  auto head = tiny.head<float>();
  TrainConfig cfg;
  cfg.shots = 5;
  cfg.clip_norm = 1e-6;
  Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  tr.run();
  EXPECT_EQ(tr.log().clip_events, tiny.tasks.size());
}
