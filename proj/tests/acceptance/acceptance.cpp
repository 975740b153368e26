// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria not listed in --expected-fail (capped at 100).
//
//   pudnet_acceptance [--only 1,2,5] [--steps N] [--expected-fail 9] [--report FILE]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "pudnet/config.hpp"
#include "pudnet/data.hpp"
#include "pudnet/hypernet.hpp"
#include "pudnet/infer.hpp"
#include "pudnet/losses.hpp"
#include "pudnet/ops.hpp"
#include "pudnet/targetnet.hpp"
#include "pudnet/train.hpp"

using namespace pudnet;
using pudnet::testing::gradcheck;
using pudnet::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<int> failed;
std::FILE* report = nullptr;  // copy of the verdict lines

void verdict(int id, bool pass, const std::string& what) {
  std::printf("%s %d %s\n", pass ? "PASS" : "FAIL", id, what.c_str());
  std::fflush(stdout);
  if (report) {
    std::fprintf(report, "%s %d %s\n", pass ? "PASS" : "FAIL", id, what.c_str());
    std::fflush(report);
  }
  if (!pass) failed.push_back(id);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensord weighted_sum(const Tensord& y, Rng& rng) { return ops::sum(ops::mul(y, random_tensor(y.shape(), rng))); }

std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// ---------------------------------------------------------------- 1

void gradient_fidelity() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  auto record = [&](const std::string& name, const testing::GradReport& r) {
    checked += r.checked;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
  };

  Rng rng(2024);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t m = draw(rng, 1, 4), k = draw(rng, 1, 4), n = draw(rng, 1, 4);
    auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    auto c = random_tensor({m, k}, rng), pos = random_tensor({m, k}, rng, 0.2, 2.0);
    auto e = random_tensor({m, n}, rng);
    Rng wr = rng.split("weights", trial);
    auto ws = [&](const Tensord& y) {
      Rng r = wr;
      return weighted_sum(y, r);
    };
    record("matmul", gradcheck({&a, &b}, [&] { return ws(ops::matmul(a, b)); }));
    record("transpose", gradcheck({&a}, [&] { return ws(ops::transpose(a)); }));
    record("add", gradcheck({&a, &c}, [&] { return ws(ops::add(a, c)); }));
    record("sub", gradcheck({&a, &c}, [&] { return ws(ops::sub(a, c)); }));
    record("mul", gradcheck({&a, &c}, [&] { return ws(ops::mul(a, c)); }));
    record("scale", gradcheck({&a}, [&] { return ws(ops::scale(a, -1.3)); }));
    record("add_scalar", gradcheck({&a}, [&] { return ws(ops::add_scalar(a, 0.7)); }));
    record("sigmoid", gradcheck({&a}, [&] { return ws(ops::sigmoid(a)); }));
    record("tanh", gradcheck({&a}, [&] { return ws(ops::tanh(a)); }));
    record("leaky_relu", gradcheck({&a}, [&] { return ws(ops::leaky_relu(a, 0.1)); }));
    record("log", gradcheck({&pos}, [&] { return ws(ops::log(pos)); }));
    record("reshape", gradcheck({&a}, [&] { return ws(ops::reshape(a, {m * k})); }));
    record("concat0", gradcheck({&a, &c}, [&] { return ws(ops::concat<double>({a, c}, 0)); }));
    record("concat1", gradcheck({&a, &e}, [&] { return ws(ops::concat<double>({a, e}, 1)); }));
    const std::vector<std::size_t> rows{m - 1, 0, m - 1};
    record("gather_rows", gradcheck({&a}, [&] { return ws(ops::gather_rows(a, rows)); }));
    record("sum", gradcheck({&a}, [&] { return ops::sum(ops::mul(a, a)); }));
    record("mean", gradcheck({&a}, [&] { return ops::mean(ops::mul(a, a)); }));
    for (std::size_t axis : {0, 1}) {
      record("sum_axis", gradcheck({&a}, [&] { return ws(ops::sum(a, axis)); }));
      record("mean_axis", gradcheck({&a}, [&] { return ws(ops::mean(a, axis)); }));
    }

    const std::size_t B = draw(rng, 1, 3), C = draw(rng, 1, 3), O = draw(rng, 1, 3), H = draw(rng, 4, 6);
    auto x = random_tensor({B, C, H, H}, rng);
    for (std::size_t kk : {1, 3})
      for (std::size_t stride : {1, 2})
        for (std::size_t pad : {0, 1}) {
          auto w = random_tensor({O, C, kk, kk}, rng);
          record("conv2d", gradcheck({&x, &w}, [&] { return ws(ops::conv2d(x, w, stride, pad)); }));
        }
    record("avg_pool2d", gradcheck({&x}, [&] { return ws(ops::avg_pool2d(x, 2)); }));
    record("global_avg_pool", gradcheck({&x}, [&] { return ws(ops::global_avg_pool(x)); }));
    record("instance_norm", gradcheck({&x}, [&] { return ws(ops::instance_norm(x)); }));
    auto xb = random_tensor({B + 1, C, H, H}, rng, -2.0, 3.0);
    auto g = random_tensor({C}, rng, 0.5, 1.5), be = random_tensor({C}, rng);
    record("batch_norm_train", gradcheck({&xb, &g, &be}, [&] { return ws(ops::batch_norm_train(xb, g, be).y); }));
    std::vector<double> rm(C), rv(C);
    for (std::size_t i = 0; i < C; ++i) {
      rm[i] = rng.uniform(-0.5, 0.5);
      rv[i] = rng.uniform(0.5, 2.0);
    }
    record("batch_norm_eval",
           gradcheck({&xb, &g, &be}, [&] { return ws(ops::batch_norm_eval<double>(xb, g, be, rm, rv)); }));

    const std::size_t R = draw(rng, 1, 4), K = draw(rng, 2, 6);
    auto z = random_tensor({R, K}, rng, -3.0, 3.0);
    std::vector<std::size_t> labels(R);
    for (auto& l : labels) l = rng.below(K);
    record("softmax", gradcheck({&z}, [&] { return ws(ops::softmax(z)); }));
    record("log_softmax", gradcheck({&z}, [&] { return ws(ops::log_softmax(z)); }));
    record("softmax_cross_entropy", gradcheck({&z}, [&] { return ops::softmax_cross_entropy(z, labels); }));

    const std::size_t D = draw(rng, 2, 6);
    auto u = random_tensor({D}, rng), v = random_tensor({D}, rng);
    auto U = random_tensor({R, D}, rng), V = random_tensor({K, D}, rng);
    record("l2_normalize", gradcheck({&U}, [&] { return ws(ops::l2_normalize(U)); }));
    record("cosine_similarity", gradcheck({&u, &v}, [&] { return ops::cosine_similarity(u, v); }));
    record("cosine_matrix", gradcheck({&U, &V}, [&] { return ws(ops::cosine_matrix(U, V)); }));

    const std::size_t nw = draw(rng, 1, K);
    std::vector<std::size_t> cols(K);
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(cols));
    cols.resize(nw);
    auto zq = random_tensor({R, K}, rng, -2.0, 2.0), zp = random_tensor({R, nw}, rng, -2.0, 2.0);
    record("kl_div_padded", gradcheck({&zq, &zp}, [&] {
             return ops::kl_div_padded(ops::softmax(zq), ops::softmax(zp), cols);
           }));
  }

  // Composed path: loss -> target net -> ParamSet -> generators -> AHRU -> sketch extractor.
  testing::Tiny tiny(1, 3);
  tiny.hyper.learn_tau = true;
  auto pud = tiny.pudnet<double>();
  auto head = tiny.head<double>();
  const auto& grp = tiny.tasks[0];
  const auto support = data::batch_images<double>(tiny.corpus, grp.support);
  const auto query = data::batch_images<double>(tiny.corpus, grp.query);
  std::vector<std::size_t> q_global;
  for (auto l : grp.query_labels) q_global.push_back(grp.class_map[l]);
  auto loss = [&] {
    const auto sketch = data::compute_sketch(pud.extractor, support, data::Mode::Train);
    const auto net = target::inject(tiny.spec, hyper::predict_params(pud, tiny.spec, sketch));
    const auto cents = losses::compute_centroids(net, support, grp.support_labels, grp.class_map, 5);
    const auto emb = net(query);
    const auto logits = losses::metric_logits(emb, cents, pud.tau);
    const auto full = head.logits(emb);
    return losses::loss_total(ops::softmax_cross_entropy(logits, grp.query_labels),
                              ops::softmax_cross_entropy(full, q_global),
                              losses::loss_consistency(ops::softmax(logits), ops::softmax(full), grp.class_map));
  };
  std::vector<Tensord*> leaves;
  for (auto& [name, t] : pud.named_parameters()) leaves.push_back(t);
  for (auto& [name, t] : head.named_parameters()) leaves.push_back(t);
  record("composed", gradcheck(leaves, loss, 1e-5, 16));

  const double secs = since(t0);
  verdict(1, worst < 1e-4 && secs < 120.0,
          fmt("gradient fidelity: max rel error %.2e (%s) over %zu elements, %.1f s (need < 1e-4, < 120 s)", worst,
              worst_name.c_str(), checked, secs));
}

// ---------------------------------------------------------------- 2

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void ahru_invariants() {
  Rng rng(7);
  std::size_t bad_gate = 0, bad_hull = 0;
  double max_dev = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t m = draw(rng, 1, 8);
    auto w = hyper::AhruWeights<double>::init(m, rng);
    const double s = rng.uniform(0.1, 1.0);
    for (Tensord* t : {&w.W_r, &w.W_z, &w.W_h, &w.W_o})
      for (auto& v : t->mutable_data()) v = rng.uniform(-s, s);
    hyper::HyperState<double> st{random_tensor({m}, rng, -1.0, 1.0),
                                 trial % 10 == 0 ? Tensord({m}, std::vector<double>(m, 0.0))
                                                 : random_tensor({m}, rng, 0.0, 1.0)};
    const auto next = hyper::ahru_step(w, st);

    const auto& d = st.d.data();
    const auto& a = st.a.data();
    auto row = [&](const Tensord& W, std::size_t i, const std::vector<double>& x) {
      double acc = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) acc += W.data()[i * x.size() + j] * x[j];
      return acc;
    };
    std::vector<double> da(d.begin(), d.end());
    da.insert(da.end(), a.begin(), a.end());
    std::vector<double> r(m), zz(m), rda(2 * m), dt(m), dn(m);
    for (std::size_t i = 0; i < m; ++i) {
      r[i] = sig(row(w.W_r, i, da));
      zz[i] = sig(row(w.W_z, i, da));
    }
    for (std::size_t i = 0; i < m; ++i) {
      rda[i] = r[i] * d[i];
      rda[m + i] = a[i];
    }
    for (std::size_t i = 0; i < m; ++i) {
      dt[i] = std::tanh(row(w.W_h, i, rda));
      dn[i] = (1.0 - zz[i]) * d[i] + zz[i] * dt[i];
    }
    for (std::size_t i = 0; i < m; ++i) {
      const double ap = next.a.data()[i];
      const double dp = next.d.data()[i];
      if (!(r[i] > 0 && r[i] < 1 && zz[i] > 0 && zz[i] < 1 && ap > 0 && ap < 1)) ++bad_gate;
      const double lo = std::min(d[i], dt[i]), hi = std::max(d[i], dt[i]);
      const double slack = 4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(dp));
      if (dp < lo - slack || dp > hi + slack) ++bad_hull;
      max_dev = std::max({max_dev, std::abs(dp - dn[i]), std::abs(ap - sig(row(w.W_o, i, dn)))});
    }
  }

  // All-zero weights: every gate is 0.5, so a' = 0.5 and d' = d/2.
  const std::size_t m = 6;
  auto w0 = hyper::AhruWeights<double>::init(m, rng);
  for (Tensord* t : {&w0.W_r, &w0.W_z, &w0.W_h, &w0.W_o}) std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0);
  hyper::HyperState<double> st0{random_tensor({m}, rng), random_tensor({m}, rng, 0.0, 1.0)};
  const auto z0 = hyper::ahru_step(w0, st0);
  double zero_err = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    zero_err = std::max(zero_err, std::abs(z0.a.data()[i] - 0.5));
    zero_err = std::max(zero_err, std::abs(z0.d.data()[i] - 0.5 * st0.d.data()[i]));
  }
  verdict(2, bad_gate == 0 && bad_hull == 0 && max_dev < 1e-12 && zero_err < 1e-9,
          fmt("AHRU invariants over 10000 trials: %zu gate violations, %zu hull violations, naive recompute "
              "dev %.1e, zero-weight case err %.1e",
              bad_gate, bad_hull, max_dev, zero_err));
}

// ---------------------------------------------------------------- 3

void generator_shapes() {
  const auto spec = target::convnet3_spec(1, 32, 32);
  Rng rng(3);
  auto pud = hyper::PudNet<float>::init(hyper::HyperConfig{}, spec, rng);
  const auto sketch = random_tensor({pud.config.m()}, rng).cast<float>();
  const auto params = hyper::predict_params(pud, spec, sketch);
  const std::vector<Shape> want{{32, 1, 3, 3}, {32, 32, 3, 3}, {32, 32, 3, 3}};
  std::size_t total = 0;
  bool shapes = params.size() == want.size();
  std::string got;
  for (std::size_t i = 0; i < params.size(); ++i) {
    total += params[i].numel();
    got += shape_str(params[i].shape()) + " ";
    if (i < want.size() && params[i].shape() != want[i]) shapes = false;
  }
  verdict(3, shapes && total == 18720, fmt("ParamSet %zu scalars, shapes %s(need 18720)", total, got.c_str()));
}

// ---------------------------------------------------------------- 4

template <class T>
bool bitwise(const Tensor<T>& x, const Tensor<T>& y) {
  return x.shape() == y.shape() && std::memcmp(x.data().data(), y.data().data(), x.numel() * sizeof(T)) == 0;
}

void residual_identities() {
  Rng rng(4);
  bool ok = true;
  for (int t = 0; t < 200; ++t) {
    const std::size_t m = draw(rng, 1, 64);
    const auto a = random_tensor({m}, rng), s = random_tensor({m}, rng);
    const auto r0 = hyper::residual_mix(a, s, 0.0), r1 = hyper::residual_mix(a, s, 1.0);
    const auto af = a.cast<float>(), sf = s.cast<float>();
    ok = ok && bitwise(r0, a) && bitwise(r1, s);
    ok = ok && bitwise(hyper::residual_mix(af, sf, 0.0), af) && bitwise(hyper::residual_mix(af, sf, 1.0), sf);
  }
  verdict(4, ok, "residual mix: eta=0 returns a, eta=1 returns the sketch, bitwise (200 trials, float and double)");
}

// ---------------------------------------------------------------- 5

void loss_identities() {
  Rng rng(5);
  double uni = 0.0;
  for (std::size_t n = 2; n <= 10; ++n) {
    const std::size_t B = 7, D = 5;
    const auto emb = random_tensor({B, D}, rng);
    const auto u0 = random_tensor({1, D}, rng);
    losses::Centroids<double> c{ops::gather_rows(u0, std::vector<std::size_t>(n, 0)), {}};
    c.class_map.resize(n);
    std::iota(c.class_map.begin(), c.class_map.end(), std::size_t{0});
    std::vector<std::size_t> labels(B);
    for (auto& l : labels) l = rng.below(n);
    uni = std::max(uni, std::abs(losses::loss_metric(emb, c, labels, Tensord::scalar(10.0)).item() - std::log(double(n))));
    const Tensord flat({B, n}, std::vector<double>(B * n, 0.0));
    uni = std::max(uni, std::abs(ops::softmax_cross_entropy(flat, labels).item() - std::log(double(n))));
  }

  double equal_max = -1.0, min_l3 = 1e300;
  for (int t = 0; t < 2000; ++t) {
    const std::size_t C = draw(rng, 2, 10), nw = draw(rng, 1, C), B = draw(rng, 1, 4);
    std::vector<std::size_t> cols(C);
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(cols));
    cols.resize(nw);
    const double s = std::pow(10.0, rng.uniform(-1.0, 1.5));
    const auto metric = ops::softmax(random_tensor({B, nw}, rng, -s, s));
    std::vector<double> padded(B * C, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < nw; ++k) padded[b * C + cols[k]] = metric.data()[b * nw + k];
    const double same = losses::loss_consistency(metric, Tensord({B, C}, padded), cols).item();
    equal_max = std::max(equal_max, same);
    const auto full = ops::softmax(random_tensor({B, C}, rng, -s, s));
    min_l3 = std::min({min_l3, same, losses::loss_consistency(metric, full, cols).item()});
  }
  verdict(5, uni < 1e-6 && equal_max <= 1e-6 && min_l3 >= -1e-6,
          fmt("loss identities: |L1_uniform - ln n| max %.1e, L3 at equality max %.1e, min L3 %.1e over 2000 trials",
              uni, equal_max, min_l3));
}

// ---------------------------------------------------------------- 6-9, 11

struct Experiment {
  data::SyntheticSpec corpus_spec;
  data::ImageCorpus corpus, train_corpus, test_corpus;
  std::vector<data::TaskGroup> train_tasks, test_tasks;
  target::TargetSpec spec = target::convnet3_spec(1, 32, 32);
  hyper::HyperConfig hyper;
  train::TrainConfig train;
  double setup_seconds = 0.0;

  explicit Experiment(std::size_t steps) {
    const auto t0 = Clock::now();
    corpus_spec = config::default_corpus();
    corpus_spec.seed = 1;
    corpus = data::make_synthetic_corpus(corpus_spec);
    const std::vector<std::size_t> tr{0, 1, 2, 3, 4, 5}, te{6, 7, 8, 9};
    train_corpus = data::select_classes(corpus, tr);
    test_corpus = data::select_classes(corpus, te);
    train_tasks = data::sample_task_groups(train_corpus, {4, 10, 30, 500, 11});
    test_tasks = data::sample_task_groups(test_corpus, {4, 10, 30, 100, 12});
    train.epochs = 100;
    train.max_steps = steps;
    train.seed = 5;
    setup_seconds = since(t0);
  }

  hyper::PudNet<float> fresh() const {
    Rng rng(3);
    return hyper::PudNet<float>::init(hyper, spec, rng);
  }
};

struct Variant {
  hyper::PudNet<float> pud;
  train::LossLog log;
  std::vector<double> acc;
  double mean = 0.0, sd = 0.0, train_seconds = 0.0;
};

Variant run_variant(const Experiment& ex, const std::string& name) {
  Variant v{ex.fresh(), {}, {}};
  Rng hr(4);
  auto head = losses::FullHead<float>::init(ex.spec.embedding_dim, ex.train_corpus.num_classes(), hr);
  auto tc = ex.train;
  tc.no_context = name == "no_context";
  tc.no_kl = name == "no_kl";
  tc.metric_only = name == "metric_only";
  const auto t0 = Clock::now();
  train::Trainer<float> trainer(v.pud, head, ex.spec, ex.train_corpus, ex.train_tasks, tc);
  trainer.run();
  v.train_seconds = since(t0);
  v.log = trainer.log();
  v.acc = infer::evaluate_tasks(v.pud, ex.spec, ex.test_corpus, ex.test_tasks);
  std::tie(v.mean, v.sd) = infer::mean_std(v.acc);
  std::printf("  %-11s held-out %.4f ± %.4f  (%zu steps, %.0f s)\n", name.c_str(), v.mean, v.sd,
              v.log.records.size(), v.train_seconds);
  std::fflush(stdout);
  return v;
}

void meta_training(std::size_t steps, const std::set<int>& only) {
  auto want = [&](int id) { return only.empty() || only.count(id) > 0; };
  if (!want(6) && !want(7) && !want(8) && !want(9) && !want(11)) return;

  Experiment ex(steps);
  auto untrained = ex.fresh();
  const auto t_eval = Clock::now();
  const auto [u_mean, u_sd] = infer::mean_std(infer::evaluate_tasks(untrained, ex.spec, ex.test_corpus, ex.test_tasks));
  const double eval_seconds = since(t_eval);
  std::printf("  untrained   held-out %.4f ± %.4f\n", u_mean, u_sd);

  auto full = run_variant(ex, "full");

  if (want(6)) {
    const double secs = ex.setup_seconds + full.train_seconds + 2 * eval_seconds;
    verdict(6, full.mean >= 0.60 && full.mean - u_mean >= 0.25 && secs < 45 * 60,
            fmt("unseen-class accuracy %.4f vs untrained %.4f over 100 tasks (need >= 0.60 and +0.25), %zu steps, "
                "%.0f s on 1 core (need < 2700 s)",
                full.mean, u_mean, full.log.records.size(), secs));
  }

  if (want(7)) {
    const std::vector<std::size_t> epochs{1, 30};
    const auto rep = infer::compare(full.pud, ex.spec, ex.test_corpus, ex.test_tasks, epochs, infer::ScratchConfig{});
    std::printf("%s", rep.csv().c_str());
    const auto& p = rep.rows[0];
    const auto& s1 = rep.rows[1];
    const auto& s30 = rep.rows[2];
    verdict(7, s30.speedup >= 20.0 && p.acc_mean >= s1.acc_mean,
            fmt("speedup vs 30-epoch scratch %.1fx (need >= 20), accuracy %.4f vs 1-epoch scratch %.4f", s30.speedup,
                p.acc_mean, s1.acc_mean));
  }

  if (want(8)) {
    auto rings_spec = ex.corpus_spec;
    rings_spec.family = data::PatternFamily::Rings;
    rings_spec.seed = 9;
    const auto rings = data::make_synthetic_corpus(rings_spec);
    const auto tasks = data::sample_task_groups(rings, {4, 10, 30, 100, 13});
    const auto [m, sd] = infer::mean_std(infer::evaluate_tasks(full.pud, ex.spec, rings, tasks));
    verdict(8, m - 0.25 >= 2 * sd,
            fmt("trained on gratings, rings tasks: %.4f ± %.4f vs chance 0.25 (need mean - 0.25 >= 2 sd)", m, sd));
  }

  if (want(9)) {
    const auto no_context = run_variant(ex, "no_context");
    const auto no_kl = run_variant(ex, "no_kl");
    const auto metric_only = run_variant(ex, "metric_only");
    verdict(9,
            full.mean >= no_kl.mean && no_kl.mean >= metric_only.mean && full.mean - no_context.mean >= 0.03,
            fmt("ablation: full %.4f, no_kl %.4f, metric_only %.4f, no_context %.4f (need full >= no_kl >= "
                "metric_only, full - no_context >= 0.03)",
                full.mean, no_kl.mean, metric_only.mean, no_context.mean));
  }

  if (want(11)) {
    const auto& r = full.log.records;
    const std::size_t tenth = std::max<std::size_t>(1, r.size() / 10);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < tenth; ++i) {
      first += r[i].total;
      last += r[r.size() - 1 - i].total;
    }
    first /= tenth;
    last /= tenth;
    verdict(11, last < 0.7 * first,
            fmt("total loss mean last 10%% %.4f vs first 10%% %.4f, ratio %.3f (need < 0.7)", last, first,
                last / first));
  }
}

// ---------------------------------------------------------------- 10

void cca_ordering() {
  const auto t0 = Clock::now();
  auto cs = config::default_corpus();
  cs.seed = 1;
  const auto corpus = data::make_synthetic_corpus(cs);
  analysis::CcaConfig cfg;
  cfg.seed = 21;
  const auto cmp = analysis::learned_vs_random(corpus, target::convnet3_spec(1, 32, 32), cfg);
  const double secs = since(t0);
  const double l = cmp.learned.mean(), r = cmp.random.mean(), p = cmp.permuted.mean();
  verdict(10, l - r >= 0.1 && l - p >= 0.1 && secs < 20 * 60,
          fmt("CCA mean rho learned %.4f, random %.4f, permuted %.4f (need learned - random >= 0.1 and learned - "
              "permuted >= 0.1), %.0f s",
              l, r, p, secs));
}

// ---------------------------------------------------------------- 12

void determinism() {
  testing::Tiny tiny;
  train::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 5;
  cfg.shots = 5;
  cfg.seed = 12;

  std::string csv[2];
  train::LossLog full_log;
  for (auto& c : csv) {
    auto pud = tiny.pudnet<float>();
    auto head = tiny.head<float>();
    train::Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
    tr.run();
    c = tr.log().csv();
    full_log = tr.log();
  }

  const std::size_t cut = full_log.records.size() / 2;
  const auto ckpt = fs::temp_directory_path() / "pudnet_acceptance_resume.pudn";
  {
    auto pud = tiny.pudnet<float>();
    auto head = tiny.head<float>();
    train::Trainer<float> tr(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
    tr.run(cut);
    tr.save_checkpoint(ckpt);
  }
  auto pud = tiny.pudnet<float>(101);
  auto head = tiny.head<float>(102);
  train::Trainer<float> resumed(pud, head, tiny.spec, tiny.corpus, tiny.tasks, cfg);
  resumed.load_checkpoint(ckpt);
  resumed.run();
  fs::remove(ckpt);
  const auto& a = full_log.records;
  const auto& b = resumed.log().records;
  double dev = b.size() == a.size() - cut ? 0.0 : 1e300;
  for (std::size_t i = 0; i < b.size() && i + cut < a.size(); ++i) {
    dev = std::max({dev, std::abs(a[cut + i].total - b[i].total), std::abs(a[cut + i].l1 - b[i].l1),
                    std::abs(a[cut + i].l2 - b[i].l2), std::abs(a[cut + i].l3 - b[i].l3)});
  }
  verdict(12, csv[0] == csv[1] && dev <= 1e-6,
          fmt("identical runs give %s loss CSVs (%zu steps); resume at step %zu deviates by %.1e (need <= 1e-6)",
              csv[0] == csv[1] ? "identical" : "different", a.size(), cut, dev));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pudnet acceptance suite"};
  std::string only_list, expected_list, report_path;
  std::size_t steps = 3000;
  app.add_option("--only", only_list, "Comma-separated criterion numbers");
  app.add_option("--expected-fail", expected_list, "Criteria whose failure does not affect the exit status");
  app.add_option("--steps", steps, "Meta-training steps for the efficacy experiments")->capture_default_str();
  app.add_option("--report", report_path, "Also write the verdict lines to this file");
  CLI11_PARSE(app, argc, argv);
  if (!report_path.empty() && !(report = std::fopen(report_path.c_str(), "w"))) {
    std::fprintf(stderr, "cannot write %s\n", report_path.c_str());
    return 1;
  }

  std::set<int> only;
  for (auto i : config::parse_index_list(only_list)) only.insert(static_cast<int>(i));
  auto want = [&](int id) { return only.empty() || only.count(id) > 0; };

  const auto t0 = Clock::now();
  if (want(1)) gradient_fidelity();
  if (want(2)) ahru_invariants();
  if (want(3)) generator_shapes();
  if (want(4)) residual_identities();
  if (want(5)) loss_identities();
  if (want(12)) determinism();
  if (want(10)) cca_ordering();
  meta_training(steps, only);
  const auto expected = config::parse_index_list(expected_list);
  int unexpected = 0;
  for (int id : failed) {
    if (std::find(expected.begin(), expected.end(), static_cast<std::size_t>(id)) == expected.end()) ++unexpected;
  }
  std::printf("%zu failed (%zu listed as expected failures), %.0f s total\n", failed.size(),
              failed.size() - static_cast<std::size_t>(unexpected), since(t0));
  if (report) {
    std::fprintf(report, "%zu failed (%zu listed as expected failures)\n", failed.size(),
                 failed.size() - static_cast<std::size_t>(unexpected));
    std::fclose(report);
  }
  for (auto id : expected) {
    if (std::find(failed.begin(), failed.end(), static_cast<int>(id)) == failed.end() && (only.empty() || only.count(static_cast<int>(id))))
      std::printf("note: criterion %zu is listed as an expected failure but passed\n", id);
  }
  return std::min(unexpected, 100);
}
