// pudnet command-line tool: corpus and task generation, meta-training,
// evaluation against scratch training, eta sweeps, CCA and checkpoint listing.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pudnet/analysis.hpp"
#include "pudnet/config.hpp"
#include "pudnet/data.hpp"
#include "pudnet/errors.hpp"
#include "pudnet/infer.hpp"
#include "pudnet/serialize.hpp"
#include "pudnet/train.hpp"

namespace fs = std::filesystem;
using namespace pudnet;

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNotFound = 3;
constexpr int kExitFormat = 4;
constexpr int kExitNumeric = 5;

config::ExperimentConfig load_or_default(const std::string& path) {
  if (path.empty()) return {};
  return config::load_config(path);
}

// Every output gets the resolved configuration next to it.
void echo_config(const config::ExperimentConfig& cfg, const fs::path& output) {
  config::save_config(cfg.resolved(), fs::path(output.string() + ".config.json"));
}

fs::path echo_path_of(const fs::path& ckpt) { return fs::path(ckpt.string() + ".config.json"); }

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw NotFoundError("no such file: " + p.string());
}

struct TaskData {
  config::TaskFile file;
  data::ImageCorpus corpus;
};

TaskData load_task_data(const fs::path& dir) {
  TaskData t;
  t.file = config::load_tasks(dir);
  const auto full = data::load_corpus(t.file.corpus);
  t.corpus = t.file.classes.empty() ? full : data::select_classes(full, t.file.classes);
  return t;
}

struct Model {
  hyper::PudNet<float> pud;
  losses::FullHead<float> head;
  target::TargetSpec spec;
};

Model fresh_model(const config::ExperimentConfig& cfg, std::size_t n_classes) {
  const auto r = cfg.resolved();
  Model m;
  m.spec = r.target_spec();
  Rng rng(r.derive_seed("init"));
  m.pud = hyper::PudNet<float>::init(r.hyper, m.spec, rng);
  Rng head_rng = rng.split("head");
  m.head = losses::FullHead<float>::init(m.spec.embedding_dim, n_classes, head_rng);
  return m;
}

// Rebuilds the hypernetwork of a training checkpoint from its config echo.
std::pair<config::ExperimentConfig, Model> load_trained(const fs::path& ckpt) {
  require_file(ckpt);
  const auto cfg = config::load_config(echo_path_of(ckpt));
  Model m = fresh_model(cfg, 1);
  const std::vector<std::string> ignore{"train/", "adam/", "head/"};
  train::load_model_state<float>(m.pud, nullptr, load_named_tensors(ckpt), ignore);
  return {cfg, std::move(m)};
}

infer::ScratchConfig scratch_config(const config::ExperimentConfig& cfg) {
  const auto r = cfg.resolved();
  infer::ScratchConfig s;
  s.lr = r.eval.baseline_lr;
  s.tau = r.hyper.tau;
  s.batch_size = r.eval.baseline_batch;
  s.shots = r.train.shots;
  s.seed = r.derive_seed("baseline");
  return s;
}

train::LossLog run_training(Model& m, const config::ExperimentConfig& cfg, const TaskData& tasks,
                            const fs::path& ckpt, bool quiet) {
  auto tc = cfg.resolved().train;
  if (tc.checkpoint_every > 0) tc.checkpoint_path = ckpt;
  train::Trainer<float> trainer(m.pud, m.head, m.spec, tasks.corpus, tasks.file.groups, tc);
  const std::size_t report = std::max<std::size_t>(1, trainer.total_steps() / 20);
  trainer.run(static_cast<std::size_t>(-1), [&](const train::LossRecord& r) {
    if (!quiet && (r.step + 1) % report == 0) {
      std::cerr << "step " << r.step + 1 << "/" << trainer.total_steps() << " total " << r.total << "\n";
    }
  });
  trainer.save_checkpoint(ckpt);
  return trainer.log();
}

int cmd_gen_corpus(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
                   const std::string& family, std::optional<std::size_t> n_classes,
                   std::optional<std::size_t> per_class, std::optional<double> clutter) {
  auto cfg = load_or_default(config_path);
  if (seed) cfg.seed = *seed;
  if (!family.empty()) cfg.corpus.family = data::parse_family(family);
  if (n_classes) cfg.corpus.n_classes = *n_classes;
  if (per_class) cfg.corpus.per_class = *per_class;
  if (clutter) cfg.corpus.clutter = *clutter;
  cfg.validate();
  const auto corpus = data::make_synthetic_corpus(cfg.resolved().corpus);
  data::save_corpus(corpus, out);
  echo_config(cfg, out);
  std::cout << "wrote " << corpus.size() << " images (" << corpus.num_classes() << " classes) to " << out << "\n";
  return 0;
}

int cmd_gen_tasks(const std::string& corpus_path, const data::TaskSampling& sampling, const std::string& classes,
                  const std::string& out) {
  require_file(corpus_path);
  const auto full = data::load_corpus(corpus_path);
  config::TaskFile tf;
  tf.corpus = fs::absolute(corpus_path);
  if (!classes.empty()) tf.classes = config::parse_index_list(classes);
  const auto corpus = tf.classes.empty() ? full : data::select_classes(full, tf.classes);
  tf.sampling = sampling;
  tf.groups = data::sample_task_groups(corpus, sampling);
  fs::create_directories(out);
  config::save_tasks(tf, out);
  std::cout << "wrote " << tf.groups.size() << " task groups to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& tasks_dir, const std::string& out,
              std::optional<std::size_t> max_steps, bool quiet) {
  auto cfg = load_or_default(config_path);
  if (max_steps) cfg.train.max_steps = *max_steps;
  cfg.validate();
  const auto tasks = load_task_data(tasks_dir);
  Model m = fresh_model(cfg, tasks.corpus.num_classes());
  const auto log = run_training(m, cfg, tasks, out, quiet);
  log.write_csv(out + ".losses.csv");
  echo_config(cfg, out);
  std::cout << "trained " << log.records.size() << " steps, " << log.clip_events << " clipped; wrote " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& tasks_dir, const std::string& epochs,
             const std::string& out, std::size_t threads) {
  auto [cfg, m] = load_trained(ckpt);
  const auto tasks = load_task_data(tasks_dir);
  const auto epoch_list = epochs.empty() ? cfg.eval.baseline_epochs : config::parse_index_list(epochs);
  infer::EvalReport report;
  if (epoch_list.empty() || (epoch_list.size() == 1 && epoch_list[0] == 0)) {
    infer::EvalRow row;
    row.method = "pudnet";
    row.accuracies = infer::evaluate_tasks(m.pud, m.spec, tasks.corpus, tasks.file.groups, cfg.train.shots, threads);
    std::tie(row.acc_mean, row.acc_std) = infer::mean_std(row.accuracies);
    report.rows.push_back(row);
  } else {
    report = infer::compare(m.pud, m.spec, tasks.corpus, tasks.file.groups, epoch_list, scratch_config(cfg));
  }
  report.write_csv(out);
  echo_config(cfg, out);
  std::cout << report.csv();
  return 0;
}

int cmd_baseline(const std::string& config_path, const std::string& tasks_dir, const std::string& epochs,
                 const std::string& out) {
  auto cfg = load_or_default(config_path);
  cfg.validate();
  const auto tasks = load_task_data(tasks_dir);
  const auto spec = cfg.target_spec();
  infer::EvalReport report;
  for (std::size_t e : config::parse_index_list(epochs)) {
    auto sc = scratch_config(cfg);
    sc.epochs = e;
    infer::EvalRow row;
    row.method = "scratch";
    row.epochs = e;
    double secs = 0.0;
    for (const auto& g : tasks.file.groups) {
      const auto r = infer::baseline_scratch<float>(spec, tasks.corpus, g, sc);
      row.accuracies.push_back(r.accuracy);
      secs += r.train_seconds;
    }
    std::tie(row.acc_mean, row.acc_std) = infer::mean_std(row.accuracies);
    row.seconds = secs / static_cast<double>(tasks.file.groups.size());
    report.rows.push_back(row);
  }
  report.write_csv(out);
  echo_config(cfg, out);
  std::cout << report.csv();
  return 0;
}

int cmd_sweep_eta(const std::string& config_path, const std::string& train_dir, const std::string& eval_dir,
                  const std::string& etas, const std::string& out, std::optional<std::size_t> max_steps,
                  std::size_t threads) {
  auto cfg = load_or_default(config_path);
  if (max_steps) cfg.train.max_steps = *max_steps;
  const auto values = config::parse_double_list(etas);
  if (values.empty()) throw ConfigError("etas: empty list");
  const auto train_tasks = load_task_data(train_dir);
  const auto eval_tasks = load_task_data(eval_dir);
  std::ostringstream csv;
  csv << "eta,acc_mean,acc_std\n" << std::setprecision(6);
  for (double eta : values) {
    auto c = cfg;
    c.hyper.eta = eta;
    c.validate();
    Model m = fresh_model(c, train_tasks.corpus.num_classes());
    auto tc = c.resolved().train;
    train::Trainer<float> trainer(m.pud, m.head, m.spec, train_tasks.corpus, train_tasks.file.groups, tc);
    trainer.run();
    const auto acc =
        infer::evaluate_tasks(m.pud, m.spec, eval_tasks.corpus, eval_tasks.file.groups, c.train.shots, threads);
    const auto [mean, sd] = infer::mean_std(acc);
    csv << eta << ',' << mean << ',' << sd << '\n';
    std::cerr << "eta " << eta << " acc " << mean << "\n";
  }
  std::ofstream os(out);
  if (!os) throw Error("cannot write " + out);
  os << csv.str();
  echo_config(cfg, out);
  std::cout << csv.str();
  return 0;
}

int cmd_cca(const std::string& config_path, const std::string& corpus_path, std::optional<std::size_t> reps,
            const std::string& out) {
  auto cfg = load_or_default(config_path);
  if (reps) cfg.cca.reps = *reps;
  cfg.validate();
  require_file(corpus_path);
  const auto corpus = data::load_corpus(corpus_path);
  auto cc = cfg.resolved().cca;
  const auto cmp = analysis::learned_vs_random(corpus, cfg.target_spec(), cc);
  analysis::write_cca_csv(cmp, out);
  echo_config(cfg, out);
  std::cout << "mean rho learned " << cmp.learned.mean() << " random " << cmp.random.mean() << " permuted "
            << cmp.permuted.mean() << "\n";
  return 0;
}

int cmd_inspect(const std::string& ckpt) {
  require_file(ckpt);
  std::size_t total = 0;
  for (const auto& t : load_named_tensors(ckpt)) {
    std::cout << t.name << ' ' << shape_str(t.shape) << '\n';
    total += t.values.size();
  }
  std::cout << "# " << total << " scalars\n";
  return 0;
}

void fail_line(const char* kind, const std::string& msg) {
  std::string one = msg;
  for (char& c : one)
    if (c == '\n') c = ' ';
  std::cerr << "error kind=" << kind << " message=" << one << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pudnet: dataset-conditioned parameter prediction for a small ConvNet"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path, out, corpus_path, tasks_dir, family, classes, epochs, etas, ckpt, eval_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_classes, per_class, max_steps, reps;
  std::optional<double> clutter;
  data::TaskSampling sampling;
  std::size_t threads = 1;
  bool quiet = false;

  auto* gen_corpus = app.add_subcommand("gen-corpus", "Generate a synthetic pattern corpus");
  gen_corpus->add_option("--config", config_path, "Experiment config (JSON); defaults apply when omitted");
  gen_corpus->add_option("--out", out, "Output corpus file")->required();
  gen_corpus->add_option("--seed", seed, "Root seed (overrides the config)");
  gen_corpus->add_option("--family", family, "Pattern family: grating or rings");
  gen_corpus->add_option("--n-classes", n_classes, "Number of classes");
  gen_corpus->add_option("--per-class", per_class, "Images per class");
  gen_corpus->add_option("--clutter", clutter, "Amplitude of the per-image distractor grating");

  auto* gen_tasks = app.add_subcommand("gen-tasks", "Sample task groups from a corpus");
  gen_tasks->add_option("--corpus", corpus_path, "Corpus file")->required();
  gen_tasks->add_option("--n-way", sampling.n_way, "Classes per task")->capture_default_str();
  gen_tasks->add_option("--support", sampling.n_support, "Support images per class")->capture_default_str();
  gen_tasks->add_option("--query", sampling.n_query, "Query images per class")->capture_default_str();
  gen_tasks->add_option("--count", sampling.count, "Number of task groups")->capture_default_str();
  gen_tasks->add_option("--seed", sampling.seed, "Sampling seed")->capture_default_str();
  gen_tasks->add_option("--classes", classes, "Corpus classes to sample from, e.g. 0-5 or 6,7,8,9");
  gen_tasks->add_option("--out", out, "Output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Meta-train the hypernetwork");
  train_cmd->add_option("--config", config_path, "Experiment config (JSON)");
  train_cmd->add_option("--tasks", tasks_dir, "Training task directory")->required();
  train_cmd->add_option("--out", out, "Checkpoint file; losses go to <out>.losses.csv")->required();
  train_cmd->add_option("--max-steps", max_steps, "Cap on optimisation steps");
  train_cmd->add_flag("--quiet", quiet, "No progress output");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate predicted parameters against scratch training");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint written by train")->required();
  eval_cmd->add_option("--tasks", tasks_dir, "Evaluation task directory")->required();
  eval_cmd->add_option("--baseline-epochs", epochs, "Scratch epochs to compare, e.g. 1,30,50; 0 = none");
  eval_cmd->add_option("--out", out, "Report CSV")->required();
  eval_cmd->add_option("--threads", threads, "Parallel tasks when no baseline is run (timed runs use one)")
      ->capture_default_str();

  auto* base_cmd = app.add_subcommand("baseline", "Scratch-training baseline only");
  base_cmd->add_option("--config", config_path, "Experiment config (JSON)");
  base_cmd->add_option("--tasks", tasks_dir, "Task directory")->required();
  base_cmd->add_option("--epochs", epochs, "Epoch counts, e.g. 1,30,50")->required();
  base_cmd->add_option("--out", out, "Report CSV")->required();

  auto* sweep_cmd = app.add_subcommand("sweep-eta", "Train and evaluate once per residual weight eta");
  sweep_cmd->add_option("--config", config_path, "Experiment config (JSON)");
  sweep_cmd->add_option("--tasks", tasks_dir, "Training task directory")->required();
  sweep_cmd->add_option("--eval-tasks", eval_dir, "Evaluation task directory")->required();
  sweep_cmd->add_option("--etas", etas, "Comma-separated eta values in [0,1]")->required();
  sweep_cmd->add_option("--out", out, "CSV with eta,acc_mean,acc_std")->required();
  sweep_cmd->add_option("--max-steps", max_steps, "Cap on optimisation steps per run");
  sweep_cmd->add_option("--threads", threads, "Parallel evaluation tasks")->capture_default_str();

  auto* cca_cmd = app.add_subcommand("cca", "Canonical correlation of data and trained vs random kernels");
  cca_cmd->add_option("--config", config_path, "Experiment config (JSON)");
  cca_cmd->add_option("--corpus", corpus_path, "Corpus file")->required();
  cca_cmd->add_option("--reps", reps, "Number of subsets");
  cca_cmd->add_option("--out", out, "CSV of canonical correlations")->required();

  auto* inspect_cmd = app.add_subcommand("inspect-ckpt", "List tensor names and shapes of a checkpoint");
  inspect_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("usage", e.what());
    return kExitConfig;
  }

  try {
    if (*gen_corpus) return cmd_gen_corpus(config_path, out, seed, family, n_classes, per_class, clutter);
    if (*gen_tasks) return cmd_gen_tasks(corpus_path, sampling, classes, out);
    if (*train_cmd) return cmd_train(config_path, tasks_dir, out, max_steps, quiet);
    if (*eval_cmd) return cmd_eval(ckpt, tasks_dir, epochs, out, threads);
    if (*base_cmd) return cmd_baseline(config_path, tasks_dir, epochs, out);
    if (*sweep_cmd) return cmd_sweep_eta(config_path, tasks_dir, eval_dir, etas, out, max_steps, threads);
    if (*cca_cmd) return cmd_cca(config_path, corpus_path, reps, out);
    if (*inspect_cmd) return cmd_inspect(ckpt);
  } catch (const ConfigError& e) {
    fail_line("config", e.what());
    return kExitConfig;
  } catch (const NotFoundError& e) {
    fail_line("not_found", e.what());
    return kExitNotFound;
  } catch (const FormatError& e) {
    fail_line("format", e.what());
    return kExitFormat;
  } catch (const NumericError& e) {
    fail_line("numeric", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    fail_line("error", e.what());
    return kExitError;
  }
  return kExitError;
}
