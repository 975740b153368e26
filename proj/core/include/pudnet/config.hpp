#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pudnet/analysis.hpp"
#include "pudnet/data.hpp"
#include "pudnet/hypernet.hpp"
#include "pudnet/infer.hpp"
#include "pudnet/targetnet.hpp"
#include "pudnet/train.hpp"

namespace pudnet::config {

struct TargetConfig {
  std::size_t width = 32;
  /// Explicit layer list; when empty the ConvNet-3 spec of `width` is used.
  std::vector<target::LayerSpec> layers;
};

struct EvalConfig {
  std::size_t tasks = 100;
  std::vector<std::size_t> baseline_epochs = {1, 30, 50};
  double baseline_lr = 1e-3;
  std::size_t baseline_batch = 0;
  std::size_t threads = 1;
};

/// Synthetic corpus used by the experiments: the plain pattern corpus plus a
/// distractor grating per image, so untrained features do not already solve
/// the held-out tasks.
inline data::SyntheticSpec default_corpus() {
  data::SyntheticSpec s;
  s.clutter = 0.7;
  return s;
}

/// One document drives the whole pipeline. Every module seed is derived from
/// the root seed with a fixed label (see derive_seed).
struct ExperimentConfig {
  std::uint64_t seed = 0;
  data::SyntheticSpec corpus = default_corpus();
  std::vector<std::size_t> train_classes = {0, 1, 2, 3, 4, 5};
  std::vector<std::size_t> test_classes = {6, 7, 8, 9};
  data::TaskSampling tasks{4, 10, 30, 500, 0};
  TargetConfig target;
  hyper::HyperConfig hyper;
  train::TrainConfig train;
  EvalConfig eval;
  analysis::CcaConfig cca;

  /// Throws ConfigError on inconsistent values.
  void validate() const;

  std::uint64_t derive_seed(std::string_view label) const;
  target::TargetSpec target_spec() const;
  /// Copies the derived seeds and corpus channel count into the module configs.
  ExperimentConfig resolved() const;

  /// Strict parse: unknown keys and wrong types raise ConfigError naming the
  /// field path (e.g. "train.lr").
  static ExperimentConfig from_json_text(const std::string& text);
  /// Fully resolved document including every default.
  std::string to_json_text() const;
};

/// Throws NotFoundError when the file is missing.
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

/// Task groups are stored as JSON together with the corpus they index and the
/// class subset they were drawn from.
struct TaskFile {
  std::filesystem::path corpus;
  std::vector<std::size_t> classes;  // corpus classes kept before sampling; empty = all
  data::TaskSampling sampling;
  std::vector<data::TaskGroup> groups;
};

void save_tasks(const TaskFile& tasks, const std::filesystem::path& dir);
TaskFile load_tasks(const std::filesystem::path& dir);

/// Parses "1,30,50" or "0-5" style lists.
std::vector<std::size_t> parse_index_list(const std::string& text);
std::vector<double> parse_double_list(const std::string& text);

}  // namespace pudnet::config
