#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pudnet/rng.hpp"
#include "pudnet/serialize.hpp"
#include "pudnet/tensor.hpp"

namespace pudnet::data {

/// Labelled images in [0,1], stored N×C×H×W row-major.
struct ImageCorpus {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  std::vector<std::uint32_t> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * height * width; }
  std::size_t num_classes() const { return class_names.size(); }

  /// Throws ConfigError if any invariant is violated.
  void validate() const;
  /// Sample indices of each class, in corpus order.
  std::vector<std::vector<std::size_t>> indices_by_class() const;
};

/// Restricts a corpus to `classes` (corpus class ids) and relabels them 0..k-1 in that order.
ImageCorpus select_classes(const ImageCorpus& corpus, std::span<const std::size_t> classes);

template <class T>
Tensor<T> batch_images(const ImageCorpus& corpus, std::span<const std::size_t> indices);

/// One sampled sub-dataset. Support and query lists are class-major: all
/// samples of local class 0 first, then class 1, and so on.
struct TaskGroup {
  std::uint32_t id = 0;
  std::vector<std::size_t> support;
  std::vector<std::size_t> support_labels;  // local class ids
  std::vector<std::size_t> query;
  std::vector<std::size_t> query_labels;
  std::vector<std::size_t> class_map;  // local -> corpus class id

  std::size_t n_way() const { return class_map.size(); }
  std::vector<std::size_t> query_globals() const;
};

struct TaskSampling {
  std::size_t n_way = 4;
  std::size_t n_support = 10;  // per class
  std::size_t n_query = 30;    // per class
  std::size_t count = 1;
  std::uint64_t seed = 0;
};

std::vector<TaskGroup> sample_task_groups(const ImageCorpus& corpus, const TaskSampling& cfg);

enum class Mode { Train, Eval };

struct SketchExtractorConfig {
  std::size_t in_channels = 1;
  std::vector<std::size_t> hidden = {16, 32};  // channels of the first two blocks
  std::size_t sketch_dim = 64;                 // channels of the last block
  std::size_t kernel = 5;
  std::size_t stride = 2;
  double bn_momentum = 0.9;  // fraction of the running statistic kept per update
  double slope = 0.01;
};

/// T_phi: three (5×5 conv -> batch-norm -> leaky_relu) blocks and a global
/// average pool, producing one sketch_dim feature vector per image.
template <class T>
struct SketchExtractor {
  struct Block {
    Tensor<T> weight;  // [out, in, k, k]
    Tensor<T> gamma;   // [out]
    Tensor<T> beta;    // [out]
    std::vector<T> running_mean;
    std::vector<T> running_var;
  };

  SketchExtractorConfig config;
  std::vector<Block> blocks;

  static SketchExtractor init(const SketchExtractorConfig& cfg, Rng& rng);

  std::size_t sketch_dim() const { return config.sketch_dim; }
  /// Smallest accepted input height/width.
  std::size_t min_input_size() const { return config.kernel; }

  /// Per-image features [B, sketch_dim]. Train mode normalises with batch
  /// statistics and updates the running averages; Eval uses the averages.
  Tensor<T> features(const Tensor<T>& images, Mode mode);

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
  std::vector<std::pair<std::string, std::vector<T>*>> named_buffers();
};

/// s = mean_j T_phi(x_j) over the given images.
template <class T>
Tensor<T> compute_sketch(SketchExtractor<T>& extractor, const Tensor<T>& images, Mode mode);
template <class T>
Tensor<T> compute_sketch(SketchExtractor<T>& extractor, const ImageCorpus& corpus,
                         const TaskGroup& group, Mode mode);

/// Class-balanced sketch: per class, k-means over T_phi features, average the
/// cluster centroids; the sketch is the unweighted mean over classes.
template <class T>
Tensor<T> compute_sketch_clustered(SketchExtractor<T>& extractor, const Tensor<T>& images,
                                   std::span<const std::size_t> labels, std::size_t k_per_class,
                                   Mode mode, std::uint64_t seed = 0);

struct KMeansResult {
  std::vector<double> centroids;      // k × dim
  std::vector<std::size_t> assignment;  // per point
  std::size_t k = 0;
};

/// Lloyd's algorithm with k-means++ seeding. `points` is n × dim row-major.
KMeansResult kmeans(std::span<const double> points, std::size_t dim, std::size_t k,
                    std::size_t iterations, Rng& rng);

enum class PatternFamily { Grating, Rings };

PatternFamily parse_family(const std::string& name);
std::string family_name(PatternFamily family);

struct SyntheticSpec {
  std::size_t n_classes = 10;
  std::size_t per_class = 100;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::uint64_t seed = 0;
  PatternFamily family = PatternFamily::Grating;
  double noise_sigma = 0.1;
  double clutter = 0.0;  // amplitude of a per-sample random-orientation distractor grating
  double clutter_freq_lo = 5.0;
  double clutter_freq_hi = 7.0;
};

ImageCorpus make_synthetic_corpus(const SyntheticSpec& spec);

/// "PUDC" | version | n | c | h | w | class count | names | labels u32[n] | pixels f32
void save_corpus(const ImageCorpus& corpus, const std::filesystem::path& path);
ImageCorpus load_corpus(const std::filesystem::path& path);

}  // namespace pudnet::data
