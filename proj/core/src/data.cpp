#include "pudnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "pudnet/errors.hpp"
#include "pudnet/ops.hpp"

namespace pudnet::data {

// ---------------------------------------------------------------------------
// Corpus

void ImageCorpus::validate() const {
  if (labels.empty()) throw ConfigError("corpus is empty");
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("corpus image shape has a zero dimension");
  if (pixels.size() != labels.size() * image_numel()) {
    throw ConfigError("corpus pixel buffer does not match " + std::to_string(labels.size()) + " images");
  }
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (auto l : labels) {
    if (l >= class_names.size()) throw ConfigError("corpus label " + std::to_string(l) + " has no class name");
    ++counts[l];
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw ConfigError("class '" + class_names[c] + "' has no samples");
  }
}

std::vector<std::vector<std::size_t>> ImageCorpus::indices_by_class() const {
  std::vector<std::vector<std::size_t>> out(class_names.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
  return out;
}

ImageCorpus select_classes(const ImageCorpus& corpus, std::span<const std::size_t> classes) {
  ImageCorpus out;
  out.channels = corpus.channels;
  out.height = corpus.height;
  out.width = corpus.width;
  std::vector<long> relabel(corpus.num_classes(), -1);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] >= corpus.num_classes()) throw ConfigError("select_classes: unknown class id");
    relabel[classes[i]] = static_cast<long>(i);
    out.class_names.push_back(corpus.class_names[classes[i]]);
  }
  const std::size_t stride = corpus.image_numel();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const long r = relabel[corpus.labels[i]];
    if (r < 0) continue;
    out.labels.push_back(static_cast<std::uint32_t>(r));
    out.pixels.insert(out.pixels.end(), corpus.pixels.begin() + static_cast<long>(i * stride),
                      corpus.pixels.begin() + static_cast<long>((i + 1) * stride));
  }
  out.validate();
  return out;
}

template <class T>
Tensor<T> batch_images(const ImageCorpus& corpus, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ConfigError("batch_images: empty index list");
  const std::size_t stride = corpus.image_numel();
  std::vector<T> v(indices.size() * stride);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= corpus.size()) throw IndexError("batch_images: sample index out of range");
    const float* src = corpus.pixels.data() + indices[i] * stride;
    std::copy(src, src + stride, v.begin() + static_cast<long>(i * stride));
  }
  return Tensor<T>({indices.size(), corpus.channels, corpus.height, corpus.width}, std::move(v));
}

// ---------------------------------------------------------------------------
// Task sampling

std::vector<std::size_t> TaskGroup::query_globals() const {
  std::vector<std::size_t> out(query_labels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = class_map.at(query_labels[i]);
  return out;
}

std::vector<TaskGroup> sample_task_groups(const ImageCorpus& corpus, const TaskSampling& cfg) {
  corpus.validate();
  if (cfg.n_way == 0) throw ConfigError("n_way must be >= 1");
  if (cfg.n_support == 0 || cfg.n_query == 0) throw ConfigError("n_support and n_query must be >= 1");
  if (cfg.n_way > corpus.num_classes()) {
    throw ConfigError("n_way=" + std::to_string(cfg.n_way) + " exceeds the corpus's " +
                      std::to_string(corpus.num_classes()) + " classes");
  }
  const auto by_class = corpus.indices_by_class();
  const std::size_t need = cfg.n_support + cfg.n_query;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() < need) {
      throw ConfigError("class '" + corpus.class_names[c] + "' has " +
                        std::to_string(by_class[c].size()) + " samples, " + std::to_string(need) +
                        " needed per group");
    }
  }
  const Rng root(cfg.seed);
  std::vector<TaskGroup> groups;
  groups.reserve(cfg.count);
  std::vector<std::size_t> classes(corpus.num_classes());
  for (std::size_t g = 0; g < cfg.count; ++g) {
    Rng rng = root.split("task-group", g);
    std::iota(classes.begin(), classes.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(classes));
    TaskGroup group;
    group.id = static_cast<std::uint32_t>(g);
    for (std::size_t local = 0; local < cfg.n_way; ++local) {
      const std::size_t cls = classes[local];
      group.class_map.push_back(cls);
      std::vector<std::size_t> pool = by_class[cls];
      rng.shuffle(std::span<std::size_t>(pool));
      for (std::size_t s = 0; s < cfg.n_support; ++s) {
        group.support.push_back(pool[s]);
        group.support_labels.push_back(local);
      }
      for (std::size_t q = 0; q < cfg.n_query; ++q) {
        group.query.push_back(pool[cfg.n_support + q]);
        group.query_labels.push_back(local);
      }
    }
    groups.push_back(std::move(group));
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Sketch extractor

template <class T>
SketchExtractor<T> SketchExtractor<T>::init(const SketchExtractorConfig& cfg, Rng& rng) {
  if (cfg.hidden.size() != 2) throw ConfigError("sketch extractor needs exactly two hidden widths");
  if (cfg.sketch_dim == 0 || cfg.in_channels == 0 || cfg.kernel == 0 || cfg.stride == 0) {
    throw ConfigError("sketch extractor dimensions must be positive");
  }
  SketchExtractor ex;
  ex.config = cfg;
  const std::size_t widths[4] = {cfg.in_channels, cfg.hidden[0], cfg.hidden[1], cfg.sketch_dim};
  const std::size_t k = cfg.kernel;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t cin = widths[b], cout = widths[b + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    std::vector<T> w(cout * cin * k * k);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    Block blk{Tensor<T>({cout, cin, k, k}, std::move(w)), Tensor<T>::full({cout}, T(1)),
              Tensor<T>::zeros({cout}), std::vector<T>(cout, T(0)), std::vector<T>(cout, T(1))};
    blk.weight.set_requires_grad(true);
    blk.gamma.set_requires_grad(true);
    blk.beta.set_requires_grad(true);
    ex.blocks.push_back(std::move(blk));
  }
  return ex;
}

template <class T>
Tensor<T> SketchExtractor<T>::features(const Tensor<T>& images, Mode mode) {
  if (images.rank() != 4) throw DimensionError("sketch extractor expects [B,C,H,W] images");
  if (images.dim(1) != config.in_channels) {
    throw DimensionError("sketch extractor expects " + std::to_string(config.in_channels) +
                         " channels, got " + std::to_string(images.dim(1)));
  }
  if (images.dim(2) < min_input_size() || images.dim(3) < min_input_size()) {
    throw ConfigError("image " + std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)) +
                      " is smaller than the extractor's minimum " + std::to_string(min_input_size()));
  }
  const std::size_t pad = config.kernel / 2;
  const T slope = static_cast<T>(config.slope);
  const T keep = static_cast<T>(config.bn_momentum);
  Tensor<T> h = images;
  for (auto& blk : blocks) {
    h = ops::conv2d(h, blk.weight, config.stride, pad);
    if (mode == Mode::Train) {
      auto bn = ops::batch_norm_train(h, blk.gamma, blk.beta);
      for (std::size_t c = 0; c < blk.running_mean.size(); ++c) {
        blk.running_mean[c] = keep * blk.running_mean[c] + (T(1) - keep) * bn.batch_mean[c];
        blk.running_var[c] = keep * blk.running_var[c] + (T(1) - keep) * bn.batch_var[c];
      }
      h = bn.y;
    } else {
      h = ops::batch_norm_eval<T>(h, blk.gamma, blk.beta, blk.running_mean, blk.running_var);
    }
    h = ops::leaky_relu(h, slope);
  }
  return ops::global_avg_pool(h);
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> SketchExtractor<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "T_phi/block" + std::to_string(b + 1) + "/";
    out.emplace_back(p + "conv", &blocks[b].weight);
    out.emplace_back(p + "bn_gamma", &blocks[b].gamma);
    out.emplace_back(p + "bn_beta", &blocks[b].beta);
  }
  return out;
}

template <class T>
std::vector<std::pair<std::string, std::vector<T>*>> SketchExtractor<T>::named_buffers() {
  std::vector<std::pair<std::string, std::vector<T>*>> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "T_phi/block" + std::to_string(b + 1) + "/";
    out.emplace_back(p + "bn_running_mean", &blocks[b].running_mean);
    out.emplace_back(p + "bn_running_var", &blocks[b].running_var);
  }
  return out;
}

template <class T>
Tensor<T> compute_sketch(SketchExtractor<T>& extractor, const Tensor<T>& images, Mode mode) {
  if (images.rank() != 4 || images.dim(0) == 0) throw ConfigError("compute_sketch: empty support");
  return ops::mean(extractor.features(images, mode), 0);
}

template <class T>
Tensor<T> compute_sketch(SketchExtractor<T>& extractor, const ImageCorpus& corpus,
                         const TaskGroup& group, Mode mode) {
  if (group.support.empty()) throw ConfigError("compute_sketch: empty support");
  return compute_sketch(extractor, batch_images<T>(corpus, group.support), mode);
}

template <class T>
Tensor<T> compute_sketch_clustered(SketchExtractor<T>& extractor, const Tensor<T>& images,
                                   std::span<const std::size_t> labels, std::size_t k_per_class,
                                   Mode mode, std::uint64_t seed) {
  if (labels.size() != images.dim(0)) throw DimensionError("compute_sketch_clustered: label count mismatch");
  if (k_per_class == 0) throw ConfigError("k_per_class must be >= 1");
  const Tensor<T> feats = extractor.features(images, mode);
  const std::size_t m = feats.dim(1);
  const std::size_t n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<std::size_t>> members(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  const Rng root(seed);
  std::vector<Tensor<T>> class_means;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (members[c].empty()) throw ConfigError("compute_sketch_clustered: class " + std::to_string(c) + " has no support sample");
    std::vector<double> pts;
    pts.reserve(members[c].size() * m);
    auto fv = feats.data();
    for (auto i : members[c])
      for (std::size_t d = 0; d < m; ++d) pts.push_back(static_cast<double>(fv[i * m + d]));
    Rng rng = root.split("kmeans", c);
    const std::size_t k = std::min(k_per_class, members[c].size());
    const KMeansResult km = kmeans(pts, m, k, 10, rng);
    std::vector<Tensor<T>> centroids;
    for (std::size_t j = 0; j < km.k; ++j) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < members[c].size(); ++i)
        if (km.assignment[i] == j) rows.push_back(members[c][i]);
      if (rows.empty()) continue;
      centroids.push_back(ops::reshape(ops::mean(ops::gather_rows(feats, rows), 0), {1, m}));
    }
    class_means.push_back(ops::reshape(ops::mean(ops::concat(centroids, 0), 0), {1, m}));
  }
  return ops::mean(ops::concat(class_means, 0), 0);
}

KMeansResult kmeans(std::span<const double> points, std::size_t dim, std::size_t k,
                    std::size_t iterations, Rng& rng) {
  if (dim == 0 || points.size() % dim != 0) throw DimensionError("kmeans: bad point buffer");
  const std::size_t n = points.size() / dim;
  if (k == 0 || k > n) throw ConfigError("kmeans: k must be in [1, n]");
  auto dist2 = [&](std::size_t i, const double* c) {
    double s = 0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = points[i * dim + d] - c[d];
      s += diff * diff;
    }
    return s;
  };
  KMeansResult res;
  res.k = k;
  res.centroids.assign(k * dim, 0.0);
  // k-means++ seeding
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  std::copy_n(points.begin() + static_cast<long>(first * dim), dim, res.centroids.begin());
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist2(i, res.centroids.data() + (j - 1) * dim));
      total += best[i];
    }
    std::size_t pick = n - 1;
    if (total > 0) {
      double r = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        r -= best[i];
        if (r < 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(rng.below(n));
    }
    std::copy_n(points.begin() + static_cast<long>(pick * dim), dim,
                res.centroids.begin() + static_cast<long>(j * dim));
  }
  res.assignment.assign(n, 0);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double d = dist2(i, res.centroids.data() + j * dim);
        if (d < bd) {
          bd = d;
          res.assignment[i] = j;
        }
      }
    }
    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[res.assignment[i]];
      for (std::size_t d = 0; d < dim; ++d) sums[res.assignment[i] * dim + d] += points[i * dim + d];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;  // empty cluster keeps its previous centroid
      for (std::size_t d = 0; d < dim; ++d) res.centroids[j * dim + d] = sums[j * dim + d] / counts[j];
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

PatternFamily parse_family(const std::string& name) {
  if (name == "grating") return PatternFamily::Grating;
  if (name == "rings") return PatternFamily::Rings;
  throw ConfigError("unknown pattern family '" + name + "' (expected grating|rings)");
}

std::string family_name(PatternFamily family) {
  return family == PatternFamily::Grating ? "grating" : "rings";
}

namespace {

struct ClassPattern {
  double orientation;  // radians (grating)
  double frequency;    // cycles per image side
  double phase;
  double cx, cy;       // ring centre, in units of image side
};

ClassPattern class_pattern(PatternFamily family, std::size_t c, std::size_t n_classes) {
  const std::size_t n_pos = std::max<std::size_t>(2, (n_classes + 1) / 2);
  const std::size_t pos = c % n_pos;
  const std::size_t level = c / n_pos;
  ClassPattern p{};
  p.phase = 1.3 * static_cast<double>(c);
  if (family == PatternFamily::Grating) {
    p.orientation = std::numbers::pi * static_cast<double>(pos) / static_cast<double>(n_pos);
    p.frequency = 2.0 + 1.5 * static_cast<double>(level);
    p.cx = p.cy = 0.5;
  } else {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(pos) / static_cast<double>(n_pos);
    p.cx = 0.5 + 0.3 * std::cos(angle);
    p.cy = 0.5 + 0.3 * std::sin(angle);
    p.frequency = 1.5 + 1.5 * static_cast<double>(level);
    p.orientation = 0.0;
  }
  return p;
}

}  // namespace

ImageCorpus make_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.n_classes < 2) throw ConfigError("synthetic corpus needs n_classes >= 2");
  if (spec.per_class == 0) throw ConfigError("synthetic corpus needs per_class >= 1");
  if (spec.channels == 0 || spec.height == 0 || spec.width == 0) throw ConfigError("synthetic image shape must be positive");
  ImageCorpus corpus;
  corpus.channels = spec.channels;
  corpus.height = spec.height;
  corpus.width = spec.width;
  const std::string prefix = family_name(spec.family);
  for (std::size_t c = 0; c < spec.n_classes; ++c) corpus.class_names.push_back(prefix + "-" + std::to_string(c));
  const Rng root(spec.seed);
  const std::size_t stride = corpus.image_numel();
  corpus.pixels.resize(spec.n_classes * spec.per_class * stride);
  corpus.labels.resize(spec.n_classes * spec.per_class);
  const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);
  const double side = std::max(H, W);
  std::size_t idx = 0;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    const ClassPattern pat = class_pattern(spec.family, c, spec.n_classes);
    for (std::size_t s = 0; s < spec.per_class; ++s, ++idx) {
      Rng rng = root.split("sample", idx);
      const double jitter = rng.uniform(-0.5, 0.5);
      const double amp = rng.uniform(0.3, 0.4);
      // high-frequency distractor grating with random orientation and phase
      const double c_theta = rng.uniform(0.0, std::numbers::pi);
      const double c_freq = rng.uniform(spec.clutter_freq_lo, spec.clutter_freq_hi);
      const double c_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double c_amp = spec.clutter * rng.uniform(0.75, 1.25);
      float* img = corpus.pixels.data() + idx * stride;
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        const double ch_gain = 1.0 - 0.15 * static_cast<double>(ch);
        for (std::size_t y = 0; y < spec.height; ++y) {
          for (std::size_t x = 0; x < spec.width; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / side;
            const double v = (static_cast<double>(y) + 0.5) / side;
            double arg;
            if (spec.family == PatternFamily::Grating) {
              arg = u * std::cos(pat.orientation) + v * std::sin(pat.orientation);
            } else {
              arg = std::hypot(u - pat.cx, v - pat.cy);
            }
            double val = 0.5 + ch_gain * amp *
                                   std::sin(2.0 * std::numbers::pi * pat.frequency * arg + pat.phase + jitter);
            if (c_amp > 0.0) {
              const double carg = u * std::cos(c_theta) + v * std::sin(c_theta);
              val += c_amp * std::sin(2.0 * std::numbers::pi * c_freq * carg + c_phase);
            }
            val += spec.noise_sigma * rng.normal();
            img[(ch * spec.height + y) * spec.width + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
          }
        }
      }
      corpus.labels[idx] = static_cast<std::uint32_t>(c);
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Corpus file

namespace {
constexpr char kCorpusMagic[4] = {'P', 'U', 'D', 'C'};
constexpr std::uint32_t kCorpusVersion = 1;
}  // namespace

void save_corpus(const ImageCorpus& corpus, const std::filesystem::path& path) {
  corpus.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(kCorpusMagic, 4);
  io::write_u32(os, kCorpusVersion);
  io::write_u32(os, static_cast<std::uint32_t>(corpus.size()));
  io::write_u32(os, static_cast<std::uint32_t>(corpus.channels));
  io::write_u32(os, static_cast<std::uint32_t>(corpus.height));
  io::write_u32(os, static_cast<std::uint32_t>(corpus.width));
  io::write_u32(os, static_cast<std::uint32_t>(corpus.num_classes()));
  for (const auto& name : corpus.class_names) io::write_string(os, name);
  for (auto l : corpus.labels) io::write_u32(os, l);
  io::write_f32_array(os, corpus.pixels);
  if (!os) throw FormatError("failed writing corpus " + path.string());
}

ImageCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCorpusMagic, 4) != 0) {
    throw FormatError("bad magic: not a PUDC corpus file");
  }
  const std::uint32_t version = io::read_u32(is, "version");
  if (version != kCorpusVersion) throw FormatError("unsupported corpus version " + std::to_string(version));
  ImageCorpus c;
  const std::uint32_t n = io::read_u32(is, "sample count");
  c.channels = io::read_u32(is, "channels");
  c.height = io::read_u32(is, "height");
  c.width = io::read_u32(is, "width");
  const std::uint32_t n_classes = io::read_u32(is, "class count");
  const std::uint64_t numel = static_cast<std::uint64_t>(n) * c.channels * c.height * c.width;
  if (numel > (1ull << 32) || n_classes > n) throw FormatError("implausible corpus header");
  for (std::uint32_t i = 0; i < n_classes; ++i) c.class_names.push_back(io::read_string(is, "class name"));
  c.labels.resize(n);
  for (auto& l : c.labels) l = io::read_u32(is, "labels");
  c.pixels.resize(numel);
  io::read_f32_array(is, c.pixels, "pixels");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("corrupt corpus: ") + e.what());
  }
  return c;
}

template struct SketchExtractor<float>;
template struct SketchExtractor<double>;
template Tensor<float> batch_images<float>(const ImageCorpus&, std::span<const std::size_t>);
template Tensor<double> batch_images<double>(const ImageCorpus&, std::span<const std::size_t>);
template Tensor<float> compute_sketch<float>(SketchExtractor<float>&, const Tensor<float>&, Mode);
template Tensor<double> compute_sketch<double>(SketchExtractor<double>&, const Tensor<double>&, Mode);
template Tensor<float> compute_sketch<float>(SketchExtractor<float>&, const ImageCorpus&, const TaskGroup&, Mode);
template Tensor<double> compute_sketch<double>(SketchExtractor<double>&, const ImageCorpus&, const TaskGroup&, Mode);
template Tensor<float> compute_sketch_clustered<float>(SketchExtractor<float>&, const Tensor<float>&,
                                                       std::span<const std::size_t>, std::size_t, Mode,
                                                       std::uint64_t);
template Tensor<double> compute_sketch_clustered<double>(SketchExtractor<double>&, const Tensor<double>&,
                                                         std::span<const std::size_t>, std::size_t, Mode,
                                                         std::uint64_t);

}  // namespace pudnet::data
