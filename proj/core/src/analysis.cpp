#include "pudnet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "pudnet/errors.hpp"
#include "pudnet/infer.hpp"

namespace pudnet::analysis {

double CcaResult::mean() const {
  if (rho.empty()) return 0.0;
  return std::accumulate(rho.begin(), rho.end(), 0.0) / static_cast<double>(rho.size());
}

namespace {

Eigen::MatrixXd inverse_sqrt(const Eigen::MatrixXd& C, double ridge, const char* which) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C);
  if (eig.info() != Eigen::Success) throw NumericError(std::string("cca: eigendecomposition of ") + which + " failed");
  Eigen::VectorXd lambda = eig.eigenvalues();
  const double top = lambda.maxCoeff();
  if (!std::isfinite(top) || top <= 0.0) {
    throw NumericError(std::string("cca: ") + which + " covariance is degenerate (all directions have zero variance)");
  }
  const double floor = ridge * top;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) lambda[i] = 1.0 / std::sqrt(std::max(lambda[i], floor));
  return eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

CcaResult cca(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double ridge) {
  const auto n = X.rows();
  if (Y.rows() != n) throw DimensionError("cca: X and Y have different row counts");
  if (X.cols() == 0 || Y.cols() == 0) throw DimensionError("cca: empty representation");
  if (n < std::max(X.cols(), Y.cols()) + 2) {
    throw ConfigError("cca: need at least max(dx, dy) + 2 = " + std::to_string(std::max(X.cols(), Y.cols()) + 2) +
                      " rows, got " + std::to_string(n));
  }
  if (!X.allFinite() || !Y.allFinite()) throw NumericError("cca: non-finite input");
  const Eigen::MatrixXd Xc = X.rowwise() - X.colwise().mean();
  const Eigen::MatrixXd Yc = Y.rowwise() - Y.colwise().mean();
  const double denom = static_cast<double>(n - 1);
  const Eigen::MatrixXd Cxx = Xc.transpose() * Xc / denom;
  const Eigen::MatrixXd Cyy = Yc.transpose() * Yc / denom;
  const Eigen::MatrixXd Cxy = Xc.transpose() * Yc / denom;
  const Eigen::MatrixXd M = inverse_sqrt(Cxx, ridge, "X") * Cxy * inverse_sqrt(Cyy, ridge, "Y");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
  CcaResult r;
  r.rows = static_cast<std::size_t>(n);
  r.dx = static_cast<std::size_t>(X.cols());
  r.dy = static_cast<std::size_t>(Y.cols());
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) {
    // round-off can push a perfect correlation a few ulps past 1
    r.rho.push_back(std::clamp(svd.singularValues()[i], 0.0, 1.0));
  }
  std::sort(r.rho.begin(), r.rho.end(), std::greater<>());
  return r;
}

void CcaConfig::validate() const {
  if (reps == 0) throw ConfigError("cca.reps must be >= 1");
  if (subset_size == 0) throw ConfigError("cca.subset_size must be >= 1");
  if (classes_per_subset < 2) throw ConfigError("cca.classes_per_subset must be >= 2");
  if (pool_grid == 0 || dy == 0) throw ConfigError("cca.pool_grid and cca.dy must be >= 1");
  if (train_epochs == 0) throw ConfigError("cca.train_epochs must be >= 1");
}

std::vector<double> pooled_mean_image(const data::ImageCorpus& corpus, const std::vector<std::size_t>& indices,
                                      std::size_t grid) {
  const std::size_t C = corpus.channels, H = corpus.height, W = corpus.width;
  if (grid == 0 || grid > H || grid > W) throw ConfigError("pool grid must lie in [1, image size]");
  if (indices.empty()) throw ConfigError("pooled_mean_image: empty selection");
  std::vector<double> mean(C * H * W, 0.0);
  for (auto i : indices) {
    const float* px = corpus.pixels.data() + i * corpus.image_numel();
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += px[j];
  }
  for (auto& v : mean) v /= static_cast<double>(indices.size());
  std::vector<double> out(C * grid * grid, 0.0);
  std::vector<double> count(out.size(), 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t cell = (c * grid + y * grid / H) * grid + x * grid / W;
        out[cell] += mean[(c * H + y) * W + x];
        count[cell] += 1.0;
      }
  for (std::size_t j = 0; j < out.size(); ++j) out[j] /= count[j];
  return out;
}

Pairs collect_pairs(const data::ImageCorpus& corpus, const target::TargetSpec& spec, const CcaConfig& cfg,
                    ParamSource source) {
  cfg.validate();
  corpus.validate();
  const std::size_t dx = corpus.channels * cfg.pool_grid * cfg.pool_grid;
  if (cfg.reps < dx + 2 || cfg.reps < cfg.dy + 2) {
    throw ConfigError("cca.reps must be >= max(dx, dy) + 2 = " + std::to_string(std::max(dx, cfg.dy) + 2));
  }
  const std::size_t n_classes = corpus.num_classes();
  if (cfg.classes_per_subset > n_classes) throw ConfigError("cca.classes_per_subset exceeds the corpus class count");
  const auto by_class = corpus.indices_by_class();
  const Rng root(cfg.seed);

  // fixed projection of the flattened kernels
  const std::size_t D = spec.param_count();
  Eigen::MatrixXd P(cfg.dy, D);
  {
    Rng rng = root.split("cca-projection");
    for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = rng.normal() / std::sqrt(static_cast<double>(D));
  }

  Pairs out{Eigen::MatrixXd(cfg.reps, dx), Eigen::MatrixXd(cfg.reps, cfg.dy)};
  for (std::size_t r = 0; r < cfg.reps; ++r) {
    Rng rng = root.split("cca-subset", r);
    std::vector<std::size_t> classes(n_classes);
    std::iota(classes.begin(), classes.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(classes));
    classes.resize(cfg.classes_per_subset);
    std::sort(classes.begin(), classes.end());
    std::vector<std::size_t> pool, pool_labels;
    for (std::size_t k = 0; k < classes.size(); ++k) {
      for (auto i : by_class[classes[k]]) {
        pool.push_back(i);
        pool_labels.push_back(k);
      }
    }
    std::vector<std::size_t> pick(pool.size());
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(pick));
    pick.resize(std::min(cfg.subset_size, pick.size()));
    std::vector<std::size_t> idx, labels;
    for (auto p : pick) {
      idx.push_back(pool[p]);
      labels.push_back(pool_labels[p]);
    }

    const auto xrow = pooled_mean_image(corpus, idx, cfg.pool_grid);
    for (std::size_t j = 0; j < dx; ++j) out.X(r, j) = xrow[j];

    target::ParamSet<double> params;
    if (source == ParamSource::Learned) {
      // every rep starts from the same initialisation, so Y differs only through the data
      Rng init = root.split("cca-init");
      auto trained = target::random_params<float>(spec, init);
      std::vector<std::size_t> counts(classes.size(), 0);
      for (auto l : labels) ++counts[l];
      infer::ScratchConfig sc;
      sc.epochs = cfg.train_epochs;
      sc.lr = cfg.lr;
      sc.batch_size = cfg.batch_size;
      sc.shots = *std::min_element(counts.begin(), counts.end());
      sc.seed = root.split("cca-train", r).next_u64();
      if (sc.shots == 0) throw ConfigError("cca subset missed a class; increase cca.subset_size");
      infer::train_scratch<float>(spec, trained, data::batch_images<float>(corpus, idx), labels, classes.size(), sc);
      for (const auto& t : trained) params.push_back(t.template cast<double>());
    } else {
      Rng init = root.split("cca-random-init", r);
      params = target::random_params<double>(spec, init);
    }
    Eigen::VectorXd flat(D);
    std::size_t o = 0;
    for (const auto& p : params)
      for (double v : p.data()) flat[static_cast<Eigen::Index>(o++)] = v;
    out.Y.row(static_cast<Eigen::Index>(r)) = (P * flat).transpose();
  }
  return out;
}

CcaComparison learned_vs_random(const data::ImageCorpus& corpus, const target::TargetSpec& spec,
                                const CcaConfig& cfg) {
  const Pairs learned = collect_pairs(corpus, spec, cfg, ParamSource::Learned);
  const Pairs random = collect_pairs(corpus, spec, cfg, ParamSource::Random);
  CcaComparison cmp;
  cmp.learned = cca(learned.X, learned.Y);
  cmp.random = cca(random.X, random.Y);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(learned.X.rows()));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  Rng rng = Rng(cfg.seed).split("cca-permutation");
  rng.shuffle(std::span<Eigen::Index>(perm));
  Eigen::MatrixXd Xp(learned.X.rows(), learned.X.cols());
  for (Eigen::Index i = 0; i < Xp.rows(); ++i) Xp.row(i) = learned.X.row(perm[static_cast<std::size_t>(i)]);
  cmp.permuted = cca(Xp, learned.Y);
  return cmp;
}

void write_cca_csv(const CcaComparison& cmp, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << "component,rho_learned,rho_random,rho_permuted\n" << std::setprecision(9);
  const std::size_t n = std::max({cmp.learned.rho.size(), cmp.random.rho.size(), cmp.permuted.rho.size()});
  auto at = [](const CcaResult& r, std::size_t i) { return i < r.rho.size() ? r.rho[i] : 0.0; };
  for (std::size_t i = 0; i < n; ++i) {
    os << i + 1 << ',' << at(cmp.learned, i) << ',' << at(cmp.random, i) << ',' << at(cmp.permuted, i) << '\n';
  }
}

}  // namespace pudnet::analysis
