#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pudnet/data.hpp"
#include "pudnet/targetnet.hpp"

namespace pudnet::analysis {

struct CcaResult {
  std::vector<double> rho;  // canonical correlations, descending, in [0,1]
  std::size_t rows = 0;
  std::size_t dx = 0;
  std::size_t dy = 0;

  double mean() const;
};

/// Canonical correlations of the paired rows of X and Y. Columns are centred;
/// each covariance is whitened through its eigendecomposition with
/// eigenvalues floored at ridge·λ_max. Needs rows >= max(dx, dy) + 2.
CcaResult cca(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double ridge = 1e-6);

struct CcaConfig {
  std::size_t reps = 100;
  std::size_t subset_size = 200;
  std::size_t classes_per_subset = 4;
  std::size_t train_epochs = 10;
  std::size_t batch_size = 50;
  double lr = 1e-3;
  std::size_t pool_grid = 4;  // X: mean subset image pooled to pool_grid×pool_grid per channel
  std::size_t dy = 8;         // Y: parameters projected to dy dimensions
  std::uint64_t seed = 0;

  void validate() const;
};

enum class ParamSource { Learned, Random };

struct Pairs {
  Eigen::MatrixXd X;  // reps × dx
  Eigen::MatrixXd Y;  // reps × dy
};

/// Per rep: draw a class subset and `subset_size` images from it. X row =
/// average-pooled mean image. Y row = projected kernels of a ConvNet either
/// trained on the subset from a fixed initialisation (Learned) or freshly
/// initialised with a per-rep seed (Random).
Pairs collect_pairs(const data::ImageCorpus& corpus, const target::TargetSpec& spec, const CcaConfig& cfg,
                    ParamSource source);

/// Mean image of the selected samples, average-pooled to grid×grid per channel.
std::vector<double> pooled_mean_image(const data::ImageCorpus& corpus, const std::vector<std::size_t>& indices,
                                      std::size_t grid);

struct CcaComparison {
  CcaResult learned;
  CcaResult random;
  CcaResult permuted;  // learned Y against row-permuted X
};

CcaComparison learned_vs_random(const data::ImageCorpus& corpus, const target::TargetSpec& spec,
                                const CcaConfig& cfg);

/// Rows (component, rho_learned, rho_random, rho_permuted).
void write_cca_csv(const CcaComparison& cmp, const std::filesystem::path& path);

}  // namespace pudnet::analysis
