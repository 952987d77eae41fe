#pragma once

// Implicit-feedback alternating least squares.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ilm/checkpoint.hpp"
#include "ilm/rng.hpp"

namespace ilm {

struct Interaction {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  double weight = 1.0;
};

// Sparse user×item weights with duplicate entries summed; rows stored twice
// (by user and by item) for the two half-sweeps.
class InteractionMatrix {
 public:
  struct Entry {
    std::uint32_t index;
    double weight;
  };

  InteractionMatrix(std::size_t num_users, std::size_t num_items, std::vector<Interaction> entries);

  std::size_t num_users() const { return num_users_; }
  std::size_t num_items() const { return num_items_; }
  std::size_t nnz() const { return nnz_; }
  const std::vector<Entry>& user_row(std::size_t u) const { return by_user_[u]; }
  const std::vector<Entry>& item_row(std::size_t i) const { return by_item_[i]; }

 private:
  std::size_t num_users_;
  std::size_t num_items_;
  std::size_t nnz_ = 0;
  std::vector<std::vector<Entry>> by_user_;
  std::vector<std::vector<Entry>> by_item_;
};

struct AlsConfig {
  std::size_t rank = 32;
  double alpha = 40.0;
  double lambda = 0.1;
  std::size_t max_sweeps = 30;
  double tolerance = 1e-6;
  double init_stddev = 0.01;
  std::size_t threads = 1;
};

struct FactorModel {
  Eigen::MatrixXd users;  // num_users × rank
  Eigen::MatrixXd items;  // num_items × rank
  double alpha = 40.0;
  double lambda = 0.1;
};

FactorModel init_factors(std::size_t num_users, std::size_t num_items, const AlsConfig& config, Rng& rng);

// Σ c·(p − u·v)² over all cells (c = 1 + α·w observed, 1 otherwise) + λ(‖U‖² + ‖V‖²).
double ials_objective(const FactorModel& model, const InteractionMatrix& x);

// One pass: all user rows with items fixed, then all item rows with users fixed.
void ials_sweep(FactorModel& model, const InteractionMatrix& x, std::size_t threads = 1);

struct MfResult {
  FactorModel model;
  std::vector<double> objective_trace;  // initial objective, then one entry per sweep
};

MfResult train_mf(const InteractionMatrix& x, const AlsConfig& config, Rng& rng);

Checkpoint embeddings_checkpoint(const FactorModel& model);
void export_embeddings(const FactorModel& model, const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, std::string>>& metadata = {});

}  // namespace ilm
