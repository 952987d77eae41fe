#include "ilm/als.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <thread>

#include "ilm/error.hpp"

namespace ilm {

InteractionMatrix::InteractionMatrix(std::size_t num_users, std::size_t num_items, std::vector<Interaction> entries)
    : num_users_(num_users), num_items_(num_items), by_user_(num_users), by_item_(num_items) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> merged;
  for (const auto& e : entries) {
    if (e.user >= num_users || e.item >= num_items) {
      throw DimensionError("interaction (" + std::to_string(e.user) + ", " + std::to_string(e.item) +
                           ") outside " + std::to_string(num_users) + "x" + std::to_string(num_items));
    }
    if (!(e.weight >= 0.0) || !std::isfinite(e.weight)) throw UsageError("interaction weight must be finite and >= 0");
    merged[{e.user, e.item}] += e.weight;
  }
  for (const auto& [key, w] : merged) {
    by_user_[key.first].push_back({key.second, w});
    by_item_[key.second].push_back({key.first, w});
  }
  nnz_ = merged.size();
}

FactorModel init_factors(std::size_t num_users, std::size_t num_items, const AlsConfig& config, Rng& rng) {
  if (config.rank == 0) throw UsageError("factor rank must be >= 1");
  if (!(config.lambda > 0.0)) throw UsageError("ridge lambda must be > 0");
  FactorModel m;
  m.alpha = config.alpha;
  m.lambda = config.lambda;
  m.users.resize(num_users, config.rank);
  m.items.resize(num_items, config.rank);
  for (Eigen::Index r = 0; r < m.users.rows(); ++r)
    for (Eigen::Index c = 0; c < m.users.cols(); ++c) m.users(r, c) = normal(rng, 0.0, config.init_stddev);
  for (Eigen::Index r = 0; r < m.items.rows(); ++r)
    for (Eigen::Index c = 0; c < m.items.cols(); ++c) m.items(r, c) = normal(rng, 0.0, config.init_stddev);
  return m;
}

double ials_objective(const FactorModel& model, const InteractionMatrix& x) {
  const Eigen::MatrixXd gu = model.users.transpose() * model.users;
  const Eigen::MatrixXd gv = model.items.transpose() * model.items;
  double total = gu.cwiseProduct(gv).sum();
  for (std::size_t u = 0; u < x.num_users(); ++u) {
    for (const auto& e : x.user_row(u)) {
      const double s = model.users.row(u).dot(model.items.row(e.index));
      const double c = 1.0 + model.alpha * e.weight;
      total += c * (1.0 - s) * (1.0 - s) - s * s;
    }
  }
  total += model.lambda * (model.users.squaredNorm() + model.items.squaredNorm());
  return total;
}

namespace {

// Solves every row of `target` against the fixed factors `other`.
template <typename RowFn>
void solve_side(Eigen::MatrixXd& target, const Eigen::MatrixXd& other, double alpha, double lambda,
                std::size_t threads, RowFn row_of) {
  const Eigen::Index rank = other.cols();
  Eigen::MatrixXd gram = other.transpose() * other;
  gram.diagonal().array() += lambda;
  const auto rows = static_cast<std::size_t>(target.rows());
  auto work = [&](std::size_t begin, std::size_t end) {
    Eigen::MatrixXd a(rank, rank);
    Eigen::VectorXd b(rank);
    for (std::size_t r = begin; r < end; ++r) {
      a = gram;
      b.setZero();
      for (const auto& e : row_of(r)) {
        const auto v = other.row(e.index).transpose();
        const double c = 1.0 + alpha * e.weight;
        a.noalias() += (c - 1.0) * v * v.transpose();
        b.noalias() += c * v;
      }
      Eigen::LLT<Eigen::MatrixXd> llt(a);
      if (llt.info() != Eigen::Success) throw NumericalError("iALS normal equations are not positive definite");
      target.row(r) = llt.solve(b).transpose();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, rows));
  if (threads == 1) {
    work(0, rows);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        work(t * chunk, std::min(rows, (t + 1) * chunk));
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void check_finite(const FactorModel& model) {
  if (!model.users.allFinite() || !model.items.allFinite()) throw NumericalError("iALS produced non-finite factors");
}

}  // namespace

void ials_sweep(FactorModel& model, const InteractionMatrix& x, std::size_t threads) {
  if (model.users.rows() != static_cast<Eigen::Index>(x.num_users()) ||
      model.items.rows() != static_cast<Eigen::Index>(x.num_items())) {
    throw DimensionError("factor model does not match interaction matrix size");
  }
  if (!(model.lambda > 0.0)) throw UsageError("ridge lambda must be > 0");
  solve_side(model.users, model.items, model.alpha, model.lambda, threads,
             [&](std::size_t u) -> const auto& { return x.user_row(u); });
  solve_side(model.items, model.users, model.alpha, model.lambda, threads,
             [&](std::size_t i) -> const auto& { return x.item_row(i); });
  check_finite(model);
}

MfResult train_mf(const InteractionMatrix& x, const AlsConfig& config, Rng& rng) {
  if (x.nnz() == 0) throw UsageError("cannot factorize an empty interaction set");
  MfResult result;
  result.model = init_factors(x.num_users(), x.num_items(), config, rng);
  result.objective_trace.push_back(ials_objective(result.model, x));
  for (std::size_t s = 0; s < config.max_sweeps; ++s) {
    ials_sweep(result.model, x, config.threads);
    const double prev = result.objective_trace.back();
    const double obj = ials_objective(result.model, x);
    result.objective_trace.push_back(obj);
    if (std::abs(prev - obj) <= config.tolerance * std::max(std::abs(prev), 1e-300)) break;
  }
  return result;
}

Checkpoint embeddings_checkpoint(const FactorModel& model) {
  Checkpoint ckpt;
  auto add = [&](const std::string& name, const Eigen::MatrixXd& m) {
    NamedArray a{name, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, {}};
    a.values.reserve(m.size());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) a.values.push_back(static_cast<float>(m(r, c)));
    ckpt.arrays.push_back(std::move(a));
  };
  add("user_emb", model.users);
  add("item_emb", model.items);
  return ckpt;
}

void export_embeddings(const FactorModel& model, const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, std::string>>& metadata) {
  check_finite(model);
  Checkpoint ckpt = embeddings_checkpoint(model);
  for (const auto& [k, v] : metadata) ckpt.set_meta(k, v);
  write_checkpoint(path, ckpt);
}

}  // namespace ilm
