#pragma once

// Brute-force reference implementations shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "ilm/als.hpp"
#include "ilm/backbone.hpp"
#include "ilm/data.hpp"
#include "ilm/rng.hpp"
#include "ilm/tensor.hpp"

namespace ilm::testing {

constexpr double kTie = 1e-12;

inline std::vector<double> unit(std::span<const double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline std::size_t brute_select_item(const Tensor& reps, const Tensor& cls) {
  const auto d = reps.cols();
  const auto c = unit(cls.data());
  std::size_t best = 0;
  for (std::size_t j = 1; j < reps.rows(); ++j) {
    if (dot(unit(reps.data().subspan(j * d, d)), c) > dot(unit(reps.data().subspan(best * d, d)), c) + kTie) best = j;
  }
  return best;
}

inline std::pair<std::size_t, std::size_t> brute_select_pair(const Tensor& a, const Tensor& b) {
  const auto d = a.cols();
  std::vector<std::tuple<double, std::size_t, std::size_t>> all;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j)
      all.emplace_back(dot(unit(a.data().subspan(i * d, d)), unit(b.data().subspan(j * d, d))), i, j);
  auto best = all.front();
  for (const auto& t : all)
    if (std::get<0>(t) > std::get<0>(best) + kTie) best = t;
  return {std::get<1>(best), std::get<2>(best)};
}

// Random N×d matrix (N <= 8) where some rows are exact copies of earlier rows.
inline Tensor random_reps_with_ties(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<double> v(n * d);
  for (auto& x : v) x = normal(rng, 0.0, 1.0);
  for (std::size_t r = 1; r < n; ++r) {
    if (uniform01(rng) < 0.4) {
      const auto src = uniform_index(rng, r);
      for (std::size_t k = 0; k < d; ++k) v[r * d + k] = v[src * d + k];
    }
  }
  return Tensor::from_data({n, d}, std::move(v));
}

// Independent reading of `.*item_(\d+)$`: a trailing digit run preceded by
// "item_", with no line break anywhere.
inline std::optional<std::uint64_t> brute_parse(const std::string& s) {
  if (s.find('\n') != std::string::npos) return std::nullopt;
  std::size_t d = s.size();
  while (d > 0 && s[d - 1] >= '0' && s[d - 1] <= '9') --d;
  if (d == s.size() || d < 5 || s.compare(d - 5, 5, "item_") != 0) return std::nullopt;
  std::uint64_t v = 0;
  for (std::size_t i = d; i < s.size(); ++i) v = v * 10 + static_cast<std::uint64_t>(s[i] - '0');
  return v;
}

struct BruteScores {
  double hr5 = 0, hr10 = 0, ndcg5 = 0, ndcg10 = 0;
};

inline BruteScores brute_scores(const std::vector<std::string>& outputs, std::uint64_t target) {
  std::vector<std::uint64_t> ranked;
  for (const auto& s : outputs) {
    const auto id = brute_parse(s);
    if (!id) continue;
    bool seen = false;
    for (auto r : ranked) seen = seen || r == *id;
    if (!seen) ranked.push_back(*id);
  }
  BruteScores b;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    if (ranked[r] != target) continue;
    const double gain = 1.0 / std::log2(static_cast<double>(r + 2));
    if (r < 5) b.hr5 = 1, b.ndcg5 = gain;
    if (r < 10) b.hr10 = 1, b.ndcg10 = gain;
    break;
  }
  return b;
}

struct Planted {
  std::vector<Interaction> train;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> held_out;
  std::set<std::pair<std::uint32_t, std::uint32_t>> positives;
};

inline Planted planted_rank2(Rng& rng) {
  Planted p;
  const std::size_t users = 20, items = 30;
  for (std::uint32_t u = 0; u < users; ++u) {
    const double a = normal(rng, 0, 1), b = normal(rng, 0, 1);
    for (std::uint32_t i = 0; i < items; ++i) {
      const double ia = (i % 2 == 0) ? 1.0 : -0.2, ib = (i % 2 == 0) ? -0.2 : 1.0;
      if (a * ia + b * ib > 0.3) p.positives.insert({u, i});
    }
  }
  for (const auto& pos : p.positives) {
    if (uniform01(rng) < 0.2) {
      p.held_out.push_back(pos);
    } else {
      p.train.push_back({pos.first, pos.second, 1.0});
    }
  }
  return p;
}

// Brute-force AUC: each held-out positive against every non-positive cell of its user.
inline double brute_auc(const FactorModel& m, const Planted& p) {
  double wins = 0, total = 0;
  for (const auto& [u, i] : p.held_out) {
    const double si = m.users.row(u).dot(m.items.row(i));
    for (std::uint32_t j = 0; j < m.items.rows(); ++j) {
      if (p.positives.count({u, j})) continue;
      const double sj = m.users.row(u).dot(m.items.row(j));
      wins += si > sj ? 1.0 : (si == sj ? 0.5 : 0.0);
      total += 1;
    }
  }
  return wins / total;
}

inline InteractionMatrix random_matrix(Rng& rng, std::size_t users, std::size_t items, double density) {
  std::vector<Interaction> e;
  for (std::uint32_t u = 0; u < users; ++u)
    for (std::uint32_t i = 0; i < items; ++i)
      if (uniform01(rng) < density) e.push_back({u, i, 1.0 + static_cast<double>(uniform_index(rng, 5))});
  return InteractionMatrix(users, items, e);
}

// Short strings mixing valid and malformed item mentions.
inline std::string random_output(Rng& rng) {
  static const std::vector<std::string> pieces{"item_", "item", "_", "see ", "foo", "7", "42", "0", " ", "x", "\n"};
  std::string s;
  const auto n = uniform_index(rng, 5);
  for (std::size_t k = 0; k < n; ++k) s += pieces[uniform_index(rng, pieces.size())];
  if (uniform01(rng) < 0.5) s += "item_" + std::to_string(uniform_index(rng, 12));
  return s;
}

// Mean per-token target NLL by direct accumulation over decoder logits.
inline double brute_target_nll(const nn::Decoder& decoder, const data::SequenceExample& ex) {
  std::vector<int> ids{data::tok::kBos};
  ids.insert(ids.end(), ex.prompt.begin(), ex.prompt.end());
  ids.insert(ids.end(), ex.target.begin(), ex.target.end() - 1);
  const Tensor logits = decoder.forward(ids);
  const auto v = logits.cols();
  double nll = 0;
  for (std::size_t t = 0; t < ex.target.size(); ++t) {
    const std::size_t r = ex.prompt.size() + t;
    double mx = -1e300, z = 0;
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits.at(r, j));
    for (std::size_t j = 0; j < v; ++j) z += std::exp(logits.at(r, j) - mx);
    nll -= logits.at(r, static_cast<std::size_t>(ex.target[t])) - mx - std::log(z);
  }
  return nll / static_cast<double>(ex.target.size());
}

}  // namespace ilm::testing
