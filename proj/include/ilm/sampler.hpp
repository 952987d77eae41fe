#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "ilm/rng.hpp"

namespace ilm {

// Endless shuffled pass over [0, n); reshuffles at every epoch boundary.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, Rng& rng) : order_(n), rng_(&rng) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), *rng_);
  }

  // Up to `count` indices; `wrapped` is set when this batch finished an epoch.
  std::vector<std::size_t> next(std::size_t count, bool& wrapped) {
    wrapped = false;
    std::vector<std::size_t> out;
    count = std::min(count, order_.size());
    while (out.size() < count) {
      out.push_back(order_[pos_++]);
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), *rng_);
        pos_ = 0;
        wrapped = true;
      }
    }
    return out;
  }

  std::vector<std::size_t> next(std::size_t count) {
    bool ignored = false;
    return next(count, ignored);
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  Rng* rng_;
};

}  // namespace ilm
