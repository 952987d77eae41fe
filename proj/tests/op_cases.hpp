#pragma once

// One randomized forward/parameter setup per differentiable op, shared by the
// unit gradient test and the acceptance suite.

#include <functional>
#include <map>
#include <string>

#include "gradcheck.hpp"
#include "ilm/tensor.hpp"

namespace ilm::testing {

using OpCase = std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(Rng&)>;

inline std::map<std::string, OpCase> op_cases() {
  std::map<std::string, OpCase> cases;
  cases["matmul"] = [](Rng& rng) {
    const auto m = random_extent(rng, 1, 8), k = random_extent(rng, 1, 8), n = random_extent(rng, 1, 8);
    auto a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n});
    auto r = random_tensor(rng, {m, n}, false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(matmul(a, b), r)); }), std::vector{a, b}};
  };
  cases["matmul_transposed"] = [](Rng& rng) {
    const auto m = random_extent(rng, 1, 8), k = random_extent(rng, 1, 8), n = random_extent(rng, 1, 8);
    auto a = random_tensor(rng, {m, k}), b = random_tensor(rng, {n, k});
    auto r = random_tensor(rng, {m, n}, false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(matmul_transposed(a, b), r)); }),
                     std::vector{a, b}};
  };
  cases["transpose"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 1, 8)});
    auto r = random_tensor(rng, {a.shape()[1], a.shape()[0]}, false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(transpose(a), r)); }), std::vector{a}};
  };
  cases["add_broadcast"] = [](Rng& rng) {
    const auto m = random_extent(rng, 1, 8), n = random_extent(rng, 1, 8);
    auto a = random_tensor(rng, {m, n}), b = random_tensor(rng, {n});
    auto r = random_tensor(rng, {m, n}, false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(add(a, b), r)); }), std::vector{a, b}};
  };
  cases["sub"] = [](Rng& rng) {
    const auto m = random_extent(rng, 1, 8), n = random_extent(rng, 1, 8);
    auto a = random_tensor(rng, {m, n}), b = random_tensor(rng, {m, n});
    auto r = random_tensor(rng, {m, n}, false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(sub(a, b), r)); }), std::vector{a, b}};
  };
  cases["mul_scalar_broadcast"] = [](Rng& rng) {
    const auto m = random_extent(rng, 1, 8), n = random_extent(rng, 1, 8);
    auto a = random_tensor(rng, {m, n}), s = random_tensor(rng, {1});
    auto r = random_tensor(rng, {m, n}, false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(mul(a, s), r)); }), std::vector{a, s}};
  };
  cases["scale"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 1, 8)});
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(scale(a, -2.5), r)); }), std::vector{a}};
  };
  cases["reciprocal"] = [](Rng& rng) {
    std::vector<double> v(random_extent(rng, 1, 8));
    for (auto& x : v) x = 0.5 + uniform01(rng);
    auto a = Tensor::from_data({v.size()}, v, true);
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(reciprocal(a), r)); }), std::vector{a}};
  };
  cases["exp"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 1, 8)});
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(ilm::exp(a), r)); }), std::vector{a}};
  };
  cases["log"] = [](Rng& rng) {
    std::vector<double> v(random_extent(rng, 1, 8));
    for (auto& x : v) x = 0.5 + 2.0 * uniform01(rng);
    auto a = Tensor::from_data({v.size()}, v, true);
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(ilm::log(a), r)); }), std::vector{a}};
  };
  cases["gelu"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 1, 8)}, true, 2.0);
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(gelu(a), r)); }), std::vector{a}};
  };
  cases["sigmoid"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 1, 8)}, true, 2.0);
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(sigmoid(a), r)); }), std::vector{a}};
  };
  cases["mean"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 1, 8)});
    return std::pair{std::function<Tensor()>([=] { return scale(mean(mul(a, a)), 3.0); }), std::vector{a}};
  };
  cases["softmax"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 1, 8)});
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(softmax(a), r)); }), std::vector{a}};
  };
  cases["log_softmax"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 1, 8)});
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(log_softmax(a), r)); }), std::vector{a}};
  };
  cases["masked_softmax"] = [](Rng& rng) {
    const auto m = random_extent(rng, 1, 8), n = random_extent(rng, 1, 8);
    auto a = random_tensor(rng, {m, n});
    std::vector<std::uint8_t> allowed(m * n);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) allowed[i * n + j] = uniform01(rng) < 0.6;
      allowed[i * n + uniform_index(rng, n)] = 1;
    }
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(masked_softmax(a, allowed), r)); }),
                     std::vector{a}};
  };
  cases["layer_norm"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 2, 8)});
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(layer_norm(a), r)); }), std::vector{a}};
  };
  cases["l2_normalize_rows"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8), random_extent(rng, 1, 8)});
    auto r = random_tensor(rng, a.shape(), false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(l2_normalize_rows(a), r)); }),
                     std::vector{a}};
  };
  cases["cosine_similarity"] = [](Rng& rng) {
    const auto d = random_extent(rng, 2, 8);
    auto u = random_tensor(rng, {d}), v = random_tensor(rng, {d});
    return std::pair{std::function<Tensor()>([=] { return scale(cosine_similarity(u, v), 1.7); }),
                     std::vector{u, v}};
  };
  cases["gather_rows"] = [](Rng& rng) {
    const auto vocab = random_extent(rng, 1, 8), d = random_extent(rng, 1, 8);
    auto t = random_tensor(rng, {vocab, d});
    std::vector<int> ids(random_extent(rng, 1, 8));
    for (auto& id : ids) id = static_cast<int>(uniform_index(rng, vocab));
    auto r = random_tensor(rng, {ids.size(), d}, false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(gather_rows(t, ids), r)); }), std::vector{t}};
  };
  cases["slice_rows_cols"] = [](Rng& rng) {
    const auto m = random_extent(rng, 2, 8), n = random_extent(rng, 2, 8);
    auto a = random_tensor(rng, {m, n});
    const auto r0 = uniform_index(rng, m), c0 = uniform_index(rng, n);
    auto r = random_tensor(rng, {m - r0, n - c0}, false);
    return std::pair{
        std::function<Tensor()>([=] { return sum(mul(slice_cols(slice_rows(a, r0, m - r0), c0, n - c0), r)); }),
        std::vector{a}};
  };
  cases["concat"] = [](Rng& rng) {
    const auto m = random_extent(rng, 1, 4), n = random_extent(rng, 1, 4);
    auto a = random_tensor(rng, {m, n}), b = random_tensor(rng, {m, n}), c = random_tensor(rng, {m, n});
    auto r = random_tensor(rng, {2 * m, 2 * n}, false);
    return std::pair{std::function<Tensor()>([=] {
                       std::vector<Tensor> top{a, b}, bottom{c, a};
                       std::vector<Tensor> rows{concat_cols(top), concat_cols(bottom)};
                       return sum(mul(concat_rows(rows), r));
                     }),
                     std::vector{a, b, c}};
  };
  cases["reshape"] = [](Rng& rng) {
    const auto m = random_extent(rng, 1, 8), n = random_extent(rng, 1, 8);
    auto a = random_tensor(rng, {m, n});
    auto r = random_tensor(rng, {n, m}, false);
    return std::pair{std::function<Tensor()>([=] { return sum(mul(reshape(a, {n, m}), r)); }), std::vector{a}};
  };
  cases["softmax_cross_entropy"] = [](Rng& rng) {
    const auto m = random_extent(rng, 1, 8), n = random_extent(rng, 1, 8);
    auto a = random_tensor(rng, {m, n});
    std::vector<int> targets(m);
    std::vector<double> weights(m);
    for (std::size_t i = 0; i < m; ++i) {
      targets[i] = static_cast<int>(uniform_index(rng, n));
      weights[i] = uniform01(rng) < 0.7 ? 1.0 : 0.0;
    }
    weights[0] = 1.0;
    return std::pair{std::function<Tensor()>([=] { return softmax_cross_entropy(a, targets, weights); }),
                     std::vector{a}};
  };
  cases["bce_with_logits"] = [](Rng& rng) {
    auto a = random_tensor(rng, {random_extent(rng, 1, 8)}, true, 2.0);
    std::vector<double> labels(a.size());
    for (auto& l : labels) l = uniform01(rng) < 0.5 ? 0.0 : 1.0;
    return std::pair{std::function<Tensor()>([=] { return bce_with_logits(a, labels); }), std::vector{a}};
  };
  return cases;
}

}  // namespace ilm::testing
