// Copyright 2026 The mcsh Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MCSH_TESTS_TEST_UTIL_HPP
#define MCSH_TESTS_TEST_UTIL_HPP

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mcsh/autograd.hpp"
#include "mcsh/quant.hpp"
#include "mcsh/tensor.hpp"

namespace mcsh::testing {

// Central finite-difference gradient oracle. Rebuilds the graph from raw leaf
// values, so the builder must be a pure function of those values.
struct GradCheckResult {
  int64_t total = 0;
  int64_t passed = 0;
  double max_rel = 0.0;

  double pass_fraction() const {
    return total == 0 ? 1.0 : static_cast<double>(passed) / static_cast<double>(total);
  }
  bool ok(double min_fraction = 0.99) const {
    return pass_fraction() >= min_fraction;
  }
};

using GraphBuilder =
    std::function<Var(Tape&, const std::vector<Var>&)>;

inline GradCheckResult grad_check(std::vector<Tensor> leaves,
                                  const GraphBuilder& build, double h = 1e-5,
                                  double tol = 1e-4) {
  auto eval = [&](const std::vector<Tensor>& values) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(values.size());
    for (const auto& v : values) vars.push_back(tape.leaf(v));
    Var loss = build(tape, vars);
    return tape.value(loss)[0];
  };

  Tape tape;
  std::vector<Var> vars;
  for (const auto& v : leaves) vars.push_back(tape.leaf(v));
  Var loss = build(tape, vars);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  for (Var v : vars) analytic.push_back(tape.grad(v));

  GradCheckResult res;
  for (size_t li = 0; li < leaves.size(); ++li) {
    for (int64_t i = 0; i < leaves[li].numel(); ++i) {
      std::vector<Tensor> work = leaves;
      const double orig = work[li][i];
      work[li][i] = orig + h;
      const double fp = eval(work);
      work[li][i] = orig - h;
      const double fm = eval(work);
      work[li][i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[li][i];
      const double rel =
          std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      res.max_rel = std::max(res.max_rel, rel);
      ++res.total;
      if (rel < tol) ++res.passed;
    }
  }
  return res;
}

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng,
                            double stddev = 1.0) {
  return Tensor::randn(std::move(shape), stddev, rng);
}

// Correlated activation family: x = z*A + noise with a fixed mixing matrix
// and anisotropic z, the regime where GPTQ's cross-row compensation has
// signal. Train and held-out sets must come from the same family.
struct CorrelatedFamily {
  Tensor mix;

  CorrelatedFamily(int dim, std::mt19937_64& rng)
      : mix(Tensor::randn({dim, dim}, 1.0 / std::sqrt(dim), rng)) {}

  std::vector<Tensor> sample(int count, std::mt19937_64& rng) const {
    const int dim = mix.dim(0);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<Tensor> xs;
    xs.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
      Tensor z({1, dim});
      for (int j = 0; j < dim; ++j) z[j] = n(rng) * (j == 0 ? 1.0 : 0.3);
      Tensor x = kern::matmul(z, mix);
      for (int j = 0; j < dim; ++j) x[j] += 0.02 * n(rng);
      xs.push_back(std::move(x));
    }
    return xs;
  }
};

inline HessianAccumulator hessian_of(const std::vector<Tensor>& xs, int dim) {
  HessianAccumulator h(dim);
  for (const auto& x : xs) h.add(x);
  return h;
}

// ||W X - Q X||_F over columns of activations.
inline double reconstruction_error(const Tensor& w, const Tensor& q,
                                   const std::vector<Tensor>& xs) {
  double acc = 0.0;
  for (const auto& x : xs) {
    Tensor a = kern::matmul(x, w);
    Tensor b = kern::matmul(x, q);
    for (int64_t i = 0; i < a.numel(); ++i) {
      const double d = a[i] - b[i];
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

}  // namespace mcsh::testing

#endif  // MCSH_TESTS_TEST_UTIL_HPP
