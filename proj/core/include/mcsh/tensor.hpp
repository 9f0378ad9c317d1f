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

#ifndef MCSH_TENSOR_HPP
#define MCSH_TENSOR_HPP

#include <cstdint>
#include <random>
#include <vector>

#include "mcsh/common.hpp"

namespace mcsh {

// Dense row-major float64 tensor. Rank 1 and 2 cover everything the toy
// models need; storage is a flat vector either way.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);  // zero-filled
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor randn(std::vector<int> shape, double stddev, std::mt19937_64& rng);

  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool is_scalar() const { return numel() == 1; }

  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }

  // Row count / column count with rank-1 treated as a single row.
  int rows() const { return rank() == 2 ? shape_[0] : 1; }
  int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool all_finite() const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

// Throws NumericError when t contains NaN/Inf. `where` names the op.
void check_finite(const Tensor& t, const char* where);

// Forward kernels. The autograd tape and the plain inference path call the
// same functions so both produce bit-identical values.
namespace kern {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor silu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);
double logsumexp(const Tensor& a);  // over all elements
double sum(const Tensor& a);
double mean(const Tensor& a);
double l1_norm(const Tensor& a);
Tensor concat(const Tensor& a, const Tensor& b);  // flat
Tensor take_rows(const Tensor& a, const std::vector<int>& idx);
Tensor take_elems(const Tensor& a, const std::vector<int>& idx);
Tensor rms_norm(const Tensor& a);  // per row, eps 1e-8, no learnable gain

}  // namespace kern

struct TopK {
  std::vector<int> indices;    // of the k largest entries
  std::vector<double> values;  // descending
};

// k largest entries of a vector; ties broken toward the lower index.
TopK topk(const Tensor& x, int k);

int argmax(const Tensor& x);  // ties toward lower index

}  // namespace mcsh

#endif  // MCSH_TENSOR_HPP
