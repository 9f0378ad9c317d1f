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

#include "mcsh/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <thread>

namespace mcsh {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn,
                  int max_threads) {
  if (n <= 0) return;
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  int workers = max_threads > 0 ? std::min(max_threads, hw) : hw;
  workers = static_cast<int>(std::min<int64_t>(workers, n));
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  auto body = [&] {
    for (;;) {
      int64_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

namespace {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 1) throw ShapeError("tensor dims must be >= 1");
    n *= d;
  }
  if (shape.empty()) throw ShapeError("tensor rank must be >= 1");
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
    throw ShapeError("tensor data length does not match shape");
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void check_finite(const Tensor& t, const char* where) {
  if (!t.all_finite())
    throw NumericError(std::string("non-finite value produced by ") + where);
}

namespace kern {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() > 2 || b.rank() > 2) throw ShapeError("matmul: rank > 2");
  const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) throw ShapeError("matmul: inner dimensions disagree");
  Tensor out = (a.rank() == 1 && b.rank() == 2)
                   ? Tensor({n})
                   : Tensor({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = out.data().data();
  for (int i = 0; i < m; ++i) {
    const double* arow = pa + static_cast<size_t>(i) * k;
    double* crow = pc + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = pb + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  check_finite(out, "matmul");
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  check_finite(out, "add");
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("sub: shape mismatch");
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  check_finite(out, "sub");
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("mul: shape mismatch");
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  check_finite(out, "mul");
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (auto& v : out.data()) v *= c;
  check_finite(out, "scale");
  return out;
}

Tensor silu(const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.data()) v = v / (1.0 + std::exp(-v));
  check_finite(out, "silu");
  return out;
}

Tensor exp(const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.data()) v = std::exp(v);
  check_finite(out, "exp");
  return out;
}

Tensor log(const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.data()) v = std::log(v);
  check_finite(out, "log");
  return out;
}

namespace {

// Applies fn to each slice along `axis` of a rank-1/2 tensor. The slice is
// exposed as (base pointer, count, stride).
template <typename Fn>
void for_each_lane(Tensor& t, int axis, Fn fn) {
  if (t.rank() == 1) {
    if (axis != 0) throw ShapeError("axis out of range for rank-1 tensor");
    fn(t.data().data(), t.dim(0), 1);
    return;
  }
  if (t.rank() != 2 || (axis != 0 && axis != 1))
    throw ShapeError("softmax: expected rank-1/2 tensor with valid axis");
  const int r = t.dim(0), c = t.dim(1);
  if (axis == 1) {
    for (int i = 0; i < r; ++i) fn(t.data().data() + static_cast<size_t>(i) * c, c, 1);
  } else {
    for (int j = 0; j < c; ++j) fn(t.data().data() + j, r, c);
  }
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  check_finite(a, "softmax input");
  Tensor out = a;
  for_each_lane(out, axis, [](double* p, int n, int stride) {
    double mx = p[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, p[static_cast<size_t>(i) * stride]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      double e = std::exp(p[static_cast<size_t>(i) * stride] - mx);
      p[static_cast<size_t>(i) * stride] = e;
      sum += e;
    }
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i) * stride] /= sum;
  });
  check_finite(out, "softmax");
  return out;
}

Tensor log_softmax(const Tensor& a, int axis) {
  check_finite(a, "log_softmax input");
  Tensor out = a;
  for_each_lane(out, axis, [](double* p, int n, int stride) {
    double mx = p[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, p[static_cast<size_t>(i) * stride]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += std::exp(p[static_cast<size_t>(i) * stride] - mx);
    const double lse = mx + std::log(sum);
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i) * stride] -= lse;
  });
  check_finite(out, "log_softmax");
  return out;
}

double logsumexp(const Tensor& a) {
  check_finite(a, "logsumexp input");
  double mx = a[0];
  for (int64_t i = 1; i < a.numel(); ++i) mx = std::max(mx, a[i]);
  double sum = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) sum += std::exp(a[i] - mx);
  return mx + std::log(sum);
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a[i];
  return s;
}

double mean(const Tensor& a) { return sum(a) / static_cast<double>(a.numel()); }

double l1_norm(const Tensor& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += std::abs(a[i]);
  return s;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  std::vector<double> d;
  d.reserve(static_cast<size_t>(a.numel() + b.numel()));
  d.insert(d.end(), a.data().begin(), a.data().end());
  d.insert(d.end(), b.data().begin(), b.data().end());
  const int n = static_cast<int>(d.size());
  return Tensor({n}, std::move(d));
}

Tensor take_rows(const Tensor& a, const std::vector<int>& idx) {
  if (a.rank() != 2) throw ShapeError("take_rows: expected rank-2 tensor");
  const int c = a.dim(1);
  Tensor out({static_cast<int>(idx.size()), c});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.dim(0)) throw ShapeError("take_rows: index out of range");
    std::copy_n(a.data().data() + static_cast<size_t>(idx[i]) * c, c,
                out.data().data() + i * static_cast<size_t>(c));
  }
  return out;
}

Tensor take_elems(const Tensor& a, const std::vector<int>& idx) {
  Tensor out({static_cast<int>(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.numel()) throw ShapeError("take_elems: index out of range");
    out[static_cast<int64_t>(i)] = a[idx[i]];
  }
  return out;
}

Tensor rms_norm(const Tensor& a) {
  constexpr double kEps = 1e-8;
  Tensor out = a;
  const int r = out.rows(), c = out.cols();
  for (int i = 0; i < r; ++i) {
    double* p = out.data().data() + static_cast<size_t>(i) * c;
    double ms = 0.0;
    for (int j = 0; j < c; ++j) ms += p[j] * p[j];
    ms = ms / c + kEps;
    const double inv = 1.0 / std::sqrt(ms);
    for (int j = 0; j < c; ++j) p[j] *= inv;
  }
  check_finite(out, "rms_norm");
  return out;
}

}  // namespace kern

TopK topk(const Tensor& x, int k) {
  if (x.rank() != 1) throw ShapeError("topk: expected rank-1 tensor");
  const int n = x.dim(0);
  if (k < 1 || k > n) throw ShapeError("topk: k out of range");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    if (x[i] != x[j]) return x[i] > x[j];
    return i < j;
  });
  TopK out;
  out.indices.assign(order.begin(), order.begin() + k);
  out.values.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out.values.push_back(x[out.indices[static_cast<size_t>(i)]]);
  return out;
}

int argmax(const Tensor& x) {
  int best = 0;
  for (int64_t i = 1; i < x.numel(); ++i)
    if (x[i] > x[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace mcsh
