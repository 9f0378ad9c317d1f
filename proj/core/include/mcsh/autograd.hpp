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

#ifndef MCSH_AUTOGRAD_HPP
#define MCSH_AUTOGRAD_HPP

#include <functional>
#include <vector>

#include "mcsh/tensor.hpp"

namespace mcsh {

class Tape;

// Handle to a node on a tape. Plain value type; the tape owns all storage.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff over Tensor values. A tape records one forward
// computation; node creation order is a topological order, so backward()
// visits nodes exactly once in reverse. Tapes are single-threaded and meant
// to live for one training step.
//
// Forward values come from the kern:: kernels, so a tape forward is
// bit-identical to the plain inference path built from the same kernels.
class Tape {
 public:
  Var leaf(Tensor value);      // trainable: participates in backward()
  Var constant(Tensor value);  // frozen: no gradient is ever accumulated

  const Tensor& value(Var v) const { return node(v.id).value; }
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return node(v.id).requires_grad; }
  size_t size() const { return nodes_.size(); }

  // Accumulates dLoss/dLeaf into every grad-requiring node reachable from
  // `loss`, which must be scalar. Untouched leaves keep a zero gradient.
  void backward(Var loss);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);              // elementwise
  Var scale(Var a, double c);         // constant factor
  Var scale_by(Var a, Var s);         // s scalar node: out = s * a
  Var reciprocal(Var s);              // scalar 1/s
  Var silu(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var softmax(Var a, int axis);
  Var log_softmax(Var a, int axis);
  Var logsumexp(Var a);               // scalar, over all elements
  Var sum(Var a);                     // scalar
  Var mean(Var a);                    // scalar
  Var l1_norm(Var a);                 // scalar; subgradient 0 at 0
  Var kl_div(Var p, Var q);           // sum p*(log p - log q); p,q elementwise probs
  Var concat(Var a, Var b);           // flat
  Var take_rows(Var a, std::vector<int> idx);
  Var take_elems(Var a, std::vector<int> idx);
  Var rms_norm(Var a);
  // Forward value is the one-hot argmax of `soft`; gradient passes through
  // to `soft` unchanged (straight-through estimator).
  Var hard_onehot_st(Var soft);

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<int> parents;
    // Reads nodes_[self].grad, accumulates into parent grads.
    std::function<void(Tape&, int self)> backprop;
  };

  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  Var push(Tensor value, std::vector<int> parents,
           std::function<void(Tape&, int)> backprop);
  Tensor& grad_slot(int id);  // allocates zeros on first touch

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// Adam with bias correction; shared by teacher pre-training and router
// training. One instance per parameter set.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor*>& params,
            const std::vector<const Tensor*>& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace mcsh

#endif  // MCSH_AUTOGRAD_HPP
