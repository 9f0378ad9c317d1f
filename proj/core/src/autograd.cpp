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

#include "mcsh/autograd.hpp"

#include <cassert>
#include <cmath>

namespace mcsh {

Var Tape::push(Tensor value, std::vector<int> parents,
               std::function<void(Tape&, int)> backprop) {
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.backprop = std::move(backprop);
  for (int p : n.parents)
    if (node(p).requires_grad) n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value) {
  check_finite(value, "leaf");
  Var v = push(std::move(value), {}, nullptr);
  node(v.id).requires_grad = true;
  return v;
}

Var Tape::constant(Tensor value) {
  check_finite(value, "constant");
  return push(std::move(value), {}, nullptr);
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v.id);
  if (!n.requires_grad) throw Error("grad(): node does not require gradients");
  if (!ran_backward_) throw Error("grad(): backward() has not run");
  return n.grad;
}

Tensor& Tape::grad_slot(int id) { return node(id).grad; }

void Tape::backward(Var loss) {
  if (!node(loss.id).value.is_scalar())
    throw ShapeError("backward: loss must be scalar");

  // Zero-init gradients for every grad-requiring node so untouched leaves
  // report an all-zero gradient.
  for (auto& n : nodes_)
    if (n.requires_grad) n.grad = Tensor(n.value.shape());

  // Mark ancestors of the loss; everything else keeps its zero gradient.
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<int> stack{loss.id};
  reachable[static_cast<size_t>(loss.id)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int p : node(id).parents) {
      if (!reachable[static_cast<size_t>(p)] && node(p).requires_grad) {
        reachable[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }

  if (node(loss.id).requires_grad) node(loss.id).grad[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (!reachable[static_cast<size_t>(id)] || !n.requires_grad) continue;
    assert(n.parents.empty() || n.backprop);
    if (n.backprop) n.backprop(*this, id);
  }
  ran_backward_ = true;
}

// ---- ops ----

Var Tape::matmul(Var a, Var b) {
  Tensor out = kern::matmul(value(a), value(b));
  const int m = value(a).rows(), k = value(a).cols(), n = value(b).cols();
  return push(std::move(out), {a.id, b.id}, [a, b, m, k, n](Tape& t, int self) {
    const double* g = t.node(self).grad.data().data();
    if (t.node(a.id).requires_grad) {
      const double* pb = t.node(b.id).value.data().data();
      double* da = t.grad_slot(a.id).data().data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const double* brow = pb + static_cast<size_t>(kk) * n;
          const double* grow = g + static_cast<size_t>(i) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          da[static_cast<size_t>(i) * k + kk] += acc;
        }
    }
    if (t.node(b.id).requires_grad) {
      const double* pa = t.node(a.id).value.data().data();
      double* db = t.grad_slot(b.id).data().data();
      for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < m; ++i) {
          const double av = pa[static_cast<size_t>(i) * k + kk];
          const double* grow = g + static_cast<size_t>(i) * n;
          double* brow = db + static_cast<size_t>(kk) * n;
          for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
    }
  });
}

Var Tape::add(Var a, Var b) {
  return push(kern::add(value(a), value(b)), {a.id, b.id},
              [a, b](Tape& t, int self) {
                const Tensor& g = t.node(self).grad;
                if (t.node(a.id).requires_grad) {
                  Tensor& da = t.grad_slot(a.id);
                  for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i];
                }
                if (t.node(b.id).requires_grad) {
                  Tensor& db = t.grad_slot(b.id);
                  for (int64_t i = 0; i < g.numel(); ++i) db[i] += g[i];
                }
              });
}

Var Tape::sub(Var a, Var b) {
  return push(kern::sub(value(a), value(b)), {a.id, b.id},
              [a, b](Tape& t, int self) {
                const Tensor& g = t.node(self).grad;
                if (t.node(a.id).requires_grad) {
                  Tensor& da = t.grad_slot(a.id);
                  for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i];
                }
                if (t.node(b.id).requires_grad) {
                  Tensor& db = t.grad_slot(b.id);
                  for (int64_t i = 0; i < g.numel(); ++i) db[i] -= g[i];
                }
              });
}

Var Tape::mul(Var a, Var b) {
  return push(kern::mul(value(a), value(b)), {a.id, b.id},
              [a, b](Tape& t, int self) {
                const Tensor& g = t.node(self).grad;
                if (t.node(a.id).requires_grad) {
                  const Tensor& vb = t.node(b.id).value;
                  Tensor& da = t.grad_slot(a.id);
                  for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * vb[i];
                }
                if (t.node(b.id).requires_grad) {
                  const Tensor& va = t.node(a.id).value;
                  Tensor& db = t.grad_slot(b.id);
                  for (int64_t i = 0; i < g.numel(); ++i) db[i] += g[i] * va[i];
                }
              });
}

Var Tape::scale(Var a, double c) {
  return push(kern::scale(value(a), c), {a.id}, [a, c](Tape& t, int self) {
    if (!t.node(a.id).requires_grad) return;
    const Tensor& g = t.node(self).grad;
    Tensor& da = t.grad_slot(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) da[i] += c * g[i];
  });
}

Var Tape::scale_by(Var a, Var s) {
  if (!value(s).is_scalar()) throw ShapeError("scale_by: s must be scalar");
  const double sv = value(s)[0];
  return push(kern::scale(value(a), sv), {a.id, s.id},
              [a, s](Tape& t, int self) {
                const Tensor& g = t.node(self).grad;
                const double sv2 = t.node(s.id).value[0];
                if (t.node(a.id).requires_grad) {
                  Tensor& da = t.grad_slot(a.id);
                  for (int64_t i = 0; i < g.numel(); ++i) da[i] += sv2 * g[i];
                }
                if (t.node(s.id).requires_grad) {
                  const Tensor& va = t.node(a.id).value;
                  double acc = 0.0;
                  for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * va[i];
                  t.grad_slot(s.id)[0] += acc;
                }
              });
}

Var Tape::reciprocal(Var s) {
  if (!value(s).is_scalar()) throw ShapeError("reciprocal: expected scalar");
  Tensor out = Tensor::scalar(1.0 / value(s)[0]);
  check_finite(out, "reciprocal");
  return push(std::move(out), {s.id}, [s](Tape& t, int self) {
    if (!t.node(s.id).requires_grad) return;
    const double y = t.node(self).value[0];
    t.grad_slot(s.id)[0] -= t.node(self).grad[0] * y * y;
  });
}

Var Tape::silu(Var a) {
  return push(kern::silu(value(a)), {a.id}, [a](Tape& t, int self) {
    if (!t.node(a.id).requires_grad) return;
    const Tensor& g = t.node(self).grad;
    const Tensor& x = t.node(a.id).value;
    Tensor& da = t.grad_slot(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-x[i]));
      da[i] += g[i] * sig * (1.0 + x[i] * (1.0 - sig));
    }
  });
}

Var Tape::exp(Var a) {
  return push(kern::exp(value(a)), {a.id}, [a](Tape& t, int self) {
    if (!t.node(a.id).requires_grad) return;
    const Tensor& g = t.node(self).grad;
    const Tensor& y = t.node(self).value;
    Tensor& da = t.grad_slot(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * y[i];
  });
}

Var Tape::log(Var a) {
  return push(kern::log(value(a)), {a.id}, [a](Tape& t, int self) {
    if (!t.node(a.id).requires_grad) return;
    const Tensor& g = t.node(self).grad;
    const Tensor& x = t.node(a.id).value;
    Tensor& da = t.grad_slot(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] / x[i];
  });
}

namespace {

// Lane iteration for softmax-family backward passes; mirrors the forward
// kernels' lane layout.
template <typename Fn>
void lanes(const Tensor& shape_like, int axis, Fn fn) {
  if (shape_like.rank() == 1) {
    fn(0, shape_like.dim(0), 1);
    return;
  }
  const int r = shape_like.dim(0), c = shape_like.dim(1);
  if (axis == 1) {
    for (int i = 0; i < r; ++i) fn(static_cast<int64_t>(i) * c, c, 1);
  } else {
    for (int j = 0; j < c; ++j) fn(static_cast<int64_t>(j), r, c);
  }
}

}  // namespace

Var Tape::softmax(Var a, int axis) {
  return push(kern::softmax(value(a), axis), {a.id},
              [a, axis](Tape& t, int self) {
                if (!t.node(a.id).requires_grad) return;
                const Tensor& y = t.node(self).value;
                const Tensor& g = t.node(self).grad;
                Tensor& da = t.grad_slot(a.id);
                lanes(y, axis, [&](int64_t base, int n, int stride) {
                  double dot = 0.0;
                  for (int i = 0; i < n; ++i)
                    dot += g[base + static_cast<int64_t>(i) * stride] *
                           y[base + static_cast<int64_t>(i) * stride];
                  for (int i = 0; i < n; ++i) {
                    const int64_t ix = base + static_cast<int64_t>(i) * stride;
                    da[ix] += y[ix] * (g[ix] - dot);
                  }
                });
              });
}

Var Tape::log_softmax(Var a, int axis) {
  return push(kern::log_softmax(value(a), axis), {a.id},
              [a, axis](Tape& t, int self) {
                if (!t.node(a.id).requires_grad) return;
                const Tensor& y = t.node(self).value;  // log-probs
                const Tensor& g = t.node(self).grad;
                Tensor& da = t.grad_slot(a.id);
                lanes(y, axis, [&](int64_t base, int n, int stride) {
                  double gsum = 0.0;
                  for (int i = 0; i < n; ++i)
                    gsum += g[base + static_cast<int64_t>(i) * stride];
                  for (int i = 0; i < n; ++i) {
                    const int64_t ix = base + static_cast<int64_t>(i) * stride;
                    da[ix] += g[ix] - std::exp(y[ix]) * gsum;
                  }
                });
              });
}

Var Tape::logsumexp(Var a) {
  return push(Tensor::scalar(kern::logsumexp(value(a))), {a.id},
              [a](Tape& t, int self) {
                if (!t.node(a.id).requires_grad) return;
                const double g = t.node(self).grad[0];
                const Tensor& x = t.node(a.id).value;
                const double lse = t.node(self).value[0];
                Tensor& da = t.grad_slot(a.id);
                for (int64_t i = 0; i < x.numel(); ++i)
                  da[i] += g * std::exp(x[i] - lse);
              });
}

Var Tape::sum(Var a) {
  return push(Tensor::scalar(kern::sum(value(a))), {a.id},
              [a](Tape& t, int self) {
                if (!t.node(a.id).requires_grad) return;
                const double g = t.node(self).grad[0];
                Tensor& da = t.grad_slot(a.id);
                for (int64_t i = 0; i < da.numel(); ++i) da[i] += g;
              });
}

Var Tape::mean(Var a) {
  const double inv_n = 1.0 / static_cast<double>(value(a).numel());
  return push(Tensor::scalar(kern::mean(value(a))), {a.id},
              [a, inv_n](Tape& t, int self) {
                if (!t.node(a.id).requires_grad) return;
                const double g = t.node(self).grad[0] * inv_n;
                Tensor& da = t.grad_slot(a.id);
                for (int64_t i = 0; i < da.numel(); ++i) da[i] += g;
              });
}

Var Tape::l1_norm(Var a) {
  return push(Tensor::scalar(kern::l1_norm(value(a))), {a.id},
              [a](Tape& t, int self) {
                if (!t.node(a.id).requires_grad) return;
                const double g = t.node(self).grad[0];
                const Tensor& x = t.node(a.id).value;
                Tensor& da = t.grad_slot(a.id);
                for (int64_t i = 0; i < x.numel(); ++i) {
                  if (x[i] > 0.0) da[i] += g;
                  else if (x[i] < 0.0) da[i] -= g;
                }
              });
}

Var Tape::kl_div(Var p, Var q) {
  const Tensor& vp = value(p);
  const Tensor& vq = value(q);
  if (!vp.same_shape(vq)) throw ShapeError("kl_div: shape mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < vp.numel(); ++i) {
    if (vp[i] > 0.0) acc += vp[i] * (std::log(vp[i]) - std::log(vq[i]));
  }
  Tensor out = Tensor::scalar(acc);
  check_finite(out, "kl_div");
  return push(std::move(out), {p.id, q.id}, [p, q](Tape& t, int self) {
    const double g = t.node(self).grad[0];
    const Tensor& vp2 = t.node(p.id).value;
    const Tensor& vq2 = t.node(q.id).value;
    if (t.node(p.id).requires_grad) {
      Tensor& dp = t.grad_slot(p.id);
      for (int64_t i = 0; i < vp2.numel(); ++i)
        if (vp2[i] > 0.0)
          dp[i] += g * (std::log(vp2[i]) - std::log(vq2[i]) + 1.0);
    }
    if (t.node(q.id).requires_grad) {
      Tensor& dq = t.grad_slot(q.id);
      for (int64_t i = 0; i < vp2.numel(); ++i)
        if (vp2[i] > 0.0) dq[i] -= g * vp2[i] / vq2[i];
    }
  });
}

Var Tape::concat(Var a, Var b) {
  const int64_t na = value(a).numel();
  return push(kern::concat(value(a), value(b)), {a.id, b.id},
              [a, b, na](Tape& t, int self) {
                const Tensor& g = t.node(self).grad;
                if (t.node(a.id).requires_grad) {
                  Tensor& da = t.grad_slot(a.id);
                  for (int64_t i = 0; i < na; ++i) da[i] += g[i];
                }
                if (t.node(b.id).requires_grad) {
                  Tensor& db = t.grad_slot(b.id);
                  for (int64_t i = 0; i < db.numel(); ++i) db[i] += g[na + i];
                }
              });
}

Var Tape::take_rows(Var a, std::vector<int> idx) {
  Tensor out = kern::take_rows(value(a), idx);
  return push(std::move(out), {a.id},
              [a, idx = std::move(idx)](Tape& t, int self) {
                if (!t.node(a.id).requires_grad) return;
                const Tensor& g = t.node(self).grad;
                Tensor& da = t.grad_slot(a.id);
                const int c = g.dim(1);
                for (size_t i = 0; i < idx.size(); ++i)
                  for (int j = 0; j < c; ++j)
                    da[static_cast<int64_t>(idx[i]) * c + j] +=
                        g[static_cast<int64_t>(i) * c + j];
              });
}

Var Tape::take_elems(Var a, std::vector<int> idx) {
  Tensor out = kern::take_elems(value(a), idx);
  return push(std::move(out), {a.id},
              [a, idx = std::move(idx)](Tape& t, int self) {
                if (!t.node(a.id).requires_grad) return;
                const Tensor& g = t.node(self).grad;
                Tensor& da = t.grad_slot(a.id);
                for (size_t i = 0; i < idx.size(); ++i)
                  da[idx[i]] += g[static_cast<int64_t>(i)];
              });
}

Var Tape::rms_norm(Var a) {
  return push(kern::rms_norm(value(a)), {a.id}, [a](Tape& t, int self) {
    if (!t.node(a.id).requires_grad) return;
    constexpr double kEps = 1e-8;
    const Tensor& x = t.node(a.id).value;
    const Tensor& g = t.node(self).grad;
    Tensor& da = t.grad_slot(a.id);
    const int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i) {
      const int64_t base = static_cast<int64_t>(i) * c;
      double ms = 0.0, s = 0.0;
      for (int j = 0; j < c; ++j) ms += x[base + j] * x[base + j];
      ms = ms / c + kEps;
      const double rms = std::sqrt(ms);
      for (int j = 0; j < c; ++j) s += g[base + j] * x[base + j];
      const double coef = s / (static_cast<double>(c) * ms * rms);
      for (int j = 0; j < c; ++j) da[base + j] += g[base + j] / rms - x[base + j] * coef;
    }
  });
}

Var Tape::hard_onehot_st(Var soft) {
  const Tensor& y = value(soft);
  Tensor hard(y.shape());
  hard[argmax(y)] = 1.0;
  return push(std::move(hard), {soft.id}, [soft](Tape& t, int self) {
    if (!t.node(soft.id).requires_grad) return;
    const Tensor& g = t.node(self).grad;
    Tensor& ds = t.grad_slot(soft.id);
    for (int64_t i = 0; i < g.numel(); ++i) ds[i] += g[i];
  });
}

void Adam::step(const std::vector<Tensor*>& params,
                const std::vector<const Tensor*>& grads) {
  if (params.size() != grads.size()) throw Error("adam: params/grads size mismatch");
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    const Tensor& g = *grads[pi];
    Tensor& m = m_[pi];
    Tensor& v = v_[pi];
    for (int64_t i = 0; i < p.numel(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    check_finite(p, "adam step");
  }
}

}  // namespace mcsh
