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

#include "mcsh/quant.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace mcsh {

HessianAccumulator::HessianAccumulator(int dim) : dim_(dim), h_({dim, dim}) {
  if (dim < 1) throw ShapeError("hessian dim must be >= 1");
}

void HessianAccumulator::add_weighted(const Tensor& x, double weight) {
  if (x.numel() != dim_) throw ShapeError("hessian: activation dim mismatch");
  const double* px = x.data().data();
  double* ph = h_.data().data();
  const double f = 2.0 * weight;
  for (int i = 0; i < dim_; ++i) {
    const double xi = f * px[i];
    double* row = ph + static_cast<size_t>(i) * dim_;
    for (int j = 0; j < dim_; ++j) row[j] += xi * px[j];
  }
  samples_ += static_cast<int64_t>(std::llround(weight));
}

// ---- bit packing ----

std::vector<uint8_t> pack_codes(const std::vector<uint32_t>& codes, int bits) {
  if (bits < 1 || bits > 8) throw ShapeError("pack_codes: bits out of range");
  const int64_t nbits = static_cast<int64_t>(codes.size()) * bits;
  std::vector<uint8_t> out(static_cast<size_t>((nbits + 7) / 8), 0);
  int64_t pos = 0;
  for (uint32_t c : codes) {
    for (int b = 0; b < bits; ++b, ++pos) {
      if ((c >> b) & 1u)
        out[static_cast<size_t>(pos >> 3)] |= static_cast<uint8_t>(1u << (pos & 7));
    }
  }
  return out;
}

std::vector<uint32_t> unpack_codes(const std::vector<uint8_t>& payload,
                                   int bits, int64_t count) {
  if (bits < 1 || bits > 8) throw ShapeError("unpack_codes: bits out of range");
  const int64_t need = (count * bits + 7) / 8;
  if (static_cast<int64_t>(payload.size()) != need)
    throw ConfigError("unpack_codes: payload length does not match count");
  std::vector<uint32_t> out(static_cast<size_t>(count), 0);
  int64_t pos = 0;
  for (int64_t i = 0; i < count; ++i) {
    uint32_t c = 0;
    for (int b = 0; b < bits; ++b, ++pos) {
      if (payload[static_cast<size_t>(pos >> 3)] & (1u << (pos & 7)))
        c |= 1u << b;
    }
    out[static_cast<size_t>(i)] = c;
  }
  return out;
}

// ---- linear quantizer ----

namespace {

struct GroupRange {
  int begin, end;  // column range
};

GroupRange group_cols(int g, int group_size, int m) {
  const int b = g * group_size;
  return {b, std::min(m, b + group_size)};
}

int num_groups(int m, int group_size) {
  return (m + group_size - 1) / group_size;
}

// Grid parameters for one group. A constant group is encoded exactly:
// s=|v| with the sign absorbed into (code, zero), and the all-zero group
// keeps the documented s=1, z=0 form.
void group_params(const Tensor& w, const GroupRange& r, int bits, double* s_out,
                  int* z_out, std::optional<uint32_t>* const_code) {
  const int d = w.rows();
  double mn = w.at(0, r.begin), mx = mn;
  for (int i = 0; i < d; ++i)
    for (int c = r.begin; c < r.end; ++c) {
      const double v = w.at(i, c);
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
  const double levels = static_cast<double>((1 << bits) - 1);
  if (mx == mn) {
    const double v = mx;
    if (v == 0.0) {
      *s_out = 1.0;
      *z_out = 0;
      *const_code = 0u;
    } else if (v > 0.0) {
      *s_out = v;
      *z_out = 0;
      *const_code = 1u;
    } else {
      *s_out = -v;
      *z_out = 1;
      *const_code = 0u;
    }
    return;
  }
  // Anchor the grid at zero so z = -round(min/s) stays inside the code range.
  const double mn0 = std::min(mn, 0.0);
  const double mx0 = std::max(mx, 0.0);
  const double s = (mx0 - mn0) / levels;
  int z = static_cast<int>(-std::llround(mn0 / s));
  z = std::clamp(z, 0, (1 << bits) - 1);
  *s_out = s;
  *z_out = z;
  *const_code = std::nullopt;
}

QuantParams make_linear_params(const Tensor& w, int bits, int group_size,
                               std::vector<std::optional<uint32_t>>* const_codes) {
  if (bits < 2 || bits > 4) throw ConfigError("linear quantizer: bits must be 2..4");
  if (group_size < 1) throw ConfigError("group_size must be >= 1");
  check_finite(w, "quantize input");
  const int m = w.cols();
  QuantParams p;
  p.bits = bits;
  p.group_size = group_size;
  const int ng = num_groups(m, group_size);
  p.scales.resize(static_cast<size_t>(ng));
  p.zeros.resize(static_cast<size_t>(ng));
  const_codes->resize(static_cast<size_t>(ng));
  for (int g = 0; g < ng; ++g) {
    double s;
    int z;
    group_params(w, group_cols(g, group_size, m), bits, &s, &z,
                 &(*const_codes)[static_cast<size_t>(g)]);
    p.scales[static_cast<size_t>(g)] = s;
    p.zeros[static_cast<size_t>(g)] = static_cast<uint8_t>(z);
  }
  return p;
}

uint32_t quantize_value(double v, double s, int z, int bits,
                        const std::optional<uint32_t>& const_code) {
  if (const_code) return *const_code;
  const long long q = std::llround(v / s) + z;
  return static_cast<uint32_t>(std::clamp<long long>(q, 0, (1 << bits) - 1));
}

}  // namespace

PackedMatrix rtn_quantize(const Tensor& w, int bits, int group_size) {
  if (w.rank() != 2) throw ShapeError("rtn_quantize: expected rank-2 weight");
  const int d = w.rows(), m = w.cols();
  std::vector<std::optional<uint32_t>> const_codes;
  PackedMatrix out;
  out.bits = bits;
  out.d = d;
  out.m = m;
  out.params = make_linear_params(w, bits, group_size, &const_codes);

  std::vector<uint32_t> codes(static_cast<size_t>(w.numel()));
  for (int i = 0; i < d; ++i)
    for (int c = 0; c < m; ++c) {
      const int g = c / group_size;
      codes[static_cast<size_t>(i) * m + c] = quantize_value(
          w.at(i, c), out.params.scales[static_cast<size_t>(g)],
          out.params.zeros[static_cast<size_t>(g)], bits,
          const_codes[static_cast<size_t>(g)]);
    }
  out.payload = pack_codes(codes, bits);
  return out;
}

BinarizedMatrix binarize(const Tensor& w, BinaryScaleMode mode) {
  if (w.rank() != 2) throw ShapeError("binarize: expected rank-2 weight");
  check_finite(w, "binarize input");
  const int d = w.rows(), m = w.cols();
  BinarizedMatrix out;
  out.d = d;
  out.m = m;
  out.mode = mode;
  out.alpha.assign(static_cast<size_t>(m), 0.0);
  if (mode == BinaryScaleMode::kChannel) {
    for (int c = 0; c < m; ++c) {
      double a = 0.0;
      for (int i = 0; i < d; ++i) a += std::abs(w.at(i, c));
      out.alpha[static_cast<size_t>(c)] = a / d;
    }
  } else {
    double a = 0.0;
    for (int64_t i = 0; i < w.numel(); ++i) a += std::abs(w[i]);
    std::fill(out.alpha.begin(), out.alpha.end(), a / static_cast<double>(w.numel()));
  }
  std::vector<uint32_t> codes(static_cast<size_t>(w.numel()));
  for (int i = 0; i < d; ++i)
    for (int c = 0; c < m; ++c)
      codes[static_cast<size_t>(i) * m + c] = w.at(i, c) >= 0.0 ? 1u : 0u;
  out.payload = pack_codes(codes, 1);
  return out;
}

// ---- GPTQ compensation ----

namespace {

// Lower Cholesky in place; returns false on a non-positive pivot.
bool cholesky_lower(Tensor& a) {
  const int n = a.rows();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a.at(i, j);
      for (int k = 0; k < j; ++k) s -= a.at(i, k) * a.at(j, k);
      if (i == j) {
        if (s <= 0.0 || !std::isfinite(s)) return false;
        a.at(i, i) = std::sqrt(s);
      } else {
        a.at(i, j) = s / a.at(j, j);
      }
    }
    for (int j = i + 1; j < n; ++j) a.at(i, j) = 0.0;
  }
  return true;
}

// A^-1 from its lower Cholesky factor, one unit vector at a time.
Tensor inverse_from_cholesky(const Tensor& l) {
  const int n = l.rows();
  Tensor inv({n, n});
  std::vector<double> y(static_cast<size_t>(n)), x(static_cast<size_t>(n));
  for (int col = 0; col < n; ++col) {
    for (int i = 0; i < n; ++i) {
      double s = (i == col) ? 1.0 : 0.0;
      for (int j = 0; j < i; ++j) s -= l.at(i, j) * y[static_cast<size_t>(j)];
      y[static_cast<size_t>(i)] = s / l.at(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
      double s = y[static_cast<size_t>(i)];
      for (int j = i + 1; j < n; ++j) s -= l.at(j, i) * x[static_cast<size_t>(j)];
      x[static_cast<size_t>(i)] = s / l.at(i, i);
    }
    for (int i = 0; i < n; ++i) inv.at(i, col) = x[static_cast<size_t>(i)];
  }
  return inv;
}

// Upper factor U with A = U^T U; returns false on failure.
bool cholesky_upper(const Tensor& a, Tensor* u_out) {
  const int n = a.rows();
  Tensor u({n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      double s = a.at(i, j);
      for (int k = 0; k < i; ++k) s -= u.at(k, i) * u.at(k, j);
      if (i == j) {
        if (s <= 0.0 || !std::isfinite(s)) return false;
        u.at(i, i) = std::sqrt(s);
      } else {
        u.at(i, j) = s / u.at(i, i);
      }
    }
  }
  *u_out = std::move(u);
  return true;
}

// Upper Cholesky factor of (H + damp*I)^-1, the error-propagation operator.
// Dampening starts at damp_frac*mean(diag H) and is escalated x10 up to three
// times before giving up.
Tensor compensation_factor(const HessianAccumulator& h, double damp_frac) {
  const int n = h.dim();
  double diag_mean = 0.0;
  for (int i = 0; i < n; ++i) diag_mean += h.matrix().at(i, i);
  diag_mean /= n;
  double damp = damp_frac * diag_mean;
  if (damp <= 0.0) damp = 1.0;  // no calibration signal: identity-dominated
  for (int attempt = 0; attempt <= 3; ++attempt) {
    Tensor a = h.matrix();
    for (int i = 0; i < n; ++i) a.at(i, i) += damp;
    Tensor chol = a;
    if (cholesky_lower(chol)) {
      Tensor inv = inverse_from_cholesky(chol);
      Tensor u;
      if (cholesky_upper(inv, &u)) return u;
    }
    damp *= 10.0;
  }
  throw NumericError("gptq: hessian not positive definite after damping");
}

}  // namespace

PackedMatrix gptq_quantize(const Tensor& w, int bits,
                           const HessianAccumulator& h,
                           const QuantOptions& opts) {
  if (w.rank() != 2) throw ShapeError("gptq_quantize: expected rank-2 weight");
  if (h.dim() != w.rows()) throw ShapeError("gptq: hessian dim must match weight rows");
  const int d = w.rows(), m = w.cols();
  std::vector<std::optional<uint32_t>> const_codes;
  PackedMatrix out;
  out.bits = bits;
  out.d = d;
  out.m = m;
  out.params = make_linear_params(w, bits, opts.group_size, &const_codes);

  const Tensor u = compensation_factor(h, opts.hessian_damp);
  Tensor work = w;
  std::vector<uint32_t> codes(static_cast<size_t>(w.numel()));
  std::vector<double> err(static_cast<size_t>(m));
  for (int r = 0; r < d; ++r) {
    const double inv_diag = 1.0 / u.at(r, r);
    double* row = work.data().data() + static_cast<size_t>(r) * m;
    for (int c = 0; c < m; ++c) {
      const int g = c / opts.group_size;
      const double s = out.params.scales[static_cast<size_t>(g)];
      const int z = out.params.zeros[static_cast<size_t>(g)];
      const uint32_t code = quantize_value(row[c], s, z, bits,
                                           const_codes[static_cast<size_t>(g)]);
      codes[static_cast<size_t>(r) * m + c] = code;
      const double q = s * (static_cast<double>(code) - z);
      err[static_cast<size_t>(c)] = (row[c] - q) * inv_diag;
    }
    for (int r2 = r + 1; r2 < d; ++r2) {
      const double f = u.at(r, r2);
      if (f == 0.0) continue;
      double* row2 = work.data().data() + static_cast<size_t>(r2) * m;
      for (int c = 0; c < m; ++c) row2[c] -= f * err[static_cast<size_t>(c)];
    }
  }
  out.payload = pack_codes(codes, bits);
  return out;
}

BinarizedMatrix gptq_binarize(const Tensor& w, const HessianAccumulator& h,
                              const QuantOptions& opts) {
  if (w.rank() != 2) throw ShapeError("gptq_binarize: expected rank-2 weight");
  if (h.dim() != w.rows()) throw ShapeError("gptq: hessian dim must match weight rows");
  const int d = w.rows(), m = w.cols();
  BinarizedMatrix out = binarize(w, opts.binary_mode);  // alpha from original W

  const Tensor u = compensation_factor(h, opts.hessian_damp);
  Tensor work = w;
  std::vector<uint32_t> codes(static_cast<size_t>(w.numel()));
  std::vector<double> err(static_cast<size_t>(m));
  for (int r = 0; r < d; ++r) {
    const double inv_diag = 1.0 / u.at(r, r);
    double* row = work.data().data() + static_cast<size_t>(r) * m;
    for (int c = 0; c < m; ++c) {
      const bool pos = row[c] >= 0.0;
      codes[static_cast<size_t>(r) * m + c] = pos ? 1u : 0u;
      const double q = pos ? out.alpha[static_cast<size_t>(c)]
                           : -out.alpha[static_cast<size_t>(c)];
      err[static_cast<size_t>(c)] = (row[c] - q) * inv_diag;
    }
    for (int r2 = r + 1; r2 < d; ++r2) {
      const double f = u.at(r, r2);
      if (f == 0.0) continue;
      double* row2 = work.data().data() + static_cast<size_t>(r2) * m;
      for (int c = 0; c < m; ++c) row2[c] -= f * err[static_cast<size_t>(c)];
    }
  }
  out.payload = pack_codes(codes, 1);
  return out;
}

Tensor dequantize(const PackedMatrix& p) {
  const std::vector<uint32_t> codes = unpack_codes(p.payload, p.bits, p.elements());
  Tensor w({p.d, p.m});
  for (int i = 0; i < p.d; ++i)
    for (int c = 0; c < p.m; ++c) {
      const int g = c / p.params.group_size;
      const double s = p.params.scales[static_cast<size_t>(g)];
      const int z = p.params.zeros[static_cast<size_t>(g)];
      w.at(i, c) = s * (static_cast<double>(codes[static_cast<size_t>(i) * p.m + c]) - z);
    }
  return w;
}

Tensor dequantize(const BinarizedMatrix& b) {
  const std::vector<uint32_t> codes = unpack_codes(b.payload, 1, b.elements());
  Tensor w({b.d, b.m});
  for (int i = 0; i < b.d; ++i)
    for (int c = 0; c < b.m; ++c)
      w.at(i, c) = codes[static_cast<size_t>(i) * b.m + c]
                       ? b.alpha[static_cast<size_t>(c)]
                       : -b.alpha[static_cast<size_t>(c)];
  return w;
}

// ---- instrumented matmuls ----

Tensor binary_matmul(const Tensor& x, const BinarizedMatrix& mat,
                     OpCounter* counter) {
  const int n = x.rows(), d = x.cols();
  if (d != mat.d) throw ShapeError("binary_matmul: dim mismatch");
  const std::vector<uint32_t> bits = unpack_codes(mat.payload, 1, mat.elements());
  Tensor out = (x.rank() == 1) ? Tensor({mat.m}) : Tensor({n, mat.m});
  for (int i = 0; i < n; ++i) {
    const double* px = x.data().data() + static_cast<size_t>(i) * d;
    double* po = out.data().data() + static_cast<size_t>(i) * mat.m;
    for (int c = 0; c < mat.m; ++c) {
      double acc = bits[static_cast<size_t>(c)] ? px[0] : -px[0];
      for (int r = 1; r < d; ++r) {
        const double v = px[r];
        acc += bits[static_cast<size_t>(r) * mat.m + c] ? v : -v;
        if (counter) ++counter->adds;
      }
      po[c] = mat.alpha[static_cast<size_t>(c)] * acc;
      if (counter) ++counter->mults;
    }
  }
  check_finite(out, "binary_matmul");
  return out;
}

Tensor dense_matmul_counted(const Tensor& x, const Tensor& w, OpCounter* counter) {
  Tensor out = kern::matmul(x, w);
  if (counter) {
    const int64_t n = x.rows(), d = x.cols(), m = w.cols();
    counter->mults += n * d * m;
    counter->adds += n * (d - 1) * m;
  }
  return out;
}

Tensor dequant_matmul(const Tensor& x, const PackedMatrix& mat, OpCounter* counter) {
  if (x.cols() != mat.d) throw ShapeError("dequant_matmul: dim mismatch");
  return dense_matmul_counted(x, dequantize(mat), counter);
}

// ---- expert quantization ----

int QuantMatrix::bits() const {
  return std::holds_alternative<BinarizedMatrix>(packed)
             ? 1
             : std::get<PackedMatrix>(packed).bits;
}

int64_t QuantMatrix::elements() const {
  return std::holds_alternative<BinarizedMatrix>(packed)
             ? std::get<BinarizedMatrix>(packed).elements()
             : std::get<PackedMatrix>(packed).elements();
}

int64_t QuantMatrix::payload_bytes() const {
  return std::holds_alternative<BinarizedMatrix>(packed)
             ? static_cast<int64_t>(std::get<BinarizedMatrix>(packed).payload.size())
             : static_cast<int64_t>(std::get<PackedMatrix>(packed).payload.size());
}

int64_t QuantMatrix::scale_bytes() const {
  return std::holds_alternative<BinarizedMatrix>(packed)
             ? static_cast<int64_t>(std::get<BinarizedMatrix>(packed).alpha.size()) * 8
             : static_cast<int64_t>(std::get<PackedMatrix>(packed).params.scales.size()) * 8;
}

int64_t QuantMatrix::zero_bytes() const {
  return std::holds_alternative<BinarizedMatrix>(packed)
             ? 0
             : static_cast<int64_t>(std::get<PackedMatrix>(packed).params.zeros.size());
}

QuantMatrix quantize_matrix_rtn(const Tensor& w, int bits, int group_size) {
  QuantMatrix q;
  PackedMatrix p = rtn_quantize(w, bits, group_size);
  q.dense = dequantize(p);
  q.packed = std::move(p);
  return q;
}

QuantizedExpert quantize_expert(const ExpertWeights& e, int bits,
                                const HessianAccumulator& h_input,
                                const HessianAccumulator& h_hidden,
                                const QuantOptions& opts) {
  if (bits < 1 || bits > 3)
    throw ConfigError("expert bits must be in {1,2,3}");
  auto one = [&](const Tensor& w, const HessianAccumulator& h) {
    QuantMatrix q;
    if (bits == 1) {
      BinarizedMatrix b = gptq_binarize(w, h, opts);
      q.dense = dequantize(b);
      q.packed = std::move(b);
    } else {
      PackedMatrix p = gptq_quantize(w, bits, h, opts);
      q.dense = dequantize(p);
      q.packed = std::move(p);
    }
    return q;
  };
  QuantizedExpert out;
  out.bits = bits;
  out.gate = one(e.w_gate, h_input);
  out.up = one(e.w_up, h_input);
  out.down = one(e.w_down, h_hidden);
  return out;
}

}  // namespace mcsh
