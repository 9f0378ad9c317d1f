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

#ifndef MCSH_QUANT_HPP
#define MCSH_QUANT_HPP

#include <variant>
#include <vector>

#include "mcsh/moe.hpp"
#include "mcsh/tensor.hpp"

namespace mcsh {

// Linear quantizer parameters for one matrix: a (scale, zero) pair per group
// of group_size consecutive output columns. Dequantized value: s * (code - z).
struct QuantParams {
  int bits = 4;        // 2, 3 or 4
  int group_size = 32; // columns per group; last group may be ragged
  std::vector<double> scales;
  std::vector<uint8_t> zeros;
};

// Bit-packed linear-quantized d×m matrix. Codes are packed row-major into a
// contiguous little-endian bit stream (least-significant bits first within
// each byte), so 2-bit stores 4 codes/byte, 4-bit stores 2 codes/byte and
// 3-bit runs unpadded across byte boundaries.
struct PackedMatrix {
  int bits = 4;
  int d = 0;  // input dim (rows)
  int m = 0;  // output dim (columns)
  QuantParams params;
  std::vector<uint8_t> payload;

  int64_t elements() const { return static_cast<int64_t>(d) * m; }
};

enum class BinaryScaleMode {
  kChannel,  // alpha per output channel: mean |W[:,c]|
  kMatrix,   // one matrixwide alpha: l1(W) / (d*m), replicated per channel
};

// Sign-quantized matrix: B-tilde = (sign(W)+1)/2 packed one bit per element
// (row-major, LSB first) plus per-output-channel scales.
struct BinarizedMatrix {
  int d = 0;
  int m = 0;
  BinaryScaleMode mode = BinaryScaleMode::kChannel;
  std::vector<double> alpha;  // size m
  std::vector<uint8_t> payload;

  int64_t elements() const { return static_cast<int64_t>(d) * m; }
};

// Running H = sum 2*x*x^T over calibration activations feeding a matrix.
class HessianAccumulator {
 public:
  explicit HessianAccumulator(int dim);
  int dim() const { return dim_; }
  int64_t samples() const { return samples_; }
  void add(const Tensor& x) { add_weighted(x, 1.0); }
  // Adds weight*2*x*x^T and counts round(weight) samples; used to fold
  // repeated identical activations in one update.
  void add_weighted(const Tensor& x, double weight);
  const Tensor& matrix() const { return h_; }

 private:
  int dim_;
  int64_t samples_ = 0;
  Tensor h_;
};

// ---- bit packing ----

std::vector<uint8_t> pack_codes(const std::vector<uint32_t>& codes, int bits);
std::vector<uint32_t> unpack_codes(const std::vector<uint8_t>& payload,
                                   int bits, int64_t count);

// ---- quantizers ----

struct QuantOptions {
  int group_size = 32;
  BinaryScaleMode binary_mode = BinaryScaleMode::kChannel;
  double hessian_damp = 0.01;  // fraction of mean(diag H)
};

// Round-to-nearest onto the per-group uniform grid. The grid always covers
// zero so that the integer zero-point stays inside the code range.
PackedMatrix rtn_quantize(const Tensor& w, int bits, int group_size);

BinarizedMatrix binarize(const Tensor& w,
                         BinaryScaleMode mode = BinaryScaleMode::kChannel);

// Column grids come from the original weights (identical to rtn_quantize);
// rows are then quantized one at a time and each row's rounding error is
// redistributed to the not-yet-quantized rows through the upper Cholesky
// factor of (H + damp*I)^-1. With H proportional to the identity no error
// moves anywhere and the result equals rtn_quantize bit for bit.
PackedMatrix gptq_quantize(const Tensor& w, int bits,
                           const HessianAccumulator& h,
                           const QuantOptions& opts = {});

// Same error propagation with the per-channel {-alpha, +alpha} grid.
BinarizedMatrix gptq_binarize(const Tensor& w, const HessianAccumulator& h,
                              const QuantOptions& opts = {});

Tensor dequantize(const PackedMatrix& p);
Tensor dequantize(const BinarizedMatrix& b);

// ---- instrumented matmuls ----

struct OpCounter {
  int64_t mults = 0;
  int64_t adds = 0;
};

// x (n×d) against a binarized matrix: per output channel accumulate the
// signed input sum and apply one multiplication by alpha, m mults and
// (d-1)*m adds per input row.
Tensor binary_matmul(const Tensor& x, const BinarizedMatrix& mat,
                     OpCounter* counter = nullptr);

// Unpack, dequantize per the linear grid, then dense matmul; d*m mults per
// input row. Bit-exact against matmul on the dequantized dense matrix.
Tensor dequant_matmul(const Tensor& x, const PackedMatrix& mat,
                      OpCounter* counter = nullptr);

Tensor dense_matmul_counted(const Tensor& x, const Tensor& w,
                            OpCounter* counter);

// ---- expert-level quantization ----

struct QuantMatrix {
  std::variant<PackedMatrix, BinarizedMatrix> packed;
  Tensor dense;  // dequantized form used by the simulation forward

  int bits() const;
  int64_t elements() const;
  int64_t payload_bytes() const;
  int64_t scale_bytes() const;
  int64_t zero_bytes() const;
  int64_t stored_bytes() const {
    return payload_bytes() + scale_bytes() + zero_bytes();
  }
};

QuantMatrix quantize_matrix_rtn(const Tensor& w, int bits, int group_size);

struct QuantizedExpert {
  int bits = 0;
  QuantMatrix gate, up, down;
  ExpertWeights dense() const { return {gate.dense, up.dense, down.dense}; }
  int64_t stored_bytes() const {
    return gate.stored_bytes() + up.stored_bytes() + down.stored_bytes();
  }
};

// 1-bit goes through binarization with GPTQ compensation, 2/3-bit through the
// linear GPTQ path. w_gate/w_up share the layer-input Hessian, w_down uses
// the FFN-hidden Hessian.
QuantizedExpert quantize_expert(const ExpertWeights& e, int bits,
                                const HessianAccumulator& h_input,
                                const HessianAccumulator& h_hidden,
                                const QuantOptions& opts = {});

}  // namespace mcsh

#endif  // MCSH_QUANT_HPP
