#pragma once

#include "histodiff/tensor.hpp"

// Compute kernels for the hot inner loops (convolution, matmul). Each kernel
// has a serial reference implementation and an OpenMP variant; the two are
// bitwise-identical because the per-element accumulation order is the same.
// The active variant is a process-global switch so tests and the benchmark
// tool can compare them directly.

namespace histodiff::kernels {

enum class ExecMode { Serial, Parallel };

void set_exec_mode(ExecMode m);
ExecMode exec_mode();

// in: [Cin,H,W], weight: [Cout,Cin,K,K], bias: [Cout] (may be empty), zero padding.
Tensor conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias,
                      int stride, int pad);

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const std::vector<int>& in_shape, int stride, int pad);

void conv2d_backward_weight(const Tensor& grad_out, const Tensor& in,
                            int stride, int pad, Tensor& grad_weight, Tensor& grad_bias);

// C = op(A) * op(B); A is [m,k] after optional transpose, B is [k,n].
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

}  // namespace histodiff::kernels
