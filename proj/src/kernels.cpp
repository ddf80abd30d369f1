#include "histodiff/kernels.hpp"

#include <stdexcept>

namespace histodiff::kernels {

namespace {
ExecMode g_mode = ExecMode::Parallel;
}

void set_exec_mode(ExecMode m) { g_mode = m; }
ExecMode exec_mode() { return g_mode; }

static void check_conv_args(const Tensor& in, const Tensor& weight, const Tensor& bias) {
    if (in.ndim() != 3) throw std::invalid_argument("conv2d: input must be CHW");
    if (weight.ndim() != 4) throw std::invalid_argument("conv2d: weight must be [Cout,Cin,K,K]");
    if (weight.dim(1) != in.dim(0))
        throw std::invalid_argument("conv2d: channel mismatch, input " + in.shape_str() +
                                    " weight " + weight.shape_str());
    if (bias.size() != 0 && static_cast<int>(bias.size()) != weight.dim(0))
        throw std::invalid_argument("conv2d: bias size mismatch");
}

Tensor conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias,
                      int stride, int pad) {
    check_conv_args(in, weight, bias);
    const int cin = in.dim(0), h = in.dim(1), w = in.dim(2);
    const int cout = weight.dim(0), k = weight.dim(2);
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (w + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: output would be empty");

    Tensor out({cout, ho, wo});
    const double* ind = in.data();
    const double* wd = weight.data();
    const bool has_bias = bias.size() != 0;

    const bool par = g_mode == ExecMode::Parallel;
#pragma omp parallel for if (par) schedule(static)
    for (int oc = 0; oc < cout; ++oc) {
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                double acc = has_bias ? bias[static_cast<size_t>(oc)] : 0.0;
                for (int ic = 0; ic < cin; ++ic) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= w) continue;
                            acc += ind[(static_cast<size_t>(ic) * h + iy) * w + ix] *
                                   wd[((static_cast<size_t>(oc) * cin + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out.at(oc, oy, ox) = acc;
            }
        }
    }
    return out;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const std::vector<int>& in_shape, int stride, int pad) {
    const int cin = in_shape[0], h = in_shape[1], w = in_shape[2];
    const int cout = weight.dim(0), k = weight.dim(2);
    const int ho = grad_out.dim(1), wo = grad_out.dim(2);

    Tensor grad_in(in_shape);
    const double* god = grad_out.data();
    const double* wd = weight.data();

    // Gather form: each input element sums its contributions, so parallel
    // writes are disjoint and match the serial order exactly.
    const bool par = g_mode == ExecMode::Parallel;
#pragma omp parallel for if (par) schedule(static)
    for (int ic = 0; ic < cin; ++ic) {
        for (int iy = 0; iy < h; ++iy) {
            for (int ix = 0; ix < w; ++ix) {
                double acc = 0.0;
                for (int oc = 0; oc < cout; ++oc) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int oy_num = iy + pad - ky;
                        if (oy_num < 0 || oy_num % stride != 0) continue;
                        const int oy = oy_num / stride;
                        if (oy >= ho) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ox_num = ix + pad - kx;
                            if (ox_num < 0 || ox_num % stride != 0) continue;
                            const int ox = ox_num / stride;
                            if (ox >= wo) continue;
                            acc += god[(static_cast<size_t>(oc) * ho + oy) * wo + ox] *
                                   wd[((static_cast<size_t>(oc) * cin + ic) * k + ky) * k + kx];
                        }
                    }
                }
                grad_in.at(ic, iy, ix) = acc;
            }
        }
    }
    return grad_in;
}

void conv2d_backward_weight(const Tensor& grad_out, const Tensor& in,
                            int stride, int pad, Tensor& grad_weight, Tensor& grad_bias) {
    const int cin = in.dim(0), h = in.dim(1), w = in.dim(2);
    const int cout = grad_out.dim(0), ho = grad_out.dim(1), wo = grad_out.dim(2);
    const int k = grad_weight.dim(2);
    const double* god = grad_out.data();
    const double* ind = in.data();
    double* gwd = grad_weight.data();

    const bool par = g_mode == ExecMode::Parallel;
#pragma omp parallel for if (par) schedule(static)
    for (int oc = 0; oc < cout; ++oc) {
        double bias_acc = 0.0;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox)
                bias_acc += god[(static_cast<size_t>(oc) * ho + oy) * wo + ox];
        if (grad_bias.size() != 0) grad_bias[static_cast<size_t>(oc)] += bias_acc;

        for (int ic = 0; ic < cin; ++ic) {
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    double acc = 0.0;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= w) continue;
                            acc += god[(static_cast<size_t>(oc) * ho + oy) * wo + ox] *
                                   ind[(static_cast<size_t>(ic) * h + iy) * w + ix];
                        }
                    }
                    gwd[((static_cast<size_t>(oc) * cin + ic) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw std::invalid_argument("matmul: 2-d tensors required");
    const int m = trans_a ? a.dim(1) : a.dim(0);
    const int ka = trans_a ? a.dim(0) : a.dim(1);
    const int kb = trans_b ? b.dim(1) : b.dim(0);
    const int n = trans_b ? b.dim(0) : b.dim(1);
    if (ka != kb)
        throw std::invalid_argument("matmul: inner dimension mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());

    Tensor c({m, n});
    const double* ad = a.data();
    const double* bd = b.data();
    double* cd = c.data();
    const int lda = a.dim(1), ldb = b.dim(1);

    const bool par = g_mode == ExecMode::Parallel;
#pragma omp parallel for if (par) schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < ka; ++p) {
                const double av = trans_a ? ad[static_cast<size_t>(p) * lda + i]
                                          : ad[static_cast<size_t>(i) * lda + p];
                const double bv = trans_b ? bd[static_cast<size_t>(j) * ldb + p]
                                          : bd[static_cast<size_t>(p) * ldb + j];
                acc += av * bv;
            }
            cd[static_cast<size_t>(i) * n + j] = acc;
        }
    }
    return c;
}

}  // namespace histodiff::kernels
