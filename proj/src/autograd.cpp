#include "histodiff/autograd.hpp"

#include <cmath>
#include <stdexcept>

#include "histodiff/kernels.hpp"

namespace histodiff::ag {

void Tape::backward(Var loss) {
    if (loss->val.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + loss->val.shape_str());
    loss->ensure_grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = *it;
        if (n.requires_grad && n.backward_fn && n.has_grad()) n.backward_fn(n);
    }
}

static void accumulate(Var p, const Tensor& g) {
    if (!p->requires_grad) return;
    Tensor& pg = p->ensure_grad();
    for (size_t i = 0; i < pg.size(); ++i) pg[i] += g[i];
}

Var add(Tape& t, Var a, Var b) {
    check_same_shape(a->val, b->val, "add");
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out[i] += b->val[i];
    return t.make(std::move(out), [a, b](Node& n) {
        accumulate(a, n.grad);
        accumulate(b, n.grad);
    }, {a, b});
}

Var sub(Tape& t, Var a, Var b) {
    check_same_shape(a->val, b->val, "sub");
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out[i] -= b->val[i];
    return t.make(std::move(out), [a, b](Node& n) {
        accumulate(a, n.grad);
        if (b->requires_grad) {
            Tensor& bg = b->ensure_grad();
            for (size_t i = 0; i < bg.size(); ++i) bg[i] -= n.grad[i];
        }
    }, {a, b});
}

Var mul(Tape& t, Var a, Var b) {
    check_same_shape(a->val, b->val, "mul");
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= b->val[i];
    return t.make(std::move(out), [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& ag_ = a->ensure_grad();
            for (size_t i = 0; i < ag_.size(); ++i) ag_[i] += n.grad[i] * b->val[i];
        }
        if (b->requires_grad) {
            Tensor& bg = b->ensure_grad();
            for (size_t i = 0; i < bg.size(); ++i) bg[i] += n.grad[i] * a->val[i];
        }
    }, {a, b});
}

Var scale(Tape& t, Var a, double s) {
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return t.make(std::move(out), [a, s](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
        }
    }, {a});
}

Var add_scalar(Tape& t, Var a, double s) {
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out[i] += s;
    return t.make(std::move(out), [a](Node& n) { accumulate(a, n.grad); }, {a});
}

Var square(Tape& t, Var a) {
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= out[i];
    return t.make(std::move(out), [a](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * a->val[i] * n.grad[i];
        }
    }, {a});
}

Var abs_op(Tape& t, Var a) {
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(out[i]);
    return t.make(std::move(out), [a](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i)
                g[i] += (a->val[i] >= 0.0 ? 1.0 : -1.0) * n.grad[i];
        }
    }, {a});
}

Var exp_op(Tape& t, Var a) {
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    return t.make(std::move(out), [a](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.val[i] * n.grad[i];
        }
    }, {a});
}

Var silu(Tape& t, Var a) {
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-out[i]));
        out[i] *= s;
    }
    return t.make(std::move(out), [a](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) {
                const double x = a->val[i];
                const double s = 1.0 / (1.0 + std::exp(-x));
                g[i] += n.grad[i] * (s + x * s * (1.0 - s));
            }
        }
    }, {a});
}

Var tanh_op(Tape& t, Var a) {
    Tensor out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    return t.make(std::move(out), [a](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i)
                g[i] += n.grad[i] * (1.0 - n.val[i] * n.val[i]);
        }
    }, {a});
}

Var sum(Tape& t, Var a) {
    double acc = 0.0;
    for (size_t i = 0; i < a->val.size(); ++i) acc += a->val[i];
    return t.make(Tensor::scalar(acc), [a](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
        }
    }, {a});
}

Var mean(Tape& t, Var a) {
    const double inv = 1.0 / static_cast<double>(a->val.size());
    double acc = 0.0;
    for (size_t i = 0; i < a->val.size(); ++i) acc += a->val[i];
    return t.make(Tensor::scalar(acc * inv), [a, inv](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * inv;
        }
    }, {a});
}

Var pick(Tape& t, Var a, size_t index) {
    if (index >= a->val.size()) throw std::invalid_argument("pick: index out of range");
    return t.make(Tensor::scalar(a->val[index]), [a, index](Node& n) {
        if (a->requires_grad) a->ensure_grad()[index] += n.grad[0];
    }, {a});
}

Var matmul(Tape& t, Var a, Var b, bool trans_a, bool trans_b) {
    Tensor out = kernels::matmul(a->val, b->val, trans_a, trans_b);
    return t.make(std::move(out), [a, b, trans_a, trans_b](Node& n) {
        if (a->requires_grad) {
            Tensor da = trans_a
                ? (trans_b ? kernels::matmul(b->val, n.grad, true, true)
                           : kernels::matmul(b->val, n.grad, false, true))
                : (trans_b ? kernels::matmul(n.grad, b->val, false, false)
                           : kernels::matmul(n.grad, b->val, false, true));
            accumulate(a, da);
        }
        if (b->requires_grad) {
            Tensor db = trans_b
                ? (trans_a ? kernels::matmul(n.grad, a->val, true, true)
                           : kernels::matmul(n.grad, a->val, true, false))
                : (trans_a ? kernels::matmul(a->val, n.grad, false, false)
                           : kernels::matmul(a->val, n.grad, true, false));
            accumulate(b, db);
        }
    }, {a, b});
}

Var add_rowvec(Tape& t, Var a, Var v) {
    if (a->val.ndim() != 2 || v->val.ndim() != 1 || a->val.dim(1) != v->val.dim(0))
        throw std::invalid_argument("add_rowvec: need [n,d] and [d]");
    const int n_rows = a->val.dim(0), d = a->val.dim(1);
    Tensor out = a->val;
    for (int i = 0; i < n_rows; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += v->val[static_cast<size_t>(j)];
    return t.make(std::move(out), [a, v, n_rows, d](Node& n) {
        accumulate(a, n.grad);
        if (v->requires_grad) {
            Tensor& vg = v->ensure_grad();
            for (int i = 0; i < n_rows; ++i)
                for (int j = 0; j < d; ++j) vg[static_cast<size_t>(j)] += n.grad[static_cast<size_t>(i) * d + j];
        }
    }, {a, v});
}

Var softmax_rows(Tape& t, Var a) {
    if (a->val.ndim() != 2) throw std::invalid_argument("softmax_rows: need [n,d]");
    const int rows = a->val.dim(0), d = a->val.dim(1);
    Tensor out = a->val;
    for (int i = 0; i < rows; ++i) {
        double* row = out.data() + static_cast<size_t>(i) * d;
        double mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < d; ++j) { row[j] = std::exp(row[j] - mx); z += row[j]; }
        for (int j = 0; j < d; ++j) row[j] /= z;
    }
    return t.make(std::move(out), [a, rows, d](Node& n) {
        if (!a->requires_grad) return;
        Tensor& g = a->ensure_grad();
        for (int i = 0; i < rows; ++i) {
            const double* s = n.val.data() + static_cast<size_t>(i) * d;
            const double* dy = n.grad.data() + static_cast<size_t>(i) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += dy[j] * s[j];
            for (int j = 0; j < d; ++j) g[static_cast<size_t>(i) * d + j] += s[j] * (dy[j] - dot);
        }
    }, {a});
}

Var transpose(Tape& t, Var a) {
    if (a->val.ndim() != 2) throw std::invalid_argument("transpose: need [m,n]");
    const int m = a->val.dim(0), n_cols = a->val.dim(1);
    Tensor out({n_cols, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n_cols; ++j)
            out[static_cast<size_t>(j) * m + i] = a->val[static_cast<size_t>(i) * n_cols + j];
    return t.make(std::move(out), [a, m, n_cols](Node& n) {
        if (!a->requires_grad) return;
        Tensor& g = a->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n_cols; ++j)
                g[static_cast<size_t>(i) * n_cols + j] += n.grad[static_cast<size_t>(j) * m + i];
    }, {a});
}

Var log_softmax(Tape& t, Var a) {
    if (a->val.ndim() != 1) throw std::invalid_argument("log_softmax: need [d] vector");
    const int d = a->val.dim(0);
    Tensor out = a->val;
    double mx = out[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, out[static_cast<size_t>(j)]);
    double z = 0.0;
    for (int j = 0; j < d; ++j) z += std::exp(out[static_cast<size_t>(j)] - mx);
    const double lz = mx + std::log(z);
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] -= lz;
    return t.make(std::move(out), [a, d](Node& n) {
        if (!a->requires_grad) return;
        Tensor& g = a->ensure_grad();
        double gsum = 0.0;
        for (int j = 0; j < d; ++j) gsum += n.grad[static_cast<size_t>(j)];
        for (int j = 0; j < d; ++j)
            g[static_cast<size_t>(j)] += n.grad[static_cast<size_t>(j)] - std::exp(n.val[static_cast<size_t>(j)]) * gsum;
    }, {a});
}

Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad) {
    Tensor out = kernels::conv2d_forward(x->val, w->val, b ? b->val : Tensor(), stride, pad);
    return t.make(std::move(out), [x, w, b, stride, pad](Node& n) {
        if (x->requires_grad) {
            Tensor dx = kernels::conv2d_backward_input(n.grad, w->val, x->val.shape(), stride, pad);
            accumulate(x, dx);
        }
        if (w->requires_grad || (b && b->requires_grad)) {
            Tensor dw = Tensor::zeros_like(w->val);
            Tensor db = b ? Tensor::zeros_like(b->val) : Tensor();
            kernels::conv2d_backward_weight(n.grad, x->val, stride, pad, dw, db);
            if (w->requires_grad) accumulate(w, dw);
            if (b && b->requires_grad) accumulate(b, db);
        }
    }, b ? std::initializer_list<Var>{x, w, b} : std::initializer_list<Var>{x, w});
}

Var add_channel_bias(Tape& t, Var x, Var bias) {
    if (x->val.ndim() != 3 || bias->val.ndim() != 1 || x->val.dim(0) != bias->val.dim(0))
        throw std::invalid_argument("add_channel_bias: need CHW and [C]");
    const int c = x->val.dim(0), hw = x->val.dim(1) * x->val.dim(2);
    Tensor out = x->val;
    for (int ic = 0; ic < c; ++ic)
        for (int i = 0; i < hw; ++i) out[static_cast<size_t>(ic) * hw + i] += bias->val[static_cast<size_t>(ic)];
    return t.make(std::move(out), [x, bias, c, hw](Node& n) {
        accumulate(x, n.grad);
        if (bias->requires_grad) {
            Tensor& bg = bias->ensure_grad();
            for (int ic = 0; ic < c; ++ic) {
                double acc = 0.0;
                for (int i = 0; i < hw; ++i) acc += n.grad[static_cast<size_t>(ic) * hw + i];
                bg[static_cast<size_t>(ic)] += acc;
            }
        }
    }, {x, bias});
}

Var upsample_nearest2(Tape& t, Var x) {
    if (x->val.ndim() != 3) throw std::invalid_argument("upsample_nearest2: need CHW");
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    Tensor out({c, h * 2, w * 2});
    for (int ic = 0; ic < c; ++ic)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out.at(ic, y, xx) = x->val.at(ic, y / 2, xx / 2);
    return t.make(std::move(out), [x, c, h, w](Node& n) {
        if (!x->requires_grad) return;
        Tensor& g = x->ensure_grad();
        for (int ic = 0; ic < c; ++ic)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    g[(static_cast<size_t>(ic) * h + y / 2) * w + xx / 2] += n.grad[(static_cast<size_t>(ic) * 2 * h + y) * 2 * w + xx];
    }, {x});
}

Var concat_channels(Tape& t, Var a, Var b) {
    if (a->val.ndim() != 3 || b->val.ndim() != 3 ||
        a->val.dim(1) != b->val.dim(1) || a->val.dim(2) != b->val.dim(2))
        throw std::invalid_argument("concat_channels: spatial dims must match");
    const int ca = a->val.dim(0), cb = b->val.dim(0);
    const size_t plane = static_cast<size_t>(a->val.dim(1)) * a->val.dim(2);
    Tensor out({ca + cb, a->val.dim(1), a->val.dim(2)});
    std::copy(a->val.data(), a->val.data() + ca * plane, out.data());
    std::copy(b->val.data(), b->val.data() + cb * plane, out.data() + ca * plane);
    return t.make(std::move(out), [a, b, ca, cb, plane](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < ca * plane; ++i) g[i] += n.grad[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (size_t i = 0; i < cb * plane; ++i) g[i] += n.grad[ca * plane + i];
        }
    }, {a, b});
}

Var slice_channels(Tape& t, Var a, int c0, int c1) {
    if (a->val.ndim() != 3 || c0 < 0 || c1 <= c0 || c1 > a->val.dim(0))
        throw std::invalid_argument("slice_channels: bad channel range");
    const size_t plane = static_cast<size_t>(a->val.dim(1)) * a->val.dim(2);
    Tensor out({c1 - c0, a->val.dim(1), a->val.dim(2)});
    std::copy(a->val.data() + c0 * plane, a->val.data() + c1 * plane, out.data());
    return t.make(std::move(out), [a, c0, plane](Node& n) {
        if (!a->requires_grad) return;
        Tensor& g = a->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) g[c0 * plane + i] += n.grad[i];
    }, {a});
}

Var group_norm(Tape& t, Var x, Var gamma, Var beta, int groups, double eps) {
    if (x->val.ndim() != 3) throw std::invalid_argument("group_norm: need CHW");
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    const int cpg = c / groups;
    const size_t m = static_cast<size_t>(cpg) * h * w;  // elements per group
    const size_t plane = static_cast<size_t>(h) * w;

    Tensor xhat({c, h, w});
    std::vector<double> inv_std(static_cast<size_t>(groups));
    for (int gi = 0; gi < groups; ++gi) {
        const double* xs = x->val.data() + static_cast<size_t>(gi) * cpg * plane;
        double mu = 0.0;
        for (size_t i = 0; i < m; ++i) mu += xs[i];
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (size_t i = 0; i < m; ++i) { const double d = xs[i] - mu; var += d * d; }
        var /= static_cast<double>(m);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(gi)] = is;
        double* xh = xhat.data() + static_cast<size_t>(gi) * cpg * plane;
        for (size_t i = 0; i < m; ++i) xh[i] = (xs[i] - mu) * is;
    }
    Tensor out({c, h, w});
    for (int ic = 0; ic < c; ++ic)
        for (size_t i = 0; i < plane; ++i)
            out[static_cast<size_t>(ic) * plane + i] =
                gamma->val[static_cast<size_t>(ic)] * xhat[static_cast<size_t>(ic) * plane + i] + beta->val[static_cast<size_t>(ic)];

    return t.make(std::move(out),
        [x, gamma, beta, groups, cpg, c, plane, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
        if (gamma->requires_grad) {
            Tensor& gg = gamma->ensure_grad();
            for (int ic = 0; ic < c; ++ic) {
                double acc = 0.0;
                for (size_t i = 0; i < plane; ++i)
                    acc += n.grad[static_cast<size_t>(ic) * plane + i] * xhat[static_cast<size_t>(ic) * plane + i];
                gg[static_cast<size_t>(ic)] += acc;
            }
        }
        if (beta->requires_grad) {
            Tensor& bg = beta->ensure_grad();
            for (int ic = 0; ic < c; ++ic) {
                double acc = 0.0;
                for (size_t i = 0; i < plane; ++i) acc += n.grad[static_cast<size_t>(ic) * plane + i];
                bg[static_cast<size_t>(ic)] += acc;
            }
        }
        if (!x->requires_grad) return;
        Tensor& xg = x->ensure_grad();
        for (int gi = 0; gi < groups; ++gi) {
            const size_t base = static_cast<size_t>(gi) * cpg * plane;
            // dxhat = dy * gamma_c, then the usual normalization backward
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int jc = 0; jc < cpg; ++jc) {
                const int ic = gi * cpg + jc;
                const double gm = gamma->val[static_cast<size_t>(ic)];
                for (size_t i = 0; i < plane; ++i) {
                    const size_t idx = static_cast<size_t>(ic) * plane + i;
                    const double dxh = n.grad[idx] * gm;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat[idx];
                }
            }
            const double inv_m = 1.0 / static_cast<double>(m);
            const double is = inv_std[static_cast<size_t>(gi)];
            for (int jc = 0; jc < cpg; ++jc) {
                const int ic = gi * cpg + jc;
                const double gm = gamma->val[static_cast<size_t>(ic)];
                for (size_t i = 0; i < plane; ++i) {
                    const size_t idx = static_cast<size_t>(ic) * plane + i;
                    const double dxh = n.grad[idx] * gm;
                    xg[idx] += is * (dxh - inv_m * sum_dxhat - xhat[idx] * inv_m * sum_dxhat_xhat);
                }
            }
            (void)base;
        }
    }, {x, gamma, beta});
}

Var reshape(Tape& t, Var a, std::vector<int> shape) {
    if (Tensor::compute_size(shape) != a->val.size())
        throw std::invalid_argument("reshape: size mismatch");
    Tensor out(shape, std::vector<double>(a->val.data(), a->val.data() + a->val.size()));
    return t.make(std::move(out), [a](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    }, {a});
}

}  // namespace histodiff::ag
