#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "histodiff/kernels.hpp"
#include "histodiff/rng.hpp"

using namespace histodiff;
using kernels::ExecMode;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed) {
    Rng rng(seed);
    return rng.normal_tensor(std::move(shape));
}

}  // namespace

TEST_CASE("conv2d serial and parallel variants are bitwise identical") {
    for (int stride : {1, 2}) {
        for (int pad : {0, 1}) {
            Tensor in = random_tensor({5, 12, 12}, 1);
            Tensor w = random_tensor({7, 5, 3, 3}, 2);
            Tensor b = random_tensor({7}, 3);

            kernels::set_exec_mode(ExecMode::Serial);
            Tensor out_s = kernels::conv2d_forward(in, w, b, stride, pad);
            kernels::set_exec_mode(ExecMode::Parallel);
            Tensor out_p = kernels::conv2d_forward(in, w, b, stride, pad);

            REQUIRE(out_s.shape() == out_p.shape());
            for (size_t i = 0; i < out_s.size(); ++i) CHECK(out_s[i] == out_p[i]);

            Tensor go = random_tensor(out_s.shape(), 4);
            kernels::set_exec_mode(ExecMode::Serial);
            Tensor gi_s = kernels::conv2d_backward_input(go, w, in.shape(), stride, pad);
            Tensor gw_s = Tensor::zeros_like(w), gb_s = Tensor::zeros_like(b);
            kernels::conv2d_backward_weight(go, in, stride, pad, gw_s, gb_s);

            kernels::set_exec_mode(ExecMode::Parallel);
            Tensor gi_p = kernels::conv2d_backward_input(go, w, in.shape(), stride, pad);
            Tensor gw_p = Tensor::zeros_like(w), gb_p = Tensor::zeros_like(b);
            kernels::conv2d_backward_weight(go, in, stride, pad, gw_p, gb_p);

            for (size_t i = 0; i < gi_s.size(); ++i) CHECK(gi_s[i] == gi_p[i]);
            for (size_t i = 0; i < gw_s.size(); ++i) CHECK(gw_s[i] == gw_p[i]);
            for (size_t i = 0; i < gb_s.size(); ++i) CHECK(gb_s[i] == gb_p[i]);
        }
    }
}

TEST_CASE("conv2d matches direct dense computation") {
    // 1x1 input channel, identity-like checks
    Tensor in({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor w({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});  // center tap
    Tensor b({1}, {0.0});
    Tensor out = kernels::conv2d_forward(in, w, b, 1, 1);
    REQUIRE(out.shape() == std::vector<int>{1, 3, 3});
    for (size_t i = 0; i < 9; ++i) CHECK(out[i] == doctest::Approx(in[i]));
}

TEST_CASE("conv2d gradient matches finite differences") {
    Tensor in = random_tensor({2, 5, 5}, 10);
    Tensor w = random_tensor({3, 2, 3, 3}, 11);
    Tensor b = random_tensor({3}, 12);

    // loss = sum(out); grad_out = ones
    Tensor out = kernels::conv2d_forward(in, w, b, 2, 1);
    Tensor go = Tensor::zeros_like(out);
    go.fill(1.0);

    Tensor gi = kernels::conv2d_backward_input(go, w, in.shape(), 2, 1);
    Tensor gw = Tensor::zeros_like(w), gb = Tensor::zeros_like(b);
    kernels::conv2d_backward_weight(go, in, 2, 1, gw, gb);

    auto loss = [&](const Tensor& x, const Tensor& ww, const Tensor& bb) {
        Tensor o = kernels::conv2d_forward(x, ww, bb, 2, 1);
        double s = 0;
        for (size_t i = 0; i < o.size(); ++i) s += o[i];
        return s;
    };
    const double h = 1e-6;
    for (size_t i = 0; i < in.size(); i += 7) {
        Tensor ip = in, im = in;
        ip[i] += h; im[i] -= h;
        const double fd = (loss(ip, w, b) - loss(im, w, b)) / (2 * h);
        CHECK(gi[i] == doctest::Approx(fd).epsilon(1e-5));
    }
    for (size_t i = 0; i < w.size(); i += 5) {
        Tensor wp = w, wm = w;
        wp[i] += h; wm[i] -= h;
        const double fd = (loss(in, wp, b) - loss(in, wm, b)) / (2 * h);
        CHECK(gw[i] == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("matmul transpose flags agree across exec modes and with brute force") {
    Tensor a = random_tensor({4, 6}, 20);
    Tensor b = random_tensor({6, 5}, 21);

    kernels::set_exec_mode(ExecMode::Serial);
    Tensor c_s = kernels::matmul(a, b);
    kernels::set_exec_mode(ExecMode::Parallel);
    Tensor c_p = kernels::matmul(a, b);
    for (size_t i = 0; i < c_s.size(); ++i) CHECK(c_s[i] == c_p[i]);

    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) {
            double acc = 0;
            for (int k = 0; k < 6; ++k) acc += a[i * 6 + k] * b[k * 5 + j];
            CHECK(c_s[i * 5 + j] == doctest::Approx(acc));
        }

    // A^T path: (A^T)^T A^T == A A^T
    Tensor at = kernels::matmul(a, a, false, true);   // [4,4]
    Tensor at2 = kernels::matmul(a, a, false, true);
    for (size_t i = 0; i < at.size(); ++i) CHECK(at[i] == at2[i]);
    Tensor t1 = kernels::matmul(b, b, true, false);   // B^T B, [5,5]
    REQUIRE(t1.shape() == std::vector<int>{5, 5});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            double acc = 0;
            for (int k = 0; k < 6; ++k) acc += b[k * 5 + i] * b[k * 5 + j];
            CHECK(t1[i * 5 + j] == doctest::Approx(acc));
        }
}

TEST_CASE("conv2d rejects bad shapes") {
    Tensor in = random_tensor({2, 4, 4}, 30);
    Tensor w = random_tensor({3, 5, 3, 3}, 31);  // wrong cin
    Tensor b = random_tensor({3}, 32);
    CHECK_THROWS_AS(kernels::conv2d_forward(in, w, b, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(kernels::matmul(in, w), std::invalid_argument);
}
