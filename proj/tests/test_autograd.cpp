#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "histodiff/autograd.hpp"
#include "histodiff/rng.hpp"

using namespace histodiff;
using ag::Tape;
using ag::Var;

namespace {

// Central finite differences against an arbitrary scalar graph builder.
void check_grad(const Tensor& x0, const std::function<Var(Tape&, Var)>& build,
                double rel_tol = 1e-6) {
    Tape tape;
    Var x = tape.leaf(x0, /*requires_grad=*/true);
    Var loss = build(tape, x);
    tape.backward(loss);
    REQUIRE(x->has_grad());

    const double h = 1e-6;
    for (size_t i = 0; i < x0.size(); ++i) {
        Tensor xp = x0, xm = x0;
        xp[i] += h;
        xm[i] -= h;
        Tape tp, tm;
        const double fp = build(tp, tp.leaf(xp))->val[0];
        const double fm = build(tm, tm.leaf(xm))->val[0];
        const double fd = (fp - fm) / (2 * h);
        const double got = x->grad[i];
        const double denom = std::max({std::fabs(fd), std::fabs(got), 1e-8});
        CHECK(std::fabs(got - fd) / denom < rel_tol + 1e-4);
    }
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
    Rng rng(77);
    Tensor x = rng.normal_tensor({3, 2, 2});

    check_grad(x, [](Tape& t, Var v) { return ag::mean(t, ag::square(t, v)); });
    check_grad(x, [](Tape& t, Var v) { return ag::sum(t, ag::silu(t, v)); });
    check_grad(x, [](Tape& t, Var v) { return ag::sum(t, ag::tanh_op(t, v)); });
    check_grad(x, [](Tape& t, Var v) { return ag::sum(t, ag::exp_op(t, ag::scale(t, v, 0.3))); });
    check_grad(x, [](Tape& t, Var v) {
        return ag::mean(t, ag::mul(t, v, ag::add_scalar(t, v, 2.0)));
    });
}

TEST_CASE("matmul and softmax gradients match finite differences") {
    Rng rng(78);
    Tensor a = rng.normal_tensor({3, 4});
    Tensor w0 = rng.normal_tensor({5, 4});

    check_grad(a, [&](Tape& t, Var v) {
        Var w = t.leaf(w0);
        return ag::mean(t, ag::square(t, ag::matmul(t, v, w, false, true)));
    });
    check_grad(w0, [&](Tape& t, Var v) {
        Var x = t.leaf(a);
        return ag::mean(t, ag::square(t, ag::matmul(t, x, v, false, true)));
    });
    check_grad(a, [](Tape& t, Var v) {
        return ag::mean(t, ag::square(t, ag::softmax_rows(t, v)));
    });
    Tensor vec = rng.normal_tensor({6});
    check_grad(vec, [](Tape& t, Var v) {
        return ag::pick(t, ag::log_softmax(t, v), 2);
    });
}

TEST_CASE("conv, norm and spatial op gradients match finite differences") {
    Rng rng(79);
    Tensor x = rng.normal_tensor({2, 4, 4});
    Tensor w0 = rng.normal_tensor({3, 2, 3, 3});
    Tensor b0 = rng.normal_tensor({3});

    check_grad(x, [&](Tape& t, Var v) {
        Var w = t.leaf(w0), b = t.leaf(b0);
        return ag::mean(t, ag::square(t, ag::conv2d(t, v, w, b, 1, 1)));
    });
    check_grad(w0, [&](Tape& t, Var v) {
        Var xx = t.leaf(x), b = t.leaf(b0);
        return ag::mean(t, ag::square(t, ag::conv2d(t, xx, v, b, 2, 1)));
    });
    check_grad(x, [](Tape& t, Var v) {
        return ag::mean(t, ag::square(t, ag::upsample_nearest2(t, v)));
    });

    Tensor gamma0({2}, {1.3, 0.7});
    Tensor beta0({2}, {0.1, -0.2});
    // mean(gn(x)^2) is constant by construction, so weight the elements to
    // break the normalization symmetry before reducing.
    Tensor wts = rng.normal_tensor({2, 4, 4});
    check_grad(x, [&](Tape& t, Var v) {
        Var g = t.leaf(gamma0), b = t.leaf(beta0), ww = t.leaf(wts);
        return ag::mean(t, ag::square(t, ag::mul(t, ww, ag::group_norm(t, v, g, b, 2))));
    }, 1e-4);
    check_grad(gamma0, [&](Tape& t, Var v) {
        Var xx = t.leaf(x), b = t.leaf(beta0), ww = t.leaf(wts);
        return ag::mean(t, ag::square(t, ag::mul(t, ww, ag::group_norm(t, xx, v, b, 2))));
    }, 1e-4);
}

TEST_CASE("gradient accumulates over reused nodes") {
    Tensor x({2}, {1.0, 2.0});
    Tape t;
    Var v = t.leaf(x, true);
    Var y = ag::sum(t, ag::add(t, v, v));  // d/dv = 2
    t.backward(y);
    CHECK(v->grad[0] == doctest::Approx(2.0));
    CHECK(v->grad[1] == doctest::Approx(2.0));
}

TEST_CASE("backward requires scalar loss") {
    Tape t;
    Var v = t.leaf(Tensor({2}, {1.0, 2.0}), true);
    CHECK_THROWS_AS(t.backward(v), std::invalid_argument);
}

TEST_CASE("concat and transpose round-trip values and gradients") {
    Rng rng(80);
    Tensor a = rng.normal_tensor({2, 3, 3});
    Tensor b = rng.normal_tensor({1, 3, 3});

    Tape t;
    Var va = t.leaf(a, true);
    Var vb = t.leaf(b, true);
    Var cat = ag::concat_channels(t, va, vb);
    REQUIRE(cat->val.shape() == std::vector<int>{3, 3, 3});
    CHECK(cat->val.at(2, 1, 1) == b.at(0, 1, 1));

    Var loss = ag::sum(t, ag::square(t, cat));
    t.backward(loss);
    CHECK(va->grad[0] == doctest::Approx(2 * a[0]));
    CHECK(vb->grad[0] == doctest::Approx(2 * b[0]));

    check_grad(a, [](Tape& tt, Var v) {
        Var m = ag::reshape(tt, v, {2, 9});
        return ag::mean(tt, ag::square(tt, ag::transpose(tt, m)));
    });
}
