#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "histodiff/diffusion.hpp"
#include "histodiff/rng.hpp"

using namespace histodiff;

TEST_CASE("linear schedule values") {
    SUBCASE("hand-computed two-step schedule") {
        NoiseSchedule s = make_linear_schedule(2, 0.1, 0.2);
        CHECK(s.beta(1) == doctest::Approx(0.1));
        CHECK(s.beta(2) == doctest::Approx(0.2));
        CHECK(s.alpha_bar(1) == doctest::Approx(0.9));
        CHECK(s.alpha_bar(2) == doctest::Approx(0.72));  // 0.9 * 0.8
    }
    SUBCASE("single step") {
        NoiseSchedule s = make_linear_schedule(1, 0.5, 0.5);
        CHECK(s.beta(1) == doctest::Approx(0.5));
        CHECK(s.alpha_bar(1) == doctest::Approx(0.5));
    }
    SUBCASE("default T=1000 drives alpha_bar below 1e-4") {
        NoiseSchedule s = make_linear_schedule(1000);
        CHECK(s.alpha_bar(1000) < 1e-4);
        for (int t = 1; t < 1000; ++t) {
            CHECK(s.alpha_bar(t + 1) < s.alpha_bar(t));
            CHECK(s.beta(t) <= s.beta(t + 1));
        }
        CHECK(s.alpha_bar(1) > 0.0);
        CHECK(s.alpha_bar(1) < 1.0);
    }
    SUBCASE("invalid bounds rejected") {
        CHECK_THROWS_AS(make_linear_schedule(0), std::invalid_argument);
        CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.1), std::invalid_argument);
        CHECK_THROWS_AS(make_linear_schedule(10, 0.2, 0.1), std::invalid_argument);
        CHECK_THROWS_AS(make_linear_schedule(10, 0.1, 1.0), std::invalid_argument);
    }
}

TEST_CASE("q_sample closed form") {
    NoiseSchedule s = make_linear_schedule(4, 0.1, 0.4);
    Rng rng(5);
    Tensor z0 = rng.normal_tensor({2, 3, 3});

    SUBCASE("zero noise gives scaled z0") {
        Tensor eps = Tensor::zeros_like(z0);
        Tensor zt = q_sample(z0, 3, eps, s);
        const double a = std::sqrt(s.alpha_bar(3));
        for (size_t i = 0; i < z0.size(); ++i) CHECK(zt[i] == doctest::Approx(a * z0[i]));
    }
    SUBCASE("hand value at alpha_bar = 0.25") {
        NoiseSchedule s1 = make_linear_schedule(1, 0.75, 0.75);
        Tensor one({1}, {1.0});
        Tensor zt = q_sample(one, 1, one, s1);
        CHECK(zt[0] == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-6));  // 1.3660
    }
    SUBCASE("t out of range throws") {
        Tensor eps = Tensor::zeros_like(z0);
        CHECK_THROWS_AS(q_sample(z0, 0, eps, s), std::invalid_argument);
        CHECK_THROWS_AS(q_sample(z0, 5, eps, s), std::invalid_argument);
    }
}

TEST_CASE("q_sample marginal matches iterated per-step kernel (Monte Carlo)") {
    // Iterating z_s = sqrt(1-beta_s) z_{s-1} + sqrt(beta_s) eps_s must produce
    // the same first two moments as the closed form at t = T.
    NoiseSchedule s = make_linear_schedule(8, 0.02, 0.3);
    const int t = 8;
    const double z0v = 0.7;
    Tensor z0({1}, {z0v});

    const int n = 100000;
    Rng rng(99);
    double sum_it = 0, sumsq_it = 0;
    for (int i = 0; i < n; ++i) {
        double z = z0v;
        for (int step = 1; step <= t; ++step) {
            const double b = s.beta(step);
            z = std::sqrt(1.0 - b) * z + std::sqrt(b) * rng.normal();
        }
        sum_it += z;
        sumsq_it += z * z;
    }
    const double mean_it = sum_it / n;
    const double var_it = sumsq_it / n - mean_it * mean_it;

    const double abar = s.alpha_bar(t);
    const double mean_cf = std::sqrt(abar) * z0v;
    const double var_cf = 1.0 - abar;

    const double se_mean = std::sqrt(var_cf / n);
    const double se_var = var_cf * std::sqrt(2.0 / (n - 1));
    CHECK(std::fabs(mean_it - mean_cf) < 3 * se_mean);
    CHECK(std::fabs(var_it - var_cf) < 3 * se_var);

    // and q_sample itself draws from the same closed form
    double sum_q = 0, sumsq_q = 0;
    for (int i = 0; i < n; ++i) {
        Tensor eps({1}, {rng.normal()});
        const double z = q_sample(z0, t, eps, s)[0];
        sum_q += z;
        sumsq_q += z * z;
    }
    const double mean_q = sum_q / n;
    const double var_q = sumsq_q / n - mean_q * mean_q;
    CHECK(std::fabs(mean_q - mean_cf) < 3 * se_mean);
    CHECK(std::fabs(var_q - var_cf) < 3 * se_var);
}

TEST_CASE("posterior_params") {
    NoiseSchedule s = make_linear_schedule(6, 0.05, 0.3);
    Rng rng(6);

    SUBCASE("t=1 inversion recovers z0 exactly") {
        Tensor z0 = rng.normal_tensor({1, 4, 4});
        Tensor eps = rng.normal_tensor({1, 4, 4});
        Tensor z1 = q_sample(z0, 1, eps, s);
        GaussianParams p = posterior_params(z1, eps, 1, s);
        for (size_t i = 0; i < z0.size(); ++i)
            CHECK(p.mean[i] == doctest::Approx(z0[i]).epsilon(1e-12));
        CHECK(p.variance == 0.0);  // alpha_bar(0) == 1
    }
    SUBCASE("beta -> 0 limit leaves z_t nearly unchanged") {
        NoiseSchedule tiny = make_linear_schedule(2, 1e-9, 1e-9);
        Tensor zt = rng.normal_tensor({1, 2, 2});
        Tensor eh = Tensor::zeros_like(zt);
        GaussianParams p = posterior_params(zt, eh, 2, tiny);
        for (size_t i = 0; i < zt.size(); ++i)
            CHECK(p.mean[i] == doctest::Approx(zt[i]).epsilon(1e-7));
    }
    SUBCASE("t=0 rejected") {
        Tensor z = rng.normal_tensor({1, 2, 2});
        CHECK_THROWS_AS(posterior_params(z, z, 0, s), std::invalid_argument);
    }
    SUBCASE("variance formula for t>1") {
        GaussianParams p = posterior_params(Tensor({1}, {0.0}), Tensor({1}, {0.0}), 3, s);
        const double expect = s.beta(3) * (1.0 - s.alpha_bar(2)) / (1.0 - s.alpha_bar(3));
        CHECK(p.variance == doctest::Approx(expect));
    }
}

TEST_CASE("dm_loss") {
    NoiseSchedule s = make_linear_schedule(5, 0.1, 0.3);
    Rng rng(7);
    Tensor z0 = rng.normal_tensor({1, 4, 4});
    Tensor eps = rng.normal_tensor({1, 4, 4});

    SUBCASE("perfect predictor gives zero loss") {
        DenoiseFn perfect = [&](ag::Tape& t, ag::Var, int) { return t.leaf(eps); };
        ag::Tape tape;
        CHECK(dm_loss(tape, perfect, z0, 3, eps, s)->val[0] == doctest::Approx(0.0));
    }
    SUBCASE("zero predictor gives mean(eps^2)") {
        DenoiseFn zero = [&](ag::Tape& t, ag::Var zt, int) {
            return t.leaf(Tensor::zeros_like(zt->val));
        };
        double m = 0;
        for (size_t i = 0; i < eps.size(); ++i) m += eps[i] * eps[i];
        m /= static_cast<double>(eps.size());
        ag::Tape tape;
        CHECK(dm_loss(tape, zero, z0, 3, eps, s)->val[0] == doctest::Approx(m));
    }
    SUBCASE("gradient w.r.t. denoiser parameter matches finite differences") {
        // eps_hat = theta * z_t, a one-parameter denoiser
        auto loss_at = [&](double theta, ag::Tape& tape, ag::Var* theta_var_out) {
            ag::Var th = tape.leaf(Tensor({1}, {theta}), true);
            if (theta_var_out) *theta_var_out = th;
            DenoiseFn dn = [th](ag::Tape& t, ag::Var zt, int) {
                ag::Var thb = ag::reshape(t, th, {1});
                // broadcast scalar: scale via mul with expanded tensor
                Tensor ones = Tensor::zeros_like(zt->val);
                ones.fill(1.0);
                ag::Var expand = ag::matmul(
                    t, ag::reshape(t, t.leaf(Tensor(std::vector<int>{static_cast<int>(zt->val.size()), 1}, std::vector<double>(zt->val.size(), 1.0))), {static_cast<int>(zt->val.size()), 1}),
                    ag::reshape(t, thb, {1, 1}));
                return ag::mul(t, zt, ag::reshape(t, expand, zt->val.shape()));
            };
            return dm_loss(tape, dn, z0, 2, eps, s);
        };
        ag::Tape tape;
        ag::Var th = nullptr;
        ag::Var L = loss_at(0.4, tape, &th);
        tape.backward(L);
        const double h = 1e-6;
        ag::Tape tp, tm;
        const double fd = (loss_at(0.4 + h, tp, nullptr)->val[0] -
                           loss_at(0.4 - h, tm, nullptr)->val[0]) / (2 * h);
        CHECK(th->grad[0] == doctest::Approx(fd).epsilon(1e-3));
    }
    SUBCASE("loss is nonnegative for random predictors") {
        Rng r2(8);
        for (int trial = 0; trial < 5; ++trial) {
            Tensor pred = r2.normal_tensor({1, 4, 4});
            DenoiseFn dn = [&](ag::Tape& t, ag::Var, int) { return t.leaf(pred); };
            ag::Tape tape;
            CHECK(dm_loss(tape, dn, z0, 4, eps, s)->val[0] >= 0.0);
        }
    }
}
