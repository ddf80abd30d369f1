#include "histodiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace histodiff {

void NoiseSchedule::check_t(int t) const {
    if (t < 1 || t > T)
        throw std::invalid_argument("timestep t=" + std::to_string(t) +
                                    " out of range [1," + std::to_string(T) + "]");
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("make_linear_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double abar = 1.0;
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        const double b = beta_start + (beta_end - beta_start) * frac;
        s.betas[static_cast<size_t>(i)] = b;
        s.alphas[static_cast<size_t>(i)] = 1.0 - b;
        abar *= 1.0 - b;
        s.alpha_bars[static_cast<size_t>(i)] = abar;
    }
    return s;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    sched.check_t(t);
    check_same_shape(z0, eps, "q_sample");
    const double abar = sched.alpha_bar(t);
    const double a = std::sqrt(abar);
    const double b = std::sqrt(1.0 - abar);
    Tensor zt = z0;
    for (size_t i = 0; i < zt.size(); ++i) zt[i] = a * zt[i] + b * eps[i];
    return zt;
}

GaussianParams posterior_params(const Tensor& z_t, const Tensor& eps_hat, int t,
                                const NoiseSchedule& sched) {
    sched.check_t(t);
    check_same_shape(z_t, eps_hat, "posterior_params");
    const double beta = sched.beta(t);
    const double alpha = sched.alpha(t);
    const double abar = sched.alpha_bar(t);
    const double abar_prev = sched.alpha_bar(t - 1);

    GaussianParams p;
    p.mean = z_t;
    const double coef = beta / std::sqrt(1.0 - abar);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    for (size_t i = 0; i < p.mean.size(); ++i)
        p.mean[i] = inv_sqrt_alpha * (z_t[i] - coef * eps_hat[i]);
    p.variance = t == 1 ? 0.0 : beta * (1.0 - abar_prev) / (1.0 - abar);
    return p;
}

ag::Var dm_loss(ag::Tape& tape, const DenoiseFn& denoise, const Tensor& z0, int t,
                const Tensor& eps, const NoiseSchedule& sched) {
    Tensor zt = q_sample(z0, t, eps, sched);
    ag::Var zt_var = tape.leaf(std::move(zt));
    ag::Var eps_hat = denoise(tape, zt_var, t);
    check_same_shape(eps_hat->val, eps, "dm_loss");
    ag::Var eps_var = tape.leaf(eps);
    return ag::mean(tape, ag::square(tape, ag::sub(tape, eps_var, eps_hat)));
}

}  // namespace histodiff
