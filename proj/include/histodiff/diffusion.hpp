#pragma once

#include <functional>

#include "histodiff/autograd.hpp"
#include "histodiff/tensor.hpp"

namespace histodiff {

// Forward-process schedule. Timesteps are 1..T at the API; arrays are
// 0-indexed internally (betas[t-1] is the step-t variance).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // prod_{s<=t} alpha_s

    double beta(int t) const { return betas.at(static_cast<size_t>(t - 1)); }
    double alpha(int t) const { return alphas.at(static_cast<size_t>(t - 1)); }
    // alpha_bar(0) == 1 by convention.
    double alpha_bar(int t) const {
        return t == 0 ? 1.0 : alpha_bars.at(static_cast<size_t>(t - 1));
    }
    void check_t(int t) const;
};

struct GaussianParams {
    Tensor mean;
    double variance = 0.0;  // scalar diagonal
};

NoiseSchedule make_linear_schedule(int T, double beta_start = 1e-4, double beta_end = 2e-2);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Reverse posterior p(z_{t-1} | z_t) with fixed variance beta_tilde:
// mean = (z_t - beta_t / sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)
// var  = beta_t (1 - abar_{t-1}) / (1 - abar_t)   (0 at t = 1)
GaussianParams posterior_params(const Tensor& z_t, const Tensor& eps_hat, int t,
                                const NoiseSchedule& sched);

// Noise predictor as a tape function; shared by dm_loss and the samplers.
using DenoiseFn = std::function<ag::Var(ag::Tape&, ag::Var z_t, int t)>;

// || eps - eps_theta(q_sample(z0,t,eps), t) ||^2 averaged over elements,
// differentiable through the denoiser.
ag::Var dm_loss(ag::Tape& tape, const DenoiseFn& denoise, const Tensor& z0, int t,
                const Tensor& eps, const NoiseSchedule& sched);

}  // namespace histodiff
