#pragma once

#include <optional>
#include <string>
#include <vector>

#include "histodiff/diffusion.hpp"
#include "histodiff/training.hpp"

namespace histodiff {

struct SamplerConfig {
    enum class Method { ddpm, ddim };
    Method method = Method::ddim;
    int num_steps = 200;        // DDIM subsequence length
    double guidance_scale = 1.0;
    uint64_t seed = 0;
    int batch = 16;

    void validate(int T) const;
};

// Classifier guidance context for a single target class.
struct Guidance {
    const LatentClassifier* clf = nullptr;
    int y = 0;
    double g = 1.0;
};

// mu + g * sigma2 * grad_logp, elementwise (diagonal covariance).
Tensor guided_mean(const Tensor& mu, double sigma2, const Tensor& grad_logp, double g);

// Gradient of log softmax_y(clf(z_t, t)) with respect to z_t.
Tensor grad_log_prob(const LatentClassifier& clf, const Tensor& z_t, int t, int y);

// One ancestral step: draw from N(guided posterior mean, beta_tilde I).
// Deterministic at t = 1.
Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched,
                 Rng& rng, const Guidance* guidance = nullptr);

// One deterministic (eta = 0) step from t to t_prev (0 <= t_prev < t).
Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& sched, const Guidance* guidance = nullptr);

// Uniform subsequence of num_steps timesteps from 1 to T inclusive, ascending.
std::vector<int> make_ddim_schedule(int T, int num_steps);

struct Sample {
    Tensor image;
    Tensor latent;  // z_0 in model (scaled) space
    std::optional<int> target_label;
    uint64_t seed = 0;
};

// Draws n samples; per-index RNG streams so results do not depend on order or
// thread count. Conditional (y set) requires latent_clf; decodes through the
// fine-tuned decoder when present, the pre-trained one otherwise.
std::vector<Sample> sample(const ModelBundle& bundle, const NoiseSchedule& sched,
                           const SamplerConfig& cfg, std::optional<int> y, int n);

// PNG per sample plus a CSV sidecar (index, target_label, seed, confidence).
void write_samples(const std::string& dir, const std::vector<Sample>& samples);

}  // namespace histodiff
