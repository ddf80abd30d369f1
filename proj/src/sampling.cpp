#include "histodiff/sampling.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "histodiff/image_io.hpp"

namespace histodiff {

void SamplerConfig::validate(int T) const {
    if (num_steps < 1 || num_steps > T)
        throw std::invalid_argument("SamplerConfig: 1 <= num_steps <= T required");
    if (guidance_scale < 0.0)
        throw std::invalid_argument("SamplerConfig: guidance_scale >= 0 required");
    if (batch < 1) throw std::invalid_argument("SamplerConfig: batch >= 1 required");
}

Tensor guided_mean(const Tensor& mu, double sigma2, const Tensor& grad_logp, double g) {
    if (sigma2 < 0.0) throw std::invalid_argument("guided_mean: negative variance");
    if (g == 0.0) return mu;
    check_same_shape(mu, grad_logp, "guided_mean");
    Tensor out = mu;
    const double s = g * sigma2;
    for (size_t i = 0; i < out.size(); ++i) out[i] += s * grad_logp[i];
    return out;
}

Tensor grad_log_prob(const LatentClassifier& clf, const Tensor& z_t, int t, int y) {
    if (y < 0 || y >= clf.num_classes())
        throw std::invalid_argument("grad_log_prob: class id out of range");
    ag::Tape tape;
    nn::ParamBind bind(tape, clf.parameters(), false);
    ag::Var z = tape.leaf(z_t, true);
    ag::Var logits = clf.forward(tape, bind, z, t);
    ag::Var logp = ag::pick(tape, ag::log_softmax(tape, logits), static_cast<size_t>(y));
    tape.backward(logp);
    return z->grad;
}

namespace {

Tensor apply_guidance_mean(const Tensor& mean, double variance, const Tensor& z_t, int t,
                           const Guidance* guidance) {
    if (!guidance || guidance->g == 0.0) return mean;
    Tensor grad = grad_log_prob(*guidance->clf, z_t, t, guidance->y);
    return guided_mean(mean, variance, grad, guidance->g);
}

}  // namespace

Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched,
                 Rng& rng, const Guidance* guidance) {
    GaussianParams post = posterior_params(z_t, eps_hat, t, sched);
    Tensor mean = apply_guidance_mean(post.mean, post.variance, z_t, t, guidance);
    if (t == 1 || post.variance == 0.0) return mean;
    const double sd = std::sqrt(post.variance);
    Tensor out = mean;
    for (size_t i = 0; i < out.size(); ++i) out[i] += sd * rng.normal();
    return out;
}

Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& sched, const Guidance* guidance) {
    sched.check_t(t);
    if (t_prev < 0 || t_prev >= t)
        throw std::invalid_argument("ddim_step: need 0 <= t_prev < t");
    check_same_shape(z_t, eps_hat, "ddim_step");

    const double ab_t = sched.alpha_bar(t);
    const double ab_p = sched.alpha_bar(t_prev);
    const double sig_t = std::sqrt(1.0 - ab_t);

    Tensor eps = eps_hat;
    if (guidance && guidance->g != 0.0) {
        Tensor grad = grad_log_prob(*guidance->clf, z_t, t, guidance->y);
        const double s = guidance->g * sig_t;
        for (size_t i = 0; i < eps.size(); ++i) eps[i] -= s * grad[i];
    }

    const double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
    const double sqrt_ab_p = std::sqrt(ab_p);
    const double sig_p = std::sqrt(1.0 - ab_p);
    Tensor out = Tensor::zeros_like(z_t);
    for (size_t i = 0; i < out.size(); ++i) {
        const double z0_hat = (z_t[i] - sig_t * eps[i]) * inv_sqrt_ab;
        out[i] = sqrt_ab_p * z0_hat + sig_p * eps[i];
    }
    return out;
}

std::vector<int> make_ddim_schedule(int T, int num_steps) {
    if (T < 1 || num_steps < 1 || num_steps > T)
        throw std::invalid_argument("make_ddim_schedule: need 1 <= num_steps <= T");
    std::vector<int> ts;
    ts.reserve(static_cast<size_t>(num_steps));
    if (num_steps == 1) {
        ts.push_back(T);
        return ts;
    }
    for (int i = 0; i < num_steps; ++i) {
        const double pos = 1.0 + (static_cast<double>(T - 1) * i) / (num_steps - 1);
        ts.push_back(static_cast<int>(std::lround(pos)));
    }
    return ts;
}

std::vector<Sample> sample(const ModelBundle& bundle, const NoiseSchedule& sched,
                           const SamplerConfig& cfg, std::optional<int> y, int n) {
    cfg.validate(sched.T);
    if (n < 0) throw std::invalid_argument("sample: n >= 0 required");
    if (!bundle.lae || !bundle.denoiser)
        throw std::logic_error("sample: bundle is missing the autoencoder or denoiser");
    if (y && !bundle.latent_clf)
        throw std::logic_error("sample: conditional sampling requires a latent classifier");
    if (y && (*y < 0 || *y >= bundle.sizes.num_classes))
        throw std::invalid_argument("sample: class id out of range");

    const int zc = bundle.sizes.latent_channels;
    const int ls = latent_size(bundle.sizes);
    const std::vector<int> ddim_ts =
        cfg.method == SamplerConfig::Method::ddim ? make_ddim_schedule(sched.T, cfg.num_steps)
                                                  : std::vector<int>{};

    std::vector<Sample> out(static_cast<size_t>(n));
#pragma omp parallel for schedule(dynamic, 1)
    for (int idx = 0; idx < n; ++idx) {
        Guidance guidance;
        const Guidance* gptr = nullptr;
        if (y) {
            guidance.clf = bundle.latent_clf.get();
            guidance.y = *y;
            guidance.g = cfg.guidance_scale;
            gptr = &guidance;
        }

        const uint64_t sample_seed = derive_seed(cfg.seed, 0x5A, static_cast<uint64_t>(idx));
        Rng rng(sample_seed);
        Tensor z = rng.normal_tensor({zc, ls, ls});

        if (cfg.method == SamplerConfig::Method::ddpm) {
            for (int t = sched.T; t >= 1; --t)
                z = ddpm_step(z, t, bundle.denoiser->denoise(z, t), sched, rng, gptr);
        } else {
            for (size_t k = ddim_ts.size(); k-- > 0;) {
                const int t = ddim_ts[k];
                const int t_prev = k == 0 ? 0 : ddim_ts[k - 1];
                z = ddim_step(z, t, t_prev, bundle.denoiser->denoise(z, t), sched, gptr);
            }
        }

        Tensor z_unscaled = z;
        for (size_t i = 0; i < z_unscaled.size(); ++i) z_unscaled[i] *= bundle.latent_scale;

        Sample& s = out[static_cast<size_t>(idx)];
        s.latent = z;
        s.target_label = y;
        s.seed = sample_seed;
        if (y && bundle.decoder_ft) {
            ag::Tape tape;
            nn::ParamBind bind(tape, bundle.decoder_ft->parameters(), false);
            s.image = bundle.decoder_ft->forward(tape, bind, tape.leaf(z_unscaled))->val;
        } else {
            s.image = bundle.lae->decode(z_unscaled);
        }
    }
    return out;
}

void write_samples(const std::string& dir, const std::vector<Sample>& samples) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream csv(fs::path(dir) / "samples.csv");
    if (!csv) throw std::runtime_error("write_samples: cannot open sidecar in " + dir);
    csv << "index,target_label,seed,confidence\n";
    char name[32];
    for (size_t i = 0; i < samples.size(); ++i) {
        std::snprintf(name, sizeof(name), "sample_%06zu.png", i);
        save_png(samples[i].image, (fs::path(dir) / name).string());
        csv << i << ',';
        if (samples[i].target_label) csv << *samples[i].target_label;
        csv << ',' << samples[i].seed << ",\n";
    }
}

}  // namespace histodiff
