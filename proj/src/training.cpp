#include "histodiff/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace histodiff {

void TrainConfig::validate() const {
    if (epochs < 0 || batch_size < 1 || learning_rate <= 0.0)
        throw std::invalid_argument("TrainConfig: epochs >= 0, batch_size >= 1, lr > 0 required");
    if (lambda_kl < 0.0 || lambda_ce < 0.0 || lambda_perc < 0.0)
        throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
}

bool ModelBundle::has_stage(const std::string& name) const {
    return std::find(stage_provenance.begin(), stage_provenance.end(), name) !=
           stage_provenance.end();
}

void copy_params(const nn::Module& from, nn::Module& to) {
    const auto& src = from.parameters();
    const auto& dst = to.parameters();
    if (src.size() != dst.size())
        throw std::logic_error("copy_params: parameter count mismatch");
    for (size_t i = 0; i < src.size(); ++i) {
        if (src[i]->value.size() != dst[i]->value.size())
            throw std::logic_error("copy_params: shape mismatch at " + src[i]->name);
        dst[i]->value = src[i]->value;
    }
}

namespace {

std::vector<size_t> shuffled_indices(size_t n, uint64_t seed) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(seed);
    for (size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    return idx;
}

void scale_grads(const std::vector<nn::Parameter*>& params, double s) {
    for (nn::Parameter* p : params)
        for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= s;
}

std::vector<Tensor> snapshot_params(const std::vector<nn::Parameter*>& params) {
    std::vector<Tensor> snap;
    snap.reserve(params.size());
    for (const nn::Parameter* p : params) snap.push_back(p->value);
    return snap;
}

void restore_params(const std::vector<nn::Parameter*>& params, const std::vector<Tensor>& snap) {
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

struct SampleResult {
    std::vector<Tensor> grads;
    std::map<std::string, double> parts;
    double loss = 0.0;
};

// Runs one minibatch: per-sample graphs in parallel, gradients reduced in
// index order so the result is independent of thread count.
template <typename BuildFn>
double run_batch(nn::Module& module, nn::AdamOptimizer& opt,
                 const std::vector<size_t>& batch_items, const BuildFn& build,
                 std::map<std::string, double>& part_sums) {
    const int bs = static_cast<int>(batch_items.size());
    std::vector<SampleResult> results(static_cast<size_t>(bs));

#pragma omp parallel for schedule(dynamic, 1)
    for (int i = 0; i < bs; ++i)
        results[static_cast<size_t>(i)] = build(batch_items[static_cast<size_t>(i)], i);

    module.zero_grad();
    double loss_sum = 0.0;
    for (const SampleResult& r : results) {
        nn::accumulate_grads(module.parameters(), r.grads);
        loss_sum += r.loss;
        for (const auto& [k, v] : r.parts) part_sums[k] += v;
    }
    const double mean_loss = loss_sum / bs;
    if (!std::isfinite(mean_loss)) return mean_loss;
    scale_grads(module.parameters(), 1.0 / bs);
    opt.step(module.parameters());
    return mean_loss;
}

// Shared epoch loop with divergence rollback to the last epoch-end snapshot.
template <typename BuildFn>
void train_loop(nn::Module& module, const TrainConfig& cfg, size_t n_items,
                const BuildFn& build, TrainLog* log) {
    nn::AdamOptimizer opt(cfg.learning_rate, cfg.adamw, cfg.weight_decay);
    std::vector<Tensor> last_good = snapshot_params(module.parameters());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = shuffled_indices(n_items, derive_seed(cfg.seed, 0x5357, static_cast<uint64_t>(epoch)));
        std::map<std::string, double> part_sums;
        double loss_sum = 0.0;
        size_t n_batches = 0, n_samples = 0;
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), off + static_cast<size_t>(cfg.batch_size));
            std::vector<size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(off),
                                      order.begin() + static_cast<std::ptrdiff_t>(end));
            auto bound_build = [&](size_t item, int slot) {
                return build(item, epoch, off / static_cast<size_t>(cfg.batch_size), slot);
            };
            const double l = run_batch(module, opt, batch, bound_build, part_sums);
            if (!std::isfinite(l)) {
                restore_params(module.parameters(), last_good);
                if (log) {
                    TrainLogRow row;
                    row.epoch = epoch;
                    row.loss = l;
                    row.parts["diverged"] = 1.0;
                    log->push_back(row);
                }
                throw std::runtime_error("training stage " + cfg.stage +
                                         ": non-finite loss at epoch " + std::to_string(epoch) +
                                         "; parameters rolled back to last completed epoch");
            }
            loss_sum += l;
            ++n_batches;
            n_samples = end;
        }
        last_good = snapshot_params(module.parameters());
        if (log) {
            TrainLogRow row;
            row.epoch = epoch;
            row.loss = loss_sum / static_cast<double>(n_batches);
            for (auto& [k, v] : part_sums) row.parts[k] = v / static_cast<double>(n_samples);
            log->push_back(row);
        }
    }
}

ag::Var ce_loss(ag::Tape& tape, ag::Var logits, int label) {
    if (label < 0 || label >= logits->val.dim(0))
        throw std::invalid_argument("ce_loss: label out of range");
    return ag::scale(tape, ag::pick(tape, ag::log_softmax(tape, logits), static_cast<size_t>(label)), -1.0);
}

}  // namespace

LaeLossParts lae_loss(ag::Tape& tape, const Encoder& enc, const nn::ParamBind& enc_bind,
                      const Decoder& dec, const nn::ParamBind& dec_bind,
                      const PerceptualNet& perc, const nn::ParamBind& perc_bind,
                      const Tensor& x, const Tensor& xi, double lambda_kl, double lambda_perc) {
    ag::Var x_in = tape.leaf(x);
    auto [mean, logvar] = enc.forward(tape, enc_bind, x_in);

    ag::Var z = mean;
    if (xi.size() != 0) {
        check_same_shape(xi, mean->val, "lae_loss noise");
        ag::Var sigma = ag::exp_op(tape, ag::scale(tape, logvar, 0.5));
        z = ag::add(tape, mean, ag::mul(tape, sigma, tape.leaf(xi)));
    }
    ag::Var xhat = dec.forward(tape, dec_bind, z);

    ag::Var l1 = ag::mean(tape, ag::abs_op(tape, ag::sub(tape, xhat, x_in)));
    ag::Var rec = l1;
    if (lambda_perc > 0.0) {
        ag::Var fx = perc.features(tape, perc_bind, x_in);
        ag::Var fxhat = perc.features(tape, perc_bind, xhat);
        ag::Var pl2 = ag::mean(tape, ag::square(tape, ag::sub(tape, fxhat, fx)));
        rec = ag::add(tape, l1, ag::scale(tape, pl2, lambda_perc));
    }

    // KL(N(mu, sigma^2) || N(0, I)) = 0.5 sum(mu^2 + sigma^2 - 1 - log sigma^2)
    ag::Var mu2 = ag::square(tape, mean);
    ag::Var var = ag::exp_op(tape, logvar);
    ag::Var kl_terms = ag::sub(tape, ag::add_scalar(tape, ag::add(tape, mu2, var), -1.0), logvar);
    ag::Var kl = ag::scale(tape, ag::sum(tape, kl_terms), 0.5);

    LaeLossParts parts;
    parts.rec = rec;
    parts.kl = kl;
    parts.total = ag::add(tape, rec, ag::scale(tape, kl, lambda_kl));
    return parts;
}

namespace {

// Encoder means for every item, computed once per stage.
std::vector<Tensor> encode_all(const LatentAutoencoder& lae, const PatchDataset& ds) {
    std::vector<Tensor> out(ds.items.size());
#pragma omp parallel for schedule(dynamic, 1)
    for (int i = 0; i < static_cast<int>(ds.items.size()); ++i)
        out[static_cast<size_t>(i)] = lae.encode(ds.items[static_cast<size_t>(i)].image, false);
    return out;
}

}  // namespace

std::unique_ptr<LatentAutoencoder> train_lae(const PatchDataset& pool, const TrainConfig& cfg,
                                             const NetSizes& sizes, TrainLog* log) {
    cfg.validate();
    if (pool.items.empty()) throw std::invalid_argument("train_lae: empty pool");

    auto lae = std::make_unique<LatentAutoencoder>(sizes, cfg.seed);
    PerceptualNet perc;

    // single optimizer over the combined encoder+decoder parameter list
    std::vector<nn::Parameter*> all_params = lae->encoder->parameters();
    for (nn::Parameter* p : lae->decoder->parameters()) all_params.push_back(p);

    nn::AdamOptimizer opt(cfg.learning_rate, cfg.adamw, cfg.weight_decay);
    const int zc = lae->encoder->latent_channels();
    const int ls = sizes.image_size / sizes.downsample_factor;

    std::vector<Tensor> last_good = snapshot_params(all_params);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = shuffled_indices(pool.items.size(),
                                            derive_seed(cfg.seed, 0x5357, static_cast<uint64_t>(epoch)));
        std::map<std::string, double> part_sums;
        double loss_sum = 0.0;
        size_t n_batches = 0, n_samples = 0;
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), off + static_cast<size_t>(cfg.batch_size));
            const int bs = static_cast<int>(end - off);
            std::vector<SampleResult> results(static_cast<size_t>(bs));
#pragma omp parallel for schedule(dynamic, 1)
            for (int i = 0; i < bs; ++i) {
                const size_t item = order[off + static_cast<size_t>(i)];
                Rng rng(derive_seed(cfg.seed, 0xA0, static_cast<uint64_t>(epoch),
                                    (off << 8) + static_cast<uint64_t>(i)));
                Tensor xi = rng.normal_tensor({zc, ls, ls});
                ag::Tape tape;
                nn::ParamBind enc_bind(tape, lae->encoder->parameters(), true);
                nn::ParamBind dec_bind(tape, lae->decoder->parameters(), true);
                nn::ParamBind perc_bind(tape, perc.parameters(), false);
                LaeLossParts lp = lae_loss(tape, *lae->encoder, enc_bind, *lae->decoder, dec_bind,
                                           perc, perc_bind, pool.items[item].image, xi,
                                           cfg.lambda_kl, cfg.lambda_perc);
                tape.backward(lp.total);
                SampleResult& r = results[static_cast<size_t>(i)];
                r.grads = enc_bind.take_grads();
                auto dg = dec_bind.take_grads();
                r.grads.insert(r.grads.end(), dg.begin(), dg.end());
                r.loss = lp.total->val[0];
                r.parts["rec"] = lp.rec->val[0];
                r.parts["kl"] = lp.kl->val[0];
                r.parts["kl_weighted"] = cfg.lambda_kl * lp.kl->val[0];
            }
            for (nn::Parameter* p : all_params) {
                if (p->grad.size() != p->value.size()) p->grad = Tensor::zeros_like(p->value);
                else p->grad.fill(0.0);
            }
            double batch_loss = 0.0;
            for (const SampleResult& r : results) {
                nn::accumulate_grads(all_params, r.grads);
                batch_loss += r.loss;
                for (const auto& [k, v] : r.parts) part_sums[k] += v;
            }
            batch_loss /= bs;
            if (!std::isfinite(batch_loss)) {
                restore_params(all_params, last_good);
                throw std::runtime_error("train_lae: non-finite loss at epoch " +
                                         std::to_string(epoch) + "; rolled back");
            }
            scale_grads(all_params, 1.0 / bs);
            opt.step(all_params);
            loss_sum += batch_loss;
            ++n_batches;
            n_samples = end;
        }
        last_good = snapshot_params(all_params);
        if (log) {
            TrainLogRow row;
            row.epoch = epoch;
            row.loss = loss_sum / static_cast<double>(n_batches);
            for (auto& [k, v] : part_sums) row.parts[k] = v / static_cast<double>(n_samples);
            log->push_back(row);
        }
    }
    return lae;
}

DmTrainResult train_dm(const PatchDataset& pool, const LatentAutoencoder& lae,
                       const NoiseSchedule& sched, const TrainConfig& cfg,
                       const NetSizes& sizes, TrainLog* log) {
    cfg.validate();
    if (pool.items.empty()) throw std::invalid_argument("train_dm: empty pool");

    const uint64_t enc_digest = lae.encoder->param_digest();
    std::vector<Tensor> latents = encode_all(lae, pool);

    // Latents are rescaled to unit std so the unit-variance forward process
    // actually destroys the signal by t = T.
    double sq = 0.0, mn = 0.0;
    size_t count = 0;
    for (const Tensor& z : latents) {
        for (size_t i = 0; i < z.size(); ++i) { sq += z[i] * z[i]; mn += z[i]; ++count; }
    }
    const double mean_all = mn / static_cast<double>(count);
    double scale = std::sqrt(std::max(1e-12, sq / static_cast<double>(count) - mean_all * mean_all));
    for (Tensor& z : latents)
        for (size_t i = 0; i < z.size(); ++i) z[i] /= scale;

    DmTrainResult result;
    result.latent_scale = scale;
    Rng init_rng(derive_seed(cfg.seed, 0xD1));
    result.denoiser = std::make_unique<Denoiser>(sizes, init_rng);
    Denoiser& dn = *result.denoiser;

    std::vector<int> all_ts;
    auto build = [&](size_t item, int epoch, size_t batch_idx, int slot) {
        Rng rng(derive_seed(cfg.seed, 0xD2, (static_cast<uint64_t>(epoch) << 32) | batch_idx,
                            static_cast<uint64_t>(slot)));
        const int t = 1 + static_cast<int>(rng.uniform_int(0, sched.T - 1));
        Tensor eps = rng.normal_tensor(latents[item].shape());
        ag::Tape tape;
        nn::ParamBind bind(tape, dn.parameters(), true);
        DenoiseFn fn = [&dn, &bind](ag::Tape& tp, ag::Var zt, int step) {
            return dn.forward(tp, bind, zt, step);
        };
        ag::Var loss = dm_loss(tape, fn, latents[item], t, eps, sched);
        tape.backward(loss);
        SampleResult r;
        r.grads = bind.take_grads();
        r.loss = loss->val[0];
        r.parts["mse"] = r.loss;
        r.parts["t"] = static_cast<double>(t);
        return r;
    };

    // record sampled t deterministically by replaying the same derivation
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = shuffled_indices(pool.items.size(),
                                            derive_seed(cfg.seed, 0x5357, static_cast<uint64_t>(epoch)));
        for (size_t off = 0, bi = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size), ++bi)
            for (int i = 0; i < static_cast<int>(std::min(order.size() - off, static_cast<size_t>(cfg.batch_size))); ++i) {
                Rng rng(derive_seed(cfg.seed, 0xD2, (static_cast<uint64_t>(epoch) << 32) | bi,
                                    static_cast<uint64_t>(i)));
                all_ts.push_back(1 + static_cast<int>(rng.uniform_int(0, sched.T - 1)));
            }
    }
    result.sampled_ts = std::move(all_ts);

    train_loop(dn, cfg, pool.items.size(),
               [&](size_t item, int epoch, size_t batch_idx, int slot) {
                   return build(item, epoch, batch_idx, slot);
               }, log);

    if (lae.encoder->param_digest() != enc_digest)
        throw std::logic_error("train_dm: encoder parameters changed during DM training");
    return result;
}

std::unique_ptr<Decoder> finetune_decoder(const LatentAutoencoder& lae,
                                          const ImageClassifier& aux_clf,
                                          const PatchDataset& labeled, const TrainConfig& cfg,
                                          const NetSizes& sizes, TrainLog* log) {
    cfg.validate();
    if (!labeled.fully_labeled())
        throw std::invalid_argument("finetune_decoder: labeled set has missing labels");

    const uint64_t enc_digest = lae.encoder->param_digest();
    const uint64_t aux_digest = aux_clf.param_digest();

    Rng clone_rng(derive_seed(cfg.seed, 0xDF));
    auto dprime = std::make_unique<Decoder>(sizes, clone_rng);
    copy_params(*lae.decoder, *dprime);

    PerceptualNet perc;
    std::vector<Tensor> latents = encode_all(lae, labeled);

    train_loop(*dprime, cfg, labeled.items.size(),
        [&](size_t item, int, size_t, int) {
            ag::Tape tape;
            nn::ParamBind dec_bind(tape, dprime->parameters(), true);
            nn::ParamBind perc_bind(tape, perc.parameters(), false);
            nn::ParamBind aux_bind(tape, aux_clf.parameters(), false);

            const Tensor& x = labeled.items[item].image;
            ag::Var x_in = tape.leaf(x);
            ag::Var xhat = dprime->forward(tape, dec_bind, tape.leaf(latents[item]));

            ag::Var l1 = ag::mean(tape, ag::abs_op(tape, ag::sub(tape, xhat, x_in)));
            ag::Var rec = l1;
            if (cfg.lambda_perc > 0.0) {
                ag::Var fx = perc.features(tape, perc_bind, x_in);
                ag::Var fxh = perc.features(tape, perc_bind, xhat);
                rec = ag::add(tape, l1,
                              ag::scale(tape, ag::mean(tape, ag::square(tape, ag::sub(tape, fxh, fx))),
                                        cfg.lambda_perc));
            }
            ag::Var total = rec;
            double ce_val = 0.0;
            if (cfg.lambda_ce != 0.0) {
                ag::Var logits = aux_clf.forward(tape, aux_bind, xhat).first;
                ag::Var ce = ce_loss(tape, logits, *labeled.items[item].label);
                ce_val = ce->val[0];
                total = ag::add(tape, rec, ag::scale(tape, ce, cfg.lambda_ce));
            }
            tape.backward(total);
            SampleResult r;
            r.grads = dec_bind.take_grads();
            r.loss = total->val[0];
            r.parts["rec"] = rec->val[0];
            r.parts["ce"] = ce_val;
            r.parts["ce_weighted"] = cfg.lambda_ce * ce_val;
            return r;
        }, log);

    if (lae.encoder->param_digest() != enc_digest || aux_clf.param_digest() != aux_digest)
        throw std::logic_error("finetune_decoder: a frozen component changed");
    return dprime;
}

std::unique_ptr<LatentClassifier> train_latent_classifier(const PatchDataset& labeled,
                                                          const LatentAutoencoder& lae,
                                                          const NoiseSchedule& sched,
                                                          const TrainConfig& cfg,
                                                          const NetSizes& sizes,
                                                          double latent_scale,
                                                          TrainLog* log) {
    cfg.validate();
    if (!labeled.fully_labeled())
        throw std::invalid_argument("train_latent_classifier: labeled set required");

    std::vector<Tensor> latents = encode_all(lae, labeled);
    for (Tensor& z : latents)
        for (size_t i = 0; i < z.size(); ++i) z[i] /= latent_scale;

    Rng init_rng(derive_seed(cfg.seed, 0x1C));
    auto clf = std::make_unique<LatentClassifier>(sizes, init_rng);

    train_loop(*clf, cfg, labeled.items.size(),
        [&](size_t item, int epoch, size_t batch_idx, int slot) {
            Rng rng(derive_seed(cfg.seed, 0x1D, (static_cast<uint64_t>(epoch) << 32) | batch_idx,
                                static_cast<uint64_t>(slot)));
            const int t = 1 + static_cast<int>(rng.uniform_int(0, sched.T - 1));
            Tensor eps = rng.normal_tensor(latents[item].shape());
            Tensor zt = q_sample(latents[item], t, eps, sched);

            ag::Tape tape;
            nn::ParamBind bind(tape, clf->parameters(), true);
            ag::Var logits = clf->forward(tape, bind, tape.leaf(zt), t);
            ag::Var loss = ce_loss(tape, logits, *labeled.items[item].label);
            tape.backward(loss);
            SampleResult r;
            r.grads = bind.take_grads();
            r.loss = loss->val[0];
            r.parts["ce"] = r.loss;
            return r;
        }, log);
    return clf;
}

std::unique_ptr<ImageClassifier> train_image_classifier(const PatchDataset& labeled,
                                                        ClassifierRole role,
                                                        const TrainConfig& cfg,
                                                        const NetSizes& sizes, TrainLog* log) {
    cfg.validate();
    if (!labeled.fully_labeled())
        throw std::invalid_argument("train_image_classifier: labeled set required");

    Rng init_rng(derive_seed(cfg.seed, 0x1E));
    auto clf = std::make_unique<ImageClassifier>(sizes, role, init_rng);

    train_loop(*clf, cfg, labeled.items.size(),
        [&](size_t item, int, size_t, int) {
            ag::Tape tape;
            nn::ParamBind bind(tape, clf->parameters(), true);
            ag::Var logits = clf->forward(tape, bind, tape.leaf(labeled.items[item].image)).first;
            ag::Var loss = ce_loss(tape, logits, *labeled.items[item].label);
            tape.backward(loss);
            SampleResult r;
            r.grads = bind.take_grads();
            r.loss = loss->val[0];
            r.parts["ce"] = r.loss;
            return r;
        }, log);
    return clf;
}

double mean_roundtrip_l1(const LatentAutoencoder& lae, const PatchDataset& ds,
                         const Decoder* dec_override) {
    if (ds.items.empty()) throw std::invalid_argument("mean_roundtrip_l1: empty dataset");
    double total = 0.0;
#pragma omp parallel for schedule(dynamic, 1) reduction(+ : total)
    for (int i = 0; i < static_cast<int>(ds.items.size()); ++i) {
        const Tensor& x = ds.items[static_cast<size_t>(i)].image;
        Tensor z = lae.encode(x, false);
        Tensor xhat;
        if (dec_override) {
            ag::Tape t;
            nn::ParamBind b(t, dec_override->parameters(), false);
            xhat = dec_override->forward(t, b, t.leaf(z))->val;
        } else {
            xhat = lae.decode(z);
        }
        double l1 = 0.0;
        for (size_t j = 0; j < x.size(); ++j) l1 += std::fabs(xhat[j] - x[j]);
        total += l1 / static_cast<double>(x.size());
    }
    return total / static_cast<double>(ds.items.size());
}

double classifier_accuracy(const ImageClassifier& clf, const PatchDataset& ds) {
    if (ds.items.empty()) throw std::invalid_argument("classifier_accuracy: empty dataset");
    int correct = 0;
#pragma omp parallel for schedule(dynamic, 1) reduction(+ : correct)
    for (int i = 0; i < static_cast<int>(ds.items.size()); ++i) {
        const PatchItem& it = ds.items[static_cast<size_t>(i)];
        if (clf.predict(it.image) == *it.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.items.size());
}

}  // namespace histodiff
