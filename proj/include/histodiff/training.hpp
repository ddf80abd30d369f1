#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "histodiff/data.hpp"
#include "histodiff/diffusion.hpp"
#include "histodiff/networks.hpp"

namespace histodiff {

struct TrainConfig {
    std::string stage;  // lae | dm | decoder_ft | latent_clf | image_clf
    int epochs = 10;
    int batch_size = 16;
    double learning_rate = 1e-3;
    uint64_t seed = 0;
    double lambda_kl = 1e-6;   // Table 2 default
    double lambda_ce = 1.0;    // Table 2 default
    double lambda_perc = 0.1;  // random-feature perceptual surrogate weight
    bool adamw = false;
    double weight_decay = 0.0;

    void validate() const;
};

struct TrainLogRow {
    int epoch = 0;
    double loss = 0.0;
    std::map<std::string, double> parts;
};
using TrainLog = std::vector<TrainLogRow>;

// Trained components plus stage provenance; what a checkpoint directory holds.
struct ModelBundle {
    NetSizes sizes;
    std::unique_ptr<LatentAutoencoder> lae;
    std::unique_ptr<Decoder> decoder_ft;  // D', present after decoder_ft stage
    std::unique_ptr<Denoiser> denoiser;
    std::unique_ptr<LatentClassifier> latent_clf;
    std::unique_ptr<ImageClassifier> aux_clf;
    double latent_scale = 1.0;  // std of encoder means over the DM training pool
    std::vector<std::string> stage_provenance;

    bool has_stage(const std::string& name) const;
};

struct LaeLossParts {
    ag::Var total;
    ag::Var rec;  // pixel L1 + lambda_perc * perceptual feature L2
    ag::Var kl;   // closed-form KL to N(0,I), summed over latent elements
};

// Builds the Eq.-4 style loss graph for one image. latent noise xi is the
// reparameterization draw (empty tensor = use the encoder mean).
LaeLossParts lae_loss(ag::Tape& tape, const Encoder& enc, const nn::ParamBind& enc_bind,
                      const Decoder& dec, const nn::ParamBind& dec_bind,
                      const PerceptualNet& perc, const nn::ParamBind& perc_bind,
                      const Tensor& x, const Tensor& xi, double lambda_kl, double lambda_perc);

std::unique_ptr<LatentAutoencoder> train_lae(const PatchDataset& pool, const TrainConfig& cfg,
                                             const NetSizes& sizes, TrainLog* log = nullptr);

struct DmTrainResult {
    std::unique_ptr<Denoiser> denoiser;
    double latent_scale = 1.0;
    std::vector<int> sampled_ts;  // every t drawn during training, for audits
};

DmTrainResult train_dm(const PatchDataset& pool, const LatentAutoencoder& lae,
                       const NoiseSchedule& sched, const TrainConfig& cfg,
                       const NetSizes& sizes, TrainLog* log = nullptr);

// Clones D and fine-tunes the clone with L_rec + lambda_ce * CE(aux(x_hat), y);
// encoder and aux classifier stay frozen.
std::unique_ptr<Decoder> finetune_decoder(const LatentAutoencoder& lae,
                                          const ImageClassifier& aux_clf,
                                          const PatchDataset& labeled, const TrainConfig& cfg,
                                          const NetSizes& sizes, TrainLog* log = nullptr);

std::unique_ptr<LatentClassifier> train_latent_classifier(const PatchDataset& labeled,
                                                          const LatentAutoencoder& lae,
                                                          const NoiseSchedule& sched,
                                                          const TrainConfig& cfg,
                                                          const NetSizes& sizes,
                                                          double latent_scale,
                                                          TrainLog* log = nullptr);

std::unique_ptr<ImageClassifier> train_image_classifier(const PatchDataset& labeled,
                                                        ClassifierRole role,
                                                        const TrainConfig& cfg,
                                                        const NetSizes& sizes,
                                                        TrainLog* log = nullptr);

// Evaluation helpers shared by tests and the pipeline.
double mean_roundtrip_l1(const LatentAutoencoder& lae, const PatchDataset& ds,
                         const Decoder* dec_override = nullptr);
double classifier_accuracy(const ImageClassifier& clf, const PatchDataset& ds);

// Deep parameter copy between structurally identical modules.
void copy_params(const nn::Module& from, nn::Module& to);

}  // namespace histodiff
