#pragma once

#include <optional>
#include <string>
#include <utility>

#include "histodiff/nn.hpp"
#include "histodiff/rng.hpp"

namespace histodiff {

// Desk-scale capacities; every width is configurable.
struct NetSizes {
    int image_size = 32;
    int downsample_factor = 4;  // f, power of two
    int latent_channels = 3;    // c
    int lae_base = 32;
    int denoiser_base = 64;
    int time_dim = 32;
    int clf_base = 32;
    int d_feat = 128;
    int attn_hidden = 64;
    int num_classes = 6;
    int max_t = 1000;  // T, for timestep validation in time-conditioned nets
};

int latent_size(const NetSizes& s);  // image_size / downsample_factor

// ---- latent autoencoder ----

class Encoder : public nn::Module {
public:
    Encoder(const NetSizes& s, Rng& rng);

    // x in [0,1]; mapped to [-1,1] internally. Returns (mean, logvar), each
    // [c, H/f, W/f].
    std::pair<ag::Var, ag::Var> forward(ag::Tape& t, const nn::ParamBind& b, ag::Var x) const;

    int factor() const { return factor_; }
    int latent_channels() const { return zc_; }

private:
    int factor_, zc_;
    nn::Conv2d in_, down1_, down2_, out_;
};

class Decoder : public nn::Module {
public:
    Decoder(const NetSizes& s, Rng& rng);

    // z [c,h,w] -> image [3, h*f, w*f] in [0,1] (tanh mapped).
    ag::Var forward(ag::Tape& t, const nn::ParamBind& b, ag::Var z) const;

    int factor() const { return factor_; }

private:
    int factor_, zc_;
    nn::Conv2d in_, up1_, up2_, out_;
};

struct LatentAutoencoder {
    std::unique_ptr<Encoder> encoder;
    std::unique_ptr<Decoder> decoder;
    int factor = 4;

    LatentAutoencoder() = default;
    LatentAutoencoder(const NetSizes& s, uint64_t seed);

    // Frozen-parameter convenience paths (no gradients).
    Tensor encode(const Tensor& x, bool sample, Rng* rng = nullptr) const;
    Tensor decode(const Tensor& z) const;
};

// ---- diffusion denoiser ----

// Time-conditioned conv encoder-decoder over latents: residual blocks at two
// resolutions, self-attention at the coarsest, skip connection across the
// downsample, sinusoidal time embeddings.
class Denoiser : public nn::Module {
public:
    Denoiser(const NetSizes& s, Rng& rng);

    ag::Var forward(ag::Tape& t, const nn::ParamBind& b, ag::Var z_t, int step) const;

    // Frozen-parameter evaluation.
    Tensor denoise(const Tensor& z_t, int step) const;

    int max_t() const { return max_t_; }

private:
    struct ResBlock {
        nn::GroupNorm n1, n2;
        nn::Conv2d c1, c2;
        nn::Linear temb;
        std::optional<nn::Conv2d> skip;
        ag::Var forward(ag::Tape& t, const nn::ParamBind& b, ag::Var x, ag::Var emb) const;
    };

    ResBlock make_block(const std::string& name, int cin, int cout, Rng& rng);

    int max_t_, time_dim_;
    nn::Linear temb1_, temb2_;
    nn::Conv2d conv_in_;
    ResBlock rb_down_, rb_coarse_, rb_mid_, rb_up_;
    nn::Conv2d down_, up_;
    nn::SelfAttention2d attn_;
    nn::GroupNorm out_norm_;
    nn::Conv2d conv_out_;
};

// ---- classifiers ----

// Time-dependent classifier over noisy latents: conv trunk conditioned on t,
// attention pooling over spatial positions, linear head.
class LatentClassifier : public nn::Module {
public:
    LatentClassifier(const NetSizes& s, Rng& rng);

    ag::Var forward(ag::Tape& t, const nn::ParamBind& b, ag::Var z_t, int step) const;
    Tensor classify(const Tensor& z_t, int step) const;  // frozen logits

    int num_classes() const { return num_classes_; }
    int max_t() const { return max_t_; }

private:
    int max_t_, time_dim_, num_classes_;
    nn::Linear temb1_, temb2_, temb_bias_;
    nn::Conv2d c1_, c2_, c3_;
    nn::AttentionPool pool_;
    nn::Linear head_;
};

enum class ClassifierRole { auxiliary, downstream, fid_feature };

std::string role_name(ClassifierRole r);
ClassifierRole role_from_name(const std::string& name);

// Conv trunk + attention pooling + linear head; exposes the penultimate
// d_feat feature vector.
class ImageClassifier : public nn::Module {
public:
    ImageClassifier(const NetSizes& s, ClassifierRole role, Rng& rng);

    // Returns (logits, penultimate feature).
    std::pair<ag::Var, ag::Var> forward(ag::Tape& t, const nn::ParamBind& b, ag::Var x) const;

    Tensor logits(const Tensor& x) const;
    Tensor feature(const Tensor& x) const;
    int predict(const Tensor& x) const;

    ClassifierRole role() const { return role_; }
    int num_classes() const { return num_classes_; }
    int feature_dim() const { return d_feat_; }

private:
    ClassifierRole role_;
    int num_classes_, d_feat_;
    nn::Conv2d c1_, c2_, c3_;
    nn::AttentionPool pool_;
    nn::Linear feat_, head_;
};

// Fixed random conv features standing in for a pretrained perceptual net in
// the reconstruction loss. Parameters are drawn once from the seed and never
// trained.
class PerceptualNet : public nn::Module {
public:
    explicit PerceptualNet(uint64_t seed = 0x9e3779b9);
    ag::Var features(ag::Tape& t, const nn::ParamBind& b, ag::Var x) const;

private:
    nn::Conv2d c1_, c2_, c3_;
};

}  // namespace histodiff
