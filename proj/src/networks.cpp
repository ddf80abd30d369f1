#include "histodiff/networks.hpp"

#include <cmath>
#include <stdexcept>

namespace histodiff {

int latent_size(const NetSizes& s) {
    if (s.image_size % s.downsample_factor != 0)
        throw std::invalid_argument("latent_size: image_size not divisible by factor");
    return s.image_size / s.downsample_factor;
}

static int norm_groups(int channels) { return channels % 4 == 0 ? 4 : 1; }

// ---- Encoder / Decoder ----

Encoder::Encoder(const NetSizes& s, Rng& rng)
    : factor_(s.downsample_factor), zc_(s.latent_channels) {
    if (factor_ != 4)
        throw std::invalid_argument("Encoder: only downsample factor 4 is implemented");
    const int w = s.lae_base;
    in_ = nn::Conv2d(*this, "enc.in", 3, w, 3, 1, 1, rng);
    down1_ = nn::Conv2d(*this, "enc.down1", w, 2 * w, 3, 2, 1, rng);
    down2_ = nn::Conv2d(*this, "enc.down2", 2 * w, 2 * w, 3, 2, 1, rng);
    out_ = nn::Conv2d(*this, "enc.out", 2 * w, 2 * zc_, 3, 1, 1, rng);
}

std::pair<ag::Var, ag::Var> Encoder::forward(ag::Tape& t, const nn::ParamBind& b, ag::Var x) const {
    if (x->val.ndim() != 3 || x->val.dim(0) != 3)
        throw std::invalid_argument("Encoder: expected [3,H,W], got " + x->val.shape_str());
    if (x->val.dim(1) % factor_ != 0 || x->val.dim(2) % factor_ != 0)
        throw std::invalid_argument("Encoder: image shape not divisible by factor");
    // pixel domain [0,1] -> model domain [-1,1]; the single conversion point
    ag::Var h = ag::add_scalar(t, ag::scale(t, x, 2.0), -1.0);
    h = ag::silu(t, in_.forward(t, b, h));
    h = ag::silu(t, down1_.forward(t, b, h));
    h = ag::silu(t, down2_.forward(t, b, h));
    ag::Var mv = out_.forward(t, b, h);
    return {ag::slice_channels(t, mv, 0, zc_), ag::slice_channels(t, mv, zc_, 2 * zc_)};
}

Decoder::Decoder(const NetSizes& s, Rng& rng)
    : factor_(s.downsample_factor), zc_(s.latent_channels) {
    if (factor_ != 4)
        throw std::invalid_argument("Decoder: only downsample factor 4 is implemented");
    const int w = s.lae_base;
    in_ = nn::Conv2d(*this, "dec.in", zc_, 2 * w, 3, 1, 1, rng);
    up1_ = nn::Conv2d(*this, "dec.up1", 2 * w, w, 3, 1, 1, rng);
    up2_ = nn::Conv2d(*this, "dec.up2", w, w, 3, 1, 1, rng);
    out_ = nn::Conv2d(*this, "dec.out", w, 3, 3, 1, 1, rng);
}

ag::Var Decoder::forward(ag::Tape& t, const nn::ParamBind& b, ag::Var z) const {
    if (z->val.ndim() != 3 || z->val.dim(0) != zc_)
        throw std::invalid_argument("Decoder: wrong latent shape " + z->val.shape_str());
    ag::Var h = ag::silu(t, in_.forward(t, b, z));
    h = ag::silu(t, up1_.forward(t, b, ag::upsample_nearest2(t, h)));
    h = ag::silu(t, up2_.forward(t, b, ag::upsample_nearest2(t, h)));
    ag::Var y = ag::tanh_op(t, out_.forward(t, b, h));
    return ag::add_scalar(t, ag::scale(t, y, 0.5), 0.5);  // back to [0,1]
}

LatentAutoencoder::LatentAutoencoder(const NetSizes& s, uint64_t seed) : factor(s.downsample_factor) {
    Rng rng(derive_seed(seed, 0xAE));
    encoder = std::make_unique<Encoder>(s, rng);
    decoder = std::make_unique<Decoder>(s, rng);
}

Tensor LatentAutoencoder::encode(const Tensor& x, bool sample, Rng* rng) const {
    ag::Tape t;
    nn::ParamBind b(t, encoder->parameters(), false);
    auto [mean, logvar] = encoder->forward(t, b, t.leaf(x));
    if (!sample) return mean->val;
    if (!rng) throw std::invalid_argument("LatentAutoencoder::encode: sampling requires rng");
    Tensor z = mean->val;
    for (size_t i = 0; i < z.size(); ++i)
        z[i] += std::exp(0.5 * logvar->val[i]) * rng->normal();
    return z;
}

Tensor LatentAutoencoder::decode(const Tensor& z) const {
    ag::Tape t;
    nn::ParamBind b(t, decoder->parameters(), false);
    return decoder->forward(t, b, t.leaf(z))->val;
}

// ---- Denoiser ----

Denoiser::ResBlock Denoiser::make_block(const std::string& name, int cin, int cout, Rng& rng) {
    ResBlock rb;
    rb.n1 = nn::GroupNorm(*this, name + ".n1", cin, norm_groups(cin));
    rb.c1 = nn::Conv2d(*this, name + ".c1", cin, cout, 3, 1, 1, rng);
    rb.temb = nn::Linear(*this, name + ".temb", time_dim_, cout, rng);
    rb.n2 = nn::GroupNorm(*this, name + ".n2", cout, norm_groups(cout));
    rb.c2 = nn::Conv2d(*this, name + ".c2", cout, cout, 3, 1, 1, rng);
    if (cin != cout) rb.skip = nn::Conv2d(*this, name + ".skip", cin, cout, 1, 1, 0, rng);
    return rb;
}

ag::Var Denoiser::ResBlock::forward(ag::Tape& t, const nn::ParamBind& b, ag::Var x,
                                    ag::Var emb) const {
    ag::Var h = c1.forward(t, b, ag::silu(t, n1.forward(t, b, x)));
    h = ag::add_channel_bias(t, h, temb.forward_vec(t, b, emb));
    h = c2.forward(t, b, ag::silu(t, n2.forward(t, b, h)));
    ag::Var res = skip ? skip->forward(t, b, x) : x;
    return ag::add(t, h, res);
}

Denoiser::Denoiser(const NetSizes& s, Rng& rng) : max_t_(s.max_t), time_dim_(s.time_dim) {
    const int w = s.denoiser_base;
    temb1_ = nn::Linear(*this, "dn.temb1", time_dim_, time_dim_, rng);
    temb2_ = nn::Linear(*this, "dn.temb2", time_dim_, time_dim_, rng);
    conv_in_ = nn::Conv2d(*this, "dn.in", s.latent_channels, w, 3, 1, 1, rng);
    rb_down_ = make_block("dn.rb_down", w, w, rng);
    down_ = nn::Conv2d(*this, "dn.down", w, w, 3, 2, 1, rng);
    rb_coarse_ = make_block("dn.rb_coarse", w, 2 * w, rng);
    attn_ = nn::SelfAttention2d(*this, "dn.attn", 2 * w, rng);
    rb_mid_ = make_block("dn.rb_mid", 2 * w, 2 * w, rng);
    up_ = nn::Conv2d(*this, "dn.up", 2 * w, w, 3, 1, 1, rng);
    rb_up_ = make_block("dn.rb_up", 2 * w, w, rng);
    out_norm_ = nn::GroupNorm(*this, "dn.out_norm", w, norm_groups(w));
    conv_out_ = nn::Conv2d(*this, "dn.out", w, s.latent_channels, 3, 1, 1, rng);
}

ag::Var Denoiser::forward(ag::Tape& t, const nn::ParamBind& b, ag::Var z_t, int step) const {
    if (step < 1 || step > max_t_)
        throw std::invalid_argument("Denoiser: timestep " + std::to_string(step) + " out of range");
    ag::Var e = t.leaf(nn::sinusoidal_embedding(step, time_dim_));
    e = temb2_.forward_vec(t, b, ag::silu(t, temb1_.forward_vec(t, b, e)));

    ag::Var h0 = conv_in_.forward(t, b, z_t);
    ag::Var h1 = rb_down_.forward(t, b, h0, e);
    ag::Var h2 = rb_coarse_.forward(t, b, down_.forward(t, b, h1), e);
    h2 = attn_.forward(t, b, h2);
    h2 = rb_mid_.forward(t, b, h2, e);
    ag::Var u = up_.forward(t, b, ag::upsample_nearest2(t, h2));
    ag::Var merged = rb_up_.forward(t, b, ag::concat_channels(t, u, h1), e);
    return conv_out_.forward(t, b, ag::silu(t, out_norm_.forward(t, b, merged)));
}

Tensor Denoiser::denoise(const Tensor& z_t, int step) const {
    ag::Tape t;
    nn::ParamBind b(t, parameters(), false);
    return forward(t, b, t.leaf(z_t), step)->val;
}

// ---- LatentClassifier ----

LatentClassifier::LatentClassifier(const NetSizes& s, Rng& rng)
    : max_t_(s.max_t), time_dim_(s.time_dim), num_classes_(s.num_classes) {
    const int w = s.clf_base;
    temb1_ = nn::Linear(*this, "lc.temb1", time_dim_, time_dim_, rng);
    temb2_ = nn::Linear(*this, "lc.temb2", time_dim_, time_dim_, rng);
    temb_bias_ = nn::Linear(*this, "lc.temb_bias", time_dim_, w, rng);
    c1_ = nn::Conv2d(*this, "lc.c1", s.latent_channels, w, 3, 1, 1, rng);
    c2_ = nn::Conv2d(*this, "lc.c2", w, 2 * w, 3, 2, 1, rng);
    c3_ = nn::Conv2d(*this, "lc.c3", 2 * w, 2 * w, 3, 1, 1, rng);
    pool_ = nn::AttentionPool(*this, "lc.pool", 2 * w, s.attn_hidden, rng);
    head_ = nn::Linear(*this, "lc.head", 2 * w, num_classes_, rng);
}

ag::Var LatentClassifier::forward(ag::Tape& t, const nn::ParamBind& b, ag::Var z_t,
                                  int step) const {
    if (step < 1 || step > max_t_)
        throw std::invalid_argument("LatentClassifier: timestep out of range");
    ag::Var e = t.leaf(nn::sinusoidal_embedding(step, time_dim_));
    e = temb2_.forward_vec(t, b, ag::silu(t, temb1_.forward_vec(t, b, e)));

    ag::Var h = c1_.forward(t, b, z_t);
    h = ag::add_channel_bias(t, h, temb_bias_.forward_vec(t, b, e));
    h = ag::silu(t, h);
    h = ag::silu(t, c2_.forward(t, b, h));
    h = ag::silu(t, c3_.forward(t, b, h));

    const int c = h->val.dim(0), n = h->val.dim(1) * h->val.dim(2);
    ag::Var tokens = ag::transpose(t, ag::reshape(t, h, {c, n}));
    ag::Var pooled = pool_.forward(t, b, tokens);
    return head_.forward_vec(t, b, pooled);
}

Tensor LatentClassifier::classify(const Tensor& z_t, int step) const {
    ag::Tape t;
    nn::ParamBind b(t, parameters(), false);
    return forward(t, b, t.leaf(z_t), step)->val;
}

// ---- ImageClassifier ----

std::string role_name(ClassifierRole r) {
    switch (r) {
        case ClassifierRole::auxiliary: return "auxiliary";
        case ClassifierRole::downstream: return "downstream";
        case ClassifierRole::fid_feature: return "fid-feature";
    }
    throw std::logic_error("role_name: bad role");
}

ClassifierRole role_from_name(const std::string& name) {
    if (name == "auxiliary") return ClassifierRole::auxiliary;
    if (name == "downstream") return ClassifierRole::downstream;
    if (name == "fid-feature") return ClassifierRole::fid_feature;
    throw std::invalid_argument("role_from_name: unknown role " + name);
}

ImageClassifier::ImageClassifier(const NetSizes& s, ClassifierRole role, Rng& rng)
    : role_(role), num_classes_(s.num_classes), d_feat_(s.d_feat) {
    const int w = s.clf_base;
    c1_ = nn::Conv2d(*this, "ic.c1", 3, w, 3, 2, 1, rng);
    c2_ = nn::Conv2d(*this, "ic.c2", w, 2 * w, 3, 2, 1, rng);
    c3_ = nn::Conv2d(*this, "ic.c3", 2 * w, 4 * w, 3, 2, 1, rng);
    pool_ = nn::AttentionPool(*this, "ic.pool", 4 * w, s.attn_hidden, rng);
    feat_ = nn::Linear(*this, "ic.feat", 4 * w, d_feat_, rng);
    head_ = nn::Linear(*this, "ic.head", d_feat_, num_classes_, rng);
}

std::pair<ag::Var, ag::Var> ImageClassifier::forward(ag::Tape& t, const nn::ParamBind& b,
                                                     ag::Var x) const {
    ag::Var h = ag::add_scalar(t, ag::scale(t, x, 2.0), -1.0);
    h = ag::silu(t, c1_.forward(t, b, h));
    h = ag::silu(t, c2_.forward(t, b, h));
    h = ag::silu(t, c3_.forward(t, b, h));
    const int c = h->val.dim(0), n = h->val.dim(1) * h->val.dim(2);
    ag::Var tokens = ag::transpose(t, ag::reshape(t, h, {c, n}));
    ag::Var pooled = pool_.forward(t, b, tokens);
    ag::Var feat = ag::silu(t, feat_.forward_vec(t, b, pooled));
    ag::Var logits = head_.forward_vec(t, b, feat);
    return {logits, feat};
}

Tensor ImageClassifier::logits(const Tensor& x) const {
    ag::Tape t;
    nn::ParamBind b(t, parameters(), false);
    return forward(t, b, t.leaf(x)).first->val;
}

Tensor ImageClassifier::feature(const Tensor& x) const {
    ag::Tape t;
    nn::ParamBind b(t, parameters(), false);
    return forward(t, b, t.leaf(x)).second->val;
}

int ImageClassifier::predict(const Tensor& x) const {
    Tensor l = logits(x);
    int best = 0;
    for (int k = 1; k < num_classes_; ++k)
        if (l[static_cast<size_t>(k)] > l[static_cast<size_t>(best)]) best = k;
    return best;
}

// ---- PerceptualNet ----

PerceptualNet::PerceptualNet(uint64_t seed) {
    Rng rng(seed);
    c1_ = nn::Conv2d(*this, "perc.c1", 3, 8, 3, 1, 1, rng);
    c2_ = nn::Conv2d(*this, "perc.c2", 8, 16, 3, 2, 1, rng);
    c3_ = nn::Conv2d(*this, "perc.c3", 16, 16, 3, 2, 1, rng);
}

ag::Var PerceptualNet::features(ag::Tape& t, const nn::ParamBind& b, ag::Var x) const {
    ag::Var h = ag::silu(t, c1_.forward(t, b, x));
    h = ag::silu(t, c2_.forward(t, b, h));
    return c3_.forward(t, b, h);
}

}  // namespace histodiff
