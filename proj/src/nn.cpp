#include "histodiff/nn.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace histodiff::nn {

void Module::zero_grad() {
    for (Parameter* p : params_) {
        if (p->grad.size() != p->value.size()) p->grad = Tensor::zeros_like(p->value);
        else p->grad.fill(0.0);
    }
}

size_t Module::num_scalars() const {
    size_t n = 0;
    for (const Parameter* p : params_) n += p->value.size();
    return n;
}

void Module::save_params(std::ostream& os) const {
    for (const Parameter* p : params_)
        os.write(reinterpret_cast<const char*>(p->value.data()),
                 static_cast<std::streamsize>(p->value.size() * sizeof(double)));
}

void Module::load_params(std::istream& is) {
    for (Parameter* p : params_) {
        is.read(reinterpret_cast<char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (!is) throw std::runtime_error("Module::load_params: truncated parameter blob");
    }
}

uint64_t Module::param_digest() const {
    uint64_t h = 1469598103934665603ULL;
    for (const Parameter* p : params_) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
        const size_t n = p->value.size() * sizeof(double);
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

Parameter* Module::add_param(std::string name, std::vector<int> shape) {
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->value = Tensor(std::move(shape));
    Parameter* raw = p.get();
    owned_.push_back(std::move(p));
    params_.push_back(raw);
    return raw;
}

ParamBind::ParamBind(ag::Tape& tape, const std::vector<Parameter*>& params, bool requires_grad)
    : params_(params) {
    leaves_.reserve(params.size());
    for (Parameter* p : params_) {
        ag::Var v = tape.leaf(p->value, requires_grad);
        leaves_.push_back(v);
        by_param_[p] = v;
    }
}

ag::Var ParamBind::operator[](const Parameter* p) const {
    auto it = by_param_.find(p);
    if (it == by_param_.end()) throw std::logic_error("ParamBind: parameter not bound: " + p->name);
    return it->second;
}

void ParamBind::apply_grads() const {
    for (size_t i = 0; i < params_.size(); ++i) {
        Parameter* p = params_[i];
        if (p->grad.size() != p->value.size()) p->grad = Tensor::zeros_like(p->value);
        if (!leaves_[i]->has_grad()) continue;
        for (size_t j = 0; j < p->grad.size(); ++j) p->grad[j] += leaves_[i]->grad[j];
    }
}

std::vector<Tensor> ParamBind::take_grads() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        if (leaves_[i]->has_grad()) out.push_back(leaves_[i]->grad);
        else out.push_back(Tensor::zeros_like(params_[i]->value));
    }
    return out;
}

void accumulate_grads(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw std::logic_error("accumulate_grads: size mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        Parameter* p = params[i];
        if (p->grad.size() != p->value.size()) p->grad = Tensor::zeros_like(p->value);
        for (size_t j = 0; j < p->grad.size(); ++j) p->grad[j] += grads[i][j];
    }
}

static void init_normal(Parameter* p, double std, Rng& rng) {
    for (size_t i = 0; i < p->value.size(); ++i) p->value[i] = std * rng.normal();
}

Conv2d::Conv2d(Module& m, const std::string& name, int cin, int cout, int k, int stride_, int pad_,
               Rng& rng)
    : stride(stride_), pad(pad_) {
    weight = m.add_param(name + ".weight", {cout, cin, k, k});
    bias = m.add_param(name + ".bias", {cout});
    const double fan_in = static_cast<double>(cin) * k * k;
    init_normal(weight, std::sqrt(2.0 / fan_in), rng);
}

ag::Var Conv2d::forward(ag::Tape& t, const ParamBind& b, ag::Var x) const {
    return ag::conv2d(t, x, b[weight], b[bias], stride, pad);
}

Linear::Linear(Module& m, const std::string& name, int in, int out, Rng& rng) {
    weight = m.add_param(name + ".weight", {out, in});
    bias = m.add_param(name + ".bias", {out});
    init_normal(weight, std::sqrt(1.0 / in), rng);
}

ag::Var Linear::forward(ag::Tape& t, const ParamBind& b, ag::Var x) const {
    return ag::add_rowvec(t, ag::matmul(t, x, b[weight], false, true), b[bias]);
}

ag::Var Linear::forward_vec(ag::Tape& t, const ParamBind& b, ag::Var x) const {
    ag::Var row = ag::reshape(t, x, {1, x->val.dim(0)});
    ag::Var y = forward(t, b, row);
    return ag::reshape(t, y, {y->val.dim(1)});
}

GroupNorm::GroupNorm(Module& m, const std::string& name, int channels, int groups_)
    : groups(groups_) {
    gamma = m.add_param(name + ".gamma", {channels});
    beta = m.add_param(name + ".beta", {channels});
    gamma->value.fill(1.0);
}

ag::Var GroupNorm::forward(ag::Tape& t, const ParamBind& b, ag::Var x) const {
    return ag::group_norm(t, x, b[gamma], b[beta], groups);
}

SelfAttention2d::SelfAttention2d(Module& m, const std::string& name, int channels, Rng& rng)
    : q(m, name + ".q", channels, channels, rng),
      k(m, name + ".k", channels, channels, rng),
      v(m, name + ".v", channels, channels, rng),
      proj(m, name + ".proj", channels, channels, rng),
      norm(m, name + ".norm", channels, std::min(4, channels)) {}

ag::Var SelfAttention2d::forward(ag::Tape& t, const ParamBind& b, ag::Var x) const {
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    ag::Var xn = norm.forward(t, b, x);
    ag::Var tokens = ag::transpose(t, ag::reshape(t, xn, {c, h * w}));  // [hw, c]
    ag::Var Q = q.forward(t, b, tokens);
    ag::Var K = k.forward(t, b, tokens);
    ag::Var V = v.forward(t, b, tokens);
    ag::Var attn = ag::softmax_rows(t, ag::scale(t, ag::matmul(t, Q, K, false, true),
                                                 1.0 / std::sqrt(static_cast<double>(c))));
    ag::Var out = proj.forward(t, b, ag::matmul(t, attn, V));
    ag::Var back = ag::reshape(t, ag::transpose(t, out), {c, h, w});
    return ag::add(t, x, back);
}

AttentionPool::AttentionPool(Module& m, const std::string& name, int dim, int hidden, Rng& rng)
    : score_hidden(m, name + ".hidden", dim, hidden, rng) {
    score_vec = m.add_param(name + ".vec", {hidden});
    init_normal(score_vec, std::sqrt(1.0 / hidden), rng);
}

ag::Var AttentionPool::weights(ag::Tape& t, const ParamBind& b, ag::Var feats) const {
    if (feats->val.ndim() != 2 || feats->val.dim(0) < 1)
        throw std::invalid_argument("AttentionPool: need [n,d] with n >= 1");
    ag::Var hid = ag::tanh_op(t, score_hidden.forward(t, b, feats));      // [n,hidden]
    ag::Var vcol = ag::reshape(t, b[score_vec], {score_vec->value.dim(0), 1});
    ag::Var scores = ag::matmul(t, hid, vcol);                            // [n,1]
    return ag::softmax_rows(t, ag::transpose(t, scores));                 // [1,n]
}

ag::Var AttentionPool::forward(ag::Tape& t, const ParamBind& b, ag::Var feats) const {
    ag::Var w = weights(t, b, feats);
    ag::Var pooled = ag::matmul(t, w, feats);  // [1,d]
    return ag::reshape(t, pooled, {feats->val.dim(1)});
}

Tensor sinusoidal_embedding(int t, int dim) {
    if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even");
    Tensor e({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        e[static_cast<size_t>(i)] = std::sin(t * freq);
        e[static_cast<size_t>(half + i)] = std::cos(t * freq);
    }
    return e;
}

void AdamOptimizer::step(const std::vector<Parameter*>& params) {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (Parameter* p : params) {
        if (p->adam_m.size() != p->value.size()) {
            p->adam_m = Tensor::zeros_like(p->value);
            p->adam_v = Tensor::zeros_like(p->value);
        }
        if (p->grad.size() != p->value.size()) continue;
        for (size_t i = 0; i < p->value.size(); ++i) {
            double g = p->grad[i];
            if (!decoupled_ && wd_ != 0.0) g += wd_ * p->value[i];
            p->adam_m[i] = beta1_ * p->adam_m[i] + (1.0 - beta1_) * g;
            p->adam_v[i] = beta2_ * p->adam_v[i] + (1.0 - beta2_) * g * g;
            const double mhat = p->adam_m[i] / bc1;
            const double vhat = p->adam_v[i] / bc2;
            double upd = lr_ * mhat / (std::sqrt(vhat) + eps_);
            if (decoupled_ && wd_ != 0.0) upd += lr_ * wd_ * p->value[i];
            p->value[i] -= upd;
        }
    }
}

}  // namespace histodiff::nn
