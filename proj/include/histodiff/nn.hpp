#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "histodiff/autograd.hpp"
#include "histodiff/rng.hpp"
#include "histodiff/tensor.hpp"

namespace histodiff::nn {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m, adam_v;
};

// Flat registry of named parameters; modules register their Parameters here
// in construction order, which fixes the checkpoint layout.
class Module {
public:
    virtual ~Module() = default;

    const std::vector<Parameter*>& parameters() const { return params_; }

    void zero_grad();
    size_t num_scalars() const;

    // Raw little-endian doubles in registration order.
    void save_params(std::ostream& os) const;
    void load_params(std::istream& is);

    // FNV-1a over the parameter bytes; used for freeze checks.
    uint64_t param_digest() const;

    Parameter* add_param(std::string name, std::vector<int> shape);

private:
    std::vector<std::unique_ptr<Parameter>> owned_;
    std::vector<Parameter*> params_;
};

// Binds a module's parameters to tape leaves for one forward pass. Gradients
// land on the leaves, so per-sample gradients can be collected and reduced
// in a deterministic order outside the tape.
class ParamBind {
public:
    ParamBind(ag::Tape& tape, const std::vector<Parameter*>& params, bool requires_grad);

    ag::Var operator[](const Parameter* p) const;

    // Adds leaf gradients into Parameter::grad (single-threaded use).
    void apply_grads() const;

    // Copies leaf gradients out, aligned with the parameter list.
    std::vector<Tensor> take_grads() const;

private:
    std::vector<Parameter*> params_;
    std::vector<ag::Var> leaves_;
    std::unordered_map<const Parameter*, ag::Var> by_param_;
};

void accumulate_grads(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads);

// ---- layers ----

struct Conv2d {
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(Module& m, const std::string& name, int cin, int cout, int k, int stride, int pad, Rng& rng);
    ag::Var forward(ag::Tape& t, const ParamBind& b, ag::Var x) const;
};

struct Linear {
    Parameter* weight = nullptr;  // [out, in]
    Parameter* bias = nullptr;

    Linear() = default;
    Linear(Module& m, const std::string& name, int in, int out, Rng& rng);
    ag::Var forward(ag::Tape& t, const ParamBind& b, ag::Var x) const;  // x: [n,in]
    ag::Var forward_vec(ag::Tape& t, const ParamBind& b, ag::Var x) const;  // x: [in]
};

struct GroupNorm {
    Parameter* gamma = nullptr;
    Parameter* beta = nullptr;
    int groups = 1;

    GroupNorm() = default;
    GroupNorm(Module& m, const std::string& name, int channels, int groups);
    ag::Var forward(ag::Tape& t, const ParamBind& b, ag::Var x) const;
};

// Single-head self-attention over the spatial positions of a CHW map.
struct SelfAttention2d {
    Linear q, k, v, proj;
    GroupNorm norm;

    SelfAttention2d() = default;
    SelfAttention2d(Module& m, const std::string& name, int channels, Rng& rng);
    ag::Var forward(ag::Tape& t, const ParamBind& b, ag::Var x) const;  // residual inside
};

// Learned convex combination of n feature rows: softmax(v . tanh(W f + b)).
struct AttentionPool {
    Linear score_hidden;
    Parameter* score_vec = nullptr;  // [hidden]

    AttentionPool() = default;
    AttentionPool(Module& m, const std::string& name, int dim, int hidden, Rng& rng);
    ag::Var weights(ag::Tape& t, const ParamBind& b, ag::Var feats) const;  // [1,n]
    ag::Var forward(ag::Tape& t, const ParamBind& b, ag::Var feats) const;  // [n,d] -> [d]
};

// Sinusoidal position embedding of a timestep, length dim (dim even).
Tensor sinusoidal_embedding(int t, int dim);

// Adam / AdamW (decoupled weight decay).
class AdamOptimizer {
public:
    AdamOptimizer(double lr, bool decoupled_weight_decay = false, double weight_decay = 0.0,
                  double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), decoupled_(decoupled_weight_decay), wd_(weight_decay),
          beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Parameter*>& params);
    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_;
    bool decoupled_;
    double wd_, beta1_, beta2_, eps_;
    long step_count_ = 0;
};

}  // namespace histodiff::nn
