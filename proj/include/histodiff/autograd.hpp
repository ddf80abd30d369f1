#pragma once

#include <deque>
#include <functional>

#include "histodiff/tensor.hpp"

// Minimal reverse-mode autodiff over Tensor. A Tape owns the graph for one
// forward pass; nodes are created in forward order and backward() walks them
// in reverse. Gradients accumulate into Node::grad, so leaf gradients are
// read back by the caller after backward().

namespace histodiff::ag {

struct Node {
    Tensor val;
    Tensor grad;  // allocated on first accumulation; same shape as val
    bool requires_grad = false;
    std::function<void(Node&)> backward_fn;  // nullptr for leaves

    bool has_grad() const { return grad.size() != 0; }
    Tensor& ensure_grad() {
        if (!has_grad()) grad = Tensor::zeros_like(val);
        return grad;
    }
};

using Var = Node*;

class Tape {
public:
    Var leaf(Tensor val, bool requires_grad = false) {
        Node& n = nodes_.emplace_back();
        n.val = std::move(val);
        n.requires_grad = requires_grad;
        return &n;
    }

    Var make(Tensor val, std::function<void(Node&)> backward_fn,
             std::initializer_list<Var> parents) {
        Node& n = nodes_.emplace_back();
        n.val = std::move(val);
        for (Var p : parents) n.requires_grad = n.requires_grad || p->requires_grad;
        if (n.requires_grad) n.backward_fn = std::move(backward_fn);
        return &n;
    }

    // Seeds d(loss)/d(loss) = 1 and propagates. loss must be a scalar node.
    void backward(Var loss);

    size_t num_nodes() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;
};

// ---- elementwise / scalar ----
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var add_scalar(Tape& t, Var a, double s);
Var square(Tape& t, Var a);
Var abs_op(Tape& t, Var a);
Var exp_op(Tape& t, Var a);
Var silu(Tape& t, Var a);
Var tanh_op(Tape& t, Var a);

// ---- reductions ----
Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);
Var pick(Tape& t, Var a, size_t index);  // scalar a[index]

// ---- linear algebra ----
Var matmul(Tape& t, Var a, Var b, bool trans_a = false, bool trans_b = false);
Var add_rowvec(Tape& t, Var a, Var v);      // a: [n,d], v: [d]
Var softmax_rows(Tape& t, Var a);           // rowwise softmax of [n,d]
Var transpose(Tape& t, Var a);              // [m,n] -> [n,m]
Var log_softmax(Tape& t, Var a);            // a: [d] vector

// ---- conv / spatial (CHW) ----
Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad);
Var add_channel_bias(Tape& t, Var x, Var bias);  // bias [C] broadcast over HW
Var upsample_nearest2(Tape& t, Var x);
Var concat_channels(Tape& t, Var a, Var b);
Var slice_channels(Tape& t, Var a, int c0, int c1);  // channels [c0, c1)
Var group_norm(Tape& t, Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
Var reshape(Tape& t, Var a, std::vector<int> shape);

}  // namespace histodiff::ag
