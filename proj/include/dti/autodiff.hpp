#pragma once

#include <functional>
#include <memory>

#include "dti/tensor.hpp"

namespace dti::ad {

// Reverse-mode autodiff over Tensor. The graph is dynamic: every op returns
// a fresh Node holding its value, its parents and a closure that scatters
// the node's gradient back into the parents.
struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.numel() == 0) grad = Tensor(value.shape());
        return grad;
    }
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor v);
Var leaf(Tensor v);  // parameter: requires_grad = true

// Builds an op node; the closure receives the node and scatter-adds into
// the parents' grads. Used by every op, including the custom ones in the
// transform modules.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw);

// Runs backpropagation from a scalar root (seeds d(root)/d(root) = 1).
void backward(const Var& root);

// Elementwise / scalar ops
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var mul_scalar(const Var& a, float c);
Var add_scalar(const Var& a, float c);
Var square(const Var& a);
Var vlog(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);

// Multiply by a constant tensor of the same shape (e.g. masks, weights).
Var mul_const(const Var& a, const Tensor& w);

// Reductions / reshapes
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);
// sum(a * w) for constant w, as a scalar; the workhorse for assembling
// masked losses without materializing NxK graphs.
Var dot_const(const Var& a, const Tensor& w);
// Per-sample weighted sum: a [N, D...], w constant of size D (empty = all
// ones); returns [N] with out[i] = sum_d a[i,d] * w[d].
Var rowsum_weighted(const Var& a, const Tensor& w);
// Rows of an [N, ...] tensor; backward scatter-adds.
Var index_select(const Var& a, const std::vector<int>& rows);

// Linear algebra
Var matmul(const Var& a, const Var& b);                       // [N,K]x[K,M]
Var linear(const Var& x, const Var& w, const Var& b);         // x[N,F], w[O,F], b[O]

// log softmax over a 1-D vector (mixing logits)
Var log_softmax(const Var& a);

// Diagonal Gaussian log density per row: x const [N,D], mu/var Vars [N,D]
// (var must already include any floor). Returns [N].
Var gauss_logdensity(const Tensor& x, const Var& mu, const Var& var);

// Finite-difference gradient check utility (test support): returns max
// relative error between analytic and central-difference gradients of the
// scalar produced by `f` w.r.t. the entries of leaf `p`.
double gradcheck(const std::function<Var()>& f, const Var& p, float eps = 1e-3f);

}  // namespace dti::ad
