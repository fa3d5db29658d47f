#pragma once

#include <functional>
#include <vector>

#include "blab/tensor.hpp"

namespace blab {

// Handle into a Tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode differentiation tape over dense f64 tensors.
//
// Usage: create leaves (constants or parameters), chain ops, call
// backward() on a scalar, read grad() for the leaves you care about, then
// clear() before the next step. Reductions use a fixed sequential order, so
// identical inputs replay to bitwise-identical gradients.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  // Valid after backward(); zero tensor for nodes the loss never reached.
  const Tensor& grad(Var v) { return grad_buf(v.id); }
  bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

  // --- elementwise and reshaping ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var exp(Var a);
  Var sigmoid(Var a);
  Var relu(Var a);
  Var sum(Var a);
  Var mean_all(Var a);
  Var mean_axis(Var a, int axis);
  Var l2norm(Var a);
  Var reshape(Var a, std::vector<int> shape);
  Var rows(Var a, std::vector<int> idx);  // gather rows of a 2-D tensor
  // Values of `values` reordered by ascending `keys`; the permutation is
  // treated as a constant during backward, keys receive no gradient.
  Var sort_by_key(Var keys, Var values);

  // --- linear algebra ---
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
  Var affine(Var x, Var w, Var b);          // x:(n,in) w:(out,in) b:(out) -> (n,out)
  Var pairwise_sqdist(Var x, Var y);        // (m,d),(n,d) -> (m,n)

  // --- network layers ---
  Var conv2d(Var x, Var w, Var bias, int pad);  // x:(N,Ci,H,W) w:(Co,Ci,kh,kw)
  Var maxpool2x2(Var x);
  Var global_avg_pool(Var x);               // (N,C,H,W) -> (N,C)
  Var batchnorm_train(Var x, Var gamma, Var beta, Tensor& running_mean,
                      Tensor& running_var, double momentum, double eps = 1e-5);
  Var batchnorm_eval(Var x, Var gamma, Var beta, const Tensor& running_mean,
                     const Tensor& running_var, double eps = 1e-5);
  Var softmax_cross_entropy(Var logits, std::vector<int> labels);  // mean CE
  Var channel_mask(Var x, Tensor mask);     // (N,C,H,W) scaled per channel
  // Patched-trigger fusion (1-m) * x + m * b with a 2-D mask broadcast over
  // channels; gradients flow to mask and pattern (and x if it is a graph node).
  Var mask_patch(Var x, Var mask, Var pattern);

  void backward(Var loss);
  void clear();
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::function<void(Tape&)> backprop;  // empty for leaves/constants
  };

  Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop);
  Tensor& grad_buf(int id);
  void accumulate(int id, const double* g, int n);

  std::vector<Node> nodes_;
};

}  // namespace blab
