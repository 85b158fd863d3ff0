#pragma once

#include <array>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vseg/tensor.hpp"

namespace vseg::ad {

// A named trainable tensor with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Tape;

// Lightweight handle to a tape node.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr; }
  const Tensor<T>& value() const;
};

// Define-by-run reverse-mode tape. One tape per training step; ops append
// nodes, backward() walks them in reverse creation order. Gradients only flow
// into subgraphs that terminate in a trainable Param (or a grad-enabled leaf),
// so a frozen network passes gradients through without accumulating any.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;    // received a gradient during this backward pass
    bool needs_grad = false;  // a trainable leaf lies below this node
    Param<T>* bound = nullptr;
    std::function<void()> backward;
  };

  Var<T> constant(Tensor<T> v) { return make(std::move(v), false, nullptr); }
  // Differentiable non-parameter leaf (used by gradient-check tests).
  Var<T> input(Tensor<T> v) { return make(std::move(v), true, nullptr); }
  Var<T> param(Param<T>& p) { return make(p.value, p.trainable, &p); }

  int make_node(Tensor<T> value, bool needs, std::function<void()> bwd) {
    nodes_.push_back(Node{std::move(value), {}, false, needs, nullptr, std::move(bwd)});
    return int(nodes_.size()) - 1;
  }

  void set_backward(int id, std::function<void()> bwd) {
    nodes_[size_t(id)].backward = std::move(bwd);
  }

  const Tensor<T>& value(int id) const { return nodes_[size_t(id)].value; }
  bool needs(int id) const { return nodes_[size_t(id)].needs_grad; }

  // Gradient accumulator for a node, allocated and zeroed on first touch.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[size_t(id)];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  // Seeds d(root)/d(root) = 1 (root must be scalar) and accumulates gradients
  // into every trainable Param reachable from it.
  void backward(Var<T> root);
  // Seeds an arbitrary gradient at root (same shape as its value).
  void backward(Var<T> root, const Tensor<T>& seed);

  // Gradient received by a node (zeros if none); for tests.
  Tensor<T> grad_of(Var<T> v) const;

  size_t size() const { return nodes_.size(); }

 private:
  Var<T> make(Tensor<T> v, bool needs, Param<T>* bound) {
    nodes_.push_back(Node{std::move(v), {}, false, needs, bound, nullptr});
    return Var<T>{this, int(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// ---- Operators -------------------------------------------------------------

// Convolution, cubic kernel; w shape (K,K,K,Ci,Co), optional bias (Co).
template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad);

// Per-(sample, channel) normalization with learned affine, over spatial dims.
template <typename T>
Var<T> instance_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> leaky_relu(Var<T> x, T slope);
template <typename T>
Var<T> sigmoid(Var<T> x);
template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi);
template <typename T>
Var<T> softmax_channels(Var<T> x);

template <typename T>
Var<T> maxpool3d(Var<T> x, int k, int stride, int pad);
template <typename T>
Var<T> avgpool3d(Var<T> x, std::array<int, 3> f);
template <typename T>
Var<T> upsample3d(Var<T> x, std::array<int, 3> f);

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
// alpha*a + beta*b
template <typename T>
Var<T> linear_comb(T alpha, Var<T> a, T beta, Var<T> b);
// Elementwise product (same shapes).
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> x, T alpha);

// Broadcast product of a single-channel field against every channel of y.
template <typename T>
Var<T> channel_scale(Var<T> x_1ch, Var<T> y);

// Forward: hard one-hot of the per-voxel channel argmax. Backward: identity
// (the gradient passes through as if the soft probabilities had been used).
template <typename T>
Var<T> straight_through_onehot(Var<T> probs);

// Cuts the graph: value flows, gradient does not.
template <typename T>
Var<T> detach(Var<T> x);

template <typename T>
Var<T> sum_all(Var<T> x);  // scalar (shape {1})

// ---- Non-tape helpers ------------------------------------------------------

// Per-voxel channel argmax of (N,Z,H,W,C) into (N,Z,H,W).
template <typename T>
Tensor<uint8_t> argmax_channels(const Tensor<T>& probs);

// (N,Z,H,W) labels to hard one-hot (N,Z,H,W,C).
template <typename T>
Tensor<T> onehot_channels(const Tensor<uint8_t>& labels, int num_classes);

}  // namespace vseg::ad
