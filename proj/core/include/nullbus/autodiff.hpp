#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "nullbus/tensor.hpp"

namespace nullbus::ad {

/// One vertex of the backward tape. Values are computed eagerly; the
/// backward closure pulls this node's gradient into its parents.
struct Node {
  Tensor value;
  Tensor grad;
  bool grad_init = false;
  bool requires_grad = false;
  int64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> grad_fn;

  Tensor& grad_buf() {
    if (!grad_init) {
      grad = Tensor::zeros(value.shape());
      grad_init = true;
    }
    return grad;
  }
};

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  /// Leaf with no gradient tracking.
  static Var constant(Tensor value);
  /// Trainable leaf (unless trainable=false, e.g. frozen weights).
  static Var param(Tensor value, bool trainable = true);

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor& value() const { return n_->value; }
  Tensor& value_mut() { return n_->value; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool has_grad() const { return n_ && n_->grad_init; }
  Tensor& grad() { return n_->grad_buf(); }
  void zero_grad() {
    if (n_ && n_->grad_init) fill(n_->grad, 0.0);
  }
  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

bool grad_enabled();

/// Disables tape recording in its scope; forwards run value-only.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Reverse pass from a scalar root. Gradients accumulate into each
/// reachable node's grad buffer (so per-sample backward calls sum).
void backward(const Var& root);

// ---- elementwise & reductions ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var sum(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);     // {m,k}x{k,n} -> {m,n}
Var matmul_nt(const Var& a, const Var& b);  // {m,k}x{n,k}^T -> {m,n}
Var linear_rows(const Var& x, const Var& w, const Var& b);  // {N,in},{out,in},{out}
Var softmax_rows(const Var& x);
Var transpose(const Var& x);
Var reshape(const Var& x, std::vector<int64_t> shape);

// ---- feature-map ops (x is {C,H,W}) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int dilation = 1);
Var depthwise_conv2d(const Var& x, const Var& w, const Var& b, int pad);
Var group_norm(const Var& x, const Var& weight, const Var& bias, int groups, double eps = 1e-5);
Var bilinear_resize(const Var& x, int64_t out_h, int64_t out_w);
Var concat_channels(const std::vector<Var>& xs);
Var global_avg_pool(const Var& x);  // -> {C}
Var film_channels(const Var& x, const Var& gamma, const Var& beta);
Var scale_channels(const Var& x, const Var& s);
Var film_rows(const Var& x, const Var& gamma, const Var& beta);  // {N,D},{D},{D}

}  // namespace nullbus::ad
