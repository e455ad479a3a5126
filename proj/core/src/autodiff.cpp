#include "nullbus/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace nullbus::ad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

thread_local bool g_grad_enabled = true;
thread_local int64_t g_seq = 0;

std::shared_ptr<Node> make_node(Tensor value, const std::vector<Var>& parents,
                                std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->seq = ++g_seq;
  bool any = false;
  for (const auto& p : parents)
    if (p.defined() && p.node()->requires_grad) any = true;
  if (g_grad_enabled && any) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->grad_fn = std::move(fn);
  }
  return n;
}

bool wants_grad(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

struct AxisWeights {
  std::vector<int64_t> i0, i1;
  std::vector<double> w0, w1;
};

AxisWeights bilinear_axis(int64_t in, int64_t out) {
  AxisWeights a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w0.resize(out);
  a.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    const double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const double f = std::floor(s);
    double t = s - f;
    int64_t lo = static_cast<int64_t>(f);
    int64_t hi = lo + 1;
    if (lo < 0) {
      lo = 0;
      hi = 0;
      t = 0.0;
    }
    if (hi > in - 1) {
      hi = in - 1;
      if (lo > in - 1) lo = in - 1;
      if (lo == hi) t = 0.0;
    }
    a.i0[o] = lo;
    a.i1[o] = hi;
    a.w0[o] = 1.0 - t;
    a.w1[o] = t;
  }
  return a;
}

}  // namespace

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->seq = ++g_seq;
  return Var(n);
}

Var Var::param(Tensor value, bool trainable) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->seq = ++g_seq;
  n->requires_grad = trainable;
  return Var(n);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Var& root) {
  if (!root.defined()) throw std::logic_error("backward: undefined root");
  if (root.value().numel() != 1) throw std::logic_error("backward: root must be scalar");
  if (!root.requires_grad()) return;

  // Collect the reachable grad-requiring subgraph, then run in reverse
  // creation order (creation order is already topological).
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{root.node()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p && p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  root.node()->grad_buf()[0] += 1.0;
  for (const auto& n : order) {
    if (n->grad_fn && n->grad_init) n->grad_fn(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  axpy(out, 1.0, b.value());
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (wants_grad(pa)) axpy(pa->grad_buf(), 1.0, n.grad);
    if (wants_grad(pb)) axpy(pb->grad_buf(), 1.0, n.grad);
  }));
}

Var sub(const Var& a, const Var& b) {
  check_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  axpy(out, -1.0, b.value());
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (wants_grad(pa)) axpy(pa->grad_buf(), 1.0, n.grad);
    if (wants_grad(pb)) axpy(pb->grad_buf(), -1.0, n.grad);
  }));
}

Var mul(const Var& a, const Var& b) {
  check_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (wants_grad(pa)) {
      Tensor& g = pa->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += pb->value[i] * n.grad[i];
    }
    if (wants_grad(pb)) {
      Tensor& g = pb->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += pa->value[i] * n.grad[i];
    }
  }));
}

Var div(const Var& a, const Var& b) {
  check_same_shape("div", a.value(), b.value());
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (wants_grad(pa)) {
      Tensor& g = pa->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / pb->value[i];
    }
    if (wants_grad(pb)) {
      Tensor& g = pb->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) {
        const double bi = pb->value[i];
        g[i] -= n.grad[i] * pa->value[i] / (bi * bi);
      }
    }
  }));
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
  auto pa = a.node();
  return Var(make_node(std::move(out), {a}, [pa](Node& n) {
    if (wants_grad(pa)) axpy(pa->grad_buf(), 1.0, n.grad);
  }));
}

Var mul_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  auto pa = a.node();
  return Var(make_node(std::move(out), {a}, [pa, s](Node& n) {
    if (wants_grad(pa)) axpy(pa->grad_buf(), s, n.grad);
  }));
}

Var sum(const Var& a) {
  Tensor out = Tensor::scalar(nullbus::sum(a.value()));
  auto pa = a.node();
  return Var(make_node(std::move(out), {a}, [pa](Node& n) {
    if (wants_grad(pa)) {
      Tensor& g = pa->grad_buf();
      const double s = n.grad[0];
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += s;
    }
  }));
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  auto pa = a.node();
  return Var(make_node(std::move(out), {a}, [pa](Node& n) {
    if (wants_grad(pa)) {
      Tensor& g = pa->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i)
        if (pa->value[i] > 0.0) g[i] += n.grad[i];
    }
  }));
}

Var tanh(const Var& a) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  Tensor saved = out;
  auto pa = a.node();
  return Var(make_node(std::move(out), {a}, [pa, saved](Node& n) {
    if (wants_grad(pa)) {
      Tensor& g = pa->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += (1.0 - saved[i] * saved[i]) * n.grad[i];
    }
  }));
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  Tensor saved = out;
  auto pa = a.node();
  return Var(make_node(std::move(out), {a}, [pa, saved](Node& n) {
    if (wants_grad(pa)) {
      Tensor& g = pa->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += saved[i] * (1.0 - saved[i]) * n.grad[i];
    }
  }));
}

// ------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw std::invalid_argument("matmul: bad shapes " + A.shape_str() + " x " + B.shape_str());
  const int64_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  MapM(out.data(), m, n).noalias() = MapC(A.data(), m, k) * MapC(B.data(), k, n);
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {a, b}, [pa, pb, m, k, n](Node& nd) {
    MapC dC(nd.grad.data(), m, n);
    if (wants_grad(pa)) {
      MapM dA(pa->grad_buf().data(), m, k);
      dA.noalias() += dC * MapC(pb->value.data(), k, n).transpose();
    }
    if (wants_grad(pb)) {
      MapM dB(pb->grad_buf().data(), k, n);
      dB.noalias() += MapC(pa->value.data(), m, k).transpose() * dC;
    }
  }));
}

Var matmul_nt(const Var& a, const Var& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1))
    throw std::invalid_argument("matmul_nt: bad shapes " + A.shape_str() + " x " + B.shape_str());
  const int64_t m = A.dim(0), k = A.dim(1), n = B.dim(0);
  Tensor out({m, n});
  MapM(out.data(), m, n).noalias() =
      MapC(A.data(), m, k) * MapC(B.data(), n, k).transpose();
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {a, b}, [pa, pb, m, k, n](Node& nd) {
    MapC dC(nd.grad.data(), m, n);
    if (wants_grad(pa)) {
      MapM dA(pa->grad_buf().data(), m, k);
      dA.noalias() += dC * MapC(pb->value.data(), n, k);
    }
    if (wants_grad(pb)) {
      MapM dB(pb->grad_buf().data(), n, k);
      dB.noalias() += dC.transpose() * MapC(pa->value.data(), m, k);
    }
  }));
}

Var linear_rows(const Var& x, const Var& w, const Var& b) {
  const auto& X = x.value();
  const auto& W = w.value();
  const auto& B = b.value();
  if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(1) || B.dim(0) != W.dim(0))
    throw std::invalid_argument("linear_rows: bad shapes " + X.shape_str() + ", " +
                                W.shape_str() + ", " + B.shape_str());
  const int64_t N = X.dim(0), in = X.dim(1), out_dim = W.dim(0);
  Tensor out({N, out_dim});
  MapM Y(out.data(), N, out_dim);
  Y.noalias() = MapC(X.data(), N, in) * MapC(W.data(), out_dim, in).transpose();
  for (int64_t r = 0; r < N; ++r)
    for (int64_t c = 0; c < out_dim; ++c) out.at(r, c) += B[c];
  auto px = x.node(), pw = w.node(), pb = b.node();
  return Var(make_node(std::move(out), {x, w, b}, [px, pw, pb, N, in, out_dim](Node& nd) {
    MapC dY(nd.grad.data(), N, out_dim);
    if (wants_grad(px)) {
      MapM dX(px->grad_buf().data(), N, in);
      dX.noalias() += dY * MapC(pw->value.data(), out_dim, in);
    }
    if (wants_grad(pw)) {
      MapM dW(pw->grad_buf().data(), out_dim, in);
      dW.noalias() += dY.transpose() * MapC(px->value.data(), N, in);
    }
    if (wants_grad(pb)) {
      Tensor& db = pb->grad_buf();
      for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < out_dim; ++c) db[c] += nd.grad.at(r, c);
    }
  }));
}

Var softmax_rows(const Var& x) {
  const auto& X = x.value();
  if (X.rank() != 2) throw std::invalid_argument("softmax_rows: expected matrix");
  const int64_t N = X.dim(0), M = X.dim(1);
  Tensor out = X;
  for (int64_t r = 0; r < N; ++r) {
    double mx = out.at(r, 0);
    for (int64_t c = 1; c < M; ++c) mx = std::max(mx, out.at(r, c));
    double s = 0.0;
    for (int64_t c = 0; c < M; ++c) {
      const double e = std::exp(out.at(r, c) - mx);
      out.at(r, c) = e;
      s += e;
    }
    for (int64_t c = 0; c < M; ++c) out.at(r, c) /= s;
  }
  Tensor saved = out;
  auto px = x.node();
  return Var(make_node(std::move(out), {x}, [px, saved, N, M](Node& nd) {
    if (!wants_grad(px)) return;
    Tensor& g = px->grad_buf();
    for (int64_t r = 0; r < N; ++r) {
      double acc = 0.0;
      for (int64_t c = 0; c < M; ++c) acc += nd.grad.at(r, c) * saved.at(r, c);
      for (int64_t c = 0; c < M; ++c)
        g.at(r, c) += saved.at(r, c) * (nd.grad.at(r, c) - acc);
    }
  }));
}

Var transpose(const Var& x) {
  const auto& X = x.value();
  if (X.rank() != 2) throw std::invalid_argument("transpose: expected matrix");
  const int64_t N = X.dim(0), M = X.dim(1);
  Tensor out({M, N});
  for (int64_t r = 0; r < N; ++r)
    for (int64_t c = 0; c < M; ++c) out.at(c, r) = X.at(r, c);
  auto px = x.node();
  return Var(make_node(std::move(out), {x}, [px, N, M](Node& nd) {
    if (!wants_grad(px)) return;
    Tensor& g = px->grad_buf();
    for (int64_t r = 0; r < N; ++r)
      for (int64_t c = 0; c < M; ++c) g.at(r, c) += nd.grad.at(c, r);
  }));
}

Var reshape(const Var& x, std::vector<int64_t> shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  auto px = x.node();
  return Var(make_node(std::move(out), {x}, [px](Node& nd) {
    if (!wants_grad(px)) return;
    Tensor& g = px->grad_buf();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
  }));
}

// ------------------------------------------------------------ feature maps

namespace {

struct ConvDims {
  int64_t cin, h, w, cout, kh, kw, oh, ow;
  int stride, pad, dilation;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad, int dilation) {
  if (x.rank() != 3 || w.rank() != 4)
    throw std::invalid_argument("conv2d: expected x {C,H,W}, w {Cout,Cin,kh,kw}");
  ConvDims d;
  d.cin = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.dilation = dilation;
  if (w.dim(1) != d.cin)
    throw std::invalid_argument("conv2d: channel mismatch, x " + x.shape_str() + " w " +
                                w.shape_str());
  d.oh = (d.h + 2 * pad - dilation * (d.kh - 1) - 1) / stride + 1;
  d.ow = (d.w + 2 * pad - dilation * (d.kw - 1) - 1) / stride + 1;
  if (d.oh <= 0 || d.ow <= 0) throw std::invalid_argument("conv2d: empty output");
  return d;
}

// col layout: {Cin*kh*kw, OH*OW}
std::vector<double> im2col(const Tensor& x, const ConvDims& d) {
  const int64_t K = d.cin * d.kh * d.kw;
  const int64_t P = d.oh * d.ow;
  std::vector<double> col(static_cast<size_t>(K * P), 0.0);
  for (int64_t c = 0; c < d.cin; ++c) {
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        const int64_t row = (c * d.kh + ki) * d.kw + kj;
        double* dst = col.data() + row * P;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          const int64_t iy = oy * d.stride - d.pad + ki * d.dilation;
          if (iy < 0 || iy >= d.h) continue;
          for (int64_t ox = 0; ox < d.ow; ++ox) {
            const int64_t ix = ox * d.stride - d.pad + kj * d.dilation;
            if (ix < 0 || ix >= d.w) continue;
            dst[oy * d.ow + ox] = x.at(c, iy, ix);
          }
        }
      }
    }
  }
  return col;
}

void col2im_add(const std::vector<double>& col, const ConvDims& d, Tensor& dx) {
  const int64_t P = d.oh * d.ow;
  for (int64_t c = 0; c < d.cin; ++c) {
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        const int64_t row = (c * d.kh + ki) * d.kw + kj;
        const double* src = col.data() + row * P;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          const int64_t iy = oy * d.stride - d.pad + ki * d.dilation;
          if (iy < 0 || iy >= d.h) continue;
          for (int64_t ox = 0; ox < d.ow; ++ox) {
            const int64_t ix = ox * d.stride - d.pad + kj * d.dilation;
            if (ix < 0 || ix >= d.w) continue;
            dx.at(c, iy, ix) += src[oy * d.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int dilation) {
  const ConvDims d = conv_dims(x.value(), w.value(), stride, pad, dilation);
  if (b.value().dim(0) != d.cout) throw std::invalid_argument("conv2d: bias size mismatch");
  const int64_t K = d.cin * d.kh * d.kw;
  const int64_t P = d.oh * d.ow;
  auto col = std::make_shared<std::vector<double>>(im2col(x.value(), d));
  Tensor out({d.cout, d.oh, d.ow});
  MapM(out.data(), d.cout, P).noalias() =
      MapC(w.value().data(), d.cout, K) * MapC(col->data(), K, P);
  for (int64_t c = 0; c < d.cout; ++c) {
    double* o = out.data() + c * P;
    const double bc = b.value()[c];
    for (int64_t p = 0; p < P; ++p) o[p] += bc;
  }
  auto px = x.node(), pw = w.node(), pb = b.node();
  return Var(make_node(std::move(out), {x, w, b}, [px, pw, pb, d, K, P, col](Node& nd) {
    MapC dY(nd.grad.data(), d.cout, P);
    if (wants_grad(pb)) {
      Tensor& db = pb->grad_buf();
      for (int64_t c = 0; c < d.cout; ++c) {
        const double* g = nd.grad.data() + c * P;
        double acc = 0.0;
        for (int64_t p = 0; p < P; ++p) acc += g[p];
        db[c] += acc;
      }
    }
    if (wants_grad(pw)) {
      MapM dW(pw->grad_buf().data(), d.cout, K);
      dW.noalias() += dY * MapC(col->data(), K, P).transpose();
    }
    if (wants_grad(px)) {
      std::vector<double> dcol(static_cast<size_t>(K * P));
      MapM(dcol.data(), K, P).noalias() =
          MapC(pw->value.data(), d.cout, K).transpose() * dY;
      col2im_add(dcol, d, px->grad_buf());
    }
  }));
}

Var depthwise_conv2d(const Var& x, const Var& w, const Var& b, int pad) {
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 3 || W.rank() != 3 || W.dim(0) != X.dim(0))
    throw std::invalid_argument("depthwise_conv2d: expected x {C,H,W}, w {C,k,k}");
  const int64_t C = X.dim(0), H = X.dim(1), Wd = X.dim(2);
  const int64_t k = W.dim(1);
  if (W.dim(2) != k) throw std::invalid_argument("depthwise_conv2d: non-square kernel");
  Tensor out({C, H, Wd});
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t xo = 0; xo < Wd; ++xo) {
        double acc = b.value()[c];
        for (int64_t ki = 0; ki < k; ++ki) {
          const int64_t iy = y - pad + ki;
          if (iy < 0 || iy >= H) continue;
          for (int64_t kj = 0; kj < k; ++kj) {
            const int64_t ix = xo - pad + kj;
            if (ix < 0 || ix >= Wd) continue;
            acc += W.at(c, ki, kj) * X.at(c, iy, ix);
          }
        }
        out.at(c, y, xo) = acc;
      }
    }
  }
  auto px = x.node(), pw = w.node(), pb = b.node();
  return Var(make_node(std::move(out), {x, w, b}, [px, pw, pb, C, H, Wd, k, pad](Node& nd) {
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t y = 0; y < H; ++y) {
        for (int64_t xo = 0; xo < Wd; ++xo) {
          const double g = nd.grad.at(c, y, xo);
          if (wants_grad(pb)) pb->grad_buf()[c] += g;
          for (int64_t ki = 0; ki < k; ++ki) {
            const int64_t iy = y - pad + ki;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kj = 0; kj < k; ++kj) {
              const int64_t ix = xo - pad + kj;
              if (ix < 0 || ix >= Wd) continue;
              if (wants_grad(pw)) pw->grad_buf().at(c, ki, kj) += g * px->value.at(c, iy, ix);
              if (wants_grad(px)) px->grad_buf().at(c, iy, ix) += g * pw->value.at(c, ki, kj);
            }
          }
        }
      }
    }
  }));
}

Var group_norm(const Var& x, const Var& weight, const Var& bias, int groups, double eps) {
  const auto& X = x.value();
  if (X.rank() != 3) throw std::invalid_argument("group_norm: expected {C,H,W}");
  const int64_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
  if (C % groups != 0) throw std::invalid_argument("group_norm: groups must divide channels");
  if (weight.value().dim(0) != C || bias.value().dim(0) != C)
    throw std::invalid_argument("group_norm: affine size mismatch");
  const int64_t gs = C / groups;       // channels per group
  const int64_t gn = gs * H * W;       // elements per group
  Tensor xhat({C, H, W});
  std::vector<double> mean(groups), inv_std(groups);
  for (int64_t g = 0; g < groups; ++g) {
    const double* base = X.data() + g * gn;
    double mu = 0.0;
    for (int64_t i = 0; i < gn; ++i) mu += base[i];
    mu /= static_cast<double>(gn);
    double var = 0.0;
    for (int64_t i = 0; i < gn; ++i) {
      const double dv = base[i] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(gn);
    const double is = 1.0 / std::sqrt(var + eps);
    mean[g] = mu;
    inv_std[g] = is;
    double* xh = xhat.data() + g * gn;
    for (int64_t i = 0; i < gn; ++i) xh[i] = (base[i] - mu) * is;
  }
  Tensor out({C, H, W});
  const int64_t hw = H * W;
  for (int64_t c = 0; c < C; ++c) {
    const double wc = weight.value()[c], bc = bias.value()[c];
    const double* xh = xhat.data() + c * hw;
    double* o = out.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i) o[i] = wc * xh[i] + bc;
  }
  auto px = x.node(), pw = weight.node(), pb = bias.node();
  return Var(make_node(
      std::move(out), {x, weight, bias},
      [px, pw, pb, xhat, inv_std, groups, gs, gn, C, hw](Node& nd) {
        if (wants_grad(pw)) {
          Tensor& dw = pw->grad_buf();
          for (int64_t c = 0; c < C; ++c) {
            const double* xh = xhat.data() + c * hw;
            const double* g = nd.grad.data() + c * hw;
            double acc = 0.0;
            for (int64_t i = 0; i < hw; ++i) acc += g[i] * xh[i];
            dw[c] += acc;
          }
        }
        if (wants_grad(pb)) {
          Tensor& db = pb->grad_buf();
          for (int64_t c = 0; c < C; ++c) {
            const double* g = nd.grad.data() + c * hw;
            double acc = 0.0;
            for (int64_t i = 0; i < hw; ++i) acc += g[i];
            db[c] += acc;
          }
        }
        if (wants_grad(px)) {
          Tensor& dx = px->grad_buf();
          for (int64_t g = 0; g < groups; ++g) {
            // dxhat = dy * w[c]; reduce within the group, then the usual
            // normalization backward.
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (int64_t cc = 0; cc < gs; ++cc) {
              const int64_t c = g * gs + cc;
              const double wc = pw->value[c];
              const double* gr = nd.grad.data() + c * hw;
              const double* xh = xhat.data() + c * hw;
              for (int64_t i = 0; i < hw; ++i) {
                const double dxh = gr[i] * wc;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[i];
              }
            }
            const double inv_n = 1.0 / static_cast<double>(gn);
            for (int64_t cc = 0; cc < gs; ++cc) {
              const int64_t c = g * gs + cc;
              const double wc = pw->value[c];
              const double* gr = nd.grad.data() + c * hw;
              const double* xh = xhat.data() + c * hw;
              double* dxp = dx.data() + c * hw;
              for (int64_t i = 0; i < hw; ++i) {
                const double dxh = gr[i] * wc;
                dxp[i] += inv_std[g] * (dxh - inv_n * sum_dxh - xh[i] * inv_n * sum_dxh_xh);
              }
            }
          }
        }
      }));
}

Var bilinear_resize(const Var& x, int64_t out_h, int64_t out_w) {
  const auto& X = x.value();
  if (X.rank() != 3) throw std::invalid_argument("bilinear_resize: expected {C,H,W}");
  const int64_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
  const AxisWeights ay = bilinear_axis(H, out_h);
  const AxisWeights ax = bilinear_axis(W, out_w);
  Tensor out({C, out_h, out_w});
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t oy = 0; oy < out_h; ++oy) {
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const double v = ay.w0[oy] * (ax.w0[ox] * X.at(c, ay.i0[oy], ax.i0[ox]) +
                                      ax.w1[ox] * X.at(c, ay.i0[oy], ax.i1[ox])) +
                         ay.w1[oy] * (ax.w0[ox] * X.at(c, ay.i1[oy], ax.i0[ox]) +
                                      ax.w1[ox] * X.at(c, ay.i1[oy], ax.i1[ox]));
        out.at(c, oy, ox) = v;
      }
    }
  }
  auto px = x.node();
  return Var(make_node(std::move(out), {x}, [px, ay, ax, C, out_h, out_w](Node& nd) {
    if (!wants_grad(px)) return;
    Tensor& g = px->grad_buf();
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t oy = 0; oy < out_h; ++oy) {
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const double gr = nd.grad.at(c, oy, ox);
          g.at(c, ay.i0[oy], ax.i0[ox]) += gr * ay.w0[oy] * ax.w0[ox];
          g.at(c, ay.i0[oy], ax.i1[ox]) += gr * ay.w0[oy] * ax.w1[ox];
          g.at(c, ay.i1[oy], ax.i0[ox]) += gr * ay.w1[oy] * ax.w0[ox];
          g.at(c, ay.i1[oy], ax.i1[ox]) += gr * ay.w1[oy] * ax.w1[ox];
        }
      }
    }
  }));
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input");
  const int64_t H = xs[0].value().dim(1), W = xs[0].value().dim(2);
  int64_t C = 0;
  for (const auto& v : xs) {
    if (v.value().rank() != 3 || v.value().dim(1) != H || v.value().dim(2) != W)
      throw std::invalid_argument("concat_channels: spatial mismatch");
    C += v.value().dim(0);
  }
  Tensor out({C, H, W});
  int64_t off = 0;
  const int64_t hw = H * W;
  for (const auto& v : xs) {
    const int64_t n = v.value().numel();
    std::copy(v.value().data(), v.value().data() + n, out.data() + off * hw);
    off += v.value().dim(0);
  }
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(xs.size());
  for (const auto& v : xs) parents.push_back(v.node());
  return Var(make_node(std::move(out), xs, [parents, hw](Node& nd) {
    int64_t off = 0;
    for (const auto& p : parents) {
      const int64_t pc = p->value.dim(0);
      if (wants_grad(p)) {
        Tensor& g = p->grad_buf();
        const double* src = nd.grad.data() + off * hw;
        for (int64_t i = 0; i < pc * hw; ++i) g[i] += src[i];
      }
      off += pc;
    }
  }));
}

Var global_avg_pool(const Var& x) {
  const auto& X = x.value();
  if (X.rank() != 3) throw std::invalid_argument("global_avg_pool: expected {C,H,W}");
  const int64_t C = X.dim(0), hw = X.dim(1) * X.dim(2);
  Tensor out({C});
  for (int64_t c = 0; c < C; ++c) {
    const double* p = X.data() + c * hw;
    double acc = 0.0;
    for (int64_t i = 0; i < hw; ++i) acc += p[i];
    out[c] = acc / static_cast<double>(hw);
  }
  auto px = x.node();
  return Var(make_node(std::move(out), {x}, [px, C, hw](Node& nd) {
    if (!wants_grad(px)) return;
    Tensor& g = px->grad_buf();
    for (int64_t c = 0; c < C; ++c) {
      const double gr = nd.grad[c] / static_cast<double>(hw);
      double* dst = g.data() + c * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] += gr;
    }
  }));
}

Var film_channels(const Var& x, const Var& gamma, const Var& beta) {
  const auto& X = x.value();
  if (X.rank() != 3) throw std::invalid_argument("film_channels: expected {C,H,W}");
  const int64_t C = X.dim(0), hw = X.dim(1) * X.dim(2);
  if (gamma.value().dim(0) != C || beta.value().dim(0) != C)
    throw std::invalid_argument("film_channels: head/stage channel mismatch, x " +
                                X.shape_str() + " gamma " + gamma.value().shape_str());
  Tensor out({X.dim(0), X.dim(1), X.dim(2)});
  for (int64_t c = 0; c < C; ++c) {
    const double gc = gamma.value()[c], bc = beta.value()[c];
    const double* src = X.data() + c * hw;
    double* dst = out.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i) dst[i] = gc * src[i] + bc;
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return Var(make_node(std::move(out), {x, gamma, beta}, [px, pg, pb, C, hw](Node& nd) {
    for (int64_t c = 0; c < C; ++c) {
      const double* gr = nd.grad.data() + c * hw;
      if (wants_grad(px)) {
        double* dx = px->grad_buf().data() + c * hw;
        const double gc = pg->value[c];
        for (int64_t i = 0; i < hw; ++i) dx[i] += gc * gr[i];
      }
      if (wants_grad(pg)) {
        const double* xv = px->value.data() + c * hw;
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += gr[i] * xv[i];
        pg->grad_buf()[c] += acc;
      }
      if (wants_grad(pb)) {
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += gr[i];
        pb->grad_buf()[c] += acc;
      }
    }
  }));
}

Var scale_channels(const Var& x, const Var& s) {
  const auto& X = x.value();
  if (X.rank() != 3) throw std::invalid_argument("scale_channels: expected {C,H,W}");
  const int64_t C = X.dim(0), hw = X.dim(1) * X.dim(2);
  if (s.value().dim(0) != C) throw std::invalid_argument("scale_channels: size mismatch");
  Tensor out({X.dim(0), X.dim(1), X.dim(2)});
  for (int64_t c = 0; c < C; ++c) {
    const double sc = s.value()[c];
    const double* src = X.data() + c * hw;
    double* dst = out.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i) dst[i] = sc * src[i];
  }
  auto px = x.node(), ps = s.node();
  return Var(make_node(std::move(out), {x, s}, [px, ps, C, hw](Node& nd) {
    for (int64_t c = 0; c < C; ++c) {
      const double* gr = nd.grad.data() + c * hw;
      if (wants_grad(px)) {
        double* dx = px->grad_buf().data() + c * hw;
        const double sc = ps->value[c];
        for (int64_t i = 0; i < hw; ++i) dx[i] += sc * gr[i];
      }
      if (wants_grad(ps)) {
        const double* xv = px->value.data() + c * hw;
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += gr[i] * xv[i];
        ps->grad_buf()[c] += acc;
      }
    }
  }));
}

Var film_rows(const Var& x, const Var& gamma, const Var& beta) {
  const auto& X = x.value();
  if (X.rank() != 2) throw std::invalid_argument("film_rows: expected {N,D}");
  const int64_t N = X.dim(0), D = X.dim(1);
  if (gamma.value().dim(0) != D || beta.value().dim(0) != D)
    throw std::invalid_argument("film_rows: head/token dimension mismatch, tokens " +
                                X.shape_str() + " gamma " + gamma.value().shape_str());
  Tensor out({N, D});
  for (int64_t r = 0; r < N; ++r)
    for (int64_t c = 0; c < D; ++c)
      out.at(r, c) = gamma.value()[c] * X.at(r, c) + beta.value()[c];
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return Var(make_node(std::move(out), {x, gamma, beta}, [px, pg, pb, N, D](Node& nd) {
    if (wants_grad(px)) {
      Tensor& dx = px->grad_buf();
      for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < D; ++c) dx.at(r, c) += pg->value[c] * nd.grad.at(r, c);
    }
    if (wants_grad(pg)) {
      Tensor& dg = pg->grad_buf();
      for (int64_t c = 0; c < D; ++c) {
        double acc = 0.0;
        for (int64_t r = 0; r < N; ++r) acc += nd.grad.at(r, c) * px->value.at(r, c);
        dg[c] += acc;
      }
    }
    if (wants_grad(pb)) {
      Tensor& db = pb->grad_buf();
      for (int64_t c = 0; c < D; ++c) {
        double acc = 0.0;
        for (int64_t r = 0; r < N; ++r) acc += nd.grad.at(r, c);
        db[c] += acc;
      }
    }
  }));
}

}  // namespace nullbus::ad
