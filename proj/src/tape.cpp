#include "blab/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "blab/gemm.hpp"

namespace blab {

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    fail(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_alloc) {
    n.grad = Tensor::zeros(n.value.shape());
    n.grad_alloc = true;
  }
  return n.grad;
}

void Tape::accumulate(int id, const double* g, int n) {
  Tensor& dst = grad_buf(id);
  double* d = dst.data();
  for (int i = 0; i < n; ++i) d[i] += g[i];
}

void Tape::backward(Var loss) {
  const Tensor& lv = val(loss);
  if (lv.numel() != 1) fail("backward: loss is not a scalar, shape " + lv.shape_str());
  grad_buf(loss.id)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad_alloc && n.backprop) n.backprop(*this);
  }
}

void Tape::clear() { nodes_.clear(); }

// ---------------------------------------------------------------------------
// elementwise

Var Tape::add(Var a, Var b) {
  const Tensor &av = val(a), &bv = val(b);
  check_same_shape("add", av, bv);
  Tensor out = Tensor::uninit(av.shape());
  for (int i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, b, r](Tape& t) {
    const Tensor& g = t.grad_buf(r.id);
    if (t.requires_grad(a)) t.accumulate(a.id, g.data(), g.numel());
    if (t.requires_grad(b)) t.accumulate(b.id, g.data(), g.numel());
  });
}

Var Tape::sub(Var a, Var b) {
  const Tensor &av = val(a), &bv = val(b);
  check_same_shape("sub", av, bv);
  Tensor out = Tensor::uninit(av.shape());
  for (int i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, b, r](Tape& t) {
    const Tensor& g = t.grad_buf(r.id);
    if (t.requires_grad(a)) t.accumulate(a.id, g.data(), g.numel());
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buf(b.id);
      for (int i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor &av = val(a), &bv = val(b);
  check_same_shape("mul", av, bv);
  Tensor out = Tensor::uninit(av.shape());
  for (int i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, b, r](Tape& t) {
    const Tensor& g = t.grad_buf(r.id);
    if (t.requires_grad(a)) {
      const Tensor& bv2 = t.val(b);
      Tensor& ga = t.grad_buf(a.id);
      for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (t.requires_grad(b)) {
      const Tensor& av2 = t.val(a);
      Tensor& gb = t.grad_buf(b.id);
      for (int i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

Var Tape::scale(Var a, double s) {
  const Tensor& av = val(a);
  Tensor out = Tensor::uninit(av.shape());
  for (int i = 0; i < av.numel(); ++i) out[i] = av[i] * s;
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, s, r](Tape& t) {
    const Tensor& g = t.grad_buf(r.id);
    Tensor& ga = t.grad_buf(a.id);
    for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
  });
}

Var Tape::add_scalar(Var a, double s) {
  const Tensor& av = val(a);
  Tensor out = Tensor::uninit(av.shape());
  for (int i = 0; i < av.numel(); ++i) out[i] = av[i] + s;
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, r](Tape& t) {
    const Tensor& g = t.grad_buf(r.id);
    t.accumulate(a.id, g.data(), g.numel());
  });
}

Var Tape::exp(Var a) {
  const Tensor& av = val(a);
  Tensor out = Tensor::uninit(av.shape());
  for (int i = 0; i < av.numel(); ++i) out[i] = std::exp(av[i]);
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, r](Tape& t) {
    const Tensor& g = t.grad_buf(r.id);
    const Tensor& y = t.val(r);
    Tensor& ga = t.grad_buf(a.id);
    for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
  });
}

Var Tape::sigmoid(Var a) {
  const Tensor& av = val(a);
  Tensor out = Tensor::uninit(av.shape());
  for (int i = 0; i < av.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-av[i]));
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, r](Tape& t) {
    const Tensor& g = t.grad_buf(r.id);
    const Tensor& y = t.val(r);
    Tensor& ga = t.grad_buf(a.id);
    for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var Tape::relu(Var a) {
  const Tensor& av = val(a);
  Tensor out = Tensor::uninit(av.shape());
  for (int i = 0; i < av.numel(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, r](Tape& t) {
    const Tensor& g = t.grad_buf(r.id);
    const Tensor& x = t.val(a);
    Tensor& ga = t.grad_buf(a.id);
    for (int i = 0; i < g.numel(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
  });
}

Var Tape::sum(Var a) {
  const Tensor& av = val(a);
  double s = 0.0;
  for (int i = 0; i < av.numel(); ++i) s += av[i];
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(Tensor::scalar(s), rg, !rg ? std::function<void(Tape&)>() : [a, r](Tape& t) {
    double g = t.grad_buf(r.id)[0];
    Tensor& ga = t.grad_buf(a.id);
    for (int i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

Var Tape::mean_all(Var a) {
  int n = val(a).numel();
  if (n == 0) fail("mean_all: empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var Tape::mean_axis(Var a, int axis) {
  const Tensor& av = val(a);
  if (axis < 0 || axis >= av.rank())
    fail("mean_axis: axis out of range for shape " + av.shape_str());
  const auto& sh = av.shape();
  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
  for (int i = axis + 1; i < av.rank(); ++i) inner *= sh[static_cast<size_t>(i)];
  int mid = sh[static_cast<size_t>(axis)];
  if (mid == 0) fail("mean_axis: zero extent axis");
  std::vector<int> osh;
  for (int i = 0; i < av.rank(); ++i)
    if (i != axis) osh.push_back(sh[static_cast<size_t>(i)]);
  if (osh.empty()) osh.push_back(1);
  Tensor out(osh);
  for (int o = 0; o < outer; ++o)
    for (int m = 0; m < mid; ++m)
      for (int i = 0; i < inner; ++i)
        out[static_cast<size_t>(o) * inner + i] +=
            av[(static_cast<size_t>(o) * mid + m) * inner + i];
  for (int i = 0; i < out.numel(); ++i) out[i] /= mid;
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>() : [a, r, outer, mid, inner](Tape& t) {
                const Tensor& g = t.grad_buf(r.id);
                Tensor& ga = t.grad_buf(a.id);
                for (int o = 0; o < outer; ++o)
                  for (int m = 0; m < mid; ++m)
                    for (int i = 0; i < inner; ++i)
                      ga[(static_cast<size_t>(o) * mid + m) * inner + i] +=
                          g[static_cast<size_t>(o) * inner + i] / mid;
              });
}

Var Tape::l2norm(Var a) {
  const Tensor& av = val(a);
  double s = 0.0;
  for (int i = 0; i < av.numel(); ++i) s += av[i] * av[i];
  double nrm = std::sqrt(s);
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(Tensor::scalar(nrm), rg, !rg ? std::function<void(Tape&)>() : [a, r](Tape& t) {
    double g = t.grad_buf(r.id)[0];
    double nrm2 = t.val(r)[0];
    if (nrm2 == 0.0) return;  // subgradient 0 at the origin
    const Tensor& x = t.val(a);
    Tensor& ga = t.grad_buf(a.id);
    for (int i = 0; i < x.numel(); ++i) ga[i] += g * x[i] / nrm2;
  });
}

Var Tape::reshape(Var a, std::vector<int> shape) {
  const Tensor& av = val(a);
  long long want = 1;
  for (int d : shape) want *= d;
  if (want != av.numel())
    fail("reshape: element count mismatch " + av.shape_str() + " -> " +
         shape_to_string(shape));
  Tensor out = Tensor::uninit(shape);
  for (int i = 0; i < av.numel(); ++i) out[i] = av[i];
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, r](Tape& t) {
    const Tensor& g = t.grad_buf(r.id);
    t.accumulate(a.id, g.data(), g.numel());
  });
}

Var Tape::rows(Var a, std::vector<int> idx) {
  const Tensor& av = val(a);
  if (av.rank() != 2) fail("rows: expected rank-2 tensor, got " + av.shape_str());
  int d = av.dim(1);
  Tensor out = Tensor::uninit({static_cast<int>(idx.size()), d});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= av.dim(0)) fail("rows: index out of range");
    for (int j = 0; j < d; ++j) out.at2(static_cast<int>(i), j) = av.at2(idx[i], j);
  }
  bool rg = requires_grad(a);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [a, r, idx = std::move(idx), d](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      Tensor& ga = t.grad_buf(a.id);
                      for (size_t i = 0; i < idx.size(); ++i)
                        for (int j = 0; j < d; ++j)
                          ga.at2(idx[i], j) += g.at2(static_cast<int>(i), j);
                    });
}

Var Tape::sort_by_key(Var keys, Var values) {
  const Tensor &kv = val(keys), &vv = val(values);
  if (kv.rank() != 1 || vv.rank() != 1)
    fail("sort_by_key: expected rank-1 tensors, got " + kv.shape_str() + " and " +
         vv.shape_str());
  check_same_shape("sort_by_key", kv, vv);
  int n = kv.numel();
  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](int i, int j) { return kv[static_cast<size_t>(i)] < kv[static_cast<size_t>(j)]; });
  Tensor out = Tensor::uninit(kv.shape());
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = vv[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  bool rg = requires_grad(values);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [values, r, perm = std::move(perm)](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      Tensor& gv = t.grad_buf(values.id);
                      for (size_t i = 0; i < perm.size(); ++i)
                        gv[static_cast<size_t>(perm[i])] += g[i];
                    });
}

// ---------------------------------------------------------------------------
// linear algebra

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
  const Tensor &av = val(a), &bv = val(b);
  if (av.rank() != 2 || bv.rank() != 2)
    fail("matmul: expected rank-2 tensors, got " + av.shape_str() + " and " + bv.shape_str());
  int m = trans_a ? av.dim(1) : av.dim(0);
  int ka = trans_a ? av.dim(0) : av.dim(1);
  int kb = trans_b ? bv.dim(1) : bv.dim(0);
  int n = trans_b ? bv.dim(0) : bv.dim(1);
  if (ka != kb)
    fail("matmul: inner dimension mismatch " + av.shape_str() + " x " + bv.shape_str());
  Tensor out = Tensor::uninit({m, n});
  dgemm(trans_a, trans_b, m, n, ka, 1.0, av.data(), av.dim(1), bv.data(), bv.dim(1), 0.0,
        out.data(), n);
  bool rg = requires_grad(a) || requires_grad(b);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [a, b, r, trans_a, trans_b, m, n, ka](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      const Tensor &av2 = t.val(a), &bv2 = t.val(b);
                      if (t.requires_grad(a)) {
                        Tensor& ga = t.grad_buf(a.id);
                        if (!trans_a) {
                          // dA = dC * op(B)^T
                          dgemm(false, !trans_b, m, ka, n, 1.0, g.data(), n, bv2.data(),
                                bv2.dim(1), 1.0, ga.data(), ka);
                        } else {
                          // dA^T stored as A's shape (k x m): dA = op(B) * dC^T
                          dgemm(trans_b, true, ka, m, n, 1.0, bv2.data(), bv2.dim(1),
                                g.data(), n, 1.0, ga.data(), m);
                        }
                      }
                      if (t.requires_grad(b)) {
                        Tensor& gb = t.grad_buf(b.id);
                        if (!trans_b) {
                          // dB = op(A)^T * dC
                          dgemm(!trans_a, false, ka, n, m, 1.0, av2.data(), av2.dim(1),
                                g.data(), n, 1.0, gb.data(), n);
                        } else {
                          // dB stored as B's shape (n x k): dB = dC^T * op(A)
                          dgemm(true, trans_a, n, ka, m, 1.0, g.data(), n, av2.data(),
                                av2.dim(1), 1.0, gb.data(), ka);
                        }
                      }
                    });
}

Var Tape::affine(Var x, Var w, Var b) {
  const Tensor &xv = val(x), &wv = val(w), &bv = val(b);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1)
    fail("affine: bad ranks " + xv.shape_str() + ", " + wv.shape_str() + ", " + bv.shape_str());
  int n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  if (wv.dim(1) != in || bv.dim(0) != out_dim)
    fail("affine: shape mismatch x" + xv.shape_str() + " w" + wv.shape_str() + " b" +
         bv.shape_str());
  Tensor out = Tensor::uninit({n, out_dim});
  dgemm(false, true, n, out_dim, in, 1.0, xv.data(), in, wv.data(), in, 0.0, out.data(),
        out_dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < out_dim; ++j) out.at2(i, j) += bv[static_cast<size_t>(j)];
  bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [x, w, b, r, n, in, out_dim](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      if (t.requires_grad(x)) {
                        Tensor& gx = t.grad_buf(x.id);
                        dgemm(false, false, n, in, out_dim, 1.0, g.data(), out_dim,
                              t.val(w).data(), in, 1.0, gx.data(), in);
                      }
                      if (t.requires_grad(w)) {
                        Tensor& gw = t.grad_buf(w.id);
                        dgemm(true, false, out_dim, in, n, 1.0, g.data(), out_dim,
                              t.val(x).data(), in, 1.0, gw.data(), in);
                      }
                      if (t.requires_grad(b)) {
                        Tensor& gb = t.grad_buf(b.id);
                        for (int i = 0; i < n; ++i)
                          for (int j = 0; j < out_dim; ++j)
                            gb[static_cast<size_t>(j)] += g.at2(i, j);
                      }
                    });
}

Var Tape::pairwise_sqdist(Var x, Var y) {
  const Tensor &xv = val(x), &yv = val(y);
  if (xv.rank() != 2 || yv.rank() != 2 || xv.dim(1) != yv.dim(1))
    fail("pairwise_sqdist: shape mismatch " + xv.shape_str() + " vs " + yv.shape_str());
  int m = xv.dim(0), n = yv.dim(0), d = xv.dim(1);
  // D_ij = |x_i|^2 + |y_j|^2 - 2 x_i . y_j
  Tensor out = Tensor::uninit({m, n});
  dgemm(false, true, m, n, d, -2.0, xv.data(), d, yv.data(), d, 0.0, out.data(), n);
  std::vector<double> xs(static_cast<size_t>(m), 0.0), ys(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < d; ++k) xs[static_cast<size_t>(i)] += xv.at2(i, k) * xv.at2(i, k);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < d; ++k) ys[static_cast<size_t>(j)] += yv.at2(j, k) * yv.at2(j, k);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double v = out.at2(i, j) + xs[static_cast<size_t>(i)] + ys[static_cast<size_t>(j)];
      out.at2(i, j) = v > 0.0 ? v : 0.0;  // clamp roundoff negatives
    }
  bool rg = requires_grad(x) || requires_grad(y);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [x, y, r, m, n, d](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      const Tensor &xv2 = t.val(x), &yv2 = t.val(y);
                      // dX_i = 2 [ (sum_j g_ij) x_i - (g Y)_i ]
                      if (t.requires_grad(x)) {
                        Tensor& gx = t.grad_buf(x.id);
                        dgemm(false, false, m, d, n, -2.0, g.data(), n, yv2.data(), d, 1.0,
                              gx.data(), d);
                        for (int i = 0; i < m; ++i) {
                          double rs = 0.0;
                          for (int j = 0; j < n; ++j) rs += g.at2(i, j);
                          for (int k = 0; k < d; ++k) gx.at2(i, k) += 2.0 * rs * xv2.at2(i, k);
                        }
                      }
                      if (t.requires_grad(y)) {
                        Tensor& gy = t.grad_buf(y.id);
                        dgemm(true, false, n, d, m, -2.0, g.data(), n, xv2.data(), d, 1.0,
                              gy.data(), d);
                        for (int j = 0; j < n; ++j) {
                          double cs = 0.0;
                          for (int i = 0; i < m; ++i) cs += g.at2(i, j);
                          for (int k = 0; k < d; ++k) gy.at2(j, k) += 2.0 * cs * yv2.at2(j, k);
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// network layers

namespace {

// Patch matrix for a group of images, laid out K x (G*P): row (c,ki,kj),
// column (img,oi,oj). Inner loops run along oj, so reads and writes are
// contiguous, and the GEMM against the (Co x K) weight matrix has a very
// large N dimension.
void im2col_group(const double* x, int ci, int h, int w, int kh, int kw, int pad,
                  int ho, int wo, int ld, double* col) {
  for (int c = 0; c < ci; ++c) {
    const double* xc = x + static_cast<size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        double* crow = col + (static_cast<size_t>(c) * kh * kw +
                              static_cast<size_t>(ki) * kw + kj) *
                                 ld;
        for (int oi = 0; oi < ho; ++oi) {
          double* dst = crow + static_cast<size_t>(oi) * wo;
          int ii = oi + ki - pad;
          if (ii < 0 || ii >= h) {
            for (int oj = 0; oj < wo; ++oj) dst[oj] = 0.0;
            continue;
          }
          const double* xrow = xc + static_cast<size_t>(ii) * w;
          int j0 = std::max(0, pad - kj);
          int j1 = std::min(wo, w + pad - kj);
          for (int oj = 0; oj < j0; ++oj) dst[oj] = 0.0;
          const double* src = xrow + (j0 + kj - pad);
          for (int oj = j0; oj < j1; ++oj) dst[oj] = src[oj - j0];
          for (int oj = j1; oj < wo; ++oj) dst[oj] = 0.0;
        }
      }
  }
}

void col2im_group_add(const double* col, int ci, int h, int w, int kh, int kw, int pad,
                      int ho, int wo, int ld, double* x) {
  for (int c = 0; c < ci; ++c) {
    double* xc = x + static_cast<size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const double* crow = col + (static_cast<size_t>(c) * kh * kw +
                                    static_cast<size_t>(ki) * kw + kj) *
                                       ld;
        for (int oi = 0; oi < ho; ++oi) {
          int ii = oi + ki - pad;
          if (ii < 0 || ii >= h) continue;
          const double* src = crow + static_cast<size_t>(oi) * wo;
          double* xrow = xc + static_cast<size_t>(ii) * w;
          int j0 = std::max(0, pad - kj);
          int j1 = std::min(wo, w + pad - kj);
          double* dst = xrow + (j0 + kj - pad);
          for (int oj = j0; oj < j1; ++oj) dst[oj - j0] += src[oj];
        }
      }
  }
}

// Images per group, capped so the patch matrix stays modest.
int conv_group_size(int n, int p, int kdim) {
  const double budget = 40e6;  // bytes
  int g = static_cast<int>(budget / (static_cast<double>(p) * kdim * 8));
  return std::max(1, std::min(n, g));
}

}  // namespace

Var Tape::conv2d(Var x, Var w, Var bias, int pad) {
  const Tensor &xv = val(x), &wv = val(w);
  if (xv.rank() != 4 || wv.rank() != 4)
    fail("conv2d: expected rank-4 tensors, got x" + xv.shape_str() + " w" + wv.shape_str());
  int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
  int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != ci)
    fail("conv2d: channel mismatch x" + xv.shape_str() + " w" + wv.shape_str());
  int ho = h + 2 * pad - kh + 1, wo = ww + 2 * pad - kw + 1;
  if (ho <= 0 || wo <= 0) fail("conv2d: kernel larger than padded input");
  const int kdim = ci * kh * kw, p = ho * wo;
  const int group = conv_group_size(n, p, kdim);
  bool has_bias = bias.valid();
  Tensor out = Tensor::uninit({n, co, ho, wo});
  {
    RawVec col(static_cast<size_t>(kdim) * group * p);
    RawVec outg(static_cast<size_t>(co) * group * p);
    for (int base = 0; base < n; base += group) {
      const int g = std::min(group, n - base);
      const int ld = g * p;
      for (int i = 0; i < g; ++i)
        im2col_group(xv.data() + static_cast<size_t>(base + i) * ci * h * ww, ci, h, ww,
                     kh, kw, pad, ho, wo, ld, col.data() + static_cast<size_t>(i) * p);
      // (co x kdim) . (kdim x g*p) -> (co x g*p)
      dgemm(false, false, co, ld, kdim, 1.0, wv.data(), kdim, col.data(), ld, 0.0,
            outg.data(), ld);
      for (int i = 0; i < g; ++i)
        for (int c = 0; c < co; ++c)
          std::copy(outg.data() + static_cast<size_t>(c) * ld + static_cast<size_t>(i) * p,
                    outg.data() + static_cast<size_t>(c) * ld + static_cast<size_t>(i) * p + p,
                    out.data() + (static_cast<size_t>(base + i) * co + c) * p);
    }
  }
  if (has_bias) {
    const Tensor& bv = val(bias);
    if (bv.numel() != co) fail("conv2d: bias shape mismatch " + bv.shape_str());
    for (int img = 0; img < n; ++img)
      for (int c = 0; c < co; ++c) {
        double* o = out.data() + (static_cast<size_t>(img) * co + c) * p;
        for (int i = 0; i < p; ++i) o[i] += bv[static_cast<size_t>(c)];
      }
  }
  bool rg = requires_grad(x) || requires_grad(w) || (has_bias && requires_grad(bias));
  Var r{static_cast<int>(nodes_.size())};
  return push(
      std::move(out), rg,
      !rg ? std::function<void(Tape&)>()
          : [x, w, bias, r, n, ci, h, ww, co, kh, kw, pad, ho, wo, kdim, p, group,
             has_bias](Tape& t) {
              const Tensor& g = t.grad_buf(r.id);
              const Tensor &xv2 = t.val(x), &wv2 = t.val(w);
              bool need_x = t.requires_grad(x);
              bool need_w = t.requires_grad(w);
              if (need_x || need_w) {
                RawVec col(need_w ? static_cast<size_t>(kdim) * group * p : 0);
                RawVec gbig(static_cast<size_t>(co) * group * p);
                RawVec dcol(need_x ? static_cast<size_t>(kdim) * group * p : 0);
                Tensor* gw = need_w ? &t.grad_buf(w.id) : nullptr;
                Tensor* gx = need_x ? &t.grad_buf(x.id) : nullptr;
                for (int base = 0; base < n; base += group) {
                  const int gn = std::min(group, n - base);
                  const int ld = gn * p;
                  for (int i = 0; i < gn; ++i)
                    for (int c = 0; c < co; ++c)
                      std::copy(
                          g.data() + (static_cast<size_t>(base + i) * co + c) * p,
                          g.data() + (static_cast<size_t>(base + i) * co + c) * p + p,
                          gbig.data() + static_cast<size_t>(c) * ld + static_cast<size_t>(i) * p);
                  if (need_w) {
                    for (int i = 0; i < gn; ++i)
                      im2col_group(xv2.data() + static_cast<size_t>(base + i) * ci * h * ww,
                                   ci, h, ww, kh, kw, pad, ho, wo, ld,
                                   col.data() + static_cast<size_t>(i) * p);
                    // dW (co x kdim) += gbig (co x ld) . col^T (ld x kdim)
                    dgemm(false, true, co, kdim, ld, 1.0, gbig.data(), ld, col.data(),
                          ld, 1.0, gw->data(), kdim);
                  }
                  if (need_x) {
                    // dcol (kdim x ld) = W^T (kdim x co) . gbig (co x ld)
                    dgemm(true, false, kdim, ld, co, 1.0, wv2.data(), kdim, gbig.data(),
                          ld, 0.0, dcol.data(), ld);
                    for (int i = 0; i < gn; ++i)
                      col2im_group_add(dcol.data() + static_cast<size_t>(i) * p, ci, h,
                                       ww, kh, kw, pad, ho, wo, ld,
                                       gx->data() + static_cast<size_t>(base + i) * ci * h * ww);
                  }
                }
              }
              if (has_bias && t.requires_grad(bias)) {
                Tensor& gb = t.grad_buf(bias.id);
                for (int img = 0; img < n; ++img)
                  for (int c = 0; c < co; ++c) {
                    const double* gi = g.data() + (static_cast<size_t>(img) * co + c) * p;
                    double s = 0.0;
                    for (int i = 0; i < p; ++i) s += gi[i];
                    gb[static_cast<size_t>(c)] += s;
                  }
              }
            });
}

Var Tape::maxpool2x2(Var x) {
  const Tensor& xv = val(x);
  if (xv.rank() != 4) fail("maxpool2x2: expected rank-4 tensor, got " + xv.shape_str());
  int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    fail("maxpool2x2: spatial dims must be even, got " + xv.shape_str());
  int ho = h / 2, wo = w / 2;
  Tensor out = Tensor::uninit({n, c, ho, wo});
  std::vector<int> argmax(static_cast<size_t>(out.numel()));
  size_t oi = 0;
  for (int img = 0; img < n; ++img)
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = xv.data() + (static_cast<size_t>(img) * c + ch) * h * w;
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j, ++oi) {
          int base = 2 * i * w + 2 * j;
          int best = base;
          double bv = plane[base];
          if (plane[base + 1] > bv) { bv = plane[base + 1]; best = base + 1; }
          if (plane[base + w] > bv) { bv = plane[base + w]; best = base + w; }
          if (plane[base + w + 1] > bv) { bv = plane[base + w + 1]; best = base + w + 1; }
          out[oi] = bv;
          argmax[oi] = (static_cast<int>((static_cast<size_t>(img) * c + ch)) * h * w) + best;
        }
    }
  bool rg = requires_grad(x);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [x, r, argmax = std::move(argmax)](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      Tensor& gx = t.grad_buf(x.id);
                      for (size_t i = 0; i < argmax.size(); ++i)
                        gx[static_cast<size_t>(argmax[i])] += g[i];
                    });
}

Var Tape::global_avg_pool(Var x) {
  const Tensor& xv = val(x);
  if (xv.rank() != 4) fail("global_avg_pool: expected rank-4 tensor, got " + xv.shape_str());
  int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out = Tensor::uninit({n, c});
  for (int img = 0; img < n; ++img)
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = xv.data() + (static_cast<size_t>(img) * c + ch) * hw;
      double s = 0.0;
      for (int i = 0; i < hw; ++i) s += plane[i];
      out.at2(img, ch) = s / hw;
    }
  bool rg = requires_grad(x);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>() : [x, r, n, c, hw](Tape& t) {
                const Tensor& g = t.grad_buf(r.id);
                Tensor& gx = t.grad_buf(x.id);
                for (int img = 0; img < n; ++img)
                  for (int ch = 0; ch < c; ++ch) {
                    double gv = g.at2(img, ch) / hw;
                    double* plane = gx.data() + (static_cast<size_t>(img) * c + ch) * hw;
                    for (int i = 0; i < hw; ++i) plane[i] += gv;
                  }
              });
}

Var Tape::batchnorm_train(Var x, Var gamma, Var beta, Tensor& running_mean,
                          Tensor& running_var, double momentum, double eps) {
  const Tensor &xv = val(x), &gv = val(gamma), &bv = val(beta);
  if (xv.rank() != 4) fail("batchnorm: expected rank-4 input, got " + xv.shape_str());
  int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (gv.numel() != c || bv.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    fail("batchnorm: parameter shape mismatch for input " + xv.shape_str());
  const int m = n * hw;
  if (m < 2) fail("batchnorm: batch too small for training statistics");
  std::vector<double> mean(static_cast<size_t>(c), 0.0), invstd(static_cast<size_t>(c), 0.0);
  Tensor out = Tensor::uninit(xv.shape());
  Tensor xhat = Tensor::uninit(xv.shape());
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0, ss = 0.0;
    for (int img = 0; img < n; ++img) {
      const double* plane = xv.data() + (static_cast<size_t>(img) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) {
        s += plane[i];
        ss += plane[i] * plane[i];
      }
    }
    double mu = s / m;
    mean[static_cast<size_t>(ch)] = mu;
    double var = ss / m - mu * mu;
    if (var < 0.0) var = 0.0;  // roundoff guard
    double is = 1.0 / std::sqrt(var + eps);
    invstd[static_cast<size_t>(ch)] = is;
    double ga = gv[static_cast<size_t>(ch)], be = bv[static_cast<size_t>(ch)];
    for (int img = 0; img < n; ++img) {
      const double* plane = xv.data() + (static_cast<size_t>(img) * c + ch) * hw;
      double* xh = xhat.data() + (static_cast<size_t>(img) * c + ch) * hw;
      double* o = out.data() + (static_cast<size_t>(img) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) {
        double h = (plane[i] - mu) * is;
        xh[i] = h;
        o[i] = ga * h + be;
      }
    }
    // running stats track the unbiased variance, as is conventional
    double unbiased = var * m / (m - 1);
    running_mean[static_cast<size_t>(ch)] =
        (1.0 - momentum) * running_mean[static_cast<size_t>(ch)] + momentum * mu;
    running_var[static_cast<size_t>(ch)] =
        (1.0 - momentum) * running_var[static_cast<size_t>(ch)] + momentum * unbiased;
  }
  bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [x, gamma, beta, r, n, c, hw, m, xhat = std::move(xhat),
                     invstd = std::move(invstd)](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      const Tensor& gv2 = t.val(gamma);
                      bool need_x = t.requires_grad(x);
                      for (int ch = 0; ch < c; ++ch) {
                        double sum_g = 0.0, sum_gx = 0.0;
                        for (int img = 0; img < n; ++img) {
                          const double* gp = g.data() + (static_cast<size_t>(img) * c + ch) * hw;
                          const double* xh = xhat.data() + (static_cast<size_t>(img) * c + ch) * hw;
                          for (int i = 0; i < hw; ++i) {
                            sum_g += gp[i];
                            sum_gx += gp[i] * xh[i];
                          }
                        }
                        if (t.requires_grad(beta))
                          t.grad_buf(beta.id)[static_cast<size_t>(ch)] += sum_g;
                        if (t.requires_grad(gamma))
                          t.grad_buf(gamma.id)[static_cast<size_t>(ch)] += sum_gx;
                        if (need_x) {
                          Tensor& gx = t.grad_buf(x.id);
                          double ga = gv2[static_cast<size_t>(ch)];
                          double is = invstd[static_cast<size_t>(ch)];
                          double mg = sum_g / m, mgx = sum_gx / m;
                          for (int img = 0; img < n; ++img) {
                            const double* gp = g.data() + (static_cast<size_t>(img) * c + ch) * hw;
                            const double* xh = xhat.data() + (static_cast<size_t>(img) * c + ch) * hw;
                            double* gxa = gx.data() + (static_cast<size_t>(img) * c + ch) * hw;
                            for (int i = 0; i < hw; ++i)
                              gxa[i] += ga * is * (gp[i] - mg - xh[i] * mgx);
                          }
                        }
                      }
                    });
}

Var Tape::batchnorm_eval(Var x, Var gamma, Var beta, const Tensor& running_mean,
                         const Tensor& running_var, double eps) {
  const Tensor &xv = val(x), &gv = val(gamma), &bv = val(beta);
  if (xv.rank() != 4) fail("batchnorm: expected rank-4 input, got " + xv.shape_str());
  int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (gv.numel() != c || bv.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    fail("batchnorm: parameter shape mismatch for input " + xv.shape_str());
  std::vector<double> scale_v(static_cast<size_t>(c)), shift_v(static_cast<size_t>(c));
  std::vector<double> invstd(static_cast<size_t>(c)),
      mean_v(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    double is = 1.0 / std::sqrt(running_var[static_cast<size_t>(ch)] + eps);
    invstd[static_cast<size_t>(ch)] = is;
    mean_v[static_cast<size_t>(ch)] = running_mean[static_cast<size_t>(ch)];
    scale_v[static_cast<size_t>(ch)] = gv[static_cast<size_t>(ch)] * is;
    shift_v[static_cast<size_t>(ch)] =
        bv[static_cast<size_t>(ch)] - gv[static_cast<size_t>(ch)] * is * mean_v[static_cast<size_t>(ch)];
  }
  Tensor out = Tensor::uninit(xv.shape());
  for (int img = 0; img < n; ++img)
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = xv.data() + (static_cast<size_t>(img) * c + ch) * hw;
      double* o = out.data() + (static_cast<size_t>(img) * c + ch) * hw;
      double sc = scale_v[static_cast<size_t>(ch)], sh = shift_v[static_cast<size_t>(ch)];
      for (int i = 0; i < hw; ++i) o[i] = sc * plane[i] + sh;
    }
  bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [x, gamma, beta, r, n, c, hw, invstd = std::move(invstd),
                     mean_v = std::move(mean_v)](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      const Tensor &xv2 = t.val(x), &gv2 = t.val(gamma);
                      for (int ch = 0; ch < c; ++ch) {
                        double is = invstd[static_cast<size_t>(ch)];
                        double mu = mean_v[static_cast<size_t>(ch)];
                        double sum_g = 0.0, sum_gx = 0.0;
                        for (int img = 0; img < n; ++img) {
                          const double* gp = g.data() + (static_cast<size_t>(img) * c + ch) * hw;
                          const double* xp = xv2.data() + (static_cast<size_t>(img) * c + ch) * hw;
                          for (int i = 0; i < hw; ++i) {
                            sum_g += gp[i];
                            sum_gx += gp[i] * (xp[i] - mu) * is;
                          }
                        }
                        if (t.requires_grad(beta))
                          t.grad_buf(beta.id)[static_cast<size_t>(ch)] += sum_g;
                        if (t.requires_grad(gamma))
                          t.grad_buf(gamma.id)[static_cast<size_t>(ch)] += sum_gx;
                        if (t.requires_grad(x)) {
                          Tensor& gx = t.grad_buf(x.id);
                          double sc = gv2[static_cast<size_t>(ch)] * is;
                          for (int img = 0; img < n; ++img) {
                            const double* gp = g.data() + (static_cast<size_t>(img) * c + ch) * hw;
                            double* gxa = gx.data() + (static_cast<size_t>(img) * c + ch) * hw;
                            for (int i = 0; i < hw; ++i) gxa[i] += gp[i] * sc;
                          }
                        }
                      }
                    });
}

Var Tape::softmax_cross_entropy(Var logits, std::vector<int> labels) {
  const Tensor& zv = val(logits);
  if (zv.rank() != 2) fail("softmax_cross_entropy: expected rank-2 logits, got " + zv.shape_str());
  int n = zv.dim(0), k = zv.dim(1);
  if (static_cast<int>(labels.size()) != n)
    fail("softmax_cross_entropy: label count mismatch");
  Tensor probs = Tensor::uninit({n, k});
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= k)
      fail("softmax_cross_entropy: label out of range");
    double mx = zv.at2(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, zv.at2(i, j));
    double lse = 0.0;
    for (int j = 0; j < k; ++j) lse += std::exp(zv.at2(i, j) - mx);
    lse = std::log(lse) + mx;
    for (int j = 0; j < k; ++j) probs.at2(i, j) = std::exp(zv.at2(i, j) - lse);
    total += lse - zv.at2(i, labels[static_cast<size_t>(i)]);
  }
  bool rg = requires_grad(logits);
  Var r{static_cast<int>(nodes_.size())};
  return push(Tensor::scalar(total / n), rg,
              !rg ? std::function<void(Tape&)>()
                  : [logits, r, n, k, probs = std::move(probs),
                     labels = std::move(labels)](Tape& t) {
                      double g = t.grad_buf(r.id)[0] / n;
                      Tensor& gz = t.grad_buf(logits.id);
                      for (int i = 0; i < n; ++i)
                        for (int j = 0; j < k; ++j)
                          gz.at2(i, j) += g * (probs.at2(i, j) -
                                               (j == labels[static_cast<size_t>(i)] ? 1.0 : 0.0));
                    });
}

Var Tape::channel_mask(Var x, Tensor mask) {
  const Tensor& xv = val(x);
  if (xv.rank() != 4) fail("channel_mask: expected rank-4 tensor, got " + xv.shape_str());
  int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (mask.numel() != c) fail("channel_mask: mask shape mismatch " + mask.shape_str());
  Tensor out = Tensor::uninit(xv.shape());
  for (int img = 0; img < n; ++img)
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = xv.data() + (static_cast<size_t>(img) * c + ch) * hw;
      double* o = out.data() + (static_cast<size_t>(img) * c + ch) * hw;
      double mv = mask[static_cast<size_t>(ch)];
      for (int i = 0; i < hw; ++i) o[i] = plane[i] * mv;
    }
  bool rg = requires_grad(x);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [x, r, n, c, hw, mask = std::move(mask)](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      Tensor& gx = t.grad_buf(x.id);
                      for (int img = 0; img < n; ++img)
                        for (int ch = 0; ch < c; ++ch) {
                          const double* gp = g.data() + (static_cast<size_t>(img) * c + ch) * hw;
                          double* gxa = gx.data() + (static_cast<size_t>(img) * c + ch) * hw;
                          double mv = mask[static_cast<size_t>(ch)];
                          for (int i = 0; i < hw; ++i) gxa[i] += gp[i] * mv;
                        }
                    });
}

Var Tape::mask_patch(Var x, Var mask, Var pattern) {
  const Tensor &xv = val(x), &mv = val(mask), &pv = val(pattern);
  if (xv.rank() != 4 || mv.rank() != 2 || pv.rank() != 3)
    fail("mask_patch: bad ranks x" + xv.shape_str() + " m" + mv.shape_str() + " b" +
         pv.shape_str());
  int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (mv.dim(0) != h || mv.dim(1) != w || pv.dim(0) != c || pv.dim(1) != h || pv.dim(2) != w)
    fail("mask_patch: shape mismatch x" + xv.shape_str() + " m" + mv.shape_str() + " b" +
         pv.shape_str());
  Tensor out = Tensor::uninit(xv.shape());
  for (int img = 0; img < n; ++img)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double m = mv.at2(i, j);
          out.at4(img, ch, i, j) =
              (1.0 - m) * xv.at4(img, ch, i, j) + m * pv.at3(ch, i, j);
        }
  bool rg = requires_grad(x) || requires_grad(mask) || requires_grad(pattern);
  Var r{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg,
              !rg ? std::function<void(Tape&)>()
                  : [x, mask, pattern, r, n, c, h, w](Tape& t) {
                      const Tensor& g = t.grad_buf(r.id);
                      const Tensor &xv2 = t.val(x), &mv2 = t.val(mask), &pv2 = t.val(pattern);
                      bool need_x = t.requires_grad(x);
                      bool need_m = t.requires_grad(mask);
                      bool need_p = t.requires_grad(pattern);
                      Tensor* gx = need_x ? &t.grad_buf(x.id) : nullptr;
                      Tensor* gm = need_m ? &t.grad_buf(mask.id) : nullptr;
                      Tensor* gp = need_p ? &t.grad_buf(pattern.id) : nullptr;
                      for (int img = 0; img < n; ++img)
                        for (int ch = 0; ch < c; ++ch)
                          for (int i = 0; i < h; ++i)
                            for (int j = 0; j < w; ++j) {
                              double gv = g.at4(img, ch, i, j);
                              if (need_x) gx->at4(img, ch, i, j) += gv * (1.0 - mv2.at2(i, j));
                              if (need_m)
                                gm->at2(i, j) +=
                                    gv * (pv2.at3(ch, i, j) - xv2.at4(img, ch, i, j));
                              if (need_p) gp->at3(ch, i, j) += gv * mv2.at2(i, j);
                            }
                    });
}

}  // namespace blab
