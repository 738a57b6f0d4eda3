#pragma once

// Reverse-mode autodiff on Tensors. A Tape records one forward pass; backward
// walks the nodes in reverse creation order (creation order is topological).
// Networks bind their parameter tensors as leaves through Binder, so after
// backward() the caller can look up parameter gradients by address.

#include <functional>
#include <memory>
#include <unordered_map>

#include <Eigen/Dense>

#include "invlba/core.hpp"

namespace invlba {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Tensor& val() const;
  const Tensor& grad() const;
};

class Tape {
 public:
  struct Node {
    Tensor val;
    Tensor grad;
    std::function<void(Tape&, int)> back;  // (tape, self id); null for leaves
  };

  int push(Tensor value) {
    Node n;
    n.grad = Tensor(value.shape);
    n.val = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_back(int id, std::function<void(Tape&, int)> back) {
    nodes_[static_cast<size_t>(id)].back = std::move(back);
  }

  Var leaf(Tensor value) { return Var{this, push(std::move(value))}; }
  Var leaf_scalar(Scalar x) { return leaf(Tensor::scalar(x)); }

  Tensor& val(int id) { return nodes_[static_cast<size_t>(id)].val; }
  Tensor& grad(int id) { return nodes_[static_cast<size_t>(id)].grad; }
  const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
  const Tensor& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

  void backward(Var root) {
    if (root.tape != this) throw ContractError("backward: var from another tape");
    if (val(root.id).size() != 1) throw ContractError("backward: root must be scalar");
    grad(root.id).v[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<size_t>(i)];
      if (n.back) n.back(*this, i);
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::val() const { return tape->val(id); }
inline const Tensor& Var::grad() const { return tape->grad(id); }

// Binds external parameter tensors into a tape exactly once per tape, and
// retrieves their gradients after backward.
class Binder {
 public:
  explicit Binder(Tape& t) : tape_(&t) {}

  Var operator()(const Tensor& p) {
    auto it = ids_.find(&p);
    if (it != ids_.end()) return Var{tape_, it->second};
    int id = tape_->push(p);
    ids_.emplace(&p, id);
    return Var{tape_, id};
  }

  bool bound(const Tensor& p) const { return ids_.count(&p) != 0; }

  const Tensor& grad_of(const Tensor& p) const {
    auto it = ids_.find(&p);
    if (it == ids_.end()) throw ContractError("Binder: parameter was never bound");
    return tape_->grad(it->second);
  }

  Tape& tape() { return *tape_; }

 private:
  Tape* tape_;
  std::unordered_map<const Tensor*, int> ids_;
};

namespace ad {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline Tape& same_tape(Var a, Var b, const char* where) {
  if (a.tape != b.tape || a.tape == nullptr)
    throw ContractError(std::string(where) + ": vars from different tapes");
  return *a.tape;
}

template <typename Back>
inline Var node(Tape& t, Tensor value, Back&& back) {
  int id = t.push(std::move(value));
  t.set_back(id, std::forward<Back>(back));
  return Var{&t, id};
}

// ---- elementwise -----------------------------------------------------------

inline Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  check_same_shape(a.val(), b.val(), "add");
  int ia = a.id, ib = b.id;
  return node(t, t_add(a.val(), b.val()), [ia, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    Tensor& gb = tp.grad(ib);
    for (int i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  check_same_shape(a.val(), b.val(), "sub");
  int ia = a.id, ib = b.id;
  return node(t, t_sub(a.val(), b.val()), [ia, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    Tensor& gb = tp.grad(ib);
    for (int i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  check_same_shape(a.val(), b.val(), "mul");
  int ia = a.id, ib = b.id;
  return node(t, t_mul(a.val(), b.val()), [ia, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& va = tp.val(ia);
    const Tensor& vb = tp.val(ib);
    Tensor& ga = tp.grad(ia);
    Tensor& gb = tp.grad(ib);
    for (int i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * vb[i];
      gb[i] += g[i] * va[i];
    }
  });
}

inline Var scale(Var a, Scalar s) {
  int ia = a.id;
  return node(*a.tape, t_scale(a.val(), s), [ia, s](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var add_scalar(Var a, Scalar s) {
  Tensor out = a.val();
  for (auto& x : out.v) x += s;
  int ia = a.id;
  return node(*a.tape, std::move(out), [ia](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// a + s*b, shared shape
inline Var axpy(Var a, Scalar s, Var b) {
  Tape& t = same_tape(a, b, "axpy");
  check_same_shape(a.val(), b.val(), "axpy");
  int ia = a.id, ib = b.id;
  Tensor out = a.val();
  const Tensor& vb = b.val();
  for (int i = 0; i < out.size(); ++i) out[i] += s * vb[i];
  return node(t, std::move(out), [ia, ib, s](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    Tensor& gb = tp.grad(ib);
    for (int i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += s * g[i];
    }
  });
}

// ---- activations -----------------------------------------------------------

inline Var relu(Var a) {
  Tensor out = a.val();
  for (auto& x : out.v) x = x > 0 ? x : 0;
  int ia = a.id;
  return node(*a.tape, std::move(out), [ia](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& va = tp.val(ia);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < g.size(); ++i)
      if (va[i] > 0) ga[i] += g[i];
  });
}

inline Var silu(Var a) {
  Tensor out = a.val();
  for (auto& x : out.v) x = x / (1.0 + std::exp(-x));
  int ia = a.id;
  return node(*a.tape, std::move(out), [ia](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& va = tp.val(ia);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < g.size(); ++i) {
      Scalar s = 1.0 / (1.0 + std::exp(-va[i]));
      ga[i] += g[i] * s * (1.0 + va[i] * (1.0 - s));
    }
  });
}

inline Var sigmoid(Var a) {
  Tensor out = a.val();
  for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
  int ia = a.id;
  return node(*a.tape, std::move(out), [ia](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& vo = tp.val(self);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < g.size(); ++i) ga[i] += g[i] * vo[i] * (1.0 - vo[i]);
  });
}

// ---- shape ------------------------------------------------------------------

inline Var reshape(Var a, std::vector<int> shape) {
  int ia = a.id;
  return node(*a.tape, a.val().reshaped(std::move(shape)), [ia](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Var concat_ch(Var a, Var b) {
  Tape& t = same_tape(a, b, "concat_ch");
  const Tensor& va = a.val();
  const Tensor& vb = b.val();
  if (va.shape.size() != 3 || vb.shape.size() != 3 || va.shape[1] != vb.shape[1] ||
      va.shape[2] != vb.shape[2])
    throw ContractError("concat_ch: incompatible shapes");
  Tensor out({va.shape[0] + vb.shape[0], va.shape[1], va.shape[2]});
  std::copy(va.v.begin(), va.v.end(), out.v.begin());
  std::copy(vb.v.begin(), vb.v.end(), out.v.begin() + va.size());
  int ia = a.id, ib = b.id, na = va.size();
  return node(t, std::move(out), [ia, ib, na](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    Tensor& gb = tp.grad(ib);
    for (int i = 0; i < na; ++i) ga[i] += g[i];
    for (int i = na; i < g.size(); ++i) gb[i - na] += g[i];
  });
}

// broadcast per-channel bias over CHW
inline Var add_ch_bias(Var x, Var b) {
  Tape& t = same_tape(x, b, "add_ch_bias");
  const Tensor& vx = x.val();
  const Tensor& vb = b.val();
  if (vx.shape.size() != 3 || vb.size() != vx.shape[0])
    throw ContractError("add_ch_bias: shape mismatch");
  Tensor out = vx;
  int hw = vx.shape[1] * vx.shape[2];
  for (int c = 0; c < vx.shape[0]; ++c)
    for (int i = 0; i < hw; ++i) out[c * hw + i] += vb[c];
  int ix = x.id, ib = b.id;
  return node(t, std::move(out), [ix, ib, hw](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(ix);
    Tensor& gb = tp.grad(ib);
    int C = gb.size();
    for (int c = 0; c < C; ++c) {
      Scalar s = 0;
      for (int i = 0; i < hw; ++i) {
        gx[c * hw + i] += g[c * hw + i];
        s += g[c * hw + i];
      }
      gb[c] += s;
    }
  });
}

// ---- reductions -------------------------------------------------------------

inline Var sum_all(Var a) {
  Scalar s = 0;
  for (Scalar x : a.val().v) s += x;
  int ia = a.id;
  return node(*a.tape, Tensor::scalar(s), [ia](Tape& tp, int self) {
    Scalar g = tp.grad(self)[0];
    Tensor& ga = tp.grad(ia);
    for (auto& x : ga.v) x += g;
  });
}

inline Var mean_all(Var a) {
  int n = a.val().size();
  return scale(sum_all(a), 1.0 / n);
}

// sum of absolute values (l1); used by trigger reverse-engineering
inline Var l1_sum(Var a) {
  Scalar s = 0;
  for (Scalar x : a.val().v) s += std::abs(x);
  int ia = a.id;
  return node(*a.tape, Tensor::scalar(s), [ia](Tape& tp, int self) {
    Scalar g = tp.grad(self)[0];
    const Tensor& va = tp.val(ia);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < ga.size(); ++i) ga[i] += g * (va[i] > 0 ? 1.0 : (va[i] < 0 ? -1.0 : 0.0));
  });
}

// mean((a - target)^2) against a constant target
inline Var mse_against(Var a, const Tensor& target) {
  check_same_shape(a.val(), target, "mse_against");
  const Tensor& va = a.val();
  Scalar s = 0;
  for (int i = 0; i < va.size(); ++i) {
    Scalar d = va[i] - target[i];
    s += d * d;
  }
  int n = va.size();
  int ia = a.id;
  Tensor tgt = target;
  return node(*a.tape, Tensor::scalar(s / n), [ia, n, tgt](Tape& tp, int self) {
    Scalar g = tp.grad(self)[0];
    const Tensor& va = tp.val(ia);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < ga.size(); ++i) ga[i] += g * 2.0 * (va[i] - tgt[i]) / n;
  });
}

inline Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("mean_of: empty");
  Var acc = xs[0];
  for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, 1.0 / static_cast<double>(xs.size()));
}

// ---- dense / matmul ----------------------------------------------------------

// x:[in], W:[out,in], b:[out] -> [out]
inline Var dense(Var x, Var W, Var b) {
  Tape& t = same_tape(x, W, "dense");
  const Tensor& vx = x.val();
  const Tensor& vW = W.val();
  const Tensor& vb = b.val();
  if (vW.shape.size() != 2 || vx.size() != vW.shape[1] || vb.size() != vW.shape[0])
    throw ContractError("dense: shape mismatch");
  int out_n = vW.shape[0], in_n = vW.shape[1];
  Tensor out({out_n});
  CMapMat Wm(vW.v.data(), out_n, in_n);
  Eigen::Map<const Eigen::VectorXd> xm(vx.v.data(), in_n);
  Eigen::Map<Eigen::VectorXd> om(out.v.data(), out_n);
  om = Wm * xm;
  for (int i = 0; i < out_n; ++i) out[i] += vb[i];
  int ix = x.id, iW = W.id, ib = b.id;
  return node(t, std::move(out), [ix, iW, ib, out_n, in_n](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& vx = tp.val(ix);
    const Tensor& vW = tp.val(iW);
    Eigen::Map<const Eigen::VectorXd> gm(g.v.data(), out_n);
    Eigen::Map<const Eigen::VectorXd> xm(vx.v.data(), in_n);
    CMapMat Wm(vW.v.data(), out_n, in_n);
    {
      Tensor& gx = tp.grad(ix);
      Eigen::Map<Eigen::VectorXd> gxm(gx.v.data(), in_n);
      gxm.noalias() += Wm.transpose() * gm;
    }
    {
      Tensor& gW = tp.grad(iW);
      MapMat gWm(gW.v.data(), out_n, in_n);
      gWm.noalias() += gm * xm.transpose();
    }
    {
      Tensor& gb = tp.grad(ib);
      for (int i = 0; i < out_n; ++i) gb[i] += g[i];
    }
  });
}

// A:[m,k] x B:[k,n] -> [m,n]
inline Var matmul(Var A, Var B) {
  Tape& t = same_tape(A, B, "matmul");
  const Tensor& va = A.val();
  const Tensor& vb = B.val();
  if (va.shape.size() != 2 || vb.shape.size() != 2 || va.shape[1] != vb.shape[0])
    throw ContractError("matmul: shape mismatch");
  int m = va.shape[0], k = va.shape[1], n = vb.shape[1];
  Tensor out({m, n});
  CMapMat Am(va.v.data(), m, k);
  CMapMat Bm(vb.v.data(), k, n);
  MapMat Om(out.v.data(), m, n);
  Om.noalias() = Am * Bm;
  int ia = A.id, ib = B.id;
  return node(t, std::move(out), [ia, ib, m, k, n](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    CMapMat Gm(g.v.data(), m, n);
    CMapMat Am(tp.val(ia).v.data(), m, k);
    CMapMat Bm(tp.val(ib).v.data(), k, n);
    MapMat gA(tp.grad(ia).v.data(), m, k);
    MapMat gB(tp.grad(ib).v.data(), k, n);
    gA.noalias() += Gm * Bm.transpose();
    gB.noalias() += Am.transpose() * Gm;
  });
}

inline Var transpose2(Var A) {
  const Tensor& va = A.val();
  if (va.shape.size() != 2) throw ContractError("transpose2: rank must be 2");
  int m = va.shape[0], n = va.shape[1];
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.v[static_cast<size_t>(j) * m + i] = va.v[static_cast<size_t>(i) * n + j];
  int ia = A.id;
  return node(*A.tape, std::move(out), [ia, m, n](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        ga.v[static_cast<size_t>(i) * n + j] += g.v[static_cast<size_t>(j) * m + i];
  });
}

// ---- conv / pooling ----------------------------------------------------------

namespace detail {

struct ConvGeom {
  int ic, ih, iw, oc, k, stride, pad, oh, ow;
};

inline ConvGeom conv_geom(const Tensor& x, const Tensor& W, int stride, int pad) {
  if (x.shape.size() != 3 || W.shape.size() != 4) throw ContractError("conv2d: rank mismatch");
  ConvGeom g;
  g.ic = x.shape[0];
  g.ih = x.shape[1];
  g.iw = x.shape[2];
  g.oc = W.shape[0];
  g.k = W.shape[2];
  if (W.shape[1] != g.ic || W.shape[3] != g.k) throw ContractError("conv2d: weight shape mismatch");
  g.stride = stride;
  g.pad = pad;
  g.oh = (g.ih + 2 * pad - g.k) / stride + 1;
  g.ow = (g.iw + 2 * pad - g.k) / stride + 1;
  if (g.oh <= 0 || g.ow <= 0) throw ContractError("conv2d: empty output");
  return g;
}

inline void im2col(const Tensor& x, const ConvGeom& g, std::vector<Scalar>& cols) {
  // cols: [ic*k*k, oh*ow], row-major
  int ohow = g.oh * g.ow;
  cols.assign(static_cast<size_t>(g.ic) * g.k * g.k * ohow, 0.0);
  for (int c = 0; c < g.ic; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        size_t row = (static_cast<size_t>(c) * g.k + ky) * g.k + kx;
        Scalar* dst = cols.data() + row * ohow;
        for (int oy = 0; oy < g.oh; ++oy) {
          int sy = oy * g.stride + ky - g.pad;
          if (sy < 0 || sy >= g.ih) {
            dst += g.ow;
            continue;
          }
          const Scalar* src = x.v.data() + (static_cast<size_t>(c) * g.ih + sy) * g.iw;
          for (int ox = 0; ox < g.ow; ++ox, ++dst) {
            int sx = ox * g.stride + kx - g.pad;
            if (sx >= 0 && sx < g.iw) *dst = src[sx];
          }
        }
      }
}

inline void col2im_add(const std::vector<Scalar>& cols, const ConvGeom& g, Tensor& dx) {
  int ohow = g.oh * g.ow;
  for (int c = 0; c < g.ic; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        size_t row = (static_cast<size_t>(c) * g.k + ky) * g.k + kx;
        const Scalar* src = cols.data() + row * ohow;
        for (int oy = 0; oy < g.oh; ++oy) {
          int sy = oy * g.stride + ky - g.pad;
          if (sy < 0 || sy >= g.ih) {
            src += g.ow;
            continue;
          }
          Scalar* dst = dx.v.data() + (static_cast<size_t>(c) * g.ih + sy) * g.iw;
          for (int ox = 0; ox < g.ow; ++ox, ++src) {
            int sx = ox * g.stride + kx - g.pad;
            if (sx >= 0 && sx < g.iw) dst[sx] += *src;
          }
        }
      }
}

}  // namespace detail

// x:[ic,ih,iw], W:[oc,ic,k,k], b:[oc]
inline Var conv2d(Var x, Var W, Var b, int stride = 1, int pad = 1) {
  Tape& t = same_tape(x, W, "conv2d");
  const Tensor& vx = x.val();
  const Tensor& vW = W.val();
  const Tensor& vb = b.val();
  auto g = detail::conv_geom(vx, vW, stride, pad);
  if (vb.size() != g.oc) throw ContractError("conv2d: bias size mismatch");
  auto cols = std::make_shared<std::vector<Scalar>>();
  detail::im2col(vx, g, *cols);
  int ohow = g.oh * g.ow, ickk = g.ic * g.k * g.k;
  Tensor out({g.oc, g.oh, g.ow});
  {
    CMapMat Wm(vW.v.data(), g.oc, ickk);
    CMapMat Cm(cols->data(), ickk, ohow);
    MapMat Om(out.v.data(), g.oc, ohow);
    Om.noalias() = Wm * Cm;
    for (int c = 0; c < g.oc; ++c)
      for (int i = 0; i < ohow; ++i) out.v[static_cast<size_t>(c) * ohow + i] += vb[c];
  }
  int ix = x.id, iW = W.id, ib = b.id;
  return node(t, std::move(out), [ix, iW, ib, g, cols, ohow, ickk](Tape& tp, int self) {
    const Tensor& gy = tp.grad(self);
    CMapMat Gm(gy.v.data(), g.oc, ohow);
    {
      Tensor& gW = tp.grad(iW);
      MapMat gWm(gW.v.data(), g.oc, ickk);
      CMapMat Cm(cols->data(), ickk, ohow);
      gWm.noalias() += Gm * Cm.transpose();
    }
    {
      Tensor& gb = tp.grad(ib);
      for (int c = 0; c < g.oc; ++c) {
        Scalar s = 0;
        for (int i = 0; i < ohow; ++i) s += gy.v[static_cast<size_t>(c) * ohow + i];
        gb[c] += s;
      }
    }
    {
      const Tensor& vW = tp.val(iW);
      CMapMat Wm(vW.v.data(), g.oc, ickk);
      std::vector<Scalar> dcols(static_cast<size_t>(ickk) * ohow);
      MapMat Dm(dcols.data(), ickk, ohow);
      Dm.noalias() = Wm.transpose() * Gm;
      detail::col2im_add(dcols, g, tp.grad(ix));
    }
  });
}

// 2x2 average pooling, stride 2
inline Var avgpool2(Var x) {
  const Tensor& vx = x.val();
  if (vx.shape.size() != 3 || vx.shape[1] % 2 || vx.shape[2] % 2)
    throw ContractError("avgpool2: needs even CHW input");
  int C = vx.shape[0], H = vx.shape[1], W = vx.shape[2];
  Tensor out({C, H / 2, W / 2});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H / 2; ++y)
      for (int xx = 0; xx < W / 2; ++xx)
        out.at(c, y, xx) = 0.25 * (vx.at(c, 2 * y, 2 * xx) + vx.at(c, 2 * y, 2 * xx + 1) +
                                   vx.at(c, 2 * y + 1, 2 * xx) + vx.at(c, 2 * y + 1, 2 * xx + 1));
  int ix = x.id;
  return node(*x.tape, std::move(out), [ix, C, H, W](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(ix);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H / 2; ++y)
        for (int xx = 0; xx < W / 2; ++xx) {
          Scalar d = 0.25 * g.at(c, y, xx);
          gx.at(c, 2 * y, 2 * xx) += d;
          gx.at(c, 2 * y, 2 * xx + 1) += d;
          gx.at(c, 2 * y + 1, 2 * xx) += d;
          gx.at(c, 2 * y + 1, 2 * xx + 1) += d;
        }
  });
}

// nearest-neighbour 2x upsample
inline Var upsample2(Var x) {
  const Tensor& vx = x.val();
  if (vx.shape.size() != 3) throw ContractError("upsample2: CHW input required");
  int C = vx.shape[0], H = vx.shape[1], W = vx.shape[2];
  Tensor out({C, 2 * H, 2 * W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx) out.at(c, y, xx) = vx.at(c, y / 2, xx / 2);
  int ix = x.id;
  return node(*x.tape, std::move(out), [ix, C, H, W](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(ix);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx) gx.at(c, y / 2, xx / 2) += g.at(c, y, xx);
  });
}

// ---- rows ops for the tiny transformer ---------------------------------------

inline Var softmax_rows(Var A) {
  const Tensor& va = A.val();
  if (va.shape.size() != 2) throw ContractError("softmax_rows: rank must be 2");
  int m = va.shape[0], n = va.shape[1];
  Tensor out = va;
  for (int i = 0; i < m; ++i) {
    Scalar* row = out.v.data() + static_cast<size_t>(i) * n;
    Scalar mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    Scalar z = 0;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= z;
  }
  int ia = A.id;
  return node(*A.tape, std::move(out), [ia, m, n](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& p = tp.val(self);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < m; ++i) {
      const Scalar* gr = g.v.data() + static_cast<size_t>(i) * n;
      const Scalar* pr = p.v.data() + static_cast<size_t>(i) * n;
      Scalar dot = 0;
      for (int j = 0; j < n; ++j) dot += gr[j] * pr[j];
      Scalar* gar = ga.v.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) gar[j] += pr[j] * (gr[j] - dot);
    }
  });
}

// per-row layer norm with learned gain/bias of width n
inline Var layernorm_rows(Var A, Var gamma, Var beta) {
  Tape& t = same_tape(A, gamma, "layernorm_rows");
  const Tensor& va = A.val();
  if (va.shape.size() != 2) throw ContractError("layernorm_rows: rank must be 2");
  int m = va.shape[0], n = va.shape[1];
  if (gamma.val().size() != n || beta.val().size() != n)
    throw ContractError("layernorm_rows: gain/bias width mismatch");
  const Scalar eps = 1e-5;
  Tensor out({m, n});
  auto stats = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(m) * 2);
  for (int i = 0; i < m; ++i) {
    const Scalar* row = va.v.data() + static_cast<size_t>(i) * n;
    Scalar mu = 0;
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= n;
    Scalar var = 0;
    for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= n;
    Scalar inv = 1.0 / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(i) * 2] = mu;
    (*stats)[static_cast<size_t>(i) * 2 + 1] = inv;
    for (int j = 0; j < n; ++j)
      out.v[static_cast<size_t>(i) * n + j] = (row[j] - mu) * inv * gamma.val()[j] + beta.val()[j];
  }
  int ia = A.id, ig = gamma.id, ib = beta.id;
  return node(t, std::move(out), [ia, ig, ib, m, n, stats](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& va = tp.val(ia);
    const Tensor& vg = tp.val(ig);
    Tensor& ga = tp.grad(ia);
    Tensor& gg = tp.grad(ig);
    Tensor& gb = tp.grad(ib);
    for (int i = 0; i < m; ++i) {
      Scalar mu = (*stats)[static_cast<size_t>(i) * 2];
      Scalar inv = (*stats)[static_cast<size_t>(i) * 2 + 1];
      const Scalar* gr = g.v.data() + static_cast<size_t>(i) * n;
      const Scalar* xr = va.v.data() + static_cast<size_t>(i) * n;
      Scalar sum_gxhat = 0, sum_g = 0;
      for (int j = 0; j < n; ++j) {
        Scalar xhat = (xr[j] - mu) * inv;
        gg[j] += gr[j] * xhat;
        gb[j] += gr[j];
        sum_gxhat += gr[j] * vg[j] * xhat;
        sum_g += gr[j] * vg[j];
      }
      Scalar* gar = ga.v.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        Scalar xhat = (xr[j] - mu) * inv;
        gar[j] += inv * (gr[j] * vg[j] - sum_g / n - xhat * sum_gxhat / n);
      }
    }
  });
}

// [T,D] -> [D], mean over rows
inline Var mean_rows(Var A) {
  const Tensor& va = A.val();
  if (va.shape.size() != 2) throw ContractError("mean_rows: rank must be 2");
  int m = va.shape[0], n = va.shape[1];
  Tensor out({n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j] += va.v[static_cast<size_t>(i) * n + j] / m;
  int ia = A.id;
  return node(*A.tape, std::move(out), [ia, m, n](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga.v[static_cast<size_t>(i) * n + j] += g[j] / m;
  });
}

// ---- losses ------------------------------------------------------------------

// numerically stable cross-entropy of logits against an integer label
inline Var softmax_ce(Var logits, int label) {
  const Tensor& vl = logits.val();
  int n = vl.size();
  if (label < 0 || label >= n) throw ContractError("softmax_ce: label out of range");
  Scalar mx = vl[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, vl[i]);
  Scalar z = 0;
  for (int i = 0; i < n; ++i) z += std::exp(vl[i] - mx);
  Scalar loss = -(vl[label] - mx - std::log(z));
  int il = logits.id;
  return node(*logits.tape, Tensor::scalar(loss), [il, label, n](Tape& tp, int self) {
    Scalar g = tp.grad(self)[0];
    const Tensor& vl = tp.val(il);
    Tensor& gl = tp.grad(il);
    Scalar mx = vl[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, vl[i]);
    Scalar z = 0;
    for (int i = 0; i < n; ++i) z += std::exp(vl[i] - mx);
    for (int i = 0; i < n; ++i) {
      Scalar p = std::exp(vl[i] - mx) / z;
      gl[i] += g * (p - (i == label ? 1.0 : 0.0));
    }
  });
}

inline Tensor softmax(const Tensor& logits) {
  Tensor p = logits;
  Scalar mx = p[0];
  for (int i = 1; i < p.size(); ++i) mx = std::max(mx, p[i]);
  Scalar z = 0;
  for (int i = 0; i < p.size(); ++i) {
    p[i] = std::exp(p[i] - mx);
    z += p[i];
  }
  for (int i = 0; i < p.size(); ++i) p[i] /= z;
  return p;
}

}  // namespace ad
}  // namespace invlba
