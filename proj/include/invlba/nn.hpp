#pragma once

// Small neural-network building blocks on top of the autodiff tape, plus the
// two first-order optimizers used across training loops.

#include "invlba/autodiff.hpp"

namespace invlba {
namespace nn {

inline Tensor he_init(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  Scalar s = std::sqrt(2.0 / fan_in);
  for (auto& x : t.v) x = s * rng.normal();
  return t;
}

struct Conv2d {
  Tensor W, b;
  int stride = 1, pad = 1;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int k, int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    W = he_init({out_ch, in_ch, k, k}, in_ch * k * k, rng);
    b = Tensor({out_ch});
  }
  Var fwd(Binder& bind, Var x) const { return ad::conv2d(x, bind(W), bind(b), stride, pad); }
  void params(std::vector<Tensor*>& out) {
    out.push_back(&W);
    out.push_back(&b);
  }
};

struct Dense {
  Tensor W, b;

  Dense() = default;
  Dense(int in_n, int out_n, Rng& rng) {
    W = he_init({out_n, in_n}, in_n, rng);
    b = Tensor({out_n});
  }
  Var fwd(Binder& bind, Var x) const { return ad::dense(x, bind(W), bind(b)); }
  void params(std::vector<Tensor*>& out) {
    out.push_back(&W);
    out.push_back(&b);
  }
};

// ---------------------------------------------------------------------------
// Optimizers. Slot order must match the params() order and stay stable across
// steps; both are deterministic given the gradient sequence.

enum class OptKind { Sgd, Adam };

inline OptKind opt_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptKind::Sgd;
  if (s == "adam") return OptKind::Adam;
  throw ConfigError("unknown optimizer kind: " + s);
}
inline std::string to_string(OptKind k) { return k == OptKind::Sgd ? "sgd" : "adam"; }

class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum, double weight_decay)
      : lr_(lr), mu_(momentum), wd_(weight_decay) {}

  void step(const std::vector<Tensor*>& ps, const std::vector<Tensor>& grads, double lr_scale = 1.0) {
    if (vel_.empty())
      for (auto* p : ps) vel_.emplace_back(p->shape);
    for (size_t i = 0; i < ps.size(); ++i) {
      Tensor& p = *ps[i];
      Tensor& v = vel_[i];
      const Tensor& g = grads[i];
      for (int j = 0; j < p.size(); ++j) {
        v[j] = mu_ * v[j] + g[j] + wd_ * p[j];
        p[j] -= lr_ * lr_scale * v[j];
      }
    }
  }

 private:
  double lr_, mu_, wd_;
  std::vector<Tensor> vel_;
};

class Adam {
 public:
  explicit Adam(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

  void step(const std::vector<Tensor*>& ps, const std::vector<Tensor>& grads, double lr_scale = 1.0) {
    if (m_.empty()) {
      for (auto* p : ps) {
        m_.emplace_back(p->shape);
        v_.emplace_back(p->shape);
      }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < ps.size(); ++i) {
      Tensor& p = *ps[i];
      const Tensor& g = grads[i];
      for (int j = 0; j < p.size(); ++j) {
        m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * g[j];
        v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * g[j] * g[j];
        double mh = m_[i][j] / bc1, vh = v_[i][j] / bc2;
        p[j] -= lr_ * lr_scale * mh / (std::sqrt(vh) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

inline double cosine_lr_scale(int step, int total_steps) {
  if (total_steps <= 1) return 1.0;
  double frac = static_cast<double>(step) / (total_steps - 1);
  return 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

// gather grads in params() order after a backward pass
inline std::vector<Tensor> collect_grads(Binder& bind, const std::vector<Tensor*>& ps) {
  std::vector<Tensor> gs;
  gs.reserve(ps.size());
  for (auto* p : ps) {
    if (bind.bound(*p))
      gs.push_back(bind.grad_of(*p));
    else
      gs.emplace_back(p->shape);  // parameter unused in this graph
  }
  return gs;
}

inline void write_params(BinWriter& w, std::vector<Tensor*> ps) {
  w.u32(static_cast<uint32_t>(ps.size()));
  for (auto* p : ps) w.tensor(*p);
}

inline void read_params(BinReader& r, std::vector<Tensor*> ps) {
  uint32_t n = r.u32();
  if (n != ps.size()) throw IoError("checkpoint: parameter count mismatch");
  for (auto* p : ps) {
    Tensor t = r.tensor();
    if (t.shape != p->shape) throw IoError("checkpoint: parameter shape mismatch");
    *p = std::move(t);
  }
}

inline uint64_t params_hash(std::vector<Tensor*> ps) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (auto* p : ps) h = tensor_hash(*p, h);
  return h;
}

}  // namespace nn
}  // namespace invlba
