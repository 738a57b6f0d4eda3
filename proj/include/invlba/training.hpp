#pragma once

// Classifier construction and the empirical-risk training loop shared by the
// surrogate, victim and clean models.

#include "invlba/datahub.hpp"
#include "invlba/nn.hpp"

namespace invlba {

enum class Arch { SmallCnn, SmallMlp, TinyVit };

inline Arch arch_from_string(const std::string& s) {
  if (s == "small-cnn") return Arch::SmallCnn;
  if (s == "small-mlp") return Arch::SmallMlp;
  if (s == "tiny-vit") return Arch::TinyVit;
  throw ConfigError("unknown architecture: " + s);
}
inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::SmallCnn: return "small-cnn";
    case Arch::SmallMlp: return "small-mlp";
    case Arch::TinyVit: return "tiny-vit";
  }
  throw ContractError("bad arch");
}

struct SmallCnnNet {
  nn::Conv2d c1, c2;
  nn::Dense f1, f2;
  SmallCnnNet() = default;
  SmallCnnNet(int ch, int res, int C, Rng& rng)
      : c1(ch, 16, 3, 1, 1, rng),
        c2(16, 32, 3, 1, 1, rng),
        f1(32 * (res / 4) * (res / 4), 64, rng),
        f2(64, C, rng) {}
  Var fwd(Binder& b, Var x) const {
    Var h = ad::avgpool2(ad::relu(c1.fwd(b, x)));
    h = ad::avgpool2(ad::relu(c2.fwd(b, h)));
    int n = h.val().size();
    h = ad::relu(f1.fwd(b, ad::reshape(h, {n})));
    return f2.fwd(b, h);
  }
  std::vector<Tensor*> params() {
    std::vector<Tensor*> ps;
    c1.params(ps);
    c2.params(ps);
    f1.params(ps);
    f2.params(ps);
    return ps;
  }
};

struct SmallMlpNet {
  nn::Dense f1, f2, f3;
  SmallMlpNet() = default;
  SmallMlpNet(int in_n, int C, Rng& rng) : f1(in_n, 128, rng), f2(128, 64, rng), f3(64, C, rng) {}
  Var fwd(Binder& b, Var x) const {
    int n = x.val().size();
    Var h = ad::relu(f1.fwd(b, ad::reshape(x, {n})));
    h = ad::relu(f2.fwd(b, h));
    return f3.fwd(b, h);
  }
  std::vector<Tensor*> params() {
    std::vector<Tensor*> ps;
    f1.params(ps);
    f2.params(ps);
    f3.params(ps);
    return ps;
  }
};

// One-block transformer over 4x4 patches.
struct TinyVitNet {
  int patch = 4, dim = 32, heads = 2, tokens = 0, patch_dim = 0;
  nn::Dense embed, wq, wk, wv, wo, m1, m2, head;
  Tensor pos, ln1_g, ln1_b, ln2_g, ln2_b;

  TinyVitNet() = default;
  TinyVitNet(int ch, int res, int C, Rng& rng) {
    tokens = (res / patch) * (res / patch);
    patch_dim = ch * patch * patch;
    embed = nn::Dense(patch_dim, dim, rng);
    wq = nn::Dense(dim, dim, rng);
    wk = nn::Dense(dim, dim, rng);
    wv = nn::Dense(dim, dim, rng);
    wo = nn::Dense(dim, dim, rng);
    m1 = nn::Dense(dim, 2 * dim, rng);
    m2 = nn::Dense(2 * dim, dim, rng);
    head = nn::Dense(dim, C, rng);
    pos = nn::he_init({tokens, dim}, dim, rng);
    ln1_g = Tensor({dim}, 1.0);
    ln1_b = Tensor({dim});
    ln2_g = Tensor({dim}, 1.0);
    ln2_b = Tensor({dim});
  }

  // gather pixels into a [tokens, patch_dim] matrix; backward scatters
  Var patchify(Binder& b, Var x) const {
    const Tensor& vx = x.val();
    int res = vx.shape[1];
    int side = res / patch, pk = patch;
    auto index_of = [side, res, pk](int tok, int col) {
      int ty = tok / side, tx = tok % side;
      int c = col / (pk * pk);
      int py = (col / pk) % pk, px = col % pk;
      return (c * res + ty * pk + py) * res + tx * pk + px;
    };
    Tensor out({tokens, patch_dim});
    for (int tok = 0; tok < tokens; ++tok)
      for (int col = 0; col < patch_dim; ++col)
        out.v[static_cast<size_t>(tok) * patch_dim + col] = vx.v[static_cast<size_t>(index_of(tok, col))];
    int ix = x.id;
    int T = tokens, P = patch_dim;
    return ad::node(*x.tape, std::move(out), [ix, T, P, index_of](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      Tensor& gx = tp.grad(ix);
      for (int tok = 0; tok < T; ++tok)
        for (int col = 0; col < P; ++col)
          gx.v[static_cast<size_t>(index_of(tok, col))] += g.v[static_cast<size_t>(tok) * P + col];
    });
  }

  // row-wise dense: apply a Dense layer independently to each row of [T, D]
  Var rowwise(Binder& b, const nn::Dense& d, Var X) const {
    Var Wt = ad::transpose2(b(d.W));
    Var out = ad::matmul(X, Wt);
    // broadcast bias over rows
    const Tensor& vb = d.b;
    int T = out.val().shape[0], D = out.val().shape[1];
    Tensor brow({T, D});
    for (int i = 0; i < T; ++i)
      for (int j = 0; j < D; ++j) brow.v[static_cast<size_t>(i) * D + j] = vb[j];
    Var bleaf = b(d.b);
    int ib = bleaf.id, io = out.id;
    Tensor val = t_add(out.val(), brow);
    return ad::node(b.tape(), std::move(val), [ib, io, T, D](Tape& tp, int self) {
      const Tensor& g = tp.grad(self);
      Tensor& go = tp.grad(io);
      Tensor& gb = tp.grad(ib);
      for (int i = 0; i < T; ++i)
        for (int j = 0; j < D; ++j) {
          go.v[static_cast<size_t>(i) * D + j] += g.v[static_cast<size_t>(i) * D + j];
          gb[j] += g.v[static_cast<size_t>(i) * D + j];
        }
    });
  }

  Var fwd(Binder& b, Var x) const {
    Tape& tp = b.tape();
    Var X = ad::add(rowwise(b, embed, patchify(b, x)), b(pos));

    // attention block
    Var Xn = ad::layernorm_rows(X, b(ln1_g), b(ln1_b));
    Var Q = rowwise(b, wq, Xn), K = rowwise(b, wk, Xn), V = rowwise(b, wv, Xn);
    int hd = dim / heads;
    std::vector<Var> head_outs;
    for (int h = 0; h < heads; ++h) {
      auto slice_cols = [&](Var M) {
        const Tensor& vm = M.val();
        int T = vm.shape[0];
        Tensor out({T, hd});
        for (int i = 0; i < T; ++i)
          for (int j = 0; j < hd; ++j)
            out.v[static_cast<size_t>(i) * hd + j] = vm.v[static_cast<size_t>(i) * dim + h * hd + j];
        int im = M.id, off = h * hd, D = dim, HD = hd;
        return ad::node(tp, std::move(out), [im, off, D, HD, T](Tape& t2, int self) {
          const Tensor& g = t2.grad(self);
          Tensor& gm = t2.grad(im);
          for (int i = 0; i < T; ++i)
            for (int j = 0; j < HD; ++j)
              gm.v[static_cast<size_t>(i) * D + off + j] += g.v[static_cast<size_t>(i) * HD + j];
        });
      };
      Var q = slice_cols(Q), k = slice_cols(K), v = slice_cols(V);
      Var scores = ad::scale(ad::matmul(q, ad::transpose2(k)), 1.0 / std::sqrt(double(hd)));
      Var attn = ad::softmax_rows(scores);
      head_outs.push_back(ad::matmul(attn, v));
    }
    // concat head outputs along columns
    Var cat = [&]() {
      int T = head_outs[0].val().shape[0];
      Tensor out({T, dim});
      for (int h = 0; h < heads; ++h) {
        const Tensor& vh = head_outs[static_cast<size_t>(h)].val();
        for (int i = 0; i < T; ++i)
          for (int j = 0; j < hd; ++j)
            out.v[static_cast<size_t>(i) * dim + h * hd + j] = vh.v[static_cast<size_t>(i) * hd + j];
      }
      std::vector<int> ids;
      for (auto& hv : head_outs) ids.push_back(hv.id);
      int D = dim, HD = hd;
      return ad::node(tp, std::move(out), [ids, D, HD, T](Tape& t2, int self) {
        const Tensor& g = t2.grad(self);
        for (size_t h = 0; h < ids.size(); ++h) {
          Tensor& gh = t2.grad(ids[h]);
          for (int i = 0; i < T; ++i)
            for (int j = 0; j < HD; ++j)
              gh.v[static_cast<size_t>(i) * HD + j] +=
                  g.v[static_cast<size_t>(i) * D + h * HD + j];
        }
      });
    }();
    X = ad::add(X, rowwise(b, wo, cat));

    // mlp block
    Var Xn2 = ad::layernorm_rows(X, b(ln2_g), b(ln2_b));
    Var Hm = rowwise(b, m2, ad::silu(rowwise(b, m1, Xn2)));
    X = ad::add(X, Hm);

    return head.fwd(b, ad::mean_rows(X));
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> ps;
    for (auto* d : {&embed, &wq, &wk, &wv, &wo, &m1, &m2, &head}) d->params(ps);
    ps.push_back(&pos);
    ps.push_back(&ln1_g);
    ps.push_back(&ln1_b);
    ps.push_back(&ln2_g);
    ps.push_back(&ln2_b);
    return ps;
  }
};

// ---------------------------------------------------------------------------

struct Classifier {
  Arch arch = Arch::SmallCnn;
  int num_classes = 0;
  int channels = 0, resolution = 0;
  uint64_t seed = 0;
  uint64_t train_config_hash = 0;
  double final_train_loss = 0, final_train_acc = 0;
  std::vector<double> loss_history;

  SmallCnnNet cnn;
  SmallMlpNet mlp;
  TinyVitNet vit;

  Var logits(Binder& b, Var x) const {
    switch (arch) {
      case Arch::SmallCnn: return cnn.fwd(b, x);
      case Arch::SmallMlp: return mlp.fwd(b, x);
      case Arch::TinyVit: return vit.fwd(b, x);
    }
    throw ContractError("bad arch");
  }

  Tensor predict_logits(const Tensor& x) const {
    Tape t;
    Binder b(t);
    return logits(b, t.leaf(x)).val();
  }
  // probability vector over classes; nonnegative, sums to 1
  Tensor predict_probs(const Tensor& x) const { return ad::softmax(predict_logits(x)); }

  int predict_class(const Tensor& x) const {
    Tensor p = predict_logits(x);
    int best = 0;
    for (int i = 1; i < p.size(); ++i)
      if (p[i] > p[best]) best = i;  // ties keep the lowest class index
    return best;
  }

  std::vector<Tensor*> params() {
    switch (arch) {
      case Arch::SmallCnn: return cnn.params();
      case Arch::SmallMlp: return mlp.params();
      case Arch::TinyVit: return vit.params();
    }
    throw ContractError("bad arch");
  }
};

inline Classifier make_classifier(Arch arch, int num_classes, const std::vector<int>& image_shape,
                                  uint64_t seed) {
  if (num_classes < 2) throw ConfigError("make_classifier: num_classes must be >= 2");
  if (image_shape.size() != 3) throw ConfigError("make_classifier: image shape must be CHW");
  Classifier c;
  c.arch = arch;
  c.num_classes = num_classes;
  c.channels = image_shape[0];
  c.resolution = image_shape[1];
  c.seed = seed;
  Rng rng(derive_seed(seed, "classifier-init"));
  switch (arch) {
    case Arch::SmallCnn: c.cnn = SmallCnnNet(c.channels, c.resolution, num_classes, rng); break;
    case Arch::SmallMlp:
      c.mlp = SmallMlpNet(c.channels * c.resolution * c.resolution, num_classes, rng);
      break;
    case Arch::TinyVit: c.vit = TinyVitNet(c.channels, c.resolution, num_classes, rng); break;
  }
  return c;
}

// The classification loss over explicit probabilities; log floored at 1e-12.
inline double cross_entropy(const Tensor& probs, int label) {
  if (label < 0 || label >= probs.size()) throw ContractError("cross_entropy: label out of range");
  double sum = 0;
  for (double p : probs.v) {
    if (p < -1e-9) throw ContractError("cross_entropy: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ContractError("cross_entropy: probabilities must sum to 1");
  return -std::log(std::max(probs[label], 1e-12));
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 30;
  int batch = 32;
  double lr = 0.05;
  nn::OptKind optimizer = nn::OptKind::Sgd;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool cosine_decay = true;
  int snapshot_every = 0;  // record parameter snapshots every N epochs (0 = off)
  uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw ConfigError("train config: epochs must be >= 0");
    if (batch < 1) throw ConfigError("train config: batch must be positive");
    if (lr <= 0) throw ConfigError("train config: lr must be positive");
  }
  uint64_t hash() const {
    double d[8] = {static_cast<double>(epochs), static_cast<double>(batch), lr,
                   static_cast<double>(optimizer == nn::OptKind::Sgd ? 0 : 1), momentum,
                   weight_decay, cosine_decay ? 1.0 : 0.0, static_cast<double>(seed)};
    return fnv1a64(d, sizeof(d));
  }
};

struct TrainResult {
  Classifier model;
  std::vector<Classifier> snapshots;  // present when snapshot_every > 0
};

inline TrainResult train_classifier(Classifier model, const LabeledDataset& ds,
                                    const TrainConfig& cfg) {
  cfg.validate();
  if (ds.size() == 0) throw ContractError("train_classifier: empty dataset");
  for (const auto& it : ds.items)
    if (it.label >= model.num_classes) throw ContractError("train_classifier: label out of range");

  TrainResult result;
  model.train_config_hash = cfg.hash();
  if (cfg.epochs == 0) {
    result.model = std::move(model);
    return result;
  }

  auto params = model.params();
  nn::SgdMomentum sgd(cfg.lr, cfg.momentum, cfg.weight_decay);
  nn::Adam adam(cfg.lr);
  Rng rng(derive_seed(cfg.seed, "classifier-train"));

  std::vector<int> order(static_cast<size_t>(ds.size()));
  std::iota(order.begin(), order.end(), 0);

  int steps_per_epoch = (ds.size() + cfg.batch - 1) / cfg.batch;
  int total_steps = cfg.epochs * steps_per_epoch;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0;
    int batches = 0;
    for (int start = 0; start < ds.size(); start += cfg.batch) {
      int end = std::min(start + cfg.batch, ds.size());
      Tape t;
      Binder bind(t);
      std::vector<Var> losses;
      for (int bi = start; bi < end; ++bi) {
        const Item& it = ds.items[static_cast<size_t>(order[static_cast<size_t>(bi)])];
        Var lg = model.logits(bind, t.leaf(it.image));
        losses.push_back(ad::softmax_ce(lg, it.label));
      }
      Var loss = ad::mean_of(losses);
      double lv = loss.val()[0];
      if (!std::isfinite(lv))
        throw TrainingError("train_classifier: loss non-finite at epoch " + std::to_string(epoch));
      epoch_loss += lv;
      ++batches;
      t.backward(loss);
      auto grads = nn::collect_grads(bind, params);
      double lr_scale = cfg.cosine_decay ? nn::cosine_lr_scale(step, total_steps) : 1.0;
      if (cfg.optimizer == nn::OptKind::Sgd)
        sgd.step(params, grads, lr_scale);
      else
        adam.step(params, grads, lr_scale);
      ++step;
    }
    model.loss_history.push_back(epoch_loss / batches);
    if (cfg.snapshot_every > 0 && (epoch + 1) % cfg.snapshot_every == 0)
      result.snapshots.push_back(model);
  }
  model.final_train_loss = model.loss_history.back();

  int correct = 0;
  for (const auto& it : ds.items)
    if (model.predict_class(it.image) == it.label) ++correct;
  model.final_train_acc = static_cast<double>(correct) / ds.size();

  result.model = std::move(model);
  return result;
}

inline double evaluate_accuracy(const Classifier& model, const LabeledDataset& ds) {
  if (ds.size() == 0) throw ContractError("evaluate_accuracy: empty dataset");
  int correct = 0;
  for (const auto& it : ds.items)
    if (model.predict_class(it.image) == it.label) ++correct;
  return static_cast<double>(correct) / ds.size();
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_classifier(const Classifier& c, const std::string& path) {
  BinWriter w(path);
  w.magic("classifier", 1);
  w.str(to_string(c.arch));
  w.u32(static_cast<uint32_t>(c.num_classes));
  w.u32(static_cast<uint32_t>(c.channels));
  w.u32(static_cast<uint32_t>(c.resolution));
  w.u64(c.seed);
  w.u64(c.train_config_hash);
  w.f64(c.final_train_loss);
  w.f64(c.final_train_acc);
  w.f64_vec(c.loss_history);
  nn::write_params(w, const_cast<Classifier&>(c).params());
}

inline Classifier load_classifier(const std::string& path) {
  BinReader r(path);
  r.magic("classifier", 1);
  Arch arch = arch_from_string(r.str());
  int C = static_cast<int>(r.u32());
  int ch = static_cast<int>(r.u32());
  int res = static_cast<int>(r.u32());
  uint64_t seed = r.u64();
  Classifier c = make_classifier(arch, C, {ch, res, res}, seed);
  c.train_config_hash = r.u64();
  c.final_train_loss = r.f64();
  c.final_train_acc = r.f64();
  c.loss_history = r.f64_vec();
  nn::read_params(r, c.params());
  return c;
}

}  // namespace invlba
