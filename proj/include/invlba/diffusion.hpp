#pragma once

// Toy latent diffusion: cumulative noise schedule, a small convolutional
// autoencoder as the latent codec, a U-Net noise predictor, forward noising,
// one-step prediction, deterministic DDIM denoising, training, and the
// image-to-image generator used for data expansion.

#include "invlba/datahub.hpp"
#include "invlba/nn.hpp"

namespace invlba {

// ---------------------------------------------------------------------------
// Noise schedule. `alpha_bar[t]` is the cumulative signal coefficient; the
// forward process is z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) z.

enum class ScheduleKind { LinearBeta, Cosine };

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear-beta") return ScheduleKind::LinearBeta;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw ConfigError("unknown schedule kind: " + s);
}
inline std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::LinearBeta ? "linear-beta" : "cosine";
}

struct NoiseSchedule {
  int num_steps = 0;                // T_d
  std::vector<double> alpha_bar;    // length T_d+1, alpha_bar[0] == 1 exactly

  void validate() const {
    if (num_steps < 2) throw ConfigError("schedule: num_steps must be >= 2");
    if (static_cast<int>(alpha_bar.size()) != num_steps + 1)
      throw ContractError("schedule: alpha_bar length mismatch");
    if (alpha_bar[0] != 1.0) throw ContractError("schedule: alpha_bar[0] must be exactly 1");
    for (int t = 0; t < num_steps; ++t) {
      if (!(alpha_bar[t + 1] > 0.0 && alpha_bar[t + 1] <= alpha_bar[t]))
        throw ContractError("schedule: alpha_bar must be positive and nonincreasing");
    }
  }
  double abar(int t) const {
    if (t < 0 || t > num_steps) throw ContractError("schedule: step out of range");
    return alpha_bar[static_cast<size_t>(t)];
  }
};

inline NoiseSchedule make_schedule(int num_steps, ScheduleKind kind) {
  if (num_steps < 2) throw ConfigError("make_schedule: num_steps must be >= 2");
  NoiseSchedule s;
  s.num_steps = num_steps;
  s.alpha_bar.assign(static_cast<size_t>(num_steps) + 1, 1.0);
  if (kind == ScheduleKind::LinearBeta) {
    // betas scaled from the 1000-step [1e-4, 0.02] convention
    double scale = 1000.0 / num_steps;
    double b0 = 1e-4 * scale, b1 = 0.02 * scale;
    double acc = 1.0;
    for (int t = 1; t <= num_steps; ++t) {
      double beta = b0 + (b1 - b0) * (t - 1) / std::max(1, num_steps - 1);
      beta = std::min(beta, 0.999);
      acc *= (1.0 - beta);
      s.alpha_bar[static_cast<size_t>(t)] = std::max(acc, 1e-8);
    }
  } else {
    const double off = 0.008;
    auto f = [&](double t) {
      double u = (t / num_steps + off) / (1.0 + off) * 3.14159265358979323846 / 2.0;
      return std::cos(u) * std::cos(u);
    };
    double f0 = f(0.0);
    double prev = 1.0;
    for (int t = 1; t <= num_steps; ++t) {
      double a = std::max(f(static_cast<double>(t)) / f0, 1e-8);
      a = std::min(a, prev);  // enforce monotonicity under floor clamping
      s.alpha_bar[static_cast<size_t>(t)] = a;
      prev = a;
    }
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Modules

// Latent codec: downsampling factor 4, 4 latent channels.
struct AutoEncoder {
  nn::Conv2d e1, e2, e3, e4;
  nn::Conv2d d1, d2, d3, d4;
  int in_ch = 3, base = 16, latent_ch = 4;

  AutoEncoder() = default;
  AutoEncoder(int img_ch, Rng& rng)
      : e1(img_ch, 16, 3, 1, 1, rng),
        e2(16, 32, 3, 2, 1, rng),
        e3(32, 32, 3, 2, 1, rng),
        e4(32, 4, 1, 1, 0, rng),
        d1(4, 32, 1, 1, 0, rng),
        d2(32, 32, 3, 1, 1, rng),
        d3(32, 16, 3, 1, 1, rng),
        d4(16, img_ch, 1, 1, 0, rng),
        in_ch(img_ch) {}

  Var encode(Binder& b, Var x) const {
    Var h = ad::silu(e1.fwd(b, x));
    h = ad::silu(e2.fwd(b, h));
    h = ad::silu(e3.fwd(b, h));
    return e4.fwd(b, h);  // linear latent head
  }
  Var decode(Binder& b, Var z) const {
    Var h = ad::silu(d1.fwd(b, z));
    h = ad::silu(d2.fwd(b, ad::upsample2(h)));
    h = ad::silu(d3.fwd(b, ad::upsample2(h)));
    return ad::sigmoid(d4.fwd(b, h));  // decoded pixels live in [0,1]
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> ps;
    for (auto* c : {&e1, &e2, &e3, &e4, &d1, &d2, &d3, &d4}) c->params(ps);
    return ps;
  }
};

// Noise predictor: one down/up level with a skip connection and a sinusoidal
// step embedding added as per-channel bias.
struct UNetPsi {
  nn::Conv2d cin, cdown, cup, cout;
  nn::Dense temb1, temb2, tb_in, tb_down;
  int latent_ch = 4, width = 32, temb_dim = 32;

  UNetPsi() = default;
  UNetPsi(int latent_channels, Rng& rng)
      : cin(latent_channels, 32, 3, 1, 1, rng),
        cdown(32, 64, 3, 1, 1, rng),
        cup(96, 32, 3, 1, 1, rng),
        cout(32, latent_channels, 3, 1, 1, rng),
        temb1(32, 32, rng),
        temb2(32, 32, rng),
        tb_in(32, 32, rng),
        tb_down(32, 64, rng),
        latent_ch(latent_channels) {}

  Tensor sinusoidal(int t) const {
    Tensor e({temb_dim});
    for (int i = 0; i < temb_dim / 2; ++i) {
      double freq = std::exp(-std::log(10000.0) * i / (temb_dim / 2));
      e[2 * i] = std::sin(t * freq);
      e[2 * i + 1] = std::cos(t * freq);
    }
    return e;
  }

  Var fwd(Binder& b, Var z, int t) const {
    Tape& tp = b.tape();
    Var emb = ad::silu(temb1.fwd(b, tp.leaf(sinusoidal(t))));
    emb = ad::silu(temb2.fwd(b, emb));

    Var h1 = ad::silu(ad::add_ch_bias(cin.fwd(b, z), tb_in.fwd(b, emb)));
    Var h2 = ad::silu(ad::add_ch_bias(cdown.fwd(b, ad::avgpool2(h1)), tb_down.fwd(b, emb)));
    Var up = ad::upsample2(h2);
    Var h3 = ad::silu(cup.fwd(b, ad::concat_ch(h1, up)));
    return cout.fwd(b, h3);
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> ps;
    for (auto* c : {&cin, &cdown, &cup, &cout}) c->params(ps);
    for (auto* d : {&temb1, &temb2, &tb_in, &tb_down}) d->params(ps);
    return ps;
  }
};

struct DiffusionModel {
  NoiseSchedule schedule;
  AutoEncoder ae;
  UNetPsi psi;
  std::vector<int> image_shape;   // CHW
  std::vector<int> latent_shape;  // CHW
  uint64_t config_hash = 0;
  uint64_t seed = 0;
  double ae_loss_initial = 0, ae_loss_final = 0;
  double psi_loss_initial = 0, psi_loss_final = 0;

  Tensor encode(const Tensor& x) const {
    Tape t;
    Binder b(t);
    return ae.encode(b, t.leaf(x)).val();
  }
  Tensor decode(const Tensor& z) const {
    Tape t;
    Binder b(t);
    return ae.decode(b, t.leaf(z)).val();
  }
  Tensor psi_eval(const Tensor& z, int step) const {
    Tape t;
    Binder b(t);
    return psi.fwd(b, t.leaf(z), step).val();
  }
  Tensor sample_noise(Rng& rng) const {
    Tensor z(latent_shape);
    for (auto& x : z.v) x = rng.normal();
    return z;
  }

  std::vector<Tensor*> params() {
    auto ps = const_cast<AutoEncoder&>(ae).params();
    auto ps2 = const_cast<UNetPsi&>(psi).params();
    ps.insert(ps.end(), ps2.begin(), ps2.end());
    return ps;
  }
};

// ---------------------------------------------------------------------------
// Core formulas

// Eq-style forward noising: z_t = sqrt(abar_t) z_0 + sqrt(1-abar_t) z.
inline Tensor add_noise(const NoiseSchedule& s, const Tensor& z0, int t, const Tensor& z) {
  if (t < 0 || t > s.num_steps) throw ContractError("add_noise: step out of range");
  check_same_shape(z0, z, "add_noise");
  double a = s.abar(t);
  return t_axpy(std::sqrt(a), z0, std::sqrt(1.0 - a), z);
}

// One-step estimate of the clean latent from a noisy latent:
// z_{0|t} = (z_t' - sqrt(1-abar_t) psi(z_t', t)) / sqrt(abar_t).
inline Tensor one_step_predict(const DiffusionModel& m, const Tensor& zt, int t) {
  double a = m.schedule.abar(t);
  if (a <= 1e-12) throw DegenerateStepError("one_step_predict: alpha_bar at or below numeric floor");
  Tensor eps = m.psi_eval(zt, t);
  return t_axpy(1.0 / std::sqrt(a), zt, -std::sqrt(1.0 - a) / std::sqrt(a), eps);
}

// Differentiable version; gradients flow through psi into zt.
inline Var one_step_predict(Binder& b, const DiffusionModel& m, Var zt, int t) {
  double a = m.schedule.abar(t);
  if (a <= 1e-12) throw DegenerateStepError("one_step_predict: alpha_bar at or below numeric floor");
  Var eps = m.psi.fwd(b, zt, t);
  return ad::scale(ad::axpy(zt, -std::sqrt(1.0 - a), eps), 1.0 / std::sqrt(a));
}

// Deterministic DDIM update from t_from down to t_to over a uniformly
// subsampled grid; sub_steps <= 0 selects the full grid.
inline Tensor ddim_denoise(const DiffusionModel& m, Tensor z, int t_from, int t_to,
                           int sub_steps = 0) {
  if (t_from < t_to) throw ContractError("ddim_denoise: t_from must be >= t_to");
  if (t_to < 0 || t_from > m.schedule.num_steps)
    throw ContractError("ddim_denoise: step range outside schedule");
  if (t_from == t_to) return z;
  int span = t_from - t_to;
  int steps = sub_steps <= 0 ? span : std::min(sub_steps, span);
  std::vector<int> grid;
  grid.reserve(static_cast<size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    int g = t_from + round_half_up(static_cast<double>(i) * (t_to - t_from) / steps);
    if (grid.empty() || g != grid.back()) grid.push_back(g);
  }
  for (size_t i = 0; i + 1 < grid.size(); ++i) {
    int s = grid[i], s_next = grid[i + 1];
    double a = m.schedule.abar(s), an = m.schedule.abar(s_next);
    Tensor eps = m.psi_eval(z, s);
    Tensor z0 = t_axpy(1.0 / std::sqrt(a), z, -std::sqrt(1.0 - a) / std::sqrt(a), eps);
    z = t_axpy(std::sqrt(an), z0, std::sqrt(1.0 - an), eps);
  }
  return z;
}

// ---------------------------------------------------------------------------
// Training

struct DiffusionHyper {
  int ae_steps = 1600;
  int psi_steps = 2400;
  int batch = 16;
  double ae_lr = 2e-3;
  double psi_lr = 2e-3;
  uint64_t seed = 0;

  uint64_t hash() const {
    double d[6] = {static_cast<double>(ae_steps), static_cast<double>(psi_steps),
                   static_cast<double>(batch), ae_lr, psi_lr, static_cast<double>(seed)};
    return fnv1a64(d, sizeof(d));
  }
};

inline DiffusionModel train_diffusion(const LabeledDataset& ds, const NoiseSchedule& schedule,
                                      const DiffusionHyper& hyper) {
  if (ds.size() == 0) throw ContractError("train_diffusion: empty dataset");
  schedule.validate();
  auto img_shape = ds.image_shape();

  DiffusionModel m;
  m.schedule = schedule;
  m.image_shape = img_shape;
  m.latent_shape = {4, img_shape[1] / 4, img_shape[2] / 4};
  m.seed = hyper.seed;
  m.config_hash = hyper.hash();
  Rng init_rng(derive_seed(hyper.seed, "diffusion-init"));
  m.ae = AutoEncoder(img_shape[0], init_rng);
  m.psi = UNetPsi(4, init_rng);

  Rng rng(derive_seed(hyper.seed, "diffusion-train"));
  auto batch_indices = [&](int n, int k) {
    std::vector<int> idx(static_cast<size_t>(k));
    for (auto& i : idx) i = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
    return idx;
  };

  // stage A: autoencoder reconstruction
  auto ae_params = m.ae.params();
  nn::Adam ae_opt(hyper.ae_lr);
  auto ae_batch_loss = [&](const std::vector<int>& idx, Binder& bind) {
    std::vector<Var> losses;
    for (int i : idx) {
      const Tensor& x = ds.items[static_cast<size_t>(i)].image;
      Var z = m.ae.encode(bind, bind.tape().leaf(x));
      Var y = m.ae.decode(bind, z);
      losses.push_back(ad::mse_against(y, x));
    }
    return ad::mean_of(losses);
  };
  for (int step = 0; step < hyper.ae_steps; ++step) {
    auto idx = batch_indices(ds.size(), hyper.batch);
    Tape t;
    Binder bind(t);
    Var loss = ae_batch_loss(idx, bind);
    double lv = loss.val()[0];
    if (!std::isfinite(lv))
      throw TrainingError("train_diffusion: autoencoder loss non-finite at step " +
                          std::to_string(step));
    if (step == 0) m.ae_loss_initial = lv;
    m.ae_loss_final = lv;
    t.backward(loss);
    ae_opt.step(ae_params, nn::collect_grads(bind, ae_params));
  }
  if (hyper.ae_steps == 0) {
    Tape t;
    Binder bind(t);
    auto idx = batch_indices(ds.size(), std::min(hyper.batch, ds.size()));
    m.ae_loss_initial = m.ae_loss_final = ae_batch_loss(idx, bind).val()[0];
  }

  // stage B: noise prediction on frozen latents
  std::vector<Tensor> latents;
  latents.reserve(static_cast<size_t>(ds.size()));
  for (const auto& it : ds.items) latents.push_back(m.encode(it.image));

  auto psi_params = m.psi.params();
  nn::Adam psi_opt(hyper.psi_lr);
  auto psi_batch_loss = [&](const std::vector<int>& idx, Binder& bind, Rng& noise_rng) {
    std::vector<Var> losses;
    for (int i : idx) {
      int t_step = 1 + static_cast<int>(noise_rng.below(static_cast<uint64_t>(schedule.num_steps)));
      Tensor z = m.sample_noise(noise_rng);
      Tensor zt = add_noise(schedule, latents[static_cast<size_t>(i)], t_step, z);
      Var pred = m.psi.fwd(bind, bind.tape().leaf(zt), t_step);
      losses.push_back(ad::mse_against(pred, z));
    }
    return ad::mean_of(losses);
  };
  for (int step = 0; step < hyper.psi_steps; ++step) {
    auto idx = batch_indices(ds.size(), hyper.batch);
    Tape t;
    Binder bind(t);
    Var loss = psi_batch_loss(idx, bind, rng);
    double lv = loss.val()[0];
    if (!std::isfinite(lv))
      throw TrainingError("train_diffusion: psi loss non-finite at step " + std::to_string(step));
    if (step == 0) m.psi_loss_initial = lv;
    m.psi_loss_final = lv;
    t.backward(loss);
    psi_opt.step(psi_params, nn::collect_grads(bind, psi_params));
  }
  if (hyper.psi_steps == 0) {
    Tape t;
    Binder bind(t);
    auto idx = batch_indices(ds.size(), std::min(hyper.batch, ds.size()));
    Rng nr(derive_seed(hyper.seed, "diffusion-eval"));
    m.psi_loss_initial = m.psi_loss_final = psi_batch_loss(idx, bind, nr).val()[0];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Image-to-image generation (the GDA generator): noise the encoded input to
// step round(strength * T_d), then denoise deterministically and decode.

inline Tensor generate_gda(const DiffusionModel& m, const Tensor& x, double strength,
                           uint64_t seed, int sub_steps = 0) {
  if (strength < 0.0 || strength > 1.0) throw ContractError("generate_gda: strength outside [0,1]");
  Tensor z0 = m.encode(x);
  int t_s = round_half_up(strength * m.schedule.num_steps);
  if (t_s == 0) return m.decode(z0);
  Rng rng(derive_seed(seed, "gda-noise"));
  Tensor z = m.sample_noise(rng);
  Tensor zt = add_noise(m.schedule, z0, t_s, z);
  Tensor zr = ddim_denoise(m, zt, t_s, 0, sub_steps);
  return t_clip(m.decode(zr), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_diffusion(const DiffusionModel& m, const std::string& path) {
  BinWriter w(path);
  w.magic("diffusion", 1);
  w.u32(static_cast<uint32_t>(m.schedule.num_steps));
  w.f64_vec(m.schedule.alpha_bar);
  w.u32(static_cast<uint32_t>(m.image_shape.size()));
  for (int d : m.image_shape) w.u32(static_cast<uint32_t>(d));
  w.u64(m.config_hash);
  w.u64(m.seed);
  w.f64(m.ae_loss_initial);
  w.f64(m.ae_loss_final);
  w.f64(m.psi_loss_initial);
  w.f64(m.psi_loss_final);
  nn::write_params(w, const_cast<DiffusionModel&>(m).params());
}

inline DiffusionModel load_diffusion(const std::string& path) {
  BinReader r(path);
  r.magic("diffusion", 1);
  DiffusionModel m;
  m.schedule.num_steps = static_cast<int>(r.u32());
  m.schedule.alpha_bar = r.f64_vec();
  uint32_t rank = r.u32();
  m.image_shape.resize(rank);
  for (auto& d : m.image_shape) d = static_cast<int>(r.u32());
  m.latent_shape = {4, m.image_shape[1] / 4, m.image_shape[2] / 4};
  m.config_hash = r.u64();
  m.seed = r.u64();
  m.ae_loss_initial = r.f64();
  m.ae_loss_final = r.f64();
  m.psi_loss_initial = r.f64();
  m.psi_loss_final = r.f64();
  Rng dummy(0);
  m.ae = AutoEncoder(m.image_shape[0], dummy);
  m.psi = UNetPsi(4, dummy);
  nn::read_params(r, m.params());
  m.schedule.validate();
  return m;
}

}  // namespace invlba
