#include <catch2/catch_amalgamated.hpp>

#include "invlba/nn.hpp"

using namespace invlba;

namespace {

// Central-difference derivative of a scalar function of one tensor entry.
// Independent of the tape: re-runs the forward closure at shifted inputs.
double central_diff(const std::function<double(const Tensor&)>& f, Tensor x, int idx,
                    double h = 1e-6) {
  Tensor xp = x, xm = x;
  xp[idx] += h;
  xm[idx] -= h;
  return (f(xp) - f(xm)) / (2 * h);
}

double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scl = 1.0) {
  Tensor t(std::move(shape));
  for (auto& x : t.v) x = scl * rng.normal();
  return t;
}

// checks d(sum of some scalar head over op(x)) / dx against finite differences
void check_grad_wrt_input(const std::function<Var(Tape&, Var)>& op, const Tensor& x0,
                          double tol = 1e-6) {
  auto scalar_head = [&](const Tensor& x) {
    Tape t;
    Var xin = t.leaf(x);
    Var y = op(t, xin);
    // weighted sum head so every output entry contributes differently
    const Tensor& vy = y.val();
    double s = 0;
    for (int i = 0; i < vy.size(); ++i) s += vy[i] * std::sin(0.7 * i + 0.3);
    return s;
  };

  Tape t;
  Var xin = t.leaf(x0);
  Var y = op(t, xin);
  // build the same weighted head in-tape
  Tensor w(y.val().shape);
  for (int i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * i + 0.3);
  Var total = ad::sum_all(ad::mul(y, t.leaf(w)));
  t.backward(total);
  const Tensor& analytic = xin.grad();

  for (int i = 0; i < x0.size(); ++i) {
    double fd = central_diff(scalar_head, x0, i);
    INFO("entry " << i << " analytic=" << analytic[i] << " fd=" << fd);
    REQUIRE(rel_err(analytic[i], fd) < tol);
  }
}

}  // namespace

TEST_CASE("elementwise ops forward values") {
  Tape t;
  Tensor a({3});
  a.v = {1.0, -2.0, 0.5};
  Tensor b({3});
  b.v = {0.5, 1.0, -1.0};
  Var va = t.leaf(a), vb = t.leaf(b);

  CHECK(ad::add(va, vb).val()[0] == Catch::Approx(1.5));
  CHECK(ad::sub(va, vb).val()[1] == Catch::Approx(-3.0));
  CHECK(ad::mul(va, vb).val()[2] == Catch::Approx(-0.5));
  CHECK(ad::scale(va, 2.0).val()[1] == Catch::Approx(-4.0));
  CHECK(ad::add_scalar(va, 1.0).val()[1] == Catch::Approx(-1.0));
  CHECK(ad::axpy(va, 3.0, vb).val()[0] == Catch::Approx(2.5));
}

TEST_CASE("gradients of elementwise and activation ops match finite differences") {
  Rng rng(11);
  Tensor x = random_tensor({2, 3, 3}, rng);

  check_grad_wrt_input([](Tape& t, Var v) { return ad::relu(v); }, x, 1e-5);
  check_grad_wrt_input([](Tape& t, Var v) { return ad::silu(v); }, x);
  check_grad_wrt_input([](Tape& t, Var v) { return ad::sigmoid(v); }, x);
  check_grad_wrt_input([](Tape& t, Var v) { return ad::mul(v, ad::add_scalar(v, 0.5)); }, x);
  check_grad_wrt_input([](Tape& t, Var v) { return ad::upsample2(v); }, x);
  Tensor x2 = random_tensor({2, 4, 4}, rng);
  check_grad_wrt_input([](Tape& t, Var v) { return ad::avgpool2(v); }, x2);
}

TEST_CASE("dense and matmul gradients match finite differences") {
  Rng rng(5);
  Tensor W = random_tensor({4, 6}, rng, 0.5);
  Tensor b = random_tensor({4}, rng, 0.1);
  Tensor x = random_tensor({6}, rng);

  // wrt input
  check_grad_wrt_input(
      [&](Tape& t, Var v) { return ad::dense(v, t.leaf(W), t.leaf(b)); }, x);
  // wrt weight
  check_grad_wrt_input(
      [&](Tape& t, Var v) { return ad::dense(t.leaf(x), ad::reshape(v, {4, 6}), t.leaf(b)); },
      W.reshaped({24}));

  Tensor A = random_tensor({3, 4}, rng);
  Tensor B = random_tensor({4, 5}, rng);
  check_grad_wrt_input([&](Tape& t, Var v) { return ad::matmul(v, t.leaf(B)); }, A);
  check_grad_wrt_input([&](Tape& t, Var v) { return ad::matmul(t.leaf(A), v); }, B);
  check_grad_wrt_input([](Tape& t, Var v) { return ad::transpose2(v); }, A);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(7);
  Tensor x = random_tensor({3, 6, 6}, rng);
  Tensor W = random_tensor({4, 3, 3, 3}, rng, 0.4);
  Tensor b = random_tensor({4}, rng, 0.1);

  check_grad_wrt_input(
      [&](Tape& t, Var v) { return ad::conv2d(v, t.leaf(W), t.leaf(b), 1, 1); }, x);
  check_grad_wrt_input(
      [&](Tape& t, Var v) { return ad::conv2d(v, t.leaf(W), t.leaf(b), 2, 1); }, x);
  check_grad_wrt_input(
      [&](Tape& t, Var v) {
        return ad::conv2d(t.leaf(x), ad::reshape(v, {4, 3, 3, 3}), t.leaf(b), 1, 1);
      },
      W.reshaped({4 * 3 * 3 * 3}));
  // bias path
  check_grad_wrt_input(
      [&](Tape& t, Var v) { return ad::conv2d(t.leaf(x), t.leaf(W), v, 1, 1); }, b);
}

TEST_CASE("softmax cross entropy gradient and value") {
  Rng rng(3);
  Tensor logits = random_tensor({5}, rng);
  int label = 2;

  // value against direct computation
  Tensor p = ad::softmax(logits);
  double expect = -std::log(p[label]);
  Tape t;
  Var l = t.leaf(logits);
  Var loss = ad::softmax_ce(l, label);
  CHECK(loss.val()[0] == Catch::Approx(expect).epsilon(1e-12));

  t.backward(loss);
  for (int i = 0; i < 5; ++i) {
    auto f = [&](const Tensor& lt) {
      Tape t2;
      return ad::softmax_ce(t2.leaf(lt), label).val()[0];
    };
    double fd = central_diff(f, logits, i);
    CHECK(rel_err(l.grad()[i], fd) < 1e-6);
  }
}

TEST_CASE("rows ops gradients match finite differences") {
  Rng rng(9);
  Tensor A = random_tensor({3, 5}, rng);
  check_grad_wrt_input([](Tape& t, Var v) { return ad::softmax_rows(v); }, A, 1e-5);
  check_grad_wrt_input([](Tape& t, Var v) { return ad::mean_rows(v); }, A);

  Tensor gamma = random_tensor({5}, rng, 0.3);
  for (auto& g : gamma.v) g += 1.0;
  Tensor beta = random_tensor({5}, rng, 0.2);
  check_grad_wrt_input(
      [&](Tape& t, Var v) { return ad::layernorm_rows(v, t.leaf(gamma), t.leaf(beta)); }, A, 1e-4);
  check_grad_wrt_input(
      [&](Tape& t, Var v) { return ad::layernorm_rows(t.leaf(A), v, t.leaf(beta)); }, gamma, 1e-5);
}

TEST_CASE("concat, channel bias and reductions") {
  Rng rng(13);
  Tensor a = random_tensor({2, 3, 3}, rng);
  Tensor b = random_tensor({3, 3, 3}, rng);
  check_grad_wrt_input([&](Tape& t, Var v) { return ad::concat_ch(v, t.leaf(b)); }, a);
  check_grad_wrt_input([&](Tape& t, Var v) { return ad::concat_ch(t.leaf(a), v); }, b);

  Tensor bias = random_tensor({2}, rng);
  check_grad_wrt_input([&](Tape& t, Var v) { return ad::add_ch_bias(v, t.leaf(bias)); }, a);
  check_grad_wrt_input([&](Tape& t, Var v) { return ad::add_ch_bias(t.leaf(a), v); }, bias);

  auto to_scalar_l1 = [](Tape& t, Var v) { return ad::l1_sum(v); };
  Tensor c = random_tensor({7}, rng);
  for (auto& x : c.v)
    if (std::abs(x) < 0.05) x += 0.2;  // keep away from the |x| kink
  check_grad_wrt_input(to_scalar_l1, c);

  Tensor target = random_tensor({2, 3, 3}, rng);
  check_grad_wrt_input([&](Tape& t, Var v) { return ad::mse_against(v, target); }, a);
}

TEST_CASE("binder accumulates parameter grads once per tape") {
  Rng rng(21);
  nn::Dense layer(3, 2, rng);
  Tensor x = random_tensor({3}, rng);

  Tape t;
  Binder bind(t);
  Var h1 = layer.fwd(bind, t.leaf(x));
  Var h2 = layer.fwd(bind, t.leaf(x));  // reuse same params
  Var loss = ad::sum_all(ad::add(h1, h2));
  t.backward(loss);

  const Tensor& gW = bind.grad_of(layer.W);
  // two identical passes -> gradient doubled relative to one pass
  Tape t2;
  Binder bind2(t2);
  Var h = layer.fwd(bind2, t2.leaf(x));
  t2.backward(ad::sum_all(h));
  for (int i = 0; i < gW.size(); ++i)
    CHECK(gW[i] == Catch::Approx(2.0 * bind2.grad_of(layer.W)[i]).margin(1e-12));
}

TEST_CASE("optimizers take deterministic steps") {
  Rng rng(2);
  Tensor p({4});
  for (auto& x : p.v) x = rng.normal();
  Tensor p_copy = p;
  Tensor g({4});
  for (auto& x : g.v) x = 0.5;

  nn::Adam opt(0.1);
  opt.step({&p}, {g});
  // adam first step magnitude ~ lr regardless of gradient scale
  for (int i = 0; i < 4; ++i) CHECK(p[i] == Catch::Approx(p_copy[i] - 0.1).margin(1e-6));

  // zero gradient from the first step -> zero movement
  Tensor z({4});
  Tensor before = p;
  nn::Adam fresh(0.1);
  fresh.step({&p}, {z});
  for (int i = 0; i < 4; ++i) CHECK(std::abs(p[i] - before[i]) < 1e-9);

  nn::SgdMomentum sgd(0.1, 0.9, 0.0);
  Tensor q({2});
  q.v = {1.0, -1.0};
  Tensor gq({2});
  gq.v = {1.0, 1.0};
  sgd.step({&q}, {gq});
  CHECK(q[0] == Catch::Approx(0.9));
  sgd.step({&q}, {gq});
  CHECK(q[0] == Catch::Approx(0.9 - 0.1 * 1.9));
}
