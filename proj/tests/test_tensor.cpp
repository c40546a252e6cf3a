#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "meshrecon/rng.hpp"
#include "meshrecon/tensor.hpp"

using namespace meshrecon;

namespace {

Tensor rand_tensor(Shape shape, std::uint64_t salt, std::uint64_t trial, double lo = -2.0,
                   double hi = 2.0) {
  CounterRng rng(99);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform_in(lo, hi, salt, trial, i);
  return t;
}

// keeps FD probes away from the kinks of relu/abs/clamp
Tensor rand_away_from(Shape shape, std::uint64_t salt, std::uint64_t trial,
                      std::vector<double> kinks, double margin = 5e-3) {
  Tensor t = rand_tensor(std::move(shape), salt, trial);
  for (std::size_t i = 0; i < t.numel(); ++i)
    for (double k : kinks)
      if (std::fabs(t[i] - k) < margin) t[i] += 2 * margin;
  return t;
}

using Fn1 = std::function<Var(Tape&, const Var&)>;

double fd1(const Fn1& f, const Tensor& x0) { return finite_difference_check(f, x0).max_rel_err; }

}  // namespace

TEST_CASE("pinned single values") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(0.0));
  Var y = sigmoid(x);
  CHECK(y.value()[0] == doctest::Approx(0.5).epsilon(1e-15));
  GradientMap g = tape.backward(y);
  CHECK(g.get(x)[0] == doctest::Approx(0.25).epsilon(1e-12));

  Tape t2;
  Var a = t2.leaf(Tensor::scalar(3.0));
  Var sq = mul(a, a);
  GradientMap g2 = t2.backward(sq);
  CHECK(g2.get(a)[0] == doctest::Approx(6.0).epsilon(1e-15));

  Var sm = softmax(Var(Tensor({3}, {0, 0, 0})));
  for (int i = 0; i < 3; ++i) CHECK(sm.value()[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("sum backward is all ones; constants get zero") {
  Tape tape;
  Var x = tape.leaf(rand_tensor({3, 4}, 1, 0));
  Var c(rand_tensor({3, 4}, 1, 1));  // constant, not watched
  Var loss = sum(add(x, c));
  GradientMap g = tape.backward(loss);
  Tensor gx = g.get(x);
  for (std::size_t i = 0; i < gx.numel(); ++i) CHECK(gx[i] == 1.0);
  Tensor gc = g.get(c);
  for (std::size_t i = 0; i < gc.numel(); ++i) CHECK(gc[i] == 0.0);
}

TEST_CASE("finite_difference_check calibration") {
  // x^2 at 3: analytic 6 vs central difference
  CHECK(fd1([](Tape&, const Var& x) { return mul(x, x); }, Tensor::scalar(3.0)) < 1e-8);
  CHECK(fd1([](Tape&, const Var& x) { return sigmoid(x); }, Tensor::scalar(0.0)) < 1e-8);
  // zero-gradient function: absolute comparison kicks in, error exactly zero
  CHECK(fd1([](Tape&, const Var& x) { return mul_scalar(x, 0.0); }, Tensor::scalar(1.0)) == 0.0);
}

TEST_CASE("matmul chain against finite differences") {
  for (std::uint64_t trial = 0; trial < 3; ++trial) {
    std::vector<Tensor> x0 = {rand_tensor({2, 3}, 2, trial), rand_tensor({3, 4}, 3, trial),
                              rand_tensor({4, 2}, 4, trial)};
    auto f = [](Tape&, const std::vector<Var>& v) {
      return sum(matmul(matmul(v[0], v[1]), v[2]));
    };
    CHECK(finite_difference_check_many(f, x0).max_rel_err < 1e-6);
  }
}

TEST_CASE("every primitive passes finite differences at 10 random points") {
  constexpr double kTol = 1e-5;
  for (std::uint64_t t = 0; t < 10; ++t) {
    CAPTURE(t);
    Tensor a = rand_tensor({3, 4}, 10, t);
    Tensor b = rand_tensor({3, 4}, 11, t);
    Tensor pos = rand_tensor({3, 4}, 12, t, 0.5, 2.5);
    Tensor away = rand_away_from({3, 4}, 13, t, {-0.5, 0.0, 0.5});
    Tensor vec = rand_tensor({4}, 14, t);
    Tensor scl = rand_tensor({1}, 15, t, 0.5, 1.5);

    auto two = [&](const char* name, const std::function<Var(const Var&, const Var&)>& op,
                   const Tensor& x, const Tensor& y) {
      CAPTURE(name);
      auto f = [&op](Tape&, const std::vector<Var>& v) { return sum(op(v[0], v[1])); };
      CHECK(finite_difference_check_many(f, {x, y}).max_rel_err < kTol);
    };
    auto one = [&](const char* name, const std::function<Var(const Var&)>& op, const Tensor& x) {
      CAPTURE(name);
      CHECK(fd1([&op](Tape&, const Var& v) { return sum(op(v)); }, x) < kTol);
    };

    two("add", [](const Var& x, const Var& y) { return add(x, y); }, a, b);
    two("sub", [](const Var& x, const Var& y) { return sub(x, y); }, a, b);
    two("mul", [](const Var& x, const Var& y) { return mul(x, y); }, a, b);
    two("div", [](const Var& x, const Var& y) { return div(x, y); }, a, pos);
    two("scale_by", [](const Var& x, const Var& s) { return scale_by(x, s); }, a, scl);
    two("bias_add", [](const Var& x, const Var& y) { return bias_add(x, y); }, a, vec);
    two("matmul", [](const Var& x, const Var& y) { return matmul(x, transpose2d(y)); }, a, b);
    one("add_scalar", [](const Var& x) { return add_scalar(x, 0.7); }, a);
    one("mul_scalar", [](const Var& x) { return mul_scalar(x, -1.3); }, a);
    one("transpose2d", [](const Var& x) { return transpose2d(x); }, a);
    one("mean", [](const Var& x) { return mean(x); }, a);
    one("pow", [](const Var& x) { return pow(x, 1.7); }, pos);
    one("exp", [](const Var& x) { return exp(x); }, a);
    one("log", [](const Var& x) { return log(x); }, pos);
    one("sqrt", [](const Var& x) { return sqrt(x); }, pos);
    one("sigmoid", [](const Var& x) { return sigmoid(x); }, a);
    one("tanh", [](const Var& x) { return tanh(x); }, a);
    one("relu", [](const Var& x) { return relu(x); }, away);
    one("leaky_relu", [](const Var& x) { return leaky_relu(x, 0.01); }, away);
    one("softmax", [](const Var& x) { return mul(softmax(x), x); }, a);
    one("reshape", [](const Var& x) { return mul(reshape(x, {4, 3}), reshape(x, {4, 3})); }, a);
    one("gather_rows", [](const Var& x) { return mul(gather_rows(x, {2, 0, 2}), gather_rows(x, {1, 1, 0})); }, a);
    one("clamp", [](const Var& x) { return clamp(x, -0.5, 0.5); }, away);
    one("abs", [](const Var& x) { return abs(x); }, away);
    one("row_norm_mean", [](const Var& x) { return row_norm_mean(x); }, pos);
    one("layer_norm", [](const Var& x) { return mul(layer_norm(x), x); }, a);
    one("repeat_rows", [](const Var& x) { return mul(repeat_rows(x, 3), rand_tensor({3, 4}, 77, 0)); }, vec);
    two("concat0",
        [](const Var& x, const Var& y) { return mul(concat({x, y}, 0), concat({y, x}, 0)); }, a, b);
    two("concat1",
        [](const Var& x, const Var& y) { return mul(concat({x, y}, 1), concat({y, x}, 1)); }, a, b);

    CounterRng drng(5);
    one("dropout",
        [&drng](const Var& x) { return dropout(x, 0.25, drng, 1, 2, 3, true); }, a);
  }
}

TEST_CASE("softmax rows sum to one, 2-D case") {
  Tensor x = rand_tensor({5, 7}, 20, 0);
  Var s = softmax(Var(x));
  for (std::size_t r = 0; r < 5; ++r) {
    double tot = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      tot += s.value().at(r, c);
      CHECK(s.value().at(r, c) > 0.0);
    }
    CHECK(tot == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("backward is deterministic and additive over terms") {
  Tensor x0 = rand_tensor({4, 4}, 21, 0);
  auto grads_of = [&](int which) {
    Tape tape;
    Var x = tape.leaf(x0);
    Var f = sum(mul(x, sigmoid(x)));
    Var g = mean(exp(mul_scalar(x, 0.3)));
    Var loss = which == 0 ? f : which == 1 ? g : add(f, g);
    return tape.backward(loss).get(x);
  };
  Tensor gf = grads_of(0), gg = grads_of(1), gsum = grads_of(2);
  Tensor gsum2 = grads_of(2);
  for (std::size_t i = 0; i < gsum.numel(); ++i) {
    CHECK(gsum[i] == gsum2[i]);  // bit-identical replay
    CHECK(gsum[i] == doctest::Approx(gf[i] + gg[i]).epsilon(1e-12));
  }
}

TEST_CASE("shape mismatch errors name the operation") {
  Var a(rand_tensor({2, 3}, 22, 0));
  Var b(rand_tensor({3, 2}, 23, 0));
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(mul(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(matmul(a, a), doctest::Contains("matmul"), std::invalid_argument);
}

TEST_CASE("a tape can only be consumed once; loss must be scalar") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(2.0));
  Var y = mul(x, x);
  (void)tape.backward(y);
  CHECK(tape.consumed());
  CHECK_THROWS(tape.backward(y));

  Tape t2;
  Var v = t2.leaf(rand_tensor({3}, 24, 0));
  CHECK_THROWS(t2.backward(mul(v, v)));  // non-scalar loss
}

TEST_CASE("dropout semantics") {
  CounterRng rng(7);
  Tensor x = Tensor::full({100, 10}, 1.0);

  Var ev = dropout(Var(x), 0.5, rng, 3, 4, 5, false);
  for (std::size_t i = 0; i < ev.value().numel(); ++i) CHECK(ev.value()[i] == 1.0);  // eval = identity

  Var tr = dropout(Var(x), 0.5, rng, 3, 4, 5, true);
  Var tr2 = dropout(Var(x), 0.5, rng, 3, 4, 5, true);
  std::size_t kept = 0;
  double sum = 0;
  for (std::size_t i = 0; i < tr.value().numel(); ++i) {
    CHECK(tr.value()[i] == tr2.value()[i]);  // same keys, same mask
    CHECK((tr.value()[i] == 0.0 || tr.value()[i] == 2.0));  // inverted scaling 1/(1-rate)
    kept += tr.value()[i] != 0.0;
    sum += tr.value()[i];
  }
  CHECK(kept > 400);  // ~Binomial(1000, 0.5); 3 sigma is ~47
  CHECK(kept < 600);
  CHECK(sum / 1000.0 == doctest::Approx(1.0).epsilon(0.15));  // scaling keeps the mean

  Var other = dropout(Var(x), 0.5, rng, 3, 4, 6, true);  // different salt, different mask
  bool differs = false;
  for (std::size_t i = 0; i < other.value().numel() && !differs; ++i)
    differs = other.value()[i] != tr.value()[i];
  CHECK(differs);
}

TEST_CASE("layer_norm normalizes the last axis") {
  Tensor x = rand_tensor({6, 32}, 25, 0);
  Var y = layer_norm(Var(x));
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 32; ++c) m += y.value().at(r, c);
    m /= 32;
    for (std::size_t c = 0; c < 32; ++c) {
      double d = y.value().at(r, c) - m;
      v += d * d;
    }
    v /= 32;
    CHECK(std::fabs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));  // eps=1e-5 shifts variance slightly
  }
}

TEST_CASE("row_norm_mean handles zero rows with zero gradient") {
  Tensor x({3, 3}, {1, 1, 1, 0, 0, 0, 3, 4, 0});
  Tape tape;
  Var v = tape.leaf(x);
  Var y = row_norm_mean(v);
  CHECK(y.value()[0] == doctest::Approx((std::sqrt(3.0) + 0.0 + 5.0) / 3).epsilon(1e-12));
  Tensor g = tape.backward(y).get(v);
  for (int c = 3; c < 6; ++c) CHECK(g[c] == 0.0);  // zero row: zero subgradient
}

TEST_CASE("counter rng: pure function of seed and keys") {
  CounterRng a(123), b(123), c(124);
  CHECK(a.uniform(1, 2, 3, 4) == b.uniform(1, 2, 3, 4));
  CHECK(a.uniform(1, 2, 3, 4) != c.uniform(1, 2, 3, 4));
  CHECK(a.uniform(1, 2, 3, 4) != a.uniform(1, 2, 3, 5));
  for (std::uint64_t i = 0; i < 1000; ++i) {
    double u = a.uniform(9, i);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  double m = 0;
  for (std::uint64_t i = 0; i < 4000; ++i) m += a.normal(10, i * 2);
  CHECK(std::fabs(m / 4000.0) < 0.05);  // ~3 sigma of the sample mean
}

TEST_CASE("gather and reshape round trips") {
  Tensor x = rand_tensor({4, 3}, 26, 0);
  Var v(x);
  Var back = reshape(reshape(v, {12}), {4, 3});
  for (std::size_t i = 0; i < 12; ++i) CHECK(back.value()[i] == x[i]);
  Var rows = gather_rows(v, {0, 1, 2, 3});
  for (std::size_t i = 0; i < 12; ++i) CHECK(rows.value()[i] == x[i]);
  CHECK_THROWS(gather_rows(v, {4}));  // out of range
  CHECK_THROWS(reshape(v, {5, 3}));   // numel mismatch
}
