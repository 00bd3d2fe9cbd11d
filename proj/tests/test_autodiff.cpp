#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "ctrlnerf/autodiff.hpp"
#include "ctrlnerf/optimizer.hpp"
#include "ctrlnerf/rng.hpp"
#include "doctest.h"
#include "fd_check.hpp"

using namespace ctrlnerf;
using ad::Tensor;
using ad::Tape;

namespace {

Tensor<double> random_param(ad::Shape shape, Rng& rng, double scale = 0.5) {
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor<double>::param(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("forward values match hand-computed results") {
  auto x = Tensor<float>::from({2}, {-1.0f, 2.0f});
  auto r = ad::relu(x);
  CHECK(r.value_at(0) == 0.0f);
  CHECK(r.value_at(1) == 2.0f);

  auto eye = Tensor<float>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto a = Tensor<float>::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto prod = ad::matmul(eye, a);
  for (size_t i = 0; i < 9; ++i) CHECK(prod.value_at(i) == a.value_at(i));

  auto sp = ad::softplus(Tensor<double>::scalar(0.0));
  CHECK(sp.scalar_value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto sig = ad::sigmoid(Tensor<double>::scalar(0.0));
  CHECK(sig.scalar_value() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softplus is stable far from zero") {
  auto big = ad::softplus(Tensor<double>::from({2}, {500.0, -500.0}));
  CHECK(big.value_at(0) == doctest::Approx(500.0).epsilon(1e-12));
  CHECK(big.value_at(1) >= 0.0);
  CHECK(big.value_at(1) < 1e-100);
}

TEST_CASE("gradient of sum(x*x) is 2x") {
  auto x = Tensor<double>::param({3}, {1.0, 2.0, 3.0});
  Tape<double> tape;
  auto loss = ad::sum(ad::mul(x, x));
  CHECK(loss.scalar_value() == doctest::Approx(14.0));
  tape.backward(loss);
  auto g = x.grad();
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
  CHECK(g[2] == doctest::Approx(6.0));
}

TEST_CASE("fan-out accumulates gradients additively") {
  auto x = Tensor<double>::param({2}, {3.0, -1.0});
  Tape<double> tape;
  auto loss = ad::sum(ad::add(x, x));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("backward contract violations throw") {
  auto x = Tensor<double>::param({2}, {1.0, 2.0});
  {
    Tape<double> tape;
    CHECK_THROWS_AS(tape.backward(ad::mul(x, x)), ContractViolation);  // non-scalar root
  }
  {
    Tape<double> tape;
    auto s = Tensor<double>::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(s), ContractViolation);  // empty tape
  }
}

TEST_CASE("constant subgraphs record nothing and receive no gradients") {
  auto c = Tensor<double>::from({2}, {1.0, 2.0});  // requires_grad = false
  Tape<double> tape;
  auto y = ad::mul(c, c);
  CHECK(tape.size() == 0);
  auto x = Tensor<double>::param({2}, {1.0, 1.0});
  auto loss = ad::sum(ad::add(ad::mul(x, x), y));
  tape.backward(loss);
  CHECK(x.has_grad());
  CHECK_FALSE(c.has_grad());
}

TEST_CASE("detach cuts the graph") {
  auto x = Tensor<double>::param({2}, {2.0, 3.0});
  Tape<double> tape;
  auto d = ad::mul(x, x).detach();
  CHECK_FALSE(d.requires_grad());
  auto loss = ad::sum(ad::mul(d, x));
  tape.backward(loss);
  // d treated as constant: d(loss)/dx = d = x^2
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  CHECK(x.grad()[1] == doctest::Approx(9.0));
}

TEST_CASE("non-finite op outputs raise NumericError") {
  auto x = Tensor<double>::from({1}, {0.0});
  CHECK_THROWS_AS(ad::log_op(x), NumericError);
  auto big = Tensor<float>::from({1}, {200.0f});
  CHECK_THROWS_AS(ad::exp_op(big), NumericError);  // overflows float
  auto zero = Tensor<double>::from({1}, {0.0});
  CHECK_THROWS_AS(ad::div(Tensor<double>::scalar(1.0), zero), NumericError);
}

TEST_CASE("shape mismatches raise ContractViolation") {
  auto a = Tensor<double>::from({2, 3}, std::vector<double>(6, 1.0));
  auto b = Tensor<double>::from({2, 2}, std::vector<double>(4, 1.0));
  CHECK_THROWS_AS(ad::add(a, b), ContractViolation);
  CHECK_THROWS_AS(ad::matmul(a, a), ContractViolation);
  CHECK_THROWS_AS(ad::reshape(a, {5}), ContractViolation);
  CHECK_THROWS_AS(ad::slice(a, 2, 0, 1), ContractViolation);
  CHECK_THROWS_AS(ad::slice(a, 1, 2, 2), ContractViolation);
}

TEST_CASE("broadcast add/mul over trailing shape") {
  auto m = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto row = Tensor<double>::from({3}, {10, 20, 30});
  auto s = ad::add(m, row);
  CHECK(s.value_at(0) == 11.0);
  CHECK(s.value_at(5) == 36.0);
  auto p = ad::mul(row, m);  // small operand on the left
  CHECK(p.value_at(3) == 40.0);
  CHECK(p.shape() == ad::Shape{2, 3});
}

TEST_CASE("gradients of every elementwise op match finite differences") {
  Rng rng(7);
  auto x = random_param({4}, rng);
  // keep log/div away from zero
  auto pos = Tensor<double>::param({4}, {0.7, 1.3, 2.1, 0.4});

  testutil::check_gradients([&] { return ad::sum(ad::relu(x)); }, {x});
  testutil::check_gradients([&] { return ad::sum(ad::sigmoid(x)); }, {x});
  testutil::check_gradients([&] { return ad::sum(ad::tanh_op(x)); }, {x});
  testutil::check_gradients([&] { return ad::sum(ad::exp_op(x)); }, {x});
  testutil::check_gradients([&] { return ad::sum(ad::log_op(pos)); }, {pos});
  testutil::check_gradients([&] { return ad::sum(ad::sin_op(x)); }, {x});
  testutil::check_gradients([&] { return ad::sum(ad::cos_op(x)); }, {x});
  testutil::check_gradients([&] { return ad::sum(ad::softplus(x)); }, {x});
  testutil::check_gradients([&] { return ad::mean(ad::mul(x, x)); }, {x});
  testutil::check_gradients([&] { return ad::sum(ad::div(x, pos)); }, {x, pos});
}

TEST_CASE("gradients of broadcast ops match finite differences") {
  auto m = Tensor<double>::param({2, 3}, {0.3, -0.2, 0.5, 1.1, -0.7, 0.4});
  auto row = Tensor<double>::param({3}, {0.9, 1.4, -0.6});
  auto sc = Tensor<double>::param({1}, {1.7});
  testutil::check_gradients([&] { return ad::sum(ad::mul(m, row)); }, {m, row});
  testutil::check_gradients([&] { return ad::sum(ad::mul(sc, m)); }, {sc, m});
  testutil::check_gradients([&] { return ad::sum(ad::sub(row, m)); }, {row, m});
}

TEST_CASE("gradients of matmul and transpose match finite differences") {
  Rng rng(11);
  auto a = random_param({3, 4}, rng);
  auto b = random_param({4, 2}, rng);
  testutil::check_gradients([&] { return ad::sum(ad::matmul(a, b)); }, {a, b});
  testutil::check_gradients(
      [&] { return ad::sum(ad::mul(ad::transpose2d(a), ad::transpose2d(a))); }, {a});
}

TEST_CASE("gradients of shape ops match finite differences") {
  Rng rng(13);
  auto a = random_param({2, 4}, rng);
  auto b = random_param({3, 4}, rng);
  testutil::check_gradients(
      [&] {
        auto cat = ad::concat<double>({a, b}, 0);      // [5,4]
        auto sl = ad::slice(cat, 0, 1, 4);             // rows 1..3
        auto rs = ad::reshape(sl, {4, 3});
        return ad::sum(ad::mul(rs, rs));
      },
      {a, b});
  testutil::check_gradients(
      [&] {
        auto cat = ad::concat<double>({a, a}, 1);  // fan-out through concat, [2,8]
        return ad::mean(ad::mul(cat, cat));
      },
      {a});
}

TEST_CASE("repeat_rows broadcasts a vector and sums gradients over rows") {
  auto v = Tensor<double>::param({3}, {1.0, 2.0, 3.0});
  {
    Tape<double> tape;
    auto r = ad::repeat_rows(v, 4);
    CHECK(r.shape() == ad::Shape{4, 3});
    CHECK(r.value_at(9) == 1.0);
    auto loss = ad::sum(r);
    tape.backward(loss);
    CHECK(v.grad()[0] == doctest::Approx(4.0));
    v.zero_grad();
  }
  testutil::check_gradients(
      [&] {
        auto r = ad::repeat_rows(v, 5);
        return ad::sum(ad::mul(r, r));
      },
      {v});
}

TEST_CASE("softmax cross-entropy: uniform logits give log(C), gradients check out") {
  auto logits = Tensor<double>::param({2, 4}, std::vector<double>(8, 0.0));
  {
    Tape<double> tape;
    auto loss = ad::softmax_cross_entropy(logits, {0, 3});
    CHECK(loss.scalar_value() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    tape.backward(loss);
    // dL/dz = (p - onehot)/B; p = 1/4
    CHECK(logits.grad()[0] == doctest::Approx((0.25 - 1.0) / 2.0));
    CHECK(logits.grad()[1] == doctest::Approx(0.25 / 2.0));
    logits.zero_grad();
  }
  Rng rng(17);
  auto z = random_param({3, 5}, rng, 1.0);
  std::vector<int> labels{2, 0, 4};
  testutil::check_gradients([&] { return ad::softmax_cross_entropy(z, labels); }, {z});
  CHECK_THROWS_AS(ad::softmax_cross_entropy(z, {0, 1}), ContractViolation);
  CHECK_THROWS_AS(ad::softmax_cross_entropy(z, {0, 1, 5}), ContractViolation);
}

TEST_CASE("two-layer network gradients match finite differences end to end") {
  Rng rng(23);
  auto w1 = random_param({4, 16}, rng);
  auto b1 = random_param({16}, rng, 0.1);
  auto w2 = random_param({16, 4}, rng);
  auto b2 = random_param({4}, rng, 0.1);
  auto w3 = random_param({4, 1}, rng);
  auto in = random_param({5, 4}, rng, 1.0);

  testutil::check_gradients(
      [&] {
        auto h1 = ad::relu(ad::add(ad::matmul(in, w1), b1));
        auto h2 = ad::tanh_op(ad::add(ad::matmul(h1, w2), b2));
        auto out = ad::sigmoid(ad::matmul(h2, w3));
        return ad::mean(ad::mul(out, out));
      },
      {w1, b1, w2, b2, w3, in});
}

TEST_CASE("clear_grads wipes every gradient the tape touched") {
  auto x = Tensor<double>::param({2}, {1.0, 2.0});
  Tape<double> tape;
  auto mid = ad::mul(x, x);
  auto loss = ad::sum(mid);
  tape.backward(loss);
  CHECK(x.has_grad());
  tape.clear_grads();
  CHECK_FALSE(x.has_grad());
  CHECK_FALSE(mid.has_grad());
  CHECK_FALSE(loss.has_grad());
  // A second backward from a different root reuses the same records cleanly.
  auto loss2 = ad::mean(ad::mul(mid, mid));
  tape.backward(loss2);
  CHECK(x.has_grad());
}

TEST_CASE("no-grad guard suppresses recording") {
  auto x = Tensor<double>::param({2}, {1.0, 2.0});
  Tape<double> tape;
  {
    ad::NoGradGuard<double> guard;
    auto y = ad::mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.size() == 0);
  auto z = ad::mul(x, x);
  CHECK(z.requires_grad());
  CHECK(tape.size() == 1);
}

TEST_CASE("identical seeds give bitwise identical training computations") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    std::vector<float> wv(32 * 8), xv(4 * 32);
    for (auto& v : wv) v = static_cast<float>(rng.normal() * 0.1);
    for (auto& v : xv) v = static_cast<float>(rng.uniform());
    auto w = Tensor<float>::param({32, 8}, wv);
    auto x = Tensor<float>::from({4, 32}, xv);
    RmsProp<float> opt({w}, 1e-3f);
    std::vector<float> out;
    for (int it = 0; it < 5; ++it) {
      Tape<float> tape;
      auto loss = ad::mean(ad::mul(ad::sigmoid(ad::matmul(x, w)), Tensor<float>::scalar(2.0f)));
      tape.backward(loss);
      opt.step();
      out.push_back(loss.scalar_value());
    }
    out.insert(out.end(), w.values().begin(), w.values().end());
    return out;
  };
  auto a = run(99), b = run(99), c = run(100);
  CHECK(a == b);        // bitwise equality
  CHECK_FALSE(a == c);  // different seed actually changes the run
}

TEST_CASE("rmsprop single step matches the update rule by hand") {
  // p=1, g=1, lr=0.1, decay=0.9: acc=0.1, p <- 1 - 0.1/(sqrt(0.1)+1e-8)
  auto p = Tensor<double>::param({1}, {1.0});
  RmsProp<double> opt({p}, 0.1, 0.9, 1e-8);
  {
    Tape<double> tape;
    auto loss = ad::sum(p);  // dL/dp = 1
    tape.backward(loss);
  }
  opt.step();
  const double expected = 1.0 - 0.1 / (std::sqrt(0.1) + 1e-8);
  CHECK(p.value_at(0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(opt.accumulators()[0][0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK_FALSE(p.has_grad());  // step consumed the gradient
}

TEST_CASE("rmsprop accumulator damps repeated identical gradients") {
  auto p = Tensor<double>::param({1}, {0.0});
  RmsProp<double> opt({p}, 0.1, 0.99, 1e-8);
  std::vector<double> deltas;
  double prev = 0.0;
  for (int i = 0; i < 3; ++i) {
    Tape<double> tape;
    auto loss = ad::sum(ad::mul(p, Tensor<double>::scalar(1.0)));
    tape.backward(loss);
    opt.step();
    deltas.push_back(std::abs(p.value_at(0) - prev));
    prev = p.value_at(0);
  }
  CHECK(deltas[1] < deltas[0]);
  CHECK(deltas[2] < deltas[1]);
}

TEST_CASE("rmsprop refuses to step a parameter with no gradient") {
  auto p = Tensor<double>::param({2}, {1.0, 2.0});
  auto q = Tensor<double>::param({1}, {3.0});
  RmsProp<double> opt({p, q}, 0.1);
  Tape<double> tape;
  auto loss = ad::sum(p);  // q never touched
  tape.backward(loss);
  CHECK_THROWS_AS(opt.step(), ContractViolation);
}

TEST_CASE("rng streams are deterministic, decorrelated, and restorable") {
  Rng a = Rng::stream(42, 0);
  Rng b = Rng::stream(42, 0);
  Rng c = Rng::stream(42, 1);
  std::vector<double> va, vb, vc;
  for (int i = 0; i < 100; ++i) {
    va.push_back(a.uniform());
    vb.push_back(b.uniform());
    vc.push_back(c.uniform());
  }
  CHECK(va == vb);
  CHECK_FALSE(va == vc);

  for (double v : va) {
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }

  auto state = a.state();
  std::vector<double> run1, run2;
  for (int i = 0; i < 10; ++i) run1.push_back(a.normal());
  a.restore(state);
  for (int i = 0; i < 10; ++i) run2.push_back(a.normal());
  CHECK(run1 == run2);

  CHECK_THROWS_AS(a.uniform(2.0, 1.0), ContractViolation);
}

TEST_CASE("rng normal samples have sane first moments") {
  Rng rng(2024);
  const int n = 50000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("rng uniform_index covers the range without bias") {
  Rng rng(5);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) ++counts[rng.uniform_index(7)];
  for (int c : counts) {
    CHECK(c > 800);
    CHECK(c < 1200);
  }
  CHECK_THROWS_AS(rng.uniform_index(0), ContractViolation);
}
