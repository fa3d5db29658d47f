#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "blab/rng.hpp"
#include "blab/sgd.hpp"
#include "blab/tape.hpp"

using namespace blab;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (int i = 0; i < t.numel(); ++i) t[static_cast<size_t>(i)] = rng.uniform(lo, hi);
  return t;
}

// Keeps entries away from the ReLU/maxpool kinks so central differences with
// eps=1e-5 stay on one side.
Tensor random_tensor_no_kink(std::vector<int> shape, Rng& rng) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (int i = 0; i < t.numel(); ++i)
    if (std::fabs(t[static_cast<size_t>(i)]) < 1e-3)
      t[static_cast<size_t>(i)] += t[static_cast<size_t>(i)] >= 0 ? 1e-3 : -1e-3;
  return t;
}

// loss = sum(out * W) with a fixed random weighting, so output gradients are
// non-uniform.
Var scalarize(Tape& tape, Var v, uint64_t seed) {
  Rng rng(seed);
  Tensor w(tape.val(v).shape());
  for (int i = 0; i < w.numel(); ++i) w[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0);
  return tape.sum(tape.mul(v, tape.constant(std::move(w))));
}

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Central finite differences over every entry of every input.
void check_gradients(const GraphFn& fn, std::vector<Tensor> inputs, double tol = 1e-4,
                     double eps = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
  Var loss = fn(tape, vars);
  REQUIRE(tape.val(loss).numel() == 1);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  for (Var v : vars) analytic.push_back(tape.grad(v));

  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int j = 0; j < inputs[i].numel(); ++j) {
      double orig = inputs[i][static_cast<size_t>(j)];
      auto eval = [&](double x) {
        inputs[i][static_cast<size_t>(j)] = x;
        Tape t2;
        std::vector<Var> vs;
        for (const Tensor& t : inputs) vs.push_back(t2.leaf(t, false));
        return t2.val(fn(t2, vs))[0];
      };
      double fd = (eval(orig + eps) - eval(orig - eps)) / (2 * eps);
      inputs[i][static_cast<size_t>(j)] = orig;
      double an = analytic[i][static_cast<size_t>(j)];
      double err = std::fabs(an - fd) / std::max({1.0, std::fabs(an), std::fabs(fd)});
      INFO("input ", i, " entry ", j, " analytic ", an, " fd ", fd);
      CHECK(err <= tol);
    }
  }
}

constexpr int kSeeds = 10;

}  // namespace

TEST_CASE("elementwise forward examples") {
  Tape tape;
  Var r = tape.relu(tape.constant(Tensor({3}, {-1, 0, 2})));
  CHECK(tape.val(r)[0] == 0.0);
  CHECK(tape.val(r)[1] == 0.0);
  CHECK(tape.val(r)[2] == 2.0);

  Var g = tape.global_avg_pool(tape.constant(Tensor::full({1, 2, 4, 4}, 3.5)));
  CHECK(tape.val(g).at2(0, 0) == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(tape.val(g).at2(0, 1) == doctest::Approx(3.5).epsilon(1e-15));

  Var d = tape.pairwise_sqdist(tape.constant(Tensor({2, 1}, {0, 3})),
                               tape.constant(Tensor({2, 1}, {0, 3})));
  CHECK(tape.val(d).at2(0, 0) == 0.0);
  CHECK(tape.val(d).at2(0, 1) == 9.0);
  CHECK(tape.val(d).at2(1, 0) == 9.0);
  CHECK(tape.val(d).at2(1, 1) == 0.0);
}

TEST_CASE("backward basics") {
  // loss = sum(w . w) -> grad 2w
  Tape tape;
  Var w = tape.leaf(Tensor({2}, {1, 2}), true);
  Var loss = tape.sum(tape.mul(w, w));
  tape.backward(loss);
  CHECK(tape.grad(w)[0] == doctest::Approx(2.0));
  CHECK(tape.grad(w)[1] == doctest::Approx(4.0));

  // detached operand receives no gradient
  Tape t2;
  Var a = t2.leaf(Tensor({2}, {1, 2}), true);
  Var b = t2.leaf(Tensor({2}, {3, 4}), false);
  Var l2 = t2.sum(t2.mul(a, b));
  t2.backward(l2);
  CHECK(t2.grad(b)[0] == 0.0);
  CHECK(t2.grad(b)[1] == 0.0);
  CHECK(t2.grad(a)[0] == doctest::Approx(3.0));

  // non-scalar loss is fatal
  Tape t3;
  Var c = t3.leaf(Tensor({2}, {1, 2}), true);
  CHECK_THROWS(t3.backward(c));
}

TEST_CASE("gradients: elementwise and reductions") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(100, "ew", static_cast<uint64_t>(seed)));
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.add(v[0], v[1]), 7);
    }, {a, b});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.sub(v[0], v[1]), 8);
    }, {a, b});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.mul(v[0], v[1]), 9);
    }, {a, b});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.exp(t.scale(v[0], 0.7)), 10);
    }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.sigmoid(v[0]), 11);
    }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return t.mean_all(t.add_scalar(v[0], 1.5));
    }, {a});
    Tensor nk = random_tensor_no_kink({3, 4}, rng);
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.relu(v[0]), 12);
    }, {nk});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.mean_axis(v[0], 0), 13);
    }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.mean_axis(v[0], 1), 14);
    }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return t.l2norm(v[0]);
    }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.reshape(v[0], {4, 3}), 15);
    }, {a});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.rows(v[0], {2, 0, 2}), 16);
    }, {a});
  }
}

TEST_CASE("gradients: sort_by_key treats permutation as constant") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(101, "sort", static_cast<uint64_t>(seed)));
    Tensor keys = random_tensor({6}, rng);
    Tensor vals = random_tensor({6}, rng);
    // keys held constant, values differentiable
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.sort_by_key(t.constant(keys), v[0]), 17);
    }, {vals});
  }
}

TEST_CASE("gradients: matmul all transpose combinations") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(102, "mm", static_cast<uint64_t>(seed)));
    for (bool ta : {false, true})
      for (bool tb : {false, true}) {
        Tensor a = ta ? random_tensor({4, 3}, rng) : random_tensor({3, 4}, rng);
        Tensor b = tb ? random_tensor({5, 4}, rng) : random_tensor({4, 5}, rng);
        check_gradients([&, ta, tb](Tape& t, const std::vector<Var>& v) {
          return scalarize(t, t.matmul(v[0], v[1], ta, tb), 18);
        }, {a, b});
      }
  }
}

TEST_CASE("gradients: affine, pairwise_sqdist") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(103, "aff", static_cast<uint64_t>(seed)));
    Tensor x = random_tensor({4, 3}, rng);
    Tensor w = random_tensor({5, 3}, rng);
    Tensor b = random_tensor({5}, rng);
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.affine(v[0], v[1], v[2]), 19);
    }, {x, w, b});
    Tensor y = random_tensor({5, 3}, rng);
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.pairwise_sqdist(v[0], v[1]), 20);
    }, {x, y});
  }
}

TEST_CASE("gradients: conv2d") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(104, "conv", static_cast<uint64_t>(seed)));
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
    Tensor b = random_tensor({4}, rng);
    for (int pad : {0, 1}) {
      check_gradients([&, pad](Tape& t, const std::vector<Var>& v) {
        return scalarize(t, t.conv2d(v[0], v[1], v[2], pad), 21);
      }, {x, w, b});
      check_gradients([&, pad](Tape& t, const std::vector<Var>& v) {
        return scalarize(t, t.conv2d(v[0], v[1], Var{}, pad), 22);
      }, {x, w});
    }
  }
}

TEST_CASE("gradients: maxpool and gap") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(105, "pool", static_cast<uint64_t>(seed)));
    Tensor x = random_tensor_no_kink({2, 3, 4, 4}, rng);
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.maxpool2x2(v[0]), 23);
    }, {x});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.global_avg_pool(v[0]), 24);
    }, {x});
  }
}

TEST_CASE("gradients: batchnorm train and eval") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(106, "bn", static_cast<uint64_t>(seed)));
    Tensor x = random_tensor({3, 2, 4, 4}, rng);
    Tensor gamma = random_tensor({2}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({2}, rng);
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      Tensor rm = Tensor::zeros({2});
      Tensor rv = Tensor::full({2}, 1.0);
      return scalarize(t, t.batchnorm_train(v[0], v[1], v[2], rm, rv, 0.1), 25);
    }, {x, gamma, beta});
    Tensor rm = random_tensor({2}, rng);
    Tensor rv = random_tensor({2}, rng, 0.5, 2.0);
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.batchnorm_eval(v[0], v[1], v[2], rm, rv), 26);
    }, {x, gamma, beta});
  }
}

TEST_CASE("gradients: softmax cross entropy, channel_mask, mask_patch") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(107, "ce", static_cast<uint64_t>(seed)));
    Tensor z = random_tensor({4, 5}, rng);
    std::vector<int> labels = {0, 3, 2, 4};
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return t.softmax_cross_entropy(v[0], labels);
    }, {z});
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor mask({3}, {1, 0, 1});
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.channel_mask(v[0], mask), 27);
    }, {x});
    Tensor m = random_tensor({4, 4}, rng, 0.0, 1.0);
    Tensor p = random_tensor({3, 4, 4}, rng, 0.0, 1.0);
    check_gradients([&](Tape& t, const std::vector<Var>& v) {
      return scalarize(t, t.mask_patch(v[0], v[1], v[2]), 28);
    }, {x, m, p});
  }
}

TEST_CASE("batchnorm train normalizes the batch") {
  Rng rng(33);
  Tensor x = random_tensor({4, 3, 6, 6}, rng);
  Tape tape;
  Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
  Var y = tape.batchnorm_train(tape.constant(x), tape.constant(Tensor::full({3}, 1.0)),
                               tape.constant(Tensor::zeros({3})), rm, rv, 0.1);
  const Tensor& out = tape.val(y);
  const int m = 4 * 36;
  for (int c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) mean += out.at4(n, c, i, j);
    mean /= m;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) {
          double d = out.at4(n, c, i, j) - mean;
          var += d * d;
        }
    var /= m;
    CHECK(std::fabs(mean) <= 1e-6);
    CHECK(std::fabs(var - 1.0) <= 1e-5);
  }
}

TEST_CASE("batchnorm eval is a deterministic affine map") {
  Rng rng(34);
  Tensor x = random_tensor({2, 2, 4, 4}, rng);
  Tensor gamma = random_tensor({2}, rng, 0.5, 1.5);
  Tensor beta = random_tensor({2}, rng);
  Tensor rm = random_tensor({2}, rng);
  Tensor rv = random_tensor({2}, rng, 0.5, 2.0);
  auto run = [&](const Tensor& in) {
    Tape t;
    return t.val(t.batchnorm_eval(t.constant(in), t.constant(gamma), t.constant(beta),
                                  rm, rv));
  };
  Tensor y1 = run(x), y2 = run(x);
  for (int i = 0; i < y1.numel(); ++i) CHECK(y1[static_cast<size_t>(i)] == y2[static_cast<size_t>(i)]);
  // affine: f(a x + b x') relationship via two evaluations per channel
  double eps = 1e-5;
  for (int c = 0; c < 2; ++c) {
    double scale = gamma[static_cast<size_t>(c)] / std::sqrt(rv[static_cast<size_t>(c)] + eps);
    double shift = beta[static_cast<size_t>(c)] - scale * rm[static_cast<size_t>(c)];
    for (int i = 0; i < 4; ++i)
      CHECK(y1.at4(0, c, 0, i) ==
            doctest::Approx(scale * x.at4(0, c, 0, i) + shift).epsilon(1e-12));
  }
}

TEST_CASE("softmax cross entropy of uniform logits is ln K") {
  for (int k : {2, 5, 10}) {
    Tape tape;
    Var z = tape.constant(Tensor::full({3, k}, 0.42));
    Var ce = tape.softmax_cross_entropy(z, {0, static_cast<int>(k / 2), k - 1});
    CHECK(std::fabs(tape.val(ce)[0] - std::log(static_cast<double>(k))) <= 1e-12);
  }
}

TEST_CASE("sgd single step arithmetic") {
  // p=1, v=0, g=1, lr=0.01, decay=0 -> v=1, p=0.99
  Tensor p = Tensor::scalar(1.0);
  std::vector<Tensor*> params = {&p};
  Sgd sgd(params, 0.9, 0.0);
  Tensor g = Tensor::scalar(1.0);
  sgd.step(params, {&g}, 0.01);
  CHECK(sgd.velocity()[0][0] == doctest::Approx(1.0));
  CHECK(p[0] == doctest::Approx(0.99));
}

TEST_CASE("sgd momentum recurrence") {
  Tensor p = Tensor::scalar(1.0);
  std::vector<Tensor*> params = {&p};
  Sgd sgd(params, 0.9, 0.0);
  Tensor g = Tensor::scalar(0.5);
  sgd.step(params, {&g}, 0.01);
  double v1 = sgd.velocity()[0][0];
  sgd.step(params, {&g}, 0.01);
  CHECK(sgd.velocity()[0][0] == doctest::Approx(0.9 * v1 + 0.5).epsilon(1e-15));
}

TEST_CASE("sgd decay-only update") {
  // decay=5e-4, g=0, p=1 -> v=5e-4, p = 1 - lr*5e-4
  Tensor p = Tensor::scalar(1.0);
  std::vector<Tensor*> params = {&p};
  Sgd sgd(params, 0.9, 5e-4);
  Tensor g = Tensor::scalar(0.0);
  sgd.step(params, {&g}, 0.1);
  CHECK(sgd.velocity()[0][0] == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 5e-4).epsilon(1e-15));
}

TEST_CASE("sgd missing gradient is fatal") {
  Tensor p = Tensor::scalar(1.0);
  std::vector<Tensor*> params = {&p};
  Sgd sgd(params, 0.9, 0.0);
  CHECK_THROWS(sgd.step(params, {nullptr}, 0.01));
}

TEST_CASE("learning rate schedule") {
  CHECK(scheduled_lr(0.01, {15, 23}, 0.1, 1) == doctest::Approx(0.01));
  CHECK(scheduled_lr(0.01, {15, 23}, 0.1, 15) == doctest::Approx(0.01));
  CHECK(scheduled_lr(0.01, {15, 23}, 0.1, 16) == doctest::Approx(0.001));
  CHECK(scheduled_lr(0.01, {15, 23}, 0.1, 23) == doctest::Approx(0.001));
  CHECK(scheduled_lr(0.01, {15, 23}, 0.1, 24) == doctest::Approx(0.0001));
  CHECK(scheduled_lr(0.01, {15, 23}, 0.1, 30) == doctest::Approx(0.0001));
}

TEST_CASE("shape mismatches are fatal and name the op") {
  Tape tape;
  Var a = tape.constant(Tensor::zeros({2, 3}));
  Var b = tape.constant(Tensor::zeros({3, 2}));
  CHECK_THROWS_WITH_AS(tape.add(a, b), doctest::Contains("add"), std::runtime_error);
  CHECK_THROWS_WITH_AS(tape.matmul(a, a), doctest::Contains("matmul"), std::runtime_error);
  Var x = tape.constant(Tensor::zeros({1, 3, 4, 4}));
  Var w = tape.constant(Tensor::zeros({2, 5, 3, 3}));
  CHECK_THROWS_WITH_AS(tape.conv2d(x, w, Var{}, 1), doctest::Contains("conv2d"),
                       std::runtime_error);
}

TEST_CASE("forward outputs stay finite on finite inputs") {
  Rng rng(77);
  Tensor x = random_tensor({2, 3, 8, 8}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tape tape;
  Var c = tape.conv2d(tape.constant(x), tape.constant(w), Var{}, 1);
  Var p = tape.maxpool2x2(tape.relu(c));
  Var g = tape.global_avg_pool(p);
  CHECK(tape.val(g).all_finite());
}
