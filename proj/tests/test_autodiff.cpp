// Gradient checks for every differentiable primitive against central
// differences, plus the tape's bookkeeping rules. Checks run in double so
// the finite-difference noise floor sits far below the tolerances.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "entro/ops.hpp"

using entro::Rng;
using entro::Shape;
using entro::TensorT;

namespace {

using T = TensorT<double>;

T rand_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> vals(static_cast<size_t>(entro::numel(shape)));
  for (auto& v : vals) v = rng.uniform(lo, hi);
  return T::from_data(shape, vals, true);
}

// Scalarize an arbitrary graph output with fixed random weights so the check
// exercises non-uniform upstream gradients.
T weighted_sum(const T& y, Rng& rng) {
  std::vector<double> w(y.values().size());
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return entro::sum(entro::mul(y, T::from_data(y.shape(), w)));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("unary op gradients") {
  Rng rng(11);
  auto check = [&](auto&& fn, double lo, double hi, const Shape& shape = Shape{2, 3, 4}) {
    for (int trial = 0; trial < 4; ++trial) {
      T x = rand_tensor(shape, rng, lo, hi);
      Rng save = rng;  // same weights for every probe
      const double err = entro::finite_diff_check<double>(
          [&](const T& in) {
            rng = save;
            return weighted_sum(fn(in), rng);
          },
          x, 1e-5);
      CHECK(err < kTol);
    }
  };
  SUBCASE("relu") { check([](const T& x) { return entro::relu(x); }, 0.1, 2.0); }
  SUBCASE("abs") { check([](const T& x) { return entro::abs(x); }, 0.1, 2.0); }
  SUBCASE("log") { check([](const T& x) { return entro::log(x); }, 0.2, 3.0); }
  SUBCASE("exp") { check([](const T& x) { return entro::exp(x); }, -1.0, 1.0); }
  SUBCASE("sigmoid") { check([](const T& x) { return entro::sigmoid(x); }, -3.0, 3.0); }
  SUBCASE("softplus") { check([](const T& x) { return entro::softplus(x); }, -3.0, 3.0); }
  SUBCASE("scale") { check([](const T& x) { return entro::scale(x, -1.7); }, -1.0, 1.0); }
  SUBCASE("clamp_min away from the hinge") {
    check([](const T& x) { return entro::clamp_min(x, 0.05); }, 0.2, 2.0);
  }
  SUBCASE("global_avg_pool") {
    check([](const T& x) { return entro::global_avg_pool(entro::relu(x)); }, 0.1, 1.0,
          Shape{2, 3, 4, 4});
  }
  SUBCASE("upsample_nearest2x") {
    check([](const T& x) { return entro::upsample_nearest2x(x); }, -1.0, 1.0, Shape{2, 3, 4, 4});
  }
}

TEST_CASE("binary op gradients") {
  Rng rng(12);
  for (int trial = 0; trial < 4; ++trial) {
    T a = rand_tensor(Shape{3, 5}, rng);
    T b = rand_tensor(Shape{3, 5}, rng, 0.5, 1.5);
    Rng save = rng;
    auto graph = [&](const T& x) {
      rng = save;
      return weighted_sum(entro::add(entro::mul(x, b), entro::sub(x, b)), rng);
    };
    CHECK(entro::finite_diff_check<double>(graph, a, 1e-5) < kTol);
    Rng save2 = rng;
    auto graph_b = [&](const T& x) {
      rng = save2;
      return weighted_sum(entro::scale_add(a, x, 0.37), rng);
    };
    CHECK(entro::finite_diff_check<double>(graph_b, b, 1e-5) < kTol);
  }
}

TEST_CASE("conv2d gradients for input, weight, and bias") {
  Rng rng(13);
  T x = rand_tensor(Shape{2, 3, 8, 8}, rng);
  T w = rand_tensor(Shape{4, 3, 4, 4}, rng);
  T b = rand_tensor(Shape{4}, rng);
  Rng save = rng;
  auto graph = [&](const T& t, int which) {
    rng = save;
    const T& xx = which == 0 ? t : x;
    const T& ww = which == 1 ? t : w;
    const T& bb = which == 2 ? t : b;
    return weighted_sum(entro::conv2d(xx, ww, bb, 2, 1), rng);
  };
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return graph(t, 0); }, x, 1e-5) < kTol);
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return graph(t, 1); }, w, 1e-5) < kTol);
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return graph(t, 2); }, b, 1e-5) < kTol);
}

TEST_CASE("dense gradients") {
  Rng rng(14);
  T x = rand_tensor(Shape{3, 6}, rng);
  T w = rand_tensor(Shape{4, 6}, rng);
  T b = rand_tensor(Shape{4}, rng);
  Rng save = rng;
  auto via = [&](const T& t, int which) {
    rng = save;
    return weighted_sum(entro::dense(which == 0 ? t : x, which == 1 ? t : w, which == 2 ? t : b),
                        rng);
  };
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return via(t, 0); }, x, 1e-5) < kTol);
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return via(t, 1); }, w, 1e-5) < kTol);
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return via(t, 2); }, b, 1e-5) < kTol);
}

TEST_CASE("reduction and structural op gradients") {
  Rng rng(15);
  T x = rand_tensor(Shape{2, 6, 4, 4}, rng);
  Rng save = rng;
  auto with_weights = [&](auto&& fn) {
    return [&, save](const T& t) mutable {
      rng = save;
      return weighted_sum(fn(t), rng);
    };
  };
  CHECK(entro::finite_diff_check<double>(
            with_weights([](const T& t) { return entro::sum_per_sample(t); }), x, 1e-5) < kTol);
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return entro::mean(t); }, x, 1e-5) <
        kTol);
  CHECK(entro::finite_diff_check<double>(
            with_weights([](const T& t) { return entro::slice_channels(t, 1, 5); }), x, 1e-5) <
        kTol);
}

TEST_CASE("box likelihood gradients") {
  Rng rng(16);
  T z = rand_tensor(Shape{2, 3, 2, 2}, rng, -3.0, 3.0);
  T mu_c = rand_tensor(Shape{3}, rng, -0.5, 0.5);
  T s_c = rand_tensor(Shape{3}, rng, 0.4, 2.0);
  Rng save = rng;
  auto logi = [&](const T& t, int which) {
    rng = save;
    return weighted_sum(entro::logistic_box(which == 0 ? t : z, which == 1 ? t : mu_c,
                                            which == 2 ? t : s_c),
                        rng);
  };
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return logi(t, 0); }, z, 1e-5) < kTol);
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return logi(t, 1); }, mu_c, 1e-5) <
        kTol);
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return logi(t, 2); }, s_c, 1e-5) < kTol);

  T mu = rand_tensor(Shape{2, 3, 2, 2}, rng, -0.5, 0.5);
  T sg = rand_tensor(Shape{2, 3, 2, 2}, rng, 0.4, 2.0);
  Rng save2 = rng;
  auto gaus = [&](const T& t, int which) {
    rng = save2;
    return weighted_sum(entro::gaussian_box(which == 0 ? t : z, which == 1 ? t : mu,
                                            which == 2 ? t : sg),
                        rng);
  };
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return gaus(t, 0); }, z, 1e-5) < kTol);
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return gaus(t, 1); }, mu, 1e-5) < kTol);
  CHECK(entro::finite_diff_check<double>([&](const T& t) { return gaus(t, 2); }, sg, 1e-5) < kTol);
}

TEST_CASE("softmax cross entropy gradient and value") {
  Rng rng(17);
  T logits = rand_tensor(Shape{4, 10}, rng, -2.0, 2.0);
  const std::vector<int> labels = {1, 7, 0, 9};
  CHECK(entro::finite_diff_check<double>(
            [&](const T& t) { return entro::softmax_cross_entropy(t, labels); }, logits, 1e-5) <
        kTol);

  // value against a direct log-sum-exp evaluation
  const auto& v = logits.values();
  double want = 0.0;
  for (int n = 0; n < 4; ++n) {
    double mx = v[n * 10];
    for (int k = 1; k < 10; ++k) mx = std::max(mx, v[n * 10 + k]);
    double lse = 0.0;
    for (int k = 0; k < 10; ++k) lse += std::exp(v[n * 10 + k] - mx);
    want += mx + std::log(lse) - v[n * 10 + labels[n]];
  }
  want /= 4.0;
  auto ce = entro::softmax_cross_entropy(logits, labels);
  CHECK(ce.item() == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("round_ste straight-through behavior") {
  auto x = T::from_data(Shape{4}, {0.2, 0.5, -1.4, 2.5}, true);
  auto y = entro::round_ste(x);
  CHECK(y.values() == std::vector<double>{0.0, 1.0, -1.0, 3.0});  // round-half-away
  auto loss = entro::sum(entro::mul(y, T::from_data(Shape{4}, {1.0, 2.0, 3.0, 4.0})));
  entro::backward(loss);
  CHECK(x.grad() == std::vector<double>{1.0, 2.0, 3.0, 4.0});
}

TEST_CASE("add_uniform_noise is bounded and seeded") {
  Rng rng(18);
  T x = rand_tensor(Shape{64}, rng);
  auto a = entro::add_uniform_noise(x, 99);
  auto b = entro::add_uniform_noise(x, 99);
  auto c = entro::add_uniform_noise(x, 100);
  CHECK(a.values() == b.values());
  CHECK(a.values() != c.values());
  for (size_t i = 0; i < a.values().size(); ++i) {
    const double d = a.values()[i] - x.values()[i];
    CHECK(d >= -0.5);
    CHECK(d < 0.5);
  }
}

TEST_CASE("tape bookkeeping") {
  SUBCASE("backward on a consumed graph throws") {
    auto x = T::from_data(Shape{2}, {1.0, 2.0}, true);
    auto y = entro::sum(entro::mul(x, x));
    entro::backward(y);
    CHECK_THROWS_AS(entro::backward(y), entro::ValueError);
  }
  SUBCASE("interior of a consumed graph cannot be extended and reused") {
    auto x = T::from_data(Shape{2}, {1.0, 2.0}, true);
    auto mid = entro::mul(x, x);
    entro::backward(entro::sum(mid));
    auto again = entro::sum(mid);
    CHECK_THROWS_AS(entro::backward(again), entro::ValueError);
  }
  SUBCASE("backward needs a scalar") {
    auto x = T::from_data(Shape{2}, {1.0, 2.0}, true);
    auto y = entro::mul(x, x);
    CHECK_THROWS_AS(entro::backward(y), entro::ShapeError);
  }
  SUBCASE("grad on an untouched leaf throws") {
    auto x = T::from_data(Shape{2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS((void)x.grad(), entro::ValueError);
  }
  SUBCASE("detached tensors track nothing") {
    auto x = T::from_data(Shape{2}, {1.0, 2.0}, true);
    auto y = entro::sum(entro::mul(entro::detach(x), x));
    entro::backward(y);
    CHECK(x.grad() == std::vector<double>{1.0, 2.0});
  }
  SUBCASE("gradients accumulate across fan-out") {
    auto x = T::from_data(Shape{1}, {3.0}, true);
    auto y = entro::add(entro::scale(x, 2.0), entro::scale(x, 5.0));
    entro::backward(entro::sum(y));
    CHECK(x.grad()[0] == doctest::Approx(7.0));
  }
}

TEST_CASE("shape and domain errors") {
  auto x = T::from_data(Shape{1, 3, 8, 8}, std::vector<double>(192, 0.5));
  auto w = T::from_data(Shape{4, 3, 3, 3}, std::vector<double>(108, 0.1));
  auto b = T::zeros(Shape{4});
  // (8 + 2 - 3) % 2 != 0: output extent must divide exactly
  CHECK_THROWS_AS(entro::conv2d(x, w, b, 2, 1), entro::ShapeError);
  CHECK_THROWS_AS(entro::add(T::zeros(Shape{2}), T::zeros(Shape{3})), entro::ShapeError);
  CHECK_THROWS_AS(entro::log(T::from_data(Shape{1}, {-1.0})), entro::ValueError);
  CHECK_THROWS_AS(
      entro::logistic_box(T::zeros(Shape{1, 3, 2, 2}), T::zeros(Shape{3}),
                          T::from_data(Shape{3}, {1.0, 0.0, 1.0})),
      entro::ValueError);
}

TEST_CASE("float instantiation matches double forward values") {
  Rng rng(19);
  T xd = rand_tensor(Shape{2, 3, 4, 4}, rng, -1.0, 1.0);
  std::vector<float> xf(xd.values().begin(), xd.values().end());
  auto x32 = TensorT<float>::from_data(Shape{2, 3, 4, 4}, xf);
  auto y64 = entro::softplus(entro::scale(xd, 1.3));
  auto y32 = entro::softplus(entro::scale(x32, 1.3));
  for (size_t i = 0; i < y64.values().size(); ++i)
    CHECK(y32.values()[i] == doctest::Approx(y64.values()[i]).epsilon(1e-5));
}
