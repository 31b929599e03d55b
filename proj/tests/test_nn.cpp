#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "scratchdet/nn.hpp"

using namespace scratchdet;

namespace {

Tensor random_tensor(const std::vector<int>& shape, SeededRng& rng,
                     double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double rel_err(double got, double want) {
  double denom = std::max({std::abs(got), std::abs(want), 1e-8});
  return std::abs(got - want) / denom;
}

}  // namespace

TEST_CASE("batchnorm train forward: normalized stats and affine") {
  SeededRng rng(1);
  Tensor x = random_tensor({4, 3, 5, 5}, rng, -2.0, 3.0);
  BatchNormState st(3);
  st.gamma = {2.0, 1.0, 0.5};
  st.beta = {0.5, -1.0, 0.0};
  BnCache cache;
  Tensor y = batchnorm_forward(x, st, cache);

  int64_t m = 4 * 5 * 5;
  for (int c = 0; c < 3; ++c) {
    // batch stats of x
    double mean = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int h = 0; h < 5; ++h)
        for (int w = 0; w < 5; ++w) mean += x.at(n, c, h, w);
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int h = 0; h < 5; ++h)
        for (int w = 0; w < 5; ++w) {
          double d = x.at(n, c, h, w) - mean;
          var += d * d;
        }
    var /= static_cast<double>(m);  // biased

    // y stats must be (beta, gamma^2 * var/(var+eps))
    double ymean = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int h = 0; h < 5; ++h)
        for (int w = 0; w < 5; ++w) ymean += y.at(n, c, h, w);
    ymean /= static_cast<double>(m);
    REQUIRE_THAT(ymean, Catch::Matchers::WithinAbs(st.beta[c], 1e-10));

    double yvar = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int h = 0; h < 5; ++h)
        for (int w = 0; w < 5; ++w) {
          double d = y.at(n, c, h, w) - ymean;
          yvar += d * d;
        }
    yvar /= static_cast<double>(m);
    double expect = st.gamma[c] * st.gamma[c] * var / (var + st.eps);
    REQUIRE_THAT(yvar, Catch::Matchers::WithinRel(expect, 1e-9));

    // running stats: (1-m)*prev + m*batch with prev = (0,1)
    REQUIRE_THAT(st.running_mean[c],
                 Catch::Matchers::WithinAbs(0.9 * 0.0 + 0.1 * mean, 1e-12));
    REQUIRE_THAT(st.running_var[c],
                 Catch::Matchers::WithinAbs(0.9 * 1.0 + 0.1 * var, 1e-12));
  }
}

TEST_CASE("batchnorm inference uses running stats and does not update them") {
  SeededRng rng(2);
  BatchNormState st(2);
  st.mode = BnMode::inference;
  st.running_mean = {1.0, -2.0};
  st.running_var = {4.0, 0.25};
  st.gamma = {3.0, 1.0};
  st.beta = {0.0, 5.0};
  Tensor x = random_tensor({1, 2, 2, 2}, rng);
  BnCache cache;
  Tensor y = batchnorm_forward(x, st, cache);
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w) {
      double want0 = 3.0 * (x.at(0, 0, h, w) - 1.0) / std::sqrt(4.0 + st.eps);
      double want1 =
          1.0 * (x.at(0, 1, h, w) + 2.0) / std::sqrt(0.25 + st.eps) + 5.0;
      REQUIRE_THAT(y.at(0, 0, h, w), Catch::Matchers::WithinAbs(want0, 1e-12));
      REQUIRE_THAT(y.at(0, 1, h, w), Catch::Matchers::WithinAbs(want1, 1e-12));
    }
  REQUIRE(st.running_mean == std::vector<double>{1.0, -2.0});
  REQUIRE(st.running_var == std::vector<double>{4.0, 0.25});
  REQUIRE_THROWS_AS(batchnorm_backward(y, cache), ContractError);
}

TEST_CASE("batchnorm train needs at least two samples per channel") {
  BatchNormState st(1);
  BnCache cache;
  Tensor x({1, 1, 1, 1});
  REQUIRE_THROWS_AS(batchnorm_forward(x, st, cache), ContractError);
}

TEST_CASE("batchnorm backward matches central finite differences") {
  SeededRng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    int N = 2 + static_cast<int>(rng.next_below(2));
    int C = 1 + static_cast<int>(rng.next_below(3));
    int H = 2 + static_cast<int>(rng.next_below(3));
    Tensor x = random_tensor({N, C, H, H}, rng, -2.0, 2.0);
    BatchNormState st(C);
    for (int c = 0; c < C; ++c) {
      st.gamma[c] = rng.uniform(0.5, 2.0);
      st.beta[c] = rng.uniform(-1.0, 1.0);
    }
    BnCache cache;
    Tensor y = batchnorm_forward(x, st, cache);
    Tensor up = random_tensor(y.shape, rng);
    BnGrads g = batchnorm_backward(up, cache);

    auto loss = [&](const Tensor& xx, const std::vector<double>& gamma,
                    const std::vector<double>& beta) {
      BatchNormState s2(C);
      s2.gamma = gamma;
      s2.beta = beta;
      BnCache c2;
      return dot(batchnorm_forward(xx, s2, c2), up);
    };
    const double eps = 1e-6;
    for (int probe = 0; probe < 10; ++probe) {
      size_t i = rng.next_below(x.data.size());
      Tensor xp = x, xm = x;
      xp.data[i] += eps;
      xm.data[i] -= eps;
      double fd = (loss(xp, st.gamma, st.beta) - loss(xm, st.gamma, st.beta)) /
                  (2 * eps);
      REQUIRE(rel_err(g.grad_x.data[i], fd) < 1e-4);
    }
    for (int c = 0; c < C; ++c) {
      auto gp = st.gamma, gm = st.gamma;
      gp[c] += eps;
      gm[c] -= eps;
      double fd = (loss(x, gp, st.beta) - loss(x, gm, st.beta)) / (2 * eps);
      REQUIRE(rel_err(g.grad_gamma[c], fd) < 1e-4);

      auto bp = st.beta, bm = st.beta;
      bp[c] += eps;
      bm[c] -= eps;
      double fd2 = (loss(x, st.gamma, bp) - loss(x, st.gamma, bm)) / (2 * eps);
      REQUIRE(rel_err(g.grad_beta[c], fd2) < 1e-4);
    }
  }
}

TEST_CASE("relu and its backward") {
  Tensor x({1, 1, 1, 4}, {-1.0, 0.0, 2.0, -0.5});
  Tensor y = relu(x);
  REQUIRE(y.data == std::vector<double>{0.0, 0.0, 2.0, 0.0});
  Tensor up({1, 1, 1, 4}, {1.0, 1.0, 1.0, 1.0});
  Tensor g = relu_backward(up, x);
  // subgradient 0 at exactly 0
  REQUIRE(g.data == std::vector<double>{0.0, 0.0, 1.0, 0.0});
}

TEST_CASE("smooth_l1 values and gradient") {
  Tensor p({3}, {0.5, 2.0, -3.0});
  Tensor t({3}, {0.0, 0.0, 0.0});
  SmoothL1Result r = smooth_l1(p, t);
  // 0.5*0.25 + (2-0.5) + (3-0.5)
  REQUIRE_THAT(r.loss, Catch::Matchers::WithinAbs(0.125 + 1.5 + 2.5, 1e-12));
  REQUIRE(r.grad_pred.data == std::vector<double>{0.5, 1.0, -1.0});

  // finite differences away from the kink
  SeededRng rng(4);
  Tensor pp = Tensor({20});
  Tensor tt = Tensor({20});
  for (auto& v : pp.data) v = rng.uniform(-3.0, 3.0);
  for (auto& v : tt.data) v = rng.uniform(-3.0, 3.0);
  SmoothL1Result rr = smooth_l1(pp, tt);
  const double eps = 1e-7;
  for (size_t i = 0; i < pp.data.size(); ++i) {
    if (std::abs(std::abs(pp.data[i] - tt.data[i]) - 1.0) < 1e-3) continue;
    Tensor a = pp, b = pp;
    a.data[i] += eps;
    b.data[i] -= eps;
    double fd = (smooth_l1(a, tt).loss - smooth_l1(b, tt).loss) / (2 * eps);
    REQUIRE(rel_err(rr.grad_pred.data[i], fd) < 1e-4);
  }
  REQUIRE_THROWS_AS(smooth_l1(Tensor({2}), Tensor({3})), DimensionError);
}

TEST_CASE("softmax cross entropy: probabilities, loss, gradient") {
  // uniform logits -> loss = log K, grad = 1/K - onehot
  Tensor logits({1, 4});
  logits.fill(7.0);
  SoftmaxCeResult r = softmax_cross_entropy(logits, {2});
  REQUIRE_THAT(r.loss[0], Catch::Matchers::WithinAbs(std::log(4.0), 1e-12));
  for (int j = 0; j < 4; ++j) {
    REQUIRE_THAT(r.probs.data[j], Catch::Matchers::WithinAbs(0.25, 1e-12));
    double want = 0.25 - (j == 2 ? 1.0 : 0.0);
    REQUIRE_THAT(r.grad_logits.data[j],
                 Catch::Matchers::WithinAbs(want, 1e-12));
  }

  // stability: huge logits must not overflow
  Tensor big({1, 3}, {1000.0, 999.0, -1000.0});
  SoftmaxCeResult rb = softmax_cross_entropy(big, {0});
  REQUIRE(std::isfinite(rb.loss[0]));
  REQUIRE(rb.loss[0] < 1.0);

  // finite differences on random logits
  SeededRng rng(5);
  Tensor l({6, 5});
  for (auto& v : l.data) v = rng.uniform(-2.0, 2.0);
  std::vector<int> labels;
  for (int a = 0; a < 6; ++a)
    labels.push_back(static_cast<int>(rng.next_below(5)));
  SoftmaxCeResult rr = softmax_cross_entropy(l, labels);
  const double eps = 1e-6;
  for (size_t i = 0; i < l.data.size(); ++i) {
    Tensor a = l, b = l;
    a.data[i] += eps;
    b.data[i] -= eps;
    auto total = [&](const Tensor& t) {
      auto res = softmax_cross_entropy(t, labels);
      double s = 0.0;
      for (double v : res.loss) s += v;
      return s;
    };
    double fd = (total(a) - total(b)) / (2 * eps);
    REQUIRE(rel_err(rr.grad_logits.data[i], fd) < 1e-4);
  }

  REQUIRE_THROWS_AS(softmax_cross_entropy(l, {0, 1, 2, 3, 4, 5}),
                    ContractError);
  REQUIRE_THROWS_AS(softmax_cross_entropy(Tensor({2, 1}), {0, 0}),
                    DimensionError);
}

TEST_CASE("sgd_step follows the momentum+decay update and zeroes grads") {
  ParamTensor p("w", Tensor({2}, {1.0, -2.0}));
  p.grad = Tensor({2}, {0.5, 0.25});
  std::vector<ParamTensor*> ps{&p};

  double lr = 0.1, mom = 0.9, wd = 0.01;
  // step 1: v = lr*(g + wd*w)
  double v0 = lr * (0.5 + wd * 1.0);
  double v1 = lr * (0.25 + wd * -2.0);
  sgd_step(ps, lr, mom, wd);
  REQUIRE_THAT(p.value.data[0], Catch::Matchers::WithinAbs(1.0 - v0, 1e-15));
  REQUIRE_THAT(p.value.data[1], Catch::Matchers::WithinAbs(-2.0 - v1, 1e-15));
  REQUIRE(p.grad.data == std::vector<double>{0.0, 0.0});

  // step 2 with zero grad: pure momentum + decay coupling
  double w0 = p.value.data[0], w1 = p.value.data[1];
  double v0b = mom * v0 + lr * wd * w0;
  double v1b = mom * v1 + lr * wd * w1;
  sgd_step(ps, lr, mom, wd);
  REQUIRE_THAT(p.value.data[0], Catch::Matchers::WithinAbs(w0 - v0b, 1e-15));
  REQUIRE_THAT(p.value.data[1], Catch::Matchers::WithinAbs(w1 - v1b, 1e-15));

  REQUIRE_THROWS_AS(
      sgd_step(ps, std::numeric_limits<double>::quiet_NaN(), mom, wd),
      ContractError);
}

TEST_CASE("sgd_step drives a quadratic to its minimum") {
  // f(w) = 0.5*(w-3)^2, no decay: converges to 3
  ParamTensor p("w", Tensor({1}, {0.0}));
  std::vector<ParamTensor*> ps{&p};
  for (int i = 0; i < 1000; ++i) {
    p.grad.data[0] = p.value.data[0] - 3.0;
    sgd_step(ps, 0.05, 0.9, 0.0);
  }
  REQUIRE_THAT(p.value.data[0], Catch::Matchers::WithinAbs(3.0, 1e-6));
}
