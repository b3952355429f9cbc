#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "promuse/errors.hpp"
#include "promuse/rng.hpp"
#include "promuse/tensor.hpp"
#include "testutil.hpp"

using namespace promuse;

namespace {

// Independent matrix-product oracle: plain triple loop, no shared code with
// the engine's kernels.
std::vector<double> matmul_oracle(const std::vector<double>& a,
                                  const std::vector<double>& b, int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand oracle") {
  Tensor a = Tensor::from({1, 2, 3, 4}, {2, 2});
  Tensor eye = Tensor::from({1, 0, 0, 1}, {2, 2});
  Tensor r = matmul(a, eye);
  CHECK(r.values() == std::vector<double>{1, 2, 3, 4});

  Tensor b = Tensor::from({5, 6}, {2, 1});
  Tensor r2 = matmul(a, b);
  CHECK(r2.values() == std::vector<double>{17, 39});

  Rng rng(11);
  Tensor x = Tensor::randn(rng, {3, 4}, 1.0);
  Tensor y = Tensor::randn(rng, {4, 5}, 1.0);
  auto expect = matmul_oracle(x.values(), y.values(), 3, 4, 5);
  Tensor got = matmul(x, y);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(got.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("matmul shape errors name the op and shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("bmm matches per-batch matmul") {
  Rng rng(7);
  Tensor a = Tensor::randn(rng, {2, 3, 4}, 1.0);
  Tensor b = Tensor::randn(rng, {2, 4, 2}, 1.0);
  Tensor r = bmm(a, b);
  for (int i = 0; i < 2; ++i) {
    std::vector<double> av(a.values().begin() + i * 12, a.values().begin() + (i + 1) * 12);
    std::vector<double> bv(b.values().begin() + i * 8, b.values().begin() + (i + 1) * 8);
    auto expect = matmul_oracle(av, bv, 3, 4, 2);
    for (int j = 0; j < 6; ++j)
      CHECK(r.values()[i * 6 + j] == doctest::Approx(expect[j]).epsilon(1e-12));
  }
}

TEST_CASE("layer_norm of a constant vector is zero before the affine shift") {
  Tensor x = Tensor::full({1, 8}, 3.25);
  Tensor gamma = Tensor::full({8}, 1.0);
  Tensor beta = Tensor::zeros({8});
  Tensor y = layer_norm(x, gamma, beta);
  for (double v : y.values()) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("softmax basics") {
  Tensor z = Tensor::from({0, 0}, {1, 2});
  Tensor p = softmax_last(z);
  CHECK(p.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p.values()[1] == doctest::Approx(0.5).epsilon(1e-15));

  // shift invariance
  Rng rng(3);
  Tensor a = Tensor::randn(rng, {1, 5}, 2.0);
  std::vector<double> shifted = a.values();
  for (auto& v : shifted) v += 123.456;
  Tensor b = Tensor::from(shifted, {1, 5});
  Tensor pa = softmax_last(a), pb = softmax_last(b);
  for (int i = 0; i < 5; ++i)
    CHECK(pa.values()[i] == doctest::Approx(pb.values()[i]).epsilon(1e-12));

  // direct exp/sum oracle on [1,2,3]
  Tensor c = Tensor::from({1, 2, 3}, {1, 3});
  Tensor pc = softmax_last(c);
  const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i)
    CHECK(pc.values()[i] == doctest::Approx(std::exp(1.0 + i) / denom).epsilon(1e-14));

  // rows sum to one within 1e-12
  Tensor big = Tensor::randn(rng, {20, 9}, 5.0);
  Tensor pr = softmax_last(big);
  for (int r = 0; r < 20; ++r) {
    double s = 0.0;
    for (int j = 0; j < 9; ++j) s += pr.values()[r * 9 + j];
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax rejects NaN input") {
  Tensor z = Tensor::from({0.0, std::nan("")}, {1, 2});
  CHECK_THROWS_AS(softmax_last(z), NumericError);
}

TEST_CASE("softmax over axis 0 equals transposed softmax") {
  Rng rng(5);
  Tensor x = Tensor::randn(rng, {4, 3}, 1.0);
  Tensor p0 = softmax(x, 0);
  for (int j = 0; j < 3; ++j) {
    double s = 0.0;
    for (int i = 0; i < 4; ++i) s += p0.values()[i * 3 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("cross_entropy closed forms and log-sum-exp oracle") {
  Tensor z = Tensor::from({0, 0}, {2});
  CHECK(std::fabs(cross_entropy(z, 1).item() - std::log(2.0)) < 1e-12);

  Tensor sat = Tensor::from({100, 0}, {2});
  CHECK(cross_entropy(sat, 0).item() == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor logits = Tensor::randn(rng, {2}, 3.0);
    const int target = static_cast<int>(rng.below(2));
    const double a = logits.values()[0], b = logits.values()[1];
    const double mx = std::max(a, b);
    const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
    const double expect = lse - logits.values()[target];
    CHECK(cross_entropy(logits, target).item() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(cross_entropy(logits, target).item() >= 0.0);
  }

  CHECK_THROWS_AS(cross_entropy(z, 2), ValueError);
  CHECK_THROWS_AS(cross_entropy(z, -1), ValueError);
}

TEST_CASE("backward basics") {
  // grad of sum(x) is all-ones
  Tensor x = Tensor::from({1, 2, 3, 4}, {4});
  x.set_requires_grad(true);
  backward(sum_all(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  // detached tensors receive nothing
  Tensor y = Tensor::from({1, 2}, {2});
  y.set_requires_grad(true);
  Tensor d = y.detach();
  Tensor loss = sum_all(mul(y, y));
  backward(loss);
  CHECK(!d.has_grad());

  // non-scalar loss rejected
  Tensor v = Tensor::from({1, 2}, {2});
  v.set_requires_grad(true);
  CHECK_THROWS_AS(backward(mul(v, v)), ShapeError);
}

TEST_CASE("gradient accumulates across shared uses") {
  Tensor x = Tensor::from({3}, {1});
  x.set_requires_grad(true);
  Tensor y = mul(x, x);  // d/dx = 2x
  backward(sum_all(y));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("finite differences: every op, 20+ random instances") {
  Rng rng(2024);
  const double tol = 1e-3;

  for (int inst = 0; inst < 20; ++inst) {
    Rng r = rng.fork(inst);

    {
      Tensor a = Tensor::randn(r, {3, 4}, 1.0);
      Tensor b = Tensor::randn(r, {4, 2}, 1.0);
      b.set_requires_grad(true);
      auto rep = testutil::finite_diff_check(
          a, [&] { return mean_all(matmul(a, b)); });
      CHECK(rep.max_rel_err < tol);
      auto rep2 = testutil::finite_diff_check(
          b, [&] { return mean_all(matmul(a, b)); });
      CHECK(rep2.max_rel_err < tol);
    }
    {
      Tensor a = Tensor::randn(r, {2, 3, 4}, 1.0);
      Tensor b = Tensor::randn(r, {2, 4, 3}, 1.0);
      auto rep = testutil::finite_diff_check(
          a, [&] { return mean_all(bmm(a, b)); });
      CHECK(rep.max_rel_err < tol);
    }
    {
      Tensor a = Tensor::randn(r, {5}, 1.0);
      Tensor b = Tensor::randn(r, {5}, 1.0);
      auto rep = testutil::finite_diff_check(
          a, [&] { return mean_all(mul(add(a, b), sub(a, b))); });
      CHECK(rep.max_rel_err < tol);
    }
    {
      Tensor x = Tensor::randn(r, {6}, 2.0);
      for (auto f : {relu, gelu, tanh_op, sigmoid}) {
        // nudge values away from relu's kink
        auto& vals = x.mutable_values();
        for (auto& v : vals)
          if (std::fabs(v) < 1e-3) v = 0.1;
        auto rep = testutil::finite_diff_check(x, [&] { return mean_all(f(x)); });
        CHECK(rep.max_rel_err < tol);
      }
    }
    {
      Tensor x = Tensor::randn(r, {3, 6}, 1.5);
      Tensor g = Tensor::rand_uniform(r, {6}, 0.5, 1.5);
      Tensor be = Tensor::randn(r, {6}, 0.3);
      for (Tensor* leaf : {&x, &g, &be}) {
        auto rep = testutil::finite_diff_check(
            *leaf, [&] { return mean_all(layer_norm(x, g, be)); });
        CHECK(rep.max_rel_err < tol);
      }
    }
    {
      Tensor x = Tensor::randn(r, {4, 5}, 1.0);
      auto rep = testutil::finite_diff_check(
          x, [&] { return mean_all(mul(softmax_last(x), x)); });
      CHECK(rep.max_rel_err < tol);
      auto rep2 = testutil::finite_diff_check(
          x, [&] { return nll_mean(log_softmax_last(x), {0, 1, 2, 3}); });
      CHECK(rep2.max_rel_err < tol);
    }
    {
      Tensor x = Tensor::randn(r, {4, 3}, 1.0);
      auto rep = testutil::finite_diff_check(x, [&] {
        Tensor c = concat({slice(x, 0, 0, 2), slice(x, 0, 2, 2)}, 0);
        return mean_all(mul(c, c));
      });
      CHECK(rep.max_rel_err < tol);
      auto rep2 = testutil::finite_diff_check(x, [&] {
        Tensor t = transpose(x);
        return mean_all(mul(t, t));
      });
      CHECK(rep2.max_rel_err < tol);
      auto rep3 = testutil::finite_diff_check(x, [&] {
        Tensor m0 = mean_axis(x, 0);
        Tensor m1 = mean_axis(x, 1);
        return add(sum_all(mul(m0, m0)), sum_all(mul(m1, m1)));
      });
      CHECK(rep3.max_rel_err < tol);
    }
    {
      Tensor v = Tensor::randn(r, {4}, 1.0);
      auto rep = testutil::finite_diff_check(v, [&] {
        Tensor m = repeat_rows(v, 3);
        return mean_all(mul(m, m));
      });
      CHECK(rep.max_rel_err < tol);
    }
    {
      Tensor table = Tensor::randn(r, {7, 3}, 1.0);
      auto rep = testutil::finite_diff_check(table, [&] {
        Tensor e = embedding(table, {1, 1, 4, 6});
        return mean_all(mul(e, e));
      });
      CHECK(rep.max_rel_err < tol);
    }
    {
      Tensor x = Tensor::randn(r, {2, 4}, 1.0);
      Tensor s = Tensor::randn(r, {2}, 1.0);
      Tensor c = Tensor::randn(r, {1}, 1.0);
      auto rep = testutil::finite_diff_check(
          x, [&] { return mean_all(rowwise_scale(x, s)); });
      CHECK(rep.max_rel_err < tol);
      auto rep2 = testutil::finite_diff_check(
          s, [&] { return mean_all(rowwise_scale(x, s)); });
      CHECK(rep2.max_rel_err < tol);
      auto rep3 = testutil::finite_diff_check(
          c, [&] { return mean_all(scale_by(x, c)); });
      CHECK(rep3.max_rel_err < tol);
    }
    {
      Tensor x = Tensor::randn(r, {3, 4}, 1.0);
      auto rep = testutil::finite_diff_check(x, [&] {
        Tensor t = tile_rows(x, 2);
        return mean_all(mul(t, t));
      });
      CHECK(rep.max_rel_err < tol);
      auto rep2 = testutil::finite_diff_check(x, [&] {
        Tensor g2 = gather_rows(x, {0, 2, 2});
        return mean_all(mul(g2, g2));
      });
      CHECK(rep2.max_rel_err < tol);
      auto rep3 = testutil::finite_diff_check(x, [&] {
        Tensor rs = reshape(x, {2, 6});
        return mean_all(mul(rs, rs));
      });
      CHECK(rep3.max_rel_err < tol);
    }
    {
      // dropout with a frozen mask behaves like an elementwise product
      Tensor x = Tensor::randn(r, {8}, 1.0);
      const std::uint64_t mask_seed = r.next_u64();
      auto rep = testutil::finite_diff_check(x, [&] {
        Rng mask_rng(mask_seed);
        return mean_all(dropout(x, 0.3, mask_rng, true));
      });
      CHECK(rep.max_rel_err < tol);
    }
  }
}

TEST_CASE("NoGradGuard suppresses graph recording") {
  Tensor x = Tensor::from({1, 2}, {2});
  x.set_requires_grad(true);
  NoGradGuard guard;
  Tensor y = mul(x, x);
  CHECK(!y.requires_grad());
}

TEST_CASE("deterministic backward accumulation") {
  auto run = [] {
    Rng r(99);
    Tensor x = Tensor::randn(r, {16}, 1.0);
    x.set_requires_grad(true);
    Tensor h = x;
    for (int i = 0; i < 4; ++i) h = mul(h, tanh_op(h));
    backward(mean_all(h));
    return x.grad();
  };
  auto g1 = run();
  auto g2 = run();
  CHECK(g1 == g2);  // bit-identical
}

TEST_CASE("concat and slice shape validation") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 4});
  CHECK_THROWS_AS(concat({a, b}, 0), ShapeError);
  Tensor c = concat({a, b}, 1);
  CHECK(c.shape() == Shape{2, 7});
  CHECK_THROWS_AS(slice(a, 0, 1, 5), ShapeError);
  CHECK_THROWS_AS(slice(a, 3, 0, 1), ShapeError);
}
