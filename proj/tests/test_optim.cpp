#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "promuse/checkpoint.hpp"
#include "promuse/errors.hpp"
#include "promuse/optim.hpp"
#include "promuse/params.hpp"
#include "promuse/tensor.hpp"

using namespace promuse;

TEST_CASE("decay-only update with zero gradient") {
  ParameterSet ps;
  Tensor theta = ps.add("w", Tensor::from({1.0}, {1}), true);
  theta.node()->ensure_grad();  // zero gradient, explicitly present

  AdamW opt(AdamWConfig{1e-5, 1e-3, 0.9, 0.999, 1e-8});
  opt.step(ps);
  CHECK(theta.values()[0] == doctest::Approx(1.0 - 1e-8).epsilon(1e-15));
}

TEST_CASE("frozen parameters are bit-unchanged and carry no state") {
  ParameterSet ps;
  Tensor frozen = ps.add("frozen", Tensor::from({2.5, -1.5}, {2}), false);
  Tensor live = ps.add("live", Tensor::from({1.0}, {1}), true);

  // even a stale grad slot on a frozen tensor must be ignored
  frozen.node()->ensure_grad();
  frozen.node()->grad[0] = 10.0;
  live.node()->ensure_grad();
  live.node()->grad[0] = 1.0;

  const std::uint64_t before = ps.hash_frozen();
  AdamW opt;
  for (int i = 0; i < 25; ++i) {
    live.node()->ensure_grad();
    live.node()->grad[0] = 1.0;
    opt.step(ps);
  }
  CHECK(ps.hash_frozen() == before);
  CHECK(frozen.values()[0] == 2.5);
  CHECK(!opt.has_state("frozen"));
  CHECK(opt.has_state("live"));
}

TEST_CASE("missing grad on a trainable entry is an error") {
  ParameterSet ps;
  ps.add("w", Tensor::from({1.0}, {1}), true);
  AdamW opt;
  CHECK_THROWS_AS(opt.step(ps), ValueError);
}

TEST_CASE("two steps with constant gradient match the hand recurrence") {
  const double lr = 1e-2, wd = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double g = 0.37;
  double theta = 0.8, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    theta -= lr * (mh / (std::sqrt(vh) + eps) + wd * theta);
  }

  ParameterSet ps;
  Tensor w = ps.add("w", Tensor::from({0.8}, {1}), true);
  AdamW opt(AdamWConfig{lr, wd, b1, b2, eps});
  for (int t = 0; t < 2; ++t) {
    w.node()->ensure_grad();
    w.node()->grad[0] = g;
    opt.step(ps);
  }
  CHECK(w.values()[0] == doctest::Approx(theta).epsilon(1e-14));
}

TEST_CASE("grads are cleared after a step") {
  ParameterSet ps;
  Tensor w = ps.add("w", Tensor::from({1.0}, {1}), true);
  w.node()->ensure_grad();
  w.node()->grad[0] = 0.5;
  AdamW opt;
  opt.step(ps);
  CHECK(!w.has_grad());
}

TEST_CASE("exponential lr decay") {
  AdamW opt(AdamWConfig{1e-5, 1e-3, 0.9, 0.999, 1e-8});
  opt.decay_lr(0.95);
  CHECK(opt.learning_rate() == doctest::Approx(9.5e-6).epsilon(1e-15));

  opt.decay_lr(1.0);
  CHECK(opt.learning_rate() == doctest::Approx(9.5e-6).epsilon(1e-15));

  AdamW fresh(AdamWConfig{1e-5, 1e-3, 0.9, 0.999, 1e-8});
  for (int i = 0; i < 100; ++i) fresh.decay_lr(0.95);
  CHECK(fresh.learning_rate() ==
        doctest::Approx(1e-5 * std::pow(0.95, 100)).epsilon(1e-12));

  CHECK_THROWS_AS(fresh.decay_lr(0.0), ValueError);
  CHECK_THROWS_AS(fresh.decay_lr(-0.5), ValueError);
  CHECK_THROWS_AS(fresh.decay_lr(1.5), ValueError);
}

TEST_CASE("training is reproducible bit-for-bit") {
  auto run = [] {
    Rng rng(42);
    ParameterSet ps;
    Tensor w = ps.add("w", Tensor::randn(rng, {4, 4}, 0.5), true);
    Tensor b = ps.add("b", Tensor::zeros({4}), true);
    AdamW opt(AdamWConfig{1e-3, 1e-2, 0.9, 0.999, 1e-8});
    for (int step = 0; step < 20; ++step) {
      Tensor x = Tensor::randn(rng, {4, 4}, 1.0);
      Tensor h = add(matmul(x, w), repeat_rows(b, 4));
      backward(mean_all(mul(h, h)));
      opt.step(ps);
    }
    return std::make_pair(w.values(), b.values());
  };
  auto r1 = run();
  auto r2 = run();
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("checkpoint round-trip is byte-identical") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "promuse_ckpt_test";
  fs::create_directories(dir);

  Rng rng(5);
  ParameterSet ps;
  ps.add("alpha.w", Tensor::randn(rng, {3, 5}, 1.0), true);
  ps.add("alpha.b", Tensor::randn(rng, {5}, 1.0), true);
  ps.add("frozen.emb", Tensor::randn(rng, {7, 2}, 1.0), false);

  const auto p1 = (dir / "a.ckpt").string();
  const auto p2 = (dir / "b.ckpt").string();
  save_checkpoint(ps, p1);
  ParameterSet loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);

  auto read_all = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
  };
  CHECK(read_all(p1) == read_all(p2));
  CHECK(loaded.size() == 3);
  CHECK(loaded.entry("frozen.emb").trainable == false);
  CHECK(loaded.get("alpha.w").values() == ps.get("alpha.w").values());

  // wrong magic
  const auto bad = (dir / "bad.ckpt").string();
  {
    std::ofstream f(bad, std::ios::binary);
    f << "NOTAPMUSEFILE________";
  }
  CHECK_THROWS_AS(load_checkpoint(bad), IoError);

  // truncation
  const auto trunc = (dir / "trunc.ckpt").string();
  {
    std::string full = read_all(p1);
    std::ofstream f(trunc, std::ios::binary);
    f.write(full.data(), static_cast<std::streamsize>(full.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(trunc), IoError);

  fs::remove_all(dir);
}
