#include <doctest.h>

#include <cmath>

#include "cpl/ctc.hpp"
#include "cpl/rng.hpp"
#include "oracles.hpp"

using cpl::Matrix;
using cpl::Transcript;

namespace {

Matrix random_logits(cpl::Rng& rng, std::size_t t, std::size_t v, double scale = 2.0) {
  Matrix m(t, v);
  for (auto& x : m.v) x = scale * rng.normal();
  return m;
}

double row_entropy(const Matrix& p, std::size_t t) {
  double h = 0;
  for (std::size_t v = 0; v < p.cols; ++v)
    if (p(t, v) > 0) h -= p(t, v) * std::log(p(t, v));
  return h;
}

}  // namespace

TEST_CASE("collapse") {
  // alignment cc###aatttt# with c=0,a=1,t=2 and blank=3 collapses to cat
  const cpl::TokenId B = 3;
  const cpl::Alignment a = {0, 0, B, B, B, 1, 1, 2, 2, 2, 2, B};
  CHECK(cpl::collapse(a, B) == Transcript{0, 1, 2});
  CHECK(cpl::collapse({B, B, B}, B).empty());
  CHECK(cpl::collapse({1, B, 1}, B) == Transcript{1, 1});  // blank separates repeats
}

TEST_CASE("collapse is idempotent on a blank-free sequence") {
  cpl::Rng rng(21);
  for (int i = 0; i < 100; ++i) {
    cpl::Alignment a(1 + rng.uniform_index(10));
    for (auto& t : a) t = static_cast<cpl::TokenId>(rng.uniform_index(4));
    const Transcript once = cpl::collapse(a, 4);
    const Transcript twice = cpl::collapse(cpl::Alignment(once.begin(), once.end()), 4);
    CHECK(once == twice);
  }
}

TEST_CASE("ctc loss: single-frame uniform case") {
  Matrix logits(1, 2);  // equal logits, blank = 1
  const auto res = cpl::ctc_loss_grad(logits, {0}, 1);
  CHECK(res.feasible);
  CHECK(res.loss == doctest::Approx(-std::log(0.5)).epsilon(1e-12));
}

TEST_CASE("ctc loss matches exhaustive enumeration, T=3 V=3 length-1 target") {
  cpl::Rng rng(22);
  const Matrix logits = random_logits(rng, 3, 3);
  const auto res = cpl::ctc_loss_grad(logits, {0}, 2);
  CHECK(res.loss == doctest::Approx(oracles::ctc_loss_enumerated(logits, {0}, 2)).epsilon(1e-9));
}

TEST_CASE("ctc loss matches enumeration on random instances") {
  cpl::Rng rng(23);
  for (int i = 0; i < 60; ++i) {
    const std::size_t T = 1 + rng.uniform_index(5);
    const std::size_t V = 2 + rng.uniform_index(3);
    const cpl::TokenId blank = static_cast<cpl::TokenId>(V - 1);
    Transcript target(rng.uniform_index(4));
    for (auto& t : target) t = static_cast<cpl::TokenId>(rng.uniform_index(V - 1));
    const Matrix logits = random_logits(rng, T, V);
    const auto res = cpl::ctc_loss_grad(logits, target, blank);
    std::size_t repeats = 0;
    for (std::size_t j = 1; j < target.size(); ++j)
      if (target[j] == target[j - 1]) ++repeats;
    if (T < target.size() + repeats) {
      CHECK_FALSE(res.feasible);
      CHECK(std::isinf(res.loss));
      for (double g : res.grad.v) CHECK(g == 0.0);
    } else {
      CHECK(res.feasible);
      CHECK(res.loss ==
            doctest::Approx(oracles::ctc_loss_enumerated(logits, target, blank)).epsilon(1e-9));
      CHECK(std::exp(-res.loss) > 0.0);
      CHECK(std::exp(-res.loss) <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("ctc gradient matches central finite differences") {
  cpl::Rng rng(24);
  for (int i = 0; i < 20; ++i) {
    const std::size_t T = 2 + rng.uniform_index(5);
    const std::size_t V = 2 + rng.uniform_index(3);
    const cpl::TokenId blank = static_cast<cpl::TokenId>(V - 1);
    Transcript target(1 + rng.uniform_index(2));
    for (auto& t : target) t = static_cast<cpl::TokenId>(rng.uniform_index(V - 1));
    std::size_t repeats = 0;
    for (std::size_t j = 1; j < target.size(); ++j)
      if (target[j] == target[j - 1]) ++repeats;
    if (T < target.size() + repeats) continue;

    const Matrix logits = random_logits(rng, T, V, 1.0);
    const auto res = cpl::ctc_loss_grad(logits, target, blank);
    const auto fd = oracles::finite_difference(
        [&](const std::vector<double>& x) {
          Matrix m(T, V);
          m.v = x;
          return cpl::ctc_loss_grad(m, target, blank).loss;
        },
        logits.v);
    for (std::size_t j = 0; j < fd.size(); ++j)
      CHECK(std::abs(res.grad.v[j] - fd[j]) < 1e-5);
  }
}

TEST_CASE("ctc gradient rows sum to zero") {
  cpl::Rng rng(25);
  const Matrix logits = random_logits(rng, 6, 4);
  const auto res = cpl::ctc_loss_grad(logits, {0, 1, 2}, 3);
  for (std::size_t t = 0; t < res.grad.rows; ++t) {
    double s = 0;
    for (std::size_t v = 0; v < res.grad.cols; ++v) s += res.grad(t, v);
    CHECK(std::abs(s) < 1e-9);
  }
}

TEST_CASE("loss decreases along the negative gradient") {
  cpl::Rng rng(26);
  for (int i = 0; i < 10; ++i) {
    Matrix logits = random_logits(rng, 5, 3);
    const Transcript target = {0, 1};
    const auto res = cpl::ctc_loss_grad(logits, target, 2);
    Matrix moved = logits;
    for (std::size_t j = 0; j < moved.v.size(); ++j) moved.v[j] -= 1e-3 * res.grad.v[j];
    CHECK(cpl::ctc_loss_grad(moved, target, 2).loss < res.loss);
  }
}

TEST_CASE("alignment probabilities partition unity (T<=4, V<=3)") {
  cpl::Rng rng(27);
  const Matrix logits = random_logits(rng, 4, 3);
  CHECK(oracles::ctc_total_probability(logits, 2, 4) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("ctc rejects blank or out-of-range target tokens") {
  Matrix logits(3, 3);
  CHECK_THROWS_AS(cpl::ctc_loss_grad(logits, {2}, 2), std::invalid_argument);
  CHECK_THROWS_AS(cpl::ctc_loss_grad(logits, {7}, 2), std::invalid_argument);
}

TEST_CASE("apply_temperature") {
  Matrix logits(1, 2);
  const auto p1 = cpl::apply_temperature(logits, 1.0);
  CHECK(p1.values(0, 0) == doctest::Approx(0.5));
  CHECK(p1.values(0, 1) == doctest::Approx(0.5));

  Matrix l2(1, 2);
  l2(0, 0) = 1.0;
  l2(0, 1) = 3.0;
  const auto p0 = cpl::apply_temperature(l2, 0.0);
  CHECK(p0.values(0, 0) == 0.0);
  CHECK(p0.values(0, 1) == 1.0);

  cpl::Rng rng(28);
  for (int i = 0; i < 30; ++i) {
    const Matrix m = random_logits(rng, 1, 5);
    const auto hot = cpl::apply_temperature(m, 1.0);
    const auto smooth = cpl::apply_temperature(m, 100.0);
    CHECK(row_entropy(smooth.values, 0) > row_entropy(hot.values, 0));
    double sum = 0;
    for (std::size_t v = 0; v < 5; ++v) {
      sum += hot.values(0, v);
      CHECK(hot.values(0, v) >= 0.0);
      CHECK(hot.values(0, v) <= 1.0);
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(cpl::apply_temperature(logits, -0.5), std::invalid_argument);
}

TEST_CASE("greedy_decode argmax path and blank-only frame") {
  // build logits whose argmax path is cc###aatttt# (c=0,a=1,t=2,#=3)
  const cpl::Alignment path = {0, 0, 3, 3, 3, 1, 1, 2, 2, 2, 2, 3};
  Matrix logits(path.size(), 4);
  for (std::size_t t = 0; t < path.size(); ++t) logits(t, static_cast<std::size_t>(path[t])) = 5.0;
  CHECK(cpl::greedy_decode(logits, 3) == Transcript{0, 1, 2});

  Matrix blanky(1, 3);
  blanky(0, 2) = 9.0;
  CHECK(cpl::greedy_decode(blanky, 2).empty());
}

TEST_CASE("sample_decode at tau=0 equals greedy_decode") {
  cpl::Rng rng(29);
  for (int i = 0; i < 200; ++i) {
    const Matrix logits = random_logits(rng, 1 + rng.uniform_index(8), 2 + rng.uniform_index(4));
    cpl::Rng sampler(1000 + i);
    CHECK(cpl::sample_decode(logits, 0.0, static_cast<cpl::TokenId>(logits.cols - 1), sampler) ==
          cpl::greedy_decode(logits, static_cast<cpl::TokenId>(logits.cols - 1)));
  }
}

TEST_CASE("sample_decode single-frame frequencies match the posterior") {
  Matrix logits(1, 2);
  logits(0, 0) = std::log(0.7);
  logits(0, 1) = std::log(0.3);
  cpl::Rng rng(30);
  int count0 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const cpl::Alignment a = cpl::sample_alignment(logits, 1.0, rng);
    if (a[0] == 0) ++count0;
  }
  const double f0 = static_cast<double>(count0) / n;
  const double l1 = std::abs(f0 - 0.7) + std::abs((1 - f0) - 0.3);
  CHECK(l1 < 0.02);
}

TEST_CASE("blank-peaked logits occasionally yield non-empty samples at tau=1") {
  Matrix logits(4, 3);
  for (std::size_t t = 0; t < 4; ++t) logits(t, 2) = 2.0;  // blank strongly favored
  CHECK(cpl::greedy_decode(logits, 2).empty());
  int nonempty = 0;
  for (int seed = 0; seed < 10000; ++seed) {
    cpl::Rng rng(static_cast<std::uint64_t>(seed) + 1);
    if (!cpl::sample_decode(logits, 1.0, 2, rng).empty()) ++nonempty;
  }
  CHECK(nonempty > 0);
}
