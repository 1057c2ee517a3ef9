#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "map_gen.hpp"
#include "oracles.hpp"
#include "saga/error.hpp"
#include "saga/metrics.hpp"

using namespace saga;
using namespace saga::analysis;

namespace {
constexpr double kEps = 16.0 / 255.0;

std::vector<double> uniform_vec(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}
}  // namespace

TEST_CASE("budget_saturation") {
  std::vector<double> d(12, 0.0);
  CHECK(budget_saturation(d, kEps) == 0.0);
  std::fill(d.begin(), d.end(), kEps);
  CHECK(budget_saturation(d, kEps) == 1.0);
  std::fill(d.begin(), d.end(), -kEps);
  CHECK(budget_saturation(d, kEps) == 1.0);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = i % 2 ? 0.0 : kEps;
  CHECK(budget_saturation(d, kEps) == 0.5);
  std::vector<double> over{2 * kEps, 0.0};
  CHECK(budget_saturation(over, kEps) == 0.5);

  SUBCASE("bounded, sign invariant, monotone") {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 50; ++t) {
      auto v = uniform_vec(rng, 30, -0.2, 0.2);
      const double s = budget_saturation(v, kEps);
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
      auto neg = v;
      for (auto& x : neg) x = -x;
      CHECK(budget_saturation(neg, kEps) == s);
      auto grown = v;
      for (auto& x : grown) x *= 1.5;
      CHECK(budget_saturation(grown, kEps) >= s);
    }
  }
}

TEST_CASE("imperceptibility") {
  std::vector<double> zero(8, 0.0);
  auto z = imperceptibility(zero);
  CHECK(z.l1 == 0.0);
  CHECK(z.l2 == 0.0);
  std::vector<double> full(8, kEps);
  auto f = imperceptibility(full);
  CHECK(f.l1 == doctest::Approx(kEps).epsilon(1e-14));
  CHECK(f.l2 == doctest::Approx(kEps).epsilon(1e-14));
  CHECK(f.l1 == doctest::Approx(0.0627).epsilon(1e-3));
  std::vector<double> half{0.0, kEps, 0.0, kEps};
  auto h = imperceptibility(half);
  CHECK(h.l1 == doctest::Approx(8.0 / 255.0).epsilon(1e-14));
  CHECK(h.l2 == doctest::Approx(16.0 / (255.0 * std::sqrt(2.0))).epsilon(1e-14));
}

TEST_CASE("js_divergence") {
  std::vector<double> p{1.0, 0.0}, q{0.0, 1.0};
  CHECK(std::abs(js_divergence(p, q) - std::numbers::ln2) <= 1e-9);
  CHECK(std::abs(js_divergence(p, q, LogBase::Bits) - 1.0) <= 1e-9);
  CHECK(js_divergence(p, p) == 0.0);

  std::mt19937_64 rng(11);
  for (int t = 0; t < 40; ++t) {
    auto a = testgen::random_map(rng, 6, 5);
    auto b = testgen::random_map(rng, 6, 5);
    const double ab = js_divergence(a, b), ba = js_divergence(b, a);
    CHECK(std::abs(ab - ba) <= 1e-12);
    CHECK(ab > 0.0);
    CHECK(ab <= std::numbers::ln2 + 1e-12);
    CHECK(js_divergence(a, a) == doctest::Approx(0.0).epsilon(1e-15));
  }
  auto a = testgen::random_map(rng, 4, 4);
  auto b = testgen::random_map(rng, 3, 4);
  CHECK_THROWS_AS(js_divergence(a, b), Error);
}

TEST_CASE("uniform 24x24 map cell") {
  attention::AttentionMap m = attention::normalize_spatial({24, 24}, std::vector<double>(576, 3.0));
  for (double c : m.cells()) CHECK(c == 1.0 / 576.0);
  CHECK(std::round(m.cells()[0] * 1e4) / 1e4 == 0.0017);
}

TEST_CASE("pearson") {
  std::vector<double> x{1, 2, 3, 4, 5}, y2, yneg;
  for (double v : x) y2.push_back(2 * v), yneg.push_back(-v);
  CHECK(pearson(x, y2).coefficient == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(pearson(x, yneg).coefficient == doctest::Approx(-1.0).epsilon(1e-14));

  std::mt19937_64 rng(3);
  auto xs = uniform_vec(rng, 10, 0, 1), ys = uniform_vec(rng, 10, 0, 1);
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] += 0.7 * xs[i];
  CHECK(std::abs(pearson(xs, ys).coefficient - oracle::naive_pearson(xs, ys)) <= 1e-10);

  SUBCASE("affine invariance") {
    auto xa = xs;
    for (auto& v : xa) v = 3.5 * v - 2.0;
    CHECK(pearson(xa, ys).coefficient == doctest::Approx(pearson(xs, ys).coefficient).epsilon(1e-12));
  }
  SUBCASE("degenerate") {
    std::vector<double> flat(5, 1.0);
    CHECK_THROWS_AS(pearson(x, flat), Error);
    std::vector<double> two{1, 2};
    CHECK_THROWS_AS(pearson(two, two), Error);
  }
}

TEST_CASE("spearman") {
  std::vector<double> x{0.3, -1.2, 2.0, 0.7, 1.1, -0.4}, cube, rev;
  for (double v : x) cube.push_back(v * v * v), rev.push_back(-v);
  CHECK(spearman(x, cube).coefficient == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(spearman(x, rev).coefficient == doctest::Approx(-1.0).epsilon(1e-14));

  std::vector<double> tx{1, 2, 2, 3, 3, 3}, ty{4, 1, 1, 5, 2, 9};
  auto ranks = average_ranks(tx);
  auto want = oracle::rank_table(tx);
  for (std::size_t i = 0; i < tx.size(); ++i) CHECK(ranks[i] == want[i]);
  CHECK(std::abs(spearman(tx, ty).coefficient - oracle::naive_spearman(tx, ty)) <= 1e-12);
}

TEST_CASE("p-values") {
  CHECK(correlation_p_value(0.0, 10) == doctest::Approx(1.0));
  std::mt19937_64 rng(5);
  auto xs = uniform_vec(rng, 40, 0, 1), ys = uniform_vec(rng, 40, 0, 1);
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] += 2 * xs[i];
  CHECK(pearson(xs, ys).p_value < 1e-6);
  const double p = correlation_p_value(0.5, 12);
  CHECK(p > 0.0);
  CHECK(p < 0.2);
  CHECK(correlation_p_value(0.6, 12) < p);
}
