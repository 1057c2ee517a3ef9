#include "saga/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "saga/error.hpp"

namespace saga::analysis {

double budget_saturation(std::span<const double> delta, double epsilon) {
  if (!(epsilon > 0.0)) throw Error(ErrorCode::InvalidArgument, "epsilon must be positive");
  if (delta.empty()) return 0.0;
  double acc = 0.0;
  for (double d : delta) acc += std::min(std::abs(d) / epsilon, 1.0);
  return acc / static_cast<double>(delta.size());
}

double budget_saturation(const Image& delta, double epsilon) { return budget_saturation(delta.values(), epsilon); }

Imperceptibility imperceptibility(std::span<const double> delta) {
  if (delta.empty()) return {};
  double l1 = 0.0, sq = 0.0;
  for (double d : delta) {
    l1 += std::abs(d);
    sq += d * d;
  }
  const double n = static_cast<double>(delta.size());
  return {l1 / n, std::sqrt(sq / n)};
}

Imperceptibility imperceptibility(const Image& delta) { return imperceptibility(delta.values()); }

double js_divergence(std::span<const double> p, std::span<const double> q, LogBase base) {
  if (p.size() != q.size()) throw Error(ErrorCode::GridMismatch, "distributions have different supports");
  auto kl_term = [](double a, double m) { return a > 0.0 ? a * std::log(a / m) : 0.0; };
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    js += 0.5 * kl_term(p[i], m) + 0.5 * kl_term(q[i], m);
  }
  js = std::max(js, 0.0);
  return base == LogBase::Bits ? js / std::numbers::ln2 : js;
}

double js_divergence(const attention::AttentionMap& p, const attention::AttentionMap& q, LogBase base) {
  if (p.dims() != q.dims()) throw Error(ErrorCode::GridMismatch, "attention maps have different grids");
  return js_divergence(p.cells(), q.cells(), base);
}

double correlation_p_value(double r, std::size_t n) {
  if (n < 3) throw Error(ErrorCode::InvalidArgument, "need at least three samples");
  const double df = static_cast<double>(n) - 2.0;
  const double r2 = r * r;
  if (r2 >= 1.0) return 0.0;
  const double t = std::abs(r) * std::sqrt(df / (1.0 - r2));
  const boost::math::students_t dist(df);
  return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, t)), 0.0, 1.0);
}

Correlation pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error(ErrorCode::InvalidArgument, "samples differ in length");
  const std::size_t n = xs.size();
  if (n < 3) throw Error(ErrorCode::InvalidArgument, "need at least three samples");
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorCode::DegenerateVariance, "a sample has zero variance");
  const double r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  return {r, correlation_p_value(r, n)};
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

Correlation spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error(ErrorCode::InvalidArgument, "samples differ in length");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

}  // namespace saga::analysis
