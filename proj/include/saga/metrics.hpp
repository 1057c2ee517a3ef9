#pragma once

#include <span>
#include <vector>

#include "saga/attention.hpp"
#include "saga/image.hpp"

namespace saga::analysis {

/// Mean over every pixel-channel scalar of min(|delta| / epsilon, 1).
double budget_saturation(std::span<const double> delta, double epsilon);
double budget_saturation(const Image& delta, double epsilon);

struct Imperceptibility {
  double l1 = 0.0;  // mean |delta|
  double l2 = 0.0;  // root mean square of delta
};
Imperceptibility imperceptibility(std::span<const double> delta);
Imperceptibility imperceptibility(const Image& delta);

enum class LogBase { Nats, Bits };

/// Jensen-Shannon divergence with the 0 log 0 = 0 convention.
double js_divergence(const attention::AttentionMap& p, const attention::AttentionMap& q, LogBase base = LogBase::Nats);
double js_divergence(std::span<const double> p, std::span<const double> q, LogBase base = LogBase::Nats);

struct Correlation {
  double coefficient = 0.0;
  double p_value = 1.0;
};

/// Sample Pearson r with a two-sided p-value from t = r sqrt((n-2)/(1-r^2))
/// on n - 2 degrees of freedom.
Correlation pearson(std::span<const double> xs, std::span<const double> ys);

/// Pearson on average ranks (ties share their mean rank), same p-value rule.
Correlation spearman(std::span<const double> xs, std::span<const double> ys);

/// 1-based fractional ranks.
std::vector<double> average_ranks(std::span<const double> v);

/// Two-sided p-value for a correlation coefficient r over n samples.
double correlation_p_value(double r, std::size_t n);

}  // namespace saga::analysis
