#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "saga/attack.hpp"
#include "saga/attention.hpp"
#include "saga/metrics.hpp"
#include "saga/surrogate.hpp"

namespace saga::analysis {

inline constexpr double kSignificanceLevel = 0.05;

// ---- attention / loss-sensitivity correlation ----------------------------

struct CorrelationSample {
  int image_index = 0;
  int text_index = 0;
  Rect region;                         // patch coordinates
  std::vector<double> mean_attention;  // one entry per studied layer
  double loss_change = 0.0;
};

struct LayerCorrelation {
  int layer = 0;
  Correlation pearson;
  Correlation spearman;
  bool pearson_significant = false;
  bool spearman_significant = false;
};

struct ProbeContext {
  const Image& image;
  std::span<const surrogate::Embedding> targets;
  const Rect& patch_region;
  const Rect& pixel_region;
  double reference_attention;  // mean attention at the extractor's best layer
  Rng& rng;
};

/// Returns the loss change attributed to one sampled region.
using LossProbe = std::function<double(const ProbeContext&)>;

struct CorrelationStudyConfig {
  int crops_per_pair = 20;
  double region_scale_min = 0.1;  // region side as a fraction of the grid side
  double region_scale_max = 0.5;
  double epsilon = 16.0 / 255.0;
  double step_size = 1.0 / 255.0;
  attack::UpdateRule rule = attack::UpdateRule::Sign;
  std::vector<int> layers;  // empty: every layer of the extractor
  std::uint64_t seed = 0;
};

struct CorrelationStudyResult {
  std::vector<int> layers;
  std::vector<CorrelationSample> samples;
  std::vector<LayerCorrelation> per_layer;
};

/// Change of the full-image surrogate loss after one ascent step restricted
/// to `pixel_region` (gradient taken on that region alone), then projection.
double one_step_loss_change(const surrogate::Ensemble& ensemble, const Image& image,
                            std::span<const surrogate::Embedding> targets, const Rect& pixel_region, double step_size,
                            double epsilon, attack::UpdateRule rule);

/// Every (image, text) combination gets crops_per_pair random regions; each
/// region is scored by per-layer mean attention and by the probe's loss
/// change. Per-layer Pearson and Spearman with significance at 0.05.
CorrelationStudyResult correlation_study(std::span<const Image> images, std::span<const std::string> texts,
                                         const surrogate::Ensemble& ensemble,
                                         const attention::TraceProvider& extractor,
                                         const CorrelationStudyConfig& config, const LossProbe& probe = {});

std::vector<LayerCorrelation> correlate_layers(std::span<const int> layers,
                                               std::span<const CorrelationSample> samples);

// ---- attention redistribution ---------------------------------------------

/// Three disjoint labels over the patch grid: 1 = best window at 10% area,
/// 2 = best window at 20% area minus region 1, 3 = everything else.
struct RegionPartition {
  attention::GridDims grid;
  Rect top10;
  Rect top20;
  std::vector<int> labels;  // row-major, values 1..3

  int count(int label) const;
};

RegionPartition partition_regions(const attention::AttentionMap& map);

/// Mean over each region's cells of (post - pre).
std::array<double, 3> region_mean_deltas(const attention::AttentionMap& pre, const attention::AttentionMap& post,
                                         const RegionPartition& partition);

struct RedistributionConfig {
  int epochs = 5;
  attack::AttackConfig attack;  // epsilon, step, crop scale, rule, seed
};

struct RedistributionResult {
  std::array<double, 3> random_crop{};  // mean over pairs, per region
  std::array<double, 3> hotspot{};
  int pairs = 0;
};

RedistributionResult redistribution_study(std::span<const attack::ImagePair> pairs,
                                          const surrogate::Ensemble& ensemble,
                                          const attention::TraceProvider& extractor,
                                          const RedistributionConfig& config);

}  // namespace saga::analysis
