#include "saga/studies.hpp"

#include <algorithm>
#include <numeric>

#include "saga/error.hpp"
#include "saga/hotspot.hpp"
#include "saga/rng.hpp"

namespace saga::analysis {

double one_step_loss_change(const surrogate::Ensemble& ensemble, const Image& image,
                            std::span<const surrogate::Embedding> targets, const Rect& pixel_region, double step_size,
                            double epsilon, attack::UpdateRule rule) {
  const double before = ensemble.surrogate_loss(image, targets);
  const Image patch = crop(image, pixel_region);
  const auto g = ensemble.loss_and_gradient(patch, pixel_region, targets);
  Image perturbed = image;
  attack::ascend_step(perturbed, pixel_region, g.gradient, step_size, rule);
  attack::project(perturbed, image, epsilon);
  return ensemble.surrogate_loss(perturbed, targets) - before;
}

std::vector<LayerCorrelation> correlate_layers(std::span<const int> layers,
                                               std::span<const CorrelationSample> samples) {
  std::vector<double> ys(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) ys[i] = samples[i].loss_change;
  std::vector<LayerCorrelation> out;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    std::vector<double> xs(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) xs[i] = samples[i].mean_attention.at(li);
    LayerCorrelation lc;
    lc.layer = layers[li];
    lc.pearson = pearson(xs, ys);
    lc.spearman = spearman(xs, ys);
    lc.pearson_significant = lc.pearson.p_value <= kSignificanceLevel;
    lc.spearman_significant = lc.spearman.p_value <= kSignificanceLevel;
    out.push_back(lc);
  }
  return out;
}

CorrelationStudyResult correlation_study(std::span<const Image> images, std::span<const std::string> texts,
                                         const surrogate::Ensemble& ensemble,
                                         const attention::TraceProvider& extractor,
                                         const CorrelationStudyConfig& config, const LossProbe& probe) {
  if (images.empty() || texts.empty()) throw Error(ErrorCode::InvalidArgument, "study needs images and texts");
  if (config.crops_per_pair < 1) throw Error(ErrorCode::InvalidArgument, "crops_per_pair must be positive");
  const auto& profile = extractor.profile();

  CorrelationStudyResult result;
  result.layers = config.layers;
  if (result.layers.empty()) {
    result.layers.resize(profile.num_layers);
    std::iota(result.layers.begin(), result.layers.end(), 1);
  }

  for (std::size_t ii = 0; ii < images.size(); ++ii) {
    const Image& image = images[ii];
    const auto trace = extractor.trace(image, profile.prompt);
    std::vector<attention::AttentionMap> maps;
    maps.reserve(result.layers.size());
    for (int l : result.layers) maps.push_back(attention::extract_layer_map(trace, l, profile.model_id));
    const auto reference = attention::extract_attention_map(trace, profile);
    const attention::GridDims grid = reference.dims();

    for (std::size_t ti = 0; ti < texts.size(); ++ti) {
      const auto targets = ensemble.encode_text(texts[ti]);
      Rng rng(derive_seed(config.seed, "correlation/" + std::to_string(ii) + "/" + std::to_string(ti)));
      for (int c = 0; c < config.crops_per_pair; ++c) {
        const Rect patch_region = attack::random_crop({0, 0, grid.rows, grid.cols}, config.region_scale_min,
                                                      config.region_scale_max, rng);
        const Rect pixel_region = rescale(patch_region, grid.rows, grid.cols, image.height(), image.width());
        if (pixel_region.empty()) throw Error(ErrorCode::DegenerateRegion, "region maps to zero pixels");

        CorrelationSample s;
        s.image_index = static_cast<int>(ii);
        s.text_index = static_cast<int>(ti);
        s.region = patch_region;
        s.mean_attention.reserve(maps.size());
        for (const auto& m : maps) s.mean_attention.push_back(m.mean_over(patch_region));
        const double ref = reference.mean_over(patch_region);
        if (probe) {
          s.loss_change = probe(ProbeContext{image, targets, patch_region, pixel_region, ref, rng});
        } else {
          s.loss_change = one_step_loss_change(ensemble, image, targets, pixel_region, config.step_size,
                                               config.epsilon, config.rule);
        }
        result.samples.push_back(std::move(s));
      }
    }
  }
  result.per_layer = correlate_layers(result.layers, result.samples);
  return result;
}

int RegionPartition::count(int label) const {
  return static_cast<int>(std::count(labels.begin(), labels.end(), label));
}

RegionPartition partition_regions(const attention::AttentionMap& map) {
  const auto h10 = hotspot::select_hotspots(map, 0.1, 1, 1.0);
  const auto h20 = hotspot::select_hotspots(map, 0.2, 1, 1.0);
  if (h10.empty() || h20.empty()) throw Error(ErrorCode::AreaTooSmall, "grid too small for a 10% region");
  RegionPartition p;
  p.grid = map.dims();
  p.top10 = h10.front().region;
  p.top20 = h20.front().region;
  p.labels.assign(static_cast<std::size_t>(p.grid.cells()), 3);
  for (int y = p.top20.top; y < p.top20.bottom(); ++y)
    for (int x = p.top20.left; x < p.top20.right(); ++x) p.labels[static_cast<std::size_t>(y) * p.grid.cols + x] = 2;
  for (int y = p.top10.top; y < p.top10.bottom(); ++y)
    for (int x = p.top10.left; x < p.top10.right(); ++x) p.labels[static_cast<std::size_t>(y) * p.grid.cols + x] = 1;
  return p;
}

std::array<double, 3> region_mean_deltas(const attention::AttentionMap& pre, const attention::AttentionMap& post,
                                         const RegionPartition& partition) {
  if (pre.dims() != post.dims() || pre.dims() != partition.grid)
    throw Error(ErrorCode::GridMismatch, "maps and partition disagree on the grid");
  std::array<double, 3> sum{};
  std::array<int, 3> n{};
  for (std::size_t i = 0; i < partition.labels.size(); ++i) {
    const int k = partition.labels[i] - 1;
    sum[k] += post.cells()[i] - pre.cells()[i];
    ++n[k];
  }
  std::array<double, 3> out{};
  for (int k = 0; k < 3; ++k) out[k] = n[k] > 0 ? sum[k] / n[k] : 0.0;
  return out;
}

RedistributionResult redistribution_study(std::span<const attack::ImagePair> pairs,
                                          const surrogate::Ensemble& ensemble,
                                          const attention::TraceProvider& extractor,
                                          const RedistributionConfig& config) {
  if (pairs.empty()) throw Error(ErrorCode::InvalidArgument, "redistribution study needs pairs");
  if (config.epochs < 0) throw Error(ErrorCode::InvalidArgument, "negative epoch budget");
  const auto& profile = extractor.profile();
  RedistributionResult out;
  for (const auto& pair : pairs) {
    const auto pre = attention::extract_attention_map(extractor.trace(pair.original, profile.prompt), profile);
    const auto part = partition_regions(pre);
    const double score = pre.mean_over(part.top10);

    const std::array<hotspot::StageSchedule, 2> schedules{
        hotspot::whole_image_schedule(pre.dims(), config.epochs),
        hotspot::single_region_schedule(pre.dims(), part.top10, score, config.epochs)};
    for (std::size_t s = 0; s < schedules.size(); ++s) {
      attack::AttackConfig cfg = config.attack;
      cfg.seed = derive_seed(config.attack.seed, pair.id + (s == 0 ? "/random" : "/hotspot"));
      auto res = attack::run_attack(pair, schedules[s], ensemble, cfg);
      if (res.failure) throw *res.failure;
      const auto post = attention::extract_attention_map(extractor.trace(res.adversarial, profile.prompt), profile);
      const auto d = region_mean_deltas(pre, post, part);
      auto& acc = s == 0 ? out.random_crop : out.hotspot;
      for (int k = 0; k < 3; ++k) acc[k] += d[k];
    }
    ++out.pairs;
  }
  for (int k = 0; k < 3; ++k) {
    out.random_crop[k] /= out.pairs;
    out.hotspot[k] /= out.pairs;
  }
  return out;
}

}  // namespace saga::analysis
