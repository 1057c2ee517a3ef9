#include "saga/attack.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "saga/metrics.hpp"

namespace saga::attack {

std::string_view to_string(UpdateRule rule) noexcept { return rule == UpdateRule::Sign ? "sign" : "raw"; }

UpdateRule update_rule_from_string(std::string_view s) {
  if (s == "sign") return UpdateRule::Sign;
  if (s == "raw") return UpdateRule::Raw;
  throw Error(ErrorCode::UnknownKind, "unknown update rule '" + std::string(s) + "'");
}

void AttackConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); };
  if (!(epsilon > 0.0 && epsilon <= 1.0)) bad("epsilon must lie in (0, 1]");
  if (!(step_size > 0.0 && step_size <= epsilon)) bad("step size must lie in (0, epsilon]");
  if (num_stages < 1 || per_stage < 1) bad("stages and hotspots per stage must be positive");
  if (total_iterations < num_stages * per_stage) bad("iterations must be at least stages * hotspots per stage");
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) bad("IoU threshold must lie in [0, 1]");
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) bad("crop scale range must satisfy 0 < min <= max <= 1");
}

hotspot::ScheduleParams AttackConfig::schedule_params(hotspot::Mode mode) const {
  return {num_stages, per_stage, iou_threshold, total_iterations, mode};
}

double Perturbation::linf() const {
  double m = 0.0;
  for (double d : delta.values()) m = std::max(m, std::abs(d));
  return m;
}

Rect random_crop(const Rect& region, double scale_min, double scale_max, Rng& rng) {
  if (region.empty()) throw Error(ErrorCode::DegenerateRegion, "cannot crop an empty region");
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0))
    throw Error(ErrorCode::InvalidArgument, "crop scale range must satisfy 0 < min <= max <= 1");
  const double s = scale_min == scale_max ? scale_min : uniform(rng, scale_min, scale_max);
  const int h = std::max(1, static_cast<int>(std::floor(s * region.height)));
  const int w = std::max(1, static_cast<int>(std::floor(s * region.width)));
  const int top = region.top + static_cast<int>(uniform_int(rng, 0, region.height - h));
  const int left = region.left + static_cast<int>(uniform_int(rng, 0, region.width - w));
  return {top, left, h, w};
}

void ascend_step(Image& x_adv, const Rect& crop, const Image& gradient, double step, UpdateRule rule) {
  if (gradient.height() != crop.height || gradient.width() != crop.width || gradient.channels() != x_adv.channels() ||
      !crop.inside(x_adv.height(), x_adv.width()))
    throw Error(ErrorCode::ShapeMismatch, "gradient does not match the crop");
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x)
      for (int c = 0; c < x_adv.channels(); ++c) {
        const double g = gradient.at(y, x, c);
        const double d = rule == UpdateRule::Sign ? (g > 0.0 ? step : (g < 0.0 ? -step : 0.0)) : step * g;
        x_adv.at(crop.top + y, crop.left + x, c) += d;
      }
}

void project(Image& x_adv, const Image& x_orig, double epsilon) {
  if (!x_adv.same_shape(x_orig)) throw Error(ErrorCode::ShapeMismatch, "image shapes differ");
  auto adv = x_adv.values();
  auto orig = x_orig.values();
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double d = std::clamp(adv[i] - orig[i], -epsilon, epsilon);
    adv[i] = std::clamp(orig[i] + d, 0.0, 1.0);
  }
}

namespace {

void step_delta(Image& delta, const Rect& crop, const Image& gradient, double step, UpdateRule rule) {
  ascend_step(delta, crop, gradient, step, rule);
}

void project_delta(Image& delta, const Image& x_orig, const Rect& crop, double epsilon) {
  for (int y = crop.top; y < crop.bottom(); ++y)
    for (int x = crop.left; x < crop.right(); ++x)
      for (int c = 0; c < delta.channels(); ++c) {
        double& d = delta.at(y, x, c);
        d = std::clamp(d, -epsilon, epsilon);
        const double o = x_orig.at(y, x, c);
        if (o + d > 1.0) d = 1.0 - o;
        if (o + d < 0.0) d = -o;
      }
}

Image compose(const Image& x_orig, const Image& delta) {
  Image out = x_orig;
  auto o = out.values();
  auto d = delta.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += d[i];
  return out;
}

void check_invariants(const Image& x_orig, const Image& delta, double epsilon, int iteration) {
  auto o = x_orig.values();
  auto d = delta.values();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double v = o[i] + d[i];
    if (std::abs(d[i]) > epsilon || v < 0.0 || v > 1.0)
      throw Error(ErrorCode::InvalidArgument,
                  "perturbation left the feasible set at iteration " + std::to_string(iteration));
  }
}

}  // namespace

AttackResult run_attack(const ImagePair& pair, const hotspot::StageSchedule& schedule,
                        const surrogate::Ensemble& ensemble, const AttackConfig& config,
                        const IterationObserver& observer) {
  if (!(config.epsilon > 0.0) || !(config.step_size > 0.0))
    throw Error(ErrorCode::InvalidConfig, "epsilon and step size must be positive");
  const Image& x_orig = pair.original;
  if (x_orig.empty() || x_orig.channels() != 3) throw Error(ErrorCode::ShapeMismatch, "source image must be H x W x 3");

  AttackResult result;
  Image delta(x_orig.height(), x_orig.width(), x_orig.channels());
  Rng rng(config.seed);
  int iteration = 0;
  try {
    const auto targets = ensemble.encode_text(pair.target_text);
    for (const auto& entry : schedule.entries) {
      const Rect hot_px =
          rescale(entry.hotspot.region, schedule.grid.rows, schedule.grid.cols, x_orig.height(), x_orig.width());
      if (hot_px.empty()) throw Error(ErrorCode::DegenerateRegion, "hotspot maps to zero pixels");
      for (int e = 0; e < entry.iterations; ++e) {
        ++iteration;
        const Rect crop_rect = random_crop(hot_px, config.scale_min, config.scale_max, rng);
        Image crop_img = crop(x_orig, crop_rect);
        {
          const Image d = crop(delta, crop_rect);
          for (std::size_t i = 0; i < crop_img.size(); ++i) crop_img.values()[i] += d.values()[i];
        }
        const auto g = ensemble.loss_and_gradient(crop_img, crop_rect, targets);
        step_delta(delta, crop_rect, g.gradient, config.step_size, config.rule);
        project_delta(delta, x_orig, crop_rect, config.epsilon);
        if (config.check_invariants) check_invariants(x_orig, delta, config.epsilon, iteration);

        IterationRecord rec{iteration, entry.hotspot.stage, entry.hotspot.rank, crop_rect, g.loss,
                            analysis::budget_saturation(delta, config.epsilon)};
        result.trace.records.push_back(rec);
        if (observer) observer(rec, x_orig, delta);
      }
    }
  } catch (const Error& e) {
    result.failure = e;
  }
  result.adversarial = compose(x_orig, delta);
  result.perturbation = {std::move(delta), config.epsilon};
  return result;
}

nlohmann::json record_to_json(const IterationRecord& r) {
  return {{"iteration", r.iteration},
          {"stage", r.stage},
          {"rank", r.rank},
          {"crop", {r.crop.top, r.crop.left, r.crop.height, r.crop.width}},
          {"loss", r.loss},
          {"saturation", r.saturation}};
}

IterationRecord record_from_json(const nlohmann::json& j) {
  try {
    const auto c = j.at("crop").get<std::vector<int>>();
    if (c.size() != 4) throw Error(ErrorCode::MalformedRecord, "crop must have four entries");
    return {j.at("iteration").get<int>(), j.at("stage").get<int>(), j.at("rank").get<int>(),
            {c[0], c[1], c[2], c[3]}, j.at("loss").get<double>(), j.at("saturation").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
}

}  // namespace saga::attack
