#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "saga/error.hpp"
#include "saga/hotspot.hpp"
#include "saga/image.hpp"
#include "saga/rng.hpp"
#include "saga/surrogate.hpp"

namespace saga::attack {

enum class UpdateRule { Sign, Raw };

std::string_view to_string(UpdateRule rule) noexcept;
UpdateRule update_rule_from_string(std::string_view s);

struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  double step_size = 1.0 / 255.0;
  int total_iterations = 300;
  int num_stages = 10;
  int per_stage = 3;
  double iou_threshold = 0.3;
  double scale_min = 0.5;
  double scale_max = 1.0;
  UpdateRule rule = UpdateRule::Sign;
  std::uint64_t seed = 0;
  bool check_invariants = false;  // verify the L-inf ball and pixel box after every iteration

  void validate() const;
  hotspot::ScheduleParams schedule_params(hotspot::Mode mode = hotspot::Mode::Hotspot) const;
};

struct ImagePair {
  std::string id;
  Image original;  // H x W x 3 in [0, 1]
  std::string target_text;
};

struct Perturbation {
  Image delta;
  double epsilon = 0.0;

  double linf() const;
};

struct IterationRecord {
  int iteration = 0;  // 1-based
  int stage = 0;
  int rank = 0;
  Rect crop;          // pixels
  double loss = 0.0;  // surrogate loss on the crop before the step
  double saturation = 0.0;  // budget saturation after the step
};

struct AttackTrace {
  std::vector<IterationRecord> records;
};

struct AttackResult {
  Image adversarial;
  Perturbation perturbation;
  AttackTrace trace;
  std::optional<Error> failure;  // set when the run aborted; trace is partial

  bool aborted() const noexcept { return failure.has_value(); }
};

/// Sub-rectangle of `region` whose sides are scaled by one factor drawn
/// uniformly from [scale_min, scale_max] (floored, at least one cell), at a
/// uniformly drawn feasible offset.
Rect random_crop(const Rect& region, double scale_min, double scale_max, Rng& rng);

/// Adds step * sign(g) (sign(0) = 0) or step * g to the crop pixels only.
void ascend_step(Image& x_adv, const Rect& crop, const Image& gradient, double step, UpdateRule rule);

/// Clamps x_adv - x_orig to [-eps, eps], then x_adv to [0, 1].
void project(Image& x_adv, const Image& x_orig, double epsilon);

using IterationObserver = std::function<void(const IterationRecord&, const Image& x_orig, const Image& delta)>;

/// Runs the schedule entry by entry: random crop inside the hotspot,
/// surrogate loss and gradient on the crop, ascent step, projection.
/// Gateway failures abort the run; the partial trace is returned.
AttackResult run_attack(const ImagePair& pair, const hotspot::StageSchedule& schedule,
                        const surrogate::Ensemble& ensemble, const AttackConfig& config,
                        const IterationObserver& observer = {});

nlohmann::json record_to_json(const IterationRecord& r);
IterationRecord record_from_json(const nlohmann::json& j);

}  // namespace saga::attack
