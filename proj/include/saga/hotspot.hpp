#pragma once

#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "saga/attention.hpp"
#include "saga/image.hpp"

namespace saga::hotspot {

using attention::AttentionMap;
using attention::GridDims;

enum class Mode { Hotspot, Coldspot };

std::string_view to_string(Mode mode) noexcept;
Mode mode_from_string(std::string_view s);

/// a_n = n / N.
double stage_area_ratio(int stage, int num_stages);

/// Intersection over union by cell counting.
double iou(const Rect& a, const Rect& b);

/// Diversity test used by the greedy selector: IoU strictly below the
/// threshold, with disjoint windows always admissible (so tau = 0 means
/// "no overlap").
bool admissible(const Rect& candidate, const Rect& selected, double iou_threshold);

struct WindowShape {
  int height = 0;
  int width = 0;
};

/// Near-square window realising area ratio `area_ratio` on the grid:
/// height = round(sqrt(a*H*W*H/W)) in [1, H], width = round(a*H*W/height) in [1, W].
WindowShape window_shape(GridDims grid, double area_ratio);

struct Candidate {
  Rect region;
  double score = 0.0;  // mean attention over the region
};

/// Every window position at stride 1 in row-major order.
std::vector<Candidate> enumerate_candidates(const AttentionMap& map, double area_ratio);

struct Hotspot {
  Rect region;
  int stage = 1;
  int rank = 1;
  double score = 0.0;
  double area_ratio = 0.0;
};

std::vector<Hotspot> select_regions(const AttentionMap& map, double area_ratio, int k, double iou_threshold,
                                    Mode mode);
std::vector<Hotspot> select_hotspots(const AttentionMap& map, double area_ratio, int k, double iou_threshold);
std::vector<Hotspot> select_coldspots(const AttentionMap& map, double area_ratio, int k, double iou_threshold);

struct ScheduleEntry {
  Hotspot hotspot;
  int iterations = 0;
};

struct ScheduleParams {
  int num_stages = 10;
  int per_stage = 3;
  double iou_threshold = 0.3;
  int total_iterations = 300;
  Mode mode = Mode::Hotspot;
};

struct StageSchedule {
  ScheduleParams params;
  GridDims grid;
  std::vector<ScheduleEntry> entries;  // ordered by (stage, rank)

  int assigned_iterations() const;
};

/// floor(E / (k N)) iterations per region. A stage whose IoU constraint
/// leaves fewer than k regions spreads its k * floor(E / (k N)) iterations
/// over the survivors, remainder to the best-ranked ones.
StageSchedule build_schedule(const AttentionMap& map, const ScheduleParams& params);

/// Single full-image region with all E iterations (random-crop baseline).
StageSchedule whole_image_schedule(GridDims grid, int total_iterations);

/// Single fixed region with all E iterations.
StageSchedule single_region_schedule(GridDims grid, const Rect& region, double score, int total_iterations);

/// Structured record of a schedule. Pixel rectangles are included when the
/// image size is known (image_height/width > 0).
nlohmann::json schedule_to_json(const StageSchedule& schedule, int image_height = 0, int image_width = 0);
StageSchedule schedule_from_json(const nlohmann::json& j);

}  // namespace saga::hotspot
