#include "saga/hotspot.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "saga/error.hpp"

namespace saga::hotspot {

std::string_view to_string(Mode mode) noexcept { return mode == Mode::Hotspot ? "hotspot" : "coldspot"; }

Mode mode_from_string(std::string_view s) {
  if (s == "hotspot") return Mode::Hotspot;
  if (s == "coldspot") return Mode::Coldspot;
  throw Error(ErrorCode::UnknownKind, "unknown selection mode '" + std::string(s) + "'");
}

double stage_area_ratio(int stage, int num_stages) {
  if (num_stages < 1 || stage < 1 || stage > num_stages)
    throw Error(ErrorCode::StageOutOfRange,
                "stage " + std::to_string(stage) + " not in [1, " + std::to_string(num_stages) + "]");
  return static_cast<double>(stage) / num_stages;
}

double iou(const Rect& a, const Rect& b) {
  const long inter = intersect(a, b).area();
  const long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

bool admissible(const Rect& candidate, const Rect& selected, double iou_threshold) {
  if (intersect(candidate, selected).empty()) return true;
  return iou(candidate, selected) < iou_threshold;
}

WindowShape window_shape(GridDims grid, double area_ratio) {
  if (!(area_ratio > 0.0) || area_ratio > 1.0)
    throw Error(ErrorCode::InvalidArgument, "area ratio must lie in (0, 1]");
  const double target = area_ratio * grid.rows * grid.cols;
  if (std::lround(target) < 1) throw Error(ErrorCode::AreaTooSmall, "window rounds to zero cells");
  const double aspect = static_cast<double>(grid.rows) / grid.cols;
  const int h = std::clamp(static_cast<int>(std::lround(std::sqrt(target * aspect))), 1, grid.rows);
  const int w = std::clamp(static_cast<int>(std::max(1L, std::lround(target / h))), 1, grid.cols);
  return {h, w};
}

std::vector<Candidate> enumerate_candidates(const AttentionMap& map, double area_ratio) {
  const GridDims g = map.dims();
  const WindowShape ws = window_shape(g, area_ratio);
  std::vector<Candidate> out;
  out.reserve(static_cast<std::size_t>(g.rows - ws.height + 1) * (g.cols - ws.width + 1));
  for (int top = 0; top + ws.height <= g.rows; ++top)
    for (int left = 0; left + ws.width <= g.cols; ++left) {
      const Rect r{top, left, ws.height, ws.width};
      out.push_back({r, map.mean_over(r)});
    }
  return out;
}

std::vector<Hotspot> select_regions(const AttentionMap& map, double area_ratio, int k, double iou_threshold,
                                    Mode mode) {
  if (k < 0) throw Error(ErrorCode::InvalidArgument, "k must be nonnegative");
  if (iou_threshold < 0.0 || iou_threshold > 1.0)
    throw Error(ErrorCode::InvalidArgument, "IoU threshold must lie in [0, 1]");
  auto candidates = enumerate_candidates(map, area_ratio);
  if (k == 0) return {};
  if (mode == Mode::Hotspot)
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  else
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score < b.score; });

  std::vector<Hotspot> picked;
  for (const auto& c : candidates) {
    const bool ok = std::all_of(picked.begin(), picked.end(), [&](const Hotspot& h) {
      return admissible(c.region, h.region, iou_threshold);
    });
    if (!ok) continue;
    picked.push_back({c.region, 1, static_cast<int>(picked.size()) + 1, c.score, area_ratio});
    if (static_cast<int>(picked.size()) == k) break;
  }
  return picked;
}

std::vector<Hotspot> select_hotspots(const AttentionMap& map, double area_ratio, int k, double iou_threshold) {
  return select_regions(map, area_ratio, k, iou_threshold, Mode::Hotspot);
}

std::vector<Hotspot> select_coldspots(const AttentionMap& map, double area_ratio, int k, double iou_threshold) {
  return select_regions(map, area_ratio, k, iou_threshold, Mode::Coldspot);
}

int StageSchedule::assigned_iterations() const {
  int total = 0;
  for (const auto& e : entries) total += e.iterations;
  return total;
}

StageSchedule build_schedule(const AttentionMap& map, const ScheduleParams& p) {
  if (p.num_stages < 1 || p.per_stage < 1)
    throw Error(ErrorCode::InvalidArgument, "need at least one stage and one region per stage");
  if (p.total_iterations < 0) throw Error(ErrorCode::InvalidArgument, "negative iteration budget");
  const int per_region = p.total_iterations / (p.per_stage * p.num_stages);
  if (per_region == 0)
    throw Error(ErrorCode::BudgetTooSmall, "E = " + std::to_string(p.total_iterations) + " leaves no iterations per region");

  StageSchedule s;
  s.params = p;
  s.grid = map.dims();
  for (int n = 1; n <= p.num_stages; ++n) {
    const double a = stage_area_ratio(n, p.num_stages);
    auto regions = select_regions(map, a, p.per_stage, p.iou_threshold, p.mode);
    const int stage_budget = per_region * p.per_stage;
    const int survivors = static_cast<int>(regions.size());
    for (int j = 0; j < survivors; ++j) {
      regions[j].stage = n;
      int iters = per_region;
      if (survivors < p.per_stage) iters = stage_budget / survivors + (j < stage_budget % survivors ? 1 : 0);
      s.entries.push_back({regions[j], iters});
    }
  }
  return s;
}

StageSchedule whole_image_schedule(GridDims grid, int total_iterations) {
  return single_region_schedule(grid, {0, 0, grid.rows, grid.cols}, 1.0 / grid.cells(), total_iterations);
}

StageSchedule single_region_schedule(GridDims grid, const Rect& region, double score, int total_iterations) {
  if (region.empty() || !region.inside(grid.rows, grid.cols))
    throw Error(ErrorCode::InvalidArgument, "region outside the attention grid");
  if (total_iterations < 0) throw Error(ErrorCode::InvalidArgument, "negative iteration budget");
  StageSchedule s;
  s.params = {1, 1, 1.0, total_iterations, Mode::Hotspot};
  s.grid = grid;
  const double a = static_cast<double>(region.area()) / grid.cells();
  s.entries.push_back({{region, 1, 1, score, a}, total_iterations});
  return s;
}

namespace {
nlohmann::json rect_json(const Rect& r) {
  return {{"top", r.top}, {"left", r.left}, {"height", r.height}, {"width", r.width}};
}
Rect rect_from(const nlohmann::json& j) {
  return {j.at("top").get<int>(), j.at("left").get<int>(), j.at("height").get<int>(), j.at("width").get<int>()};
}
}  // namespace

nlohmann::json schedule_to_json(const StageSchedule& s, int image_height, int image_width) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : s.entries) {
    nlohmann::json rec{{"stage", e.hotspot.stage},
                       {"rank", e.hotspot.rank},
                       {"region", rect_json(e.hotspot.region)},
                       {"score", e.hotspot.score},
                       {"area_ratio", e.hotspot.area_ratio},
                       {"iterations", e.iterations}};
    if (image_height > 0 && image_width > 0)
      rec["pixel_region"] =
          rect_json(rescale(e.hotspot.region, s.grid.rows, s.grid.cols, image_height, image_width));
    entries.push_back(std::move(rec));
  }
  return {{"schema", "saga.schedule/1"},
          {"grid", {s.grid.rows, s.grid.cols}},
          {"num_stages", s.params.num_stages},
          {"per_stage", s.params.per_stage},
          {"iou_threshold", s.params.iou_threshold},
          {"total_iterations", s.params.total_iterations},
          {"mode", to_string(s.params.mode)},
          {"entries", std::move(entries)}};
}

StageSchedule schedule_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<std::string>() != "saga.schedule/1")
      throw Error(ErrorCode::MalformedRecord, "unexpected schedule schema");
    StageSchedule s;
    s.grid = {j.at("grid").at(0).get<int>(), j.at("grid").at(1).get<int>()};
    s.params = {j.at("num_stages").get<int>(), j.at("per_stage").get<int>(), j.at("iou_threshold").get<double>(),
                j.at("total_iterations").get<int>(), mode_from_string(j.at("mode").get<std::string>())};
    for (const auto& e : j.at("entries")) {
      Hotspot h{rect_from(e.at("region")), e.at("stage").get<int>(), e.at("rank").get<int>(),
                e.at("score").get<double>(), e.at("area_ratio").get<double>()};
      s.entries.push_back({h, e.at("iterations").get<int>()});
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
}

}  // namespace saga::hotspot
