#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "saga/error.hpp"
#include "saga/io.hpp"
#include "saga/pipeline.hpp"

namespace saga::pipeline {

using nlohmann::json;

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string esc(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

class Chart {
 public:
  Chart(std::string title, std::string xlabel, std::string ylabel, double x0, double x1, double y0, double y1)
      : x0_(x0), x1_(x1 > x0 ? x1 : x0 + 1), y0_(y0), y1_(y1 > y0 ? y1 : y0 + 1) {
    os_ << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">)",
                       kWidth, kHeight, kWidth, kHeight)
        << '\n';
    os_ << R"(<rect width="100%" height="100%" fill="white"/>)" << '\n';
    os_ << fmt::format(R"(<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>)", kWidth / 2, esc(title)) << '\n';
    const double pb = kHeight - kBottom, pr = kWidth - kRight;
    os_ << fmt::format(R"(<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>)", kLeft, kTop,
                       pr - kLeft, pb - kTop)
        << '\n';
    for (int i = 0; i <= 5; ++i) {
      double xv = x0_ + (x1_ - x0_) * i / 5.0, yv = y0_ + (y1_ - y0_) * i / 5.0;
      os_ << fmt::format(R"(<text x="{:.2f}" y="{:.2f}" text-anchor="middle">{}</text>)", px(xv), pb + 16, tick(xv)) << '\n';
      os_ << fmt::format(R"(<text x="{:.2f}" y="{:.2f}" text-anchor="end">{}</text>)", kLeft - 6, py(yv) + 4, tick(yv)) << '\n';
      os_ << fmt::format(R"(<line x1="{}" y1="{:.2f}" x2="{}" y2="{:.2f}" stroke="#dddddd"/>)", kLeft, py(yv), pr, py(yv)) << '\n';
    }
    os_ << fmt::format(R"(<text x="{:.2f}" y="{:.2f}" text-anchor="middle">{}</text>)", (kLeft + pr) / 2, kHeight - 18, esc(xlabel)) << '\n';
    os_ << fmt::format(R"svg(<text x="18" y="{:.2f}" text-anchor="middle" transform="rotate(-90 18 {:.2f})">{}</text>)svg",
                       (kTop + pb) / 2, (kTop + pb) / 2, esc(ylabel))
        << '\n';
  }

  double px(double x) const { return kLeft + (x - x0_) / (x1_ - x0_) * (kWidth - kRight - kLeft); }
  double py(double y) const { return kHeight - kBottom - (y - y0_) / (y1_ - y0_) * (kHeight - kBottom - kTop); }

  void polyline(const std::vector<std::pair<double, double>>& pts, const char* color) {
    std::string d;
    for (const auto& [x, y] : pts) d += fmt::format("{:.2f},{:.2f} ", px(x), py(y));
    if (!d.empty()) d.pop_back();
    os_ << fmt::format(R"(<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>)", d, color) << '\n';
  }
  void marker(double x, double y, const char* color, bool filled) {
    os_ << fmt::format(R"(<circle cx="{:.2f}" cy="{:.2f}" r="3" fill="{}" stroke="{}"/>)", px(x), py(y),
                       filled ? color : "white", color)
        << '\n';
  }
  void bar(double x_left, double x_right, double y, const char* color) {
    double top = py(std::max(y, 0.0)), bot = py(std::min(y, 0.0));
    os_ << fmt::format(R"(<rect x="{:.2f}" y="{:.2f}" width="{:.2f}" height="{:.2f}" fill="{}"/>)", px(x_left), top,
                       px(x_right) - px(x_left), bot - top, color)
        << '\n';
  }
  void hline(double y, const char* color) {
    os_ << fmt::format(R"(<line x1="{}" y1="{:.2f}" x2="{}" y2="{:.2f}" stroke="{}"/>)", kLeft, py(y), kWidth - kRight,
                       py(y), color)
        << '\n';
  }
  void label(double x, double y, std::string_view text) {
    os_ << fmt::format(R"(<text x="{:.2f}" y="{:.2f}" text-anchor="middle">{}</text>)", px(x), y, esc(text)) << '\n';
  }
  void legend(const std::vector<std::pair<std::string, const char*>>& entries) {
    double y = kTop + 10;
    for (const auto& [name, color] : entries) {
      double x = kWidth - kRight + 12;
      os_ << fmt::format(R"(<rect x="{:.2f}" y="{:.2f}" width="12" height="12" fill="{}"/>)", x, y - 10, color) << '\n';
      os_ << fmt::format(R"(<text x="{:.2f}" y="{:.2f}">{}</text>)", x + 18, y, esc(name)) << '\n';
      y += 18;
    }
  }
  std::string finish() {
    os_ << "</svg>\n";
    return os_.str();
  }

 private:
  static std::string tick(double v) {
    if (v == 0.0) return "0";
    double a = std::abs(v);
    if (a >= 1e-2 && a < 1e4) return fmt::format("{:.3g}", v);
    return fmt::format("{:.1e}", v);
  }

  double x0_, x1_, y0_, y1_;
  std::ostringstream os_;
};

std::vector<json> load_rows(std::span<const fs::path> files, std::string_view schema) {
  if (files.empty()) throw Error(ErrorCode::MalformedRecords, "no record files given");
  std::vector<json> rows;
  for (const auto& f : files) {
    std::vector<json> part;
    try {
      part = io::read_records(f, schema);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::MalformedRecords || e.code() == ErrorCode::MissingArtifacts) throw;
      throw Error(ErrorCode::MalformedRecords, f.string() + ": " + e.what());
    }
    if (part.empty()) throw Error(ErrorCode::MalformedRecords, f.string() + ": no records");
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

template <typename F>
auto field(const json& row, const char* key, F&& convert) {
  try {
    return convert(row.at(key));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecords, std::string("record field '") + key + "': " + e.what());
  }
}

double num(const json& row, const char* key) {
  return field(row, key, [](const json& v) { return v.get<double>(); });
}
std::string str(const json& row, const char* key) {
  return field(row, key, [](const json& v) { return v.get<std::string>(); });
}

std::string plot_saturation(const std::vector<json>& rows) {
  std::map<std::string, std::map<int, std::pair<double, int>>> acc;
  for (const auto& r : rows) {
    auto& cell = acc[str(r, "method")][static_cast<int>(num(r, "epoch"))];
    cell.first += num(r, "saturation");
    cell.second += 1;
  }
  int max_epoch = 1;
  for (const auto& [m, series] : acc) max_epoch = std::max(max_epoch, series.rbegin()->first);
  Chart chart("Budget saturation", "epoch", "saturation ratio", 0, max_epoch, 0, 1);
  std::vector<std::pair<std::string, const char*>> legend;
  std::size_t i = 0;
  for (const auto& [method, series] : acc) {
    const char* color = kPalette[i++ % std::size(kPalette)];
    std::vector<std::pair<double, double>> pts;
    for (const auto& [epoch, c] : series) pts.emplace_back(epoch, c.first / c.second);
    chart.polyline(pts, color);
    legend.emplace_back(method, color);
  }
  chart.legend(legend);
  return chart.finish();
}

std::string plot_shift(const std::vector<json>& rows) {
  std::vector<std::tuple<std::string, double, double>> pts;
  for (const auto& r : rows) {
    if (!r.contains("avg_sim") || r["avg_sim"].is_null()) continue;
    pts.emplace_back(str(r, "method"), num(r, "js"), num(r, "avg_sim"));
  }
  if (pts.empty()) throw Error(ErrorCode::MalformedRecords, "no shift records carry an AvgSim value");
  double xmax = 0;
  for (const auto& p : pts) xmax = std::max(xmax, std::get<1>(p));
  Chart chart("Attention shift vs. similarity", "JS divergence (nats)", "AvgSim", 0, xmax > 0 ? xmax * 1.1 : 1, 0, 1);
  std::map<std::string, const char*> colors;
  for (const auto& p : pts) colors.emplace(std::get<0>(p), nullptr);
  std::size_t i = 0;
  std::vector<std::pair<std::string, const char*>> legend;
  for (auto& [m, c] : colors) {
    c = kPalette[i++ % std::size(kPalette)];
    legend.emplace_back(m, c);
  }
  for (const auto& [m, x, y] : pts) chart.marker(x, y, colors[m], true);
  chart.legend(legend);
  return chart.finish();
}

std::string plot_correlation(const std::vector<json>& rows) {
  std::vector<std::tuple<int, double, bool, double, bool>> pts;
  for (const auto& r : rows) {
    pts.emplace_back(static_cast<int>(num(r, "layer")), num(r, "pearson_r"),
                     field(r, "pearson_significant", [](const json& v) { return v.get<bool>(); }), num(r, "spearman_rho"),
                     field(r, "spearman_significant", [](const json& v) { return v.get<bool>(); }));
  }
  std::sort(pts.begin(), pts.end());
  int max_layer = std::max(1, std::get<0>(pts.back()));
  Chart chart("Attention / loss-change correlation by layer", "layer", "coefficient", 0, max_layer, -1, 1);
  chart.hline(0, "#888888");
  std::vector<std::pair<double, double>> p, s;
  for (const auto& [l, pr, ps, sr, ss] : pts) {
    p.emplace_back(l, pr);
    s.emplace_back(l, sr);
  }
  chart.polyline(p, kPalette[0]);
  chart.polyline(s, kPalette[1]);
  for (const auto& [l, pr, ps, sr, ss] : pts) {
    chart.marker(l, pr, kPalette[0], ps);
    chart.marker(l, sr, kPalette[1], ss);
  }
  chart.legend({{"Pearson", kPalette[0]}, {"Spearman", kPalette[1]}, {"filled: p <= 0.05", "#444444"}});
  return chart.finish();
}

std::string plot_redistribution(const std::vector<json>& rows) {
  std::map<std::string, std::array<double, 3>> v;
  for (const auto& r : rows) {
    int region = static_cast<int>(num(r, "region"));
    if (region < 1 || region > 3) throw Error(ErrorCode::MalformedRecords, "region must be 1, 2 or 3");
    v[str(r, "setting")][static_cast<std::size_t>(region - 1)] = num(r, "mean_delta");
  }
  double lo = 0, hi = 0;
  for (const auto& [s, a] : v)
    for (double x : a) lo = std::min(lo, x), hi = std::max(hi, x);
  double pad = (hi - lo) * 0.1;
  if (pad == 0) pad = 1e-6;
  Chart chart("Attention change per region", "region", "mean attention change", 0.5, 3.5, lo - pad, hi + pad);
  chart.hline(0, "#888888");
  const double width = 0.8 / static_cast<double>(v.size());
  std::vector<std::pair<std::string, const char*>> legend;
  std::size_t i = 0;
  for (const auto& [setting, a] : v) {
    const char* color = kPalette[i % std::size(kPalette)];
    for (int r = 0; r < 3; ++r) {
      double left = r + 1 - 0.4 + width * static_cast<double>(i);
      chart.bar(left, left + width, a[static_cast<std::size_t>(r)], color);
    }
    legend.emplace_back(setting, color);
    ++i;
  }
  chart.legend(legend);
  return chart.finish();
}

}  // namespace

fs::path cmd_plot(std::string_view kind, std::span<const fs::path> records, const fs::path& out_dir) {
  std::string svg;
  if (kind == "saturation") {
    svg = plot_saturation(load_rows(records, "saga.saturation/1"));
  } else if (kind == "shift") {
    svg = plot_shift(load_rows(records, "saga.attention-shift/1"));
  } else if (kind == "correlation") {
    svg = plot_correlation(load_rows(records, "saga.correlation/1"));
  } else if (kind == "redistribution") {
    svg = plot_redistribution(load_rows(records, "saga.redistribution/1"));
  } else {
    throw Error(ErrorCode::InvalidArgument,
                "unknown plot '" + std::string(kind) + "' (saturation, shift, correlation, redistribution)");
  }
  fs::create_directories(out_dir);
  auto path = out_dir / (std::string(kind) + ".svg");
  io::write_text(path, svg);
  return path;
}

}  // namespace saga::pipeline
