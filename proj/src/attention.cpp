#include "saga/attention.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "saga/error.hpp"
#include "saga/rng.hpp"

namespace saga::attention {

namespace {

void check_same_dims(std::span<const AttentionMap> maps) {
  if (maps.empty()) throw Error(ErrorCode::EmptyTokenSet, "no maps to average");
  for (const auto& m : maps)
    if (m.dims() != maps.front().dims())
      throw Error(ErrorCode::GridMismatch, "maps have different grid dimensions");
}

AttentionMap mean_of(std::span<const AttentionMap> maps, std::string tag) {
  check_same_dims(maps);
  std::vector<double> acc(maps.front().cells().size(), 0.0);
  for (const auto& m : maps) {
    auto c = m.cells();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += c[i];
  }
  const double n = static_cast<double>(maps.size());
  for (double& v : acc) v /= n;
  return AttentionMap(maps.front().dims(), std::move(acc), std::move(tag));
}

int count_words(std::string_view s) {
  int n = 0;
  bool in_word = false;
  for (char c : s) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

}  // namespace

AttentionMap::AttentionMap(GridDims dims, std::vector<double> cells, std::string source_tag)
    : dims_(dims), cells_(std::move(cells)), tag_(std::move(source_tag)) {
  if (dims_.rows <= 0 || dims_.cols <= 0 || cells_.size() != static_cast<std::size_t>(dims_.cells()))
    throw Error(ErrorCode::GridMismatch, "cell count does not match grid dimensions");
  double sum = 0.0;
  for (double v : cells_) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw Error(ErrorCode::InvalidArgument, "attention cell is negative or not finite");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kSumTolerance)
    throw Error(ErrorCode::InvalidArgument, "attention map does not sum to one");
}

double AttentionMap::mean_over(const Rect& r) const {
  if (r.empty() || !r.inside(dims_.rows, dims_.cols))
    throw Error(ErrorCode::InvalidArgument, "region outside attention grid");
  double s = 0.0;
  for (int y = r.top; y < r.bottom(); ++y)
    for (int x = r.left; x < r.right(); ++x) s += at(y, x);
  return s / static_cast<double>(r.area());
}

void TokenAttentionTrace::validate() const {
  if (num_layers < 1 || prompt_length < 1 || generated_length < 0)
    throw Error(ErrorCode::MalformedTrace, "non-positive trace dimensions");
  if (grid.rows < 1 || grid.cols < 1) throw Error(ErrorCode::MalformedTrace, "empty vision grid");
  if (vision_start < 1 || vision_start + grid.cells() - 1 > prompt_length)
    throw Error(ErrorCode::MalformedTrace, "vision tokens fall outside the prompt");
  if (rows.size() != static_cast<std::size_t>(num_layers))
    throw Error(ErrorCode::MalformedTrace, "layer count mismatch");
  for (const auto& layer : rows) {
    if (layer.size() != static_cast<std::size_t>(generated_length))
      throw Error(ErrorCode::MalformedTrace, "generated token count mismatch");
    for (std::size_t t = 0; t < layer.size(); ++t) {
      if (layer[t].size() != static_cast<std::size_t>(prompt_length) + t)
        throw Error(ErrorCode::MalformedTrace, "attention row has wrong length");
      for (double v : layer[t])
        if (!(v >= 0.0) || !std::isfinite(v))
          throw Error(ErrorCode::MalformedTrace, "negative or non-finite attention weight");
    }
  }
  for (int t : valid_tokens)
    if (t < 1 || t > generated_length) throw Error(ErrorCode::MalformedTrace, "valid token out of range");
}

std::span<const double> TokenAttentionTrace::row(int layer, int token) const {
  return rows.at(static_cast<std::size_t>(layer - 1)).at(static_cast<std::size_t>(token - 1));
}

std::vector<int> default_valid_tokens(const std::vector<bool>& is_special) {
  std::vector<int> out;
  for (std::size_t i = 0; i < is_special.size(); ++i)
    if (!is_special[i]) out.push_back(static_cast<int>(i) + 1);
  return out;
}

std::span<const ExtractorProfile> known_profiles() {
  static const std::array<ExtractorProfile, 3> profiles{{
      {"llava-7b", 32, 17, "Describe this image."},
      {"llava-13b", 40, 6, "Describe this image."},
      {"qwen3-vl-8b", 36, 29, "Describe this image."},
  }};
  return profiles;
}

const ExtractorProfile& find_profile(std::string_view model_id) {
  for (const auto& p : known_profiles())
    if (p.model_id == model_id) return p;
  throw Error(ErrorCode::UnknownKind, "unknown extractor '" + std::string(model_id) + "'");
}

AttentionMap normalize_spatial(GridDims dims, std::span<const double> raw, std::string source_tag) {
  if (raw.size() != static_cast<std::size_t>(dims.cells()))
    throw Error(ErrorCode::GridMismatch, "raw grid size does not match dimensions");
  double total = 0.0;
  for (double v : raw) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw Error(ErrorCode::InvalidArgument, "raw attention must be nonnegative");
    total += v;
  }
  if (total <= 0.0) throw Error(ErrorCode::AllZeroGrid, "every cell of the raw grid is zero");
  std::vector<double> cells(raw.begin(), raw.end());
  for (double& v : cells) v /= total;
  return AttentionMap(dims, std::move(cells), std::move(source_tag));
}

AttentionMap project_token_attention(const TokenAttentionTrace& trace, int layer, int token) {
  if (layer < 1 || layer > trace.num_layers)
    throw Error(ErrorCode::LayerOutOfRange,
                "layer " + std::to_string(layer) + " not in [1, " + std::to_string(trace.num_layers) + "]");
  if (std::find(trace.valid_tokens.begin(), trace.valid_tokens.end(), token) == trace.valid_tokens.end())
    throw Error(ErrorCode::TokenNotValid, "token " + std::to_string(token) + " is not a valid generated token");
  auto row = trace.row(layer, token);
  const auto first = static_cast<std::size_t>(trace.vision_start - 1);
  return normalize_spatial(trace.grid, row.subspan(first, trace.grid.cells()));
}

AttentionMap aggregate_tokens(std::span<const AttentionMap> maps) {
  return mean_of(maps, maps.empty() ? std::string{} : maps.front().source_tag());
}

AttentionMap extract_layer_map(const TokenAttentionTrace& trace, int layer, std::string_view extractor_id) {
  if (trace.valid_tokens.empty()) throw Error(ErrorCode::EmptyTokenSet, "trace has no valid tokens");
  std::vector<AttentionMap> per_token;
  per_token.reserve(trace.valid_tokens.size());
  for (int t : trace.valid_tokens) per_token.push_back(project_token_attention(trace, layer, t));
  std::string tag = std::string(extractor_id) + "@" + std::to_string(layer);
  auto avg = aggregate_tokens(per_token);
  return AttentionMap(avg.dims(), {avg.cells().begin(), avg.cells().end()}, std::move(tag));
}

AttentionMap extract_attention_map(const TokenAttentionTrace& trace, const ExtractorProfile& profile) {
  return extract_layer_map(trace, profile.best_layer, profile.model_id);
}

AttentionMap ensemble_attention(std::span<const AttentionMap> maps) {
  std::string tag;
  for (const auto& m : maps) tag += (tag.empty() ? "" : "+") + m.source_tag();
  return mean_of(maps, std::move(tag));
}

StubTraceProvider::StubTraceProvider(ExtractorProfile profile, std::uint64_t seed, StubTraceOptions options)
    : profile_(std::move(profile)), seed_(seed), options_(options) {
  if (profile_.best_layer < 1 || profile_.best_layer > profile_.num_layers)
    throw Error(ErrorCode::LayerOutOfRange, "profile best layer outside the model");
  if (options_.generated_length < 2)
    throw Error(ErrorCode::InvalidArgument, "stub traces need at least two generated tokens");
}

TokenAttentionTrace StubTraceProvider::trace(const Image& image, std::string_view prompt) const {
  const GridDims grid = options_.grid;
  const int cells = grid.cells();
  if (image.height() < grid.rows || image.width() < grid.cols || image.channels() != 3)
    throw Error(ErrorCode::ShapeMismatch, "image too small for the stub attention grid");

  std::vector<double> lum(cells);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const Rect px = rescale({r, c, 1, 1}, grid.rows, grid.cols, image.height(), image.width());
      double s = 0.0;
      for (int y = px.top; y < px.bottom(); ++y)
        for (int x = px.left; x < px.right(); ++x)
          s += 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) + 0.114 * image.at(y, x, 2);
      lum[static_cast<std::size_t>(r) * grid.cols + c] = s / static_cast<double>(px.area());
    }
  }
  const double mean_lum = std::accumulate(lum.begin(), lum.end(), 0.0) / cells;

  TokenAttentionTrace tr;
  tr.num_layers = profile_.num_layers;
  tr.grid = grid;
  tr.vision_start = options_.prefix_tokens + 1;
  tr.prompt_length = options_.prefix_tokens + cells + count_words(prompt) + 1;
  tr.generated_length = options_.generated_length;
  std::vector<bool> special(tr.generated_length, false);
  special.back() = true;
  tr.valid_tokens = default_valid_tokens(special);

  const double width = std::max(1.0, 0.15 * profile_.num_layers);
  tr.rows.resize(tr.num_layers);
  for (int l = 1; l <= tr.num_layers; ++l) {
    const int ll = options_.layer_invariant ? profile_.best_layer : l;
    const double d = (ll - profile_.best_layer) / width;
    const double focus = std::exp(-d * d);
    const double kappa = options_.contrast * (0.25 + 0.75 * focus);
    const double noise_w = options_.noise * (1.5 - focus);

    Rng layer_rng(derive_seed(seed_, profile_.model_id + "/layer/" + std::to_string(ll)));
    std::vector<double> saliency(cells);
    for (int i = 0; i < cells; ++i)
      saliency[i] = std::exp(kappa * (lum[i] - mean_lum) + noise_w * standard_normal(layer_rng));

    auto& layer_rows = tr.rows[l - 1];
    layer_rows.resize(tr.generated_length);
    for (int t = 1; t <= tr.generated_length; ++t) {
      const int len = tr.prompt_length + t - 1;
      std::vector<double> row(len, 0.0);
      std::vector<double> w(cells);
      double wsum = 0.0;
      for (int i = 0; i < cells; ++i) {
        w[i] = saliency[i] * std::exp(0.1 * standard_normal(layer_rng));
        wsum += w[i];
      }
      const double vmass = options_.vision_mass * (0.8 + 0.4 * uniform01(layer_rng));
      for (int i = 0; i < cells; ++i) row[tr.vision_start - 1 + i] = vmass * w[i] / wsum;
      const double rest = (1.0 - vmass) / static_cast<double>(len - cells);
      for (int i = 0; i < len; ++i)
        if (i < tr.vision_start - 1 || i >= tr.vision_start - 1 + cells) row[i] = rest;
      layer_rows[t - 1] = std::move(row);
    }
  }
  return tr;
}

nlohmann::json trace_to_json(const TokenAttentionTrace& trace) {
  return {
      {"schema", "saga.attention-trace/1"},
      {"num_layers", trace.num_layers},
      {"prompt_length", trace.prompt_length},
      {"generated_length", trace.generated_length},
      {"vision_start", trace.vision_start},
      {"grid", {trace.grid.rows, trace.grid.cols}},
      {"valid_tokens", trace.valid_tokens},
      {"rows", trace.rows},
  };
}

TokenAttentionTrace trace_from_json(const nlohmann::json& j) {
  TokenAttentionTrace tr;
  try {
    tr.num_layers = j.at("num_layers").get<int>();
    tr.prompt_length = j.at("prompt_length").get<int>();
    tr.generated_length = j.at("generated_length").get<int>();
    tr.vision_start = j.at("vision_start").get<int>();
    tr.grid = {j.at("grid").at(0).get<int>(), j.at("grid").at(1).get<int>()};
    if (j.contains("valid_tokens")) {
      tr.valid_tokens = j.at("valid_tokens").get<std::vector<int>>();
    } else {
      // Adapters may report special tokens instead of the filtered set.
      tr.valid_tokens = default_valid_tokens(j.at("special_tokens").get<std::vector<bool>>());
    }
    tr.rows = j.at("rows").get<std::vector<std::vector<std::vector<double>>>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedTrace, e.what());
  }
  tr.validate();
  return tr;
}

void write_map_file(const std::filesystem::path& path, const AttentionMap& map, int layer) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "saga-attention-map/1 " << map.dims().rows << ' ' << map.dims().cols << ' ' << layer << ' '
      << map.source_tag() << '\n';
  static_assert(std::endian::native == std::endian::little, "map files are little-endian");
  out.write(reinterpret_cast<const char*>(map.cells().data()),
            static_cast<std::streamsize>(map.cells().size() * sizeof(double)));
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

CachedMap read_map_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic;
  GridDims dims;
  int layer = 0;
  hs >> magic >> dims.rows >> dims.cols >> layer;
  if (magic != "saga-attention-map/1" || !hs || dims.rows <= 0 || dims.cols <= 0)
    throw Error(ErrorCode::MalformedRecord, "bad attention map header in " + path.string());
  std::string tag;
  std::getline(hs >> std::ws, tag);
  std::vector<double> cells(static_cast<std::size_t>(dims.cells()));
  in.read(reinterpret_cast<char*>(cells.data()), static_cast<std::streamsize>(cells.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(cells.size() * sizeof(double)))
    throw Error(ErrorCode::MalformedRecord, "truncated attention map " + path.string());
  return {AttentionMap(dims, std::move(cells), std::move(tag)), layer};
}

std::string cache_key(std::string_view image_id, std::string_view extractor_id, int layer) {
  return std::string(image_id) + "__" + std::string(extractor_id) + "__L" + std::to_string(layer) + ".map";
}

}  // namespace saga::attention
