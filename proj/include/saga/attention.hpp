#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "saga/image.hpp"

namespace saga::attention {

struct GridDims {
  int rows = 0;
  int cols = 0;

  int cells() const noexcept { return rows * cols; }
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

inline constexpr double kSumTolerance = 1e-6;

/// Nonnegative spatial distribution over the patch grid, summing to one.
/// Construction validates both invariants.
class AttentionMap {
 public:
  AttentionMap(GridDims dims, std::vector<double> cells, std::string source_tag = {});

  GridDims dims() const noexcept { return dims_; }
  std::span<const double> cells() const noexcept { return cells_; }
  double at(int row, int col) const { return cells_[static_cast<std::size_t>(row) * dims_.cols + col]; }
  const std::string& source_tag() const noexcept { return tag_; }

  /// Mean cell value over a rectangle in patch coordinates.
  double mean_over(const Rect& r) const;

 private:
  GridDims dims_;
  std::vector<double> cells_;
  std::string tag_;
};

/// Decoder attention of one captioning run, already averaged over heads.
/// Layers and generated tokens are 1-based, matching how models report them.
/// rows[l - 1][t - 1] holds the weights of generated token t over every
/// prior token, i.e. prompt_length + t - 1 entries.
struct TokenAttentionTrace {
  int num_layers = 0;
  int prompt_length = 0;
  int generated_length = 0;
  int vision_start = 1;  // first vision token, 1-based, inside the prompt
  GridDims grid;
  std::vector<int> valid_tokens;
  std::vector<std::vector<std::vector<double>>> rows;

  void validate() const;
  std::span<const double> row(int layer, int token) const;
};

/// Generated tokens that are not special/control tokens.
std::vector<int> default_valid_tokens(const std::vector<bool>& is_special);

struct ExtractorProfile {
  std::string model_id;
  int num_layers = 0;
  int best_layer = 0;
  std::string prompt = "Describe this image.";
};

/// Known extractor models with their most attention/loss-correlated layer.
std::span<const ExtractorProfile> known_profiles();
const ExtractorProfile& find_profile(std::string_view model_id);

AttentionMap normalize_spatial(GridDims dims, std::span<const double> raw, std::string source_tag = {});
AttentionMap project_token_attention(const TokenAttentionTrace& trace, int layer, int token);
AttentionMap aggregate_tokens(std::span<const AttentionMap> maps);

/// Token-averaged map at an arbitrary layer (used by the per-layer studies).
AttentionMap extract_layer_map(const TokenAttentionTrace& trace, int layer, std::string_view extractor_id = {});
AttentionMap extract_attention_map(const TokenAttentionTrace& trace, const ExtractorProfile& profile);
AttentionMap ensemble_attention(std::span<const AttentionMap> maps);

/// Anything that can caption an image and hand back its attention trace.
class TraceProvider {
 public:
  virtual ~TraceProvider() = default;
  virtual const ExtractorProfile& profile() const = 0;
  virtual TokenAttentionTrace trace(const Image& image, std::string_view prompt) const = 0;
};

struct StubTraceOptions {
  GridDims grid{24, 24};
  int generated_length = 8;  // last token is treated as end-of-sequence
  int prefix_tokens = 5;     // system tokens before the vision block
  double vision_mass = 0.45; // share of each row spent on vision tokens
  double contrast = 6.0;     // sharpness of the luminance saliency
  double noise = 0.15;       // strength of the fixed per-layer spatial pattern
  bool layer_invariant = false;  // every layer reproduces the best layer
};

/// Deterministic synthetic trace generator. Vision attention follows patch
/// luminance with a layer-dependent sharpness that peaks at the profile's
/// best layer, so maps respond to perturbations of the image.
class StubTraceProvider : public TraceProvider {
 public:
  StubTraceProvider(ExtractorProfile profile, std::uint64_t seed, StubTraceOptions options = {});

  const ExtractorProfile& profile() const override { return profile_; }
  TokenAttentionTrace trace(const Image& image, std::string_view prompt) const override;

 private:
  ExtractorProfile profile_;
  std::uint64_t seed_;
  StubTraceOptions options_;
};

nlohmann::json trace_to_json(const TokenAttentionTrace& trace);
TokenAttentionTrace trace_from_json(const nlohmann::json& j);

// Attention cache file: one text header line
//   saga-attention-map/1 <rows> <cols> <layer> <source tag>
// followed by rows*cols little-endian float64 values in row-major order.
void write_map_file(const std::filesystem::path& path, const AttentionMap& map, int layer);
struct CachedMap {
  AttentionMap map;
  int layer;
};
CachedMap read_map_file(const std::filesystem::path& path);

/// Cache file name for (image id, extractor id, layer).
std::string cache_key(std::string_view image_id, std::string_view extractor_id, int layer);

}  // namespace saga::attention
