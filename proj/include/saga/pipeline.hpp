#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "saga/attack.hpp"
#include "saga/attention.hpp"
#include "saga/eval.hpp"
#include "saga/hotspot.hpp"
#include "saga/surrogate.hpp"

namespace saga::pipeline {

namespace fs = std::filesystem;

enum class AttackMode { Saga, Random, Coldspot };
std::string_view to_string(AttackMode mode) noexcept;
AttackMode attack_mode_from_string(std::string_view s);

struct StudyParams {
  int images = 10;
  int texts = 5;
  int crops_per_pair = 20;
  int epochs = 5;
  double region_scale_min = 0.1;
  double region_scale_max = 0.5;
  std::vector<int> layers;  // empty: all layers
};

struct RemoteModel {
  std::string url;
  std::string model;
  int resolution = 224;
};

struct RemoteSettings {
  std::string api_key_env = "SAGA_API_KEY";
  double timeout_seconds = 60.0;
  std::string extractor_url;
  std::vector<RemoteModel> surrogates;
};

struct JudgeSettings {
  std::string kind = "lexical";  // lexical | echo | http
  std::string reply;             // echo
  std::string url;               // http
  std::string model;             // http
  std::string prompt_template{eval::kDefaultJudgeTemplate};
  int max_retries = 2;
  double rate_per_second = 0.0;  // 0: unlimited
  double burst = 1.0;
  std::string cache;  // empty: <output_root>/cache/judge.jsonl
};

struct TargetSettings {
  std::string id;
  std::string captions;  // fixture file
  std::string url;       // live endpoint
};

struct EvalSettings {
  double threshold = 0.5;
  std::string caption_prompt{eval::kCaptionPrompt};
  JudgeSettings judge;
  std::vector<TargetSettings> targets;
};

struct RunConfig {
  attack::AttackConfig attack;  // attack.seed is the root seed
  AttackMode mode = AttackMode::Saga;
  std::vector<std::string> extractors{"llava-7b"};
  int resolution = 224;
  nlohmann::json surrogates;  // stub specs, see default_surrogates()
  StudyParams study;
  EvalSettings eval;
  std::string manifest;
  std::string output_root = "out";
  int workers = 1;
  bool live = false;
  RemoteSettings remote;

  void validate() const;
};

nlohmann::json default_surrogates();

/// Parses a config document; unknown keys anywhere are rejected.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const fs::path& path);
/// Fully resolved config. The output root is left out so that runs written
/// to different directories echo identical files.
nlohmann::json config_to_json(const RunConfig& config);

/// Seed for everything tied to one pair.
std::uint64_t pair_seed(std::uint64_t root, std::string_view pair_id);

std::vector<std::shared_ptr<attention::TraceProvider>> make_extractors(const RunConfig& config);
surrogate::Ensemble make_ensemble(const RunConfig& config);

/// Attention map for an image under the configured extractors (averaged when
/// there are several), read from / written to the map cache when given.
attention::AttentionMap pair_attention(const std::string& image_id, const Image& image,
                                       std::span<const std::shared_ptr<attention::TraceProvider>> extractors,
                                       const fs::path& cache_dir);

// ---- commands -------------------------------------------------------------

struct PairOutcome {
  std::string id;
  std::string status;  // done | skipped | aborted
  std::string error;
  int iterations = 0;
  double final_loss = 0.0;
  double saturation = 0.0;
};

struct AttackSummary {
  std::vector<PairOutcome> pairs;  // sorted by id
  int aborted() const;
};

/// Output layout per pair under <output_root>/<id>/: adversarial.png,
/// delta.bin, trace.jsonl, schedule.json, attention.map, pair.json and
/// done.json (artifact checksums; completed pairs are skipped on rerun).
AttackSummary cmd_attack(const RunConfig& config, std::ostream& log);

inline constexpr std::string_view kAnalysisKinds[] = {"correlation", "redistribution", "saturation",
                                                      "attention-shift"};

struct AnalyzeOutput {
  std::vector<fs::path> records;
  fs::path summary;
  std::string summary_text;
};

/// Writes <output_root>/analysis/<kind>.jsonl (plus extras) and <kind>.txt.
AnalyzeOutput cmd_analyze(std::string_view kind, const RunConfig& config, std::ostream& log);

/// Writes <output_root>/report.json and report.md.
eval::EvalReport cmd_evaluate(const RunConfig& config, std::ostream& log);

inline constexpr std::string_view kPlotKinds[] = {"saturation", "shift", "correlation", "redistribution"};

/// Renders one SVG per call from record files into out_dir/<kind>.svg.
fs::path cmd_plot(std::string_view kind, std::span<const fs::path> records, const fs::path& out_dir);

/// Synthetic images, manifest.jsonl, captions.jsonl and config.json for a
/// desk run.
void make_demo(const fs::path& dir, int pairs, std::uint64_t seed);

}  // namespace saga::pipeline
