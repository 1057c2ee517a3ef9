#include "saga/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "saga/error.hpp"
#include "saga/io.hpp"
#include "saga/metrics.hpp"
#include "saga/remote.hpp"
#include "saga/rng.hpp"
#include "saga/studies.hpp"

namespace saga::pipeline {

using nlohmann::json;

namespace {

constexpr std::string_view kDoneSchema = "saga.pair-done/1";
constexpr std::string_view kPairSchema = "saga.pair/1";
constexpr std::string_view kTraceSchema = "saga.attack-trace/1";
constexpr std::string_view kSaturationSchema = "saga.saturation/1";
constexpr std::string_view kCorrelationSchema = "saga.correlation/1";
constexpr std::string_view kCorrelationSamplesSchema = "saga.correlation-samples/1";
constexpr std::string_view kRedistributionSchema = "saga.redistribution/1";
constexpr std::string_view kShiftSchema = "saga.attention-shift/1";

const char* const kArtifacts[] = {"adversarial.png", "delta.bin", "trace.jsonl", "schedule.json", "attention.map",
                                  "pair.json"};

[[noreturn]] void bad_config(const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); }

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) bad_config(fmt::format("{} must be an object", where));
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      bad_config(fmt::format("unknown key '{}' in {}", key, where));
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, std::string_view where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    bad_config(fmt::format("{}.{}: {}", where, key, e.what()));
  }
}

void write_atomic(const fs::path& path, const std::function<void(const fs::path&)>& writer) {
  auto tmp = path;
  tmp += ".tmp";
  writer(tmp);
  fs::rename(tmp, path);
}

json config_hash_source(const RunConfig& c) {
  auto j = config_to_json(c);
  for (const char* k : {"workers", "study", "eval", "manifest"}) j.erase(k);
  return j;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::vector<std::string> pair_dirs(const fs::path& root) {
  std::vector<std::string> ids;
  if (!fs::is_directory(root)) return ids;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "done.json")) ids.push_back(e.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<attack::ImagePair> load_manifest(const RunConfig& config) {
  if (config.manifest.empty() || !fs::exists(config.manifest)) {
    throw Error(ErrorCode::MissingArtifacts,
                "no manifest found" + (config.manifest.empty() ? std::string() : " at " + config.manifest) +
                    "; pass --manifest or run `saga make-demo` first");
  }
  return eval::ingest_manifest(config.manifest, config.resolution);
}

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

std::string_view to_string(AttackMode mode) noexcept {
  switch (mode) {
    case AttackMode::Saga: return "saga";
    case AttackMode::Random: return "random";
    case AttackMode::Coldspot: return "coldspot";
  }
  return "saga";
}

AttackMode attack_mode_from_string(std::string_view s) {
  if (s == "saga") return AttackMode::Saga;
  if (s == "random") return AttackMode::Random;
  if (s == "coldspot") return AttackMode::Coldspot;
  throw Error(ErrorCode::InvalidConfig, "unknown mode '" + std::string(s) + "' (saga, random, coldspot)");
}

json default_surrogates() {
  return json::array({
      {{"kind", "projection"}, {"id", "proj-16"}, {"resolution", 16}, {"dim", 32}, {"seed", 1}},
      {{"kind", "projection"}, {"id", "proj-24"}, {"resolution", 24}, {"dim", 32}, {"seed", 2}},
      {{"kind", "projection"}, {"id", "proj-32"}, {"resolution", 32}, {"dim", 32}, {"seed", 3}},
  });
}

void RunConfig::validate() const {
  try {
    attack.validate();
  } catch (const Error& e) {
    bad_config(e.what());
  }
  if (extractors.empty()) bad_config("at least one extractor is required");
  if (!live) {
    for (const auto& id : extractors) {
      try {
        attention::find_profile(id);
      } catch (const Error&) {
        bad_config("unknown extractor '" + id + "'");
      }
    }
  }
  if (resolution < 8) bad_config("resolution must be at least 8");
  if (workers < 1) bad_config("workers must be >= 1");
  if (study.images < 1 || study.texts < 1 || study.crops_per_pair < 1 || study.epochs < 1)
    bad_config("study counts must be positive");
  if (!(study.region_scale_min > 0.0 && study.region_scale_min <= study.region_scale_max &&
        study.region_scale_max <= 1.0))
    bad_config("study region scales must satisfy 0 < min <= max <= 1");
  if (!(eval.threshold >= 0.0 && eval.threshold <= 1.0)) bad_config("eval threshold must lie in [0, 1]");
  if (!live) {
    if (!surrogates.is_array() || surrogates.empty()) bad_config("surrogates must be a non-empty array");
    if (!remote.extractor_url.empty() || !remote.surrogates.empty() || eval.judge.kind == "http")
      bad_config("remote endpoints are configured but live mode is off (use --live)");
    for (const auto& t : eval.targets)
      if (!t.url.empty()) bad_config("target '" + t.id + "' has a url but live mode is off (use --live)");
  }
  for (const auto& t : eval.targets) {
    if (t.id.empty()) bad_config("every eval target needs an id");
    if (t.captions.empty() == t.url.empty()) bad_config("eval target '" + t.id + "' needs exactly one of captions, url");
  }
}

RunConfig config_from_json(const json& j) {
  check_keys(j,
             {"schema", "seed", "mode", "epsilon", "step_size", "total_iterations", "num_stages", "per_stage",
              "iou_threshold", "scale_min", "scale_max", "update_rule", "check_invariants", "extractors", "resolution",
              "surrogates", "study", "eval", "manifest", "output_root", "workers", "live", "remote"},
             "config");
  RunConfig c;
  c.surrogates = default_surrogates();
  if (j.contains("schema") && j["schema"] != "saga.run-config/1") bad_config("unexpected config schema");
  auto& a = c.attack;
  read(j, "seed", a.seed, "config");
  read(j, "epsilon", a.epsilon, "config");
  read(j, "step_size", a.step_size, "config");
  read(j, "total_iterations", a.total_iterations, "config");
  read(j, "num_stages", a.num_stages, "config");
  read(j, "per_stage", a.per_stage, "config");
  read(j, "iou_threshold", a.iou_threshold, "config");
  read(j, "scale_min", a.scale_min, "config");
  read(j, "scale_max", a.scale_max, "config");
  read(j, "check_invariants", a.check_invariants, "config");
  std::string s;
  if (j.contains("update_rule")) {
    read(j, "update_rule", s, "config");
    try {
      a.rule = attack::update_rule_from_string(s);
    } catch (const Error& e) {
      bad_config(e.what());
    }
  }
  if (j.contains("mode")) {
    read(j, "mode", s, "config");
    c.mode = attack_mode_from_string(s);
  }
  read(j, "extractors", c.extractors, "config");
  read(j, "resolution", c.resolution, "config");
  if (j.contains("surrogates")) c.surrogates = j["surrogates"];
  read(j, "manifest", c.manifest, "config");
  read(j, "output_root", c.output_root, "config");
  read(j, "workers", c.workers, "config");
  read(j, "live", c.live, "config");

  if (j.contains("study")) {
    const auto& st = j["study"];
    check_keys(st, {"images", "texts", "crops_per_pair", "epochs", "region_scale_min", "region_scale_max", "layers"},
               "study");
    read(st, "images", c.study.images, "study");
    read(st, "texts", c.study.texts, "study");
    read(st, "crops_per_pair", c.study.crops_per_pair, "study");
    read(st, "epochs", c.study.epochs, "study");
    read(st, "region_scale_min", c.study.region_scale_min, "study");
    read(st, "region_scale_max", c.study.region_scale_max, "study");
    read(st, "layers", c.study.layers, "study");
  }
  if (j.contains("eval")) {
    const auto& ev = j["eval"];
    check_keys(ev, {"threshold", "caption_prompt", "judge", "targets"}, "eval");
    read(ev, "threshold", c.eval.threshold, "eval");
    read(ev, "caption_prompt", c.eval.caption_prompt, "eval");
    if (ev.contains("judge")) {
      const auto& jd = ev["judge"];
      check_keys(jd, {"kind", "reply", "url", "model", "prompt_template", "max_retries", "rate_per_second", "burst",
                      "cache"},
                 "eval.judge");
      auto& js = c.eval.judge;
      read(jd, "kind", js.kind, "eval.judge");
      read(jd, "reply", js.reply, "eval.judge");
      read(jd, "url", js.url, "eval.judge");
      read(jd, "model", js.model, "eval.judge");
      read(jd, "prompt_template", js.prompt_template, "eval.judge");
      read(jd, "max_retries", js.max_retries, "eval.judge");
      read(jd, "rate_per_second", js.rate_per_second, "eval.judge");
      read(jd, "burst", js.burst, "eval.judge");
      read(jd, "cache", js.cache, "eval.judge");
      if (js.kind != "lexical" && js.kind != "echo" && js.kind != "http")
        bad_config("eval.judge.kind must be lexical, echo or http");
    }
    if (ev.contains("targets")) {
      if (!ev["targets"].is_array()) bad_config("eval.targets must be an array");
      for (const auto& t : ev["targets"]) {
        check_keys(t, {"id", "captions", "url"}, "eval.targets[]");
        TargetSettings ts;
        read(t, "id", ts.id, "eval.targets[]");
        read(t, "captions", ts.captions, "eval.targets[]");
        read(t, "url", ts.url, "eval.targets[]");
        c.eval.targets.push_back(std::move(ts));
      }
    }
  }
  if (j.contains("remote")) {
    const auto& r = j["remote"];
    check_keys(r, {"api_key_env", "timeout_seconds", "extractor_url", "surrogates"}, "remote");
    read(r, "api_key_env", c.remote.api_key_env, "remote");
    read(r, "timeout_seconds", c.remote.timeout_seconds, "remote");
    read(r, "extractor_url", c.remote.extractor_url, "remote");
    if (r.contains("surrogates")) {
      for (const auto& m : r["surrogates"]) {
        check_keys(m, {"url", "model", "resolution"}, "remote.surrogates[]");
        RemoteModel rm;
        read(m, "url", rm.url, "remote.surrogates[]");
        read(m, "model", rm.model, "remote.surrogates[]");
        read(m, "resolution", rm.resolution, "remote.surrogates[]");
        c.remote.surrogates.push_back(std::move(rm));
      }
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  json j;
  try {
    j = io::read_json(path);
  } catch (const Error& e) {
    bad_config(e.what());
  }
  return config_from_json(j);
}

json config_to_json(const RunConfig& c) {
  const auto& a = c.attack;
  json targets = json::array();
  for (const auto& t : c.eval.targets) {
    json tj{{"id", t.id}};
    if (!t.captions.empty()) tj["captions"] = t.captions;
    if (!t.url.empty()) tj["url"] = t.url;
    targets.push_back(std::move(tj));
  }
  json remote_models = json::array();
  for (const auto& m : c.remote.surrogates)
    remote_models.push_back({{"url", m.url}, {"model", m.model}, {"resolution", m.resolution}});
  const auto& js = c.eval.judge;
  return {
      {"schema", "saga.run-config/1"},
      {"seed", a.seed},
      {"mode", to_string(c.mode)},
      {"epsilon", a.epsilon},
      {"step_size", a.step_size},
      {"total_iterations", a.total_iterations},
      {"num_stages", a.num_stages},
      {"per_stage", a.per_stage},
      {"iou_threshold", a.iou_threshold},
      {"scale_min", a.scale_min},
      {"scale_max", a.scale_max},
      {"update_rule", attack::to_string(a.rule)},
      {"check_invariants", a.check_invariants},
      {"extractors", c.extractors},
      {"resolution", c.resolution},
      {"surrogates", c.surrogates},
      {"study",
       {{"images", c.study.images},
        {"texts", c.study.texts},
        {"crops_per_pair", c.study.crops_per_pair},
        {"epochs", c.study.epochs},
        {"region_scale_min", c.study.region_scale_min},
        {"region_scale_max", c.study.region_scale_max},
        {"layers", c.study.layers}}},
      {"eval",
       {{"threshold", c.eval.threshold},
        {"caption_prompt", c.eval.caption_prompt},
        {"judge",
         {{"kind", js.kind},
          {"reply", js.reply},
          {"url", js.url},
          {"model", js.model},
          {"prompt_template", js.prompt_template},
          {"max_retries", js.max_retries},
          {"rate_per_second", js.rate_per_second},
          {"burst", js.burst},
          {"cache", js.cache}}},
        {"targets", targets}}},
      {"manifest", c.manifest},
      {"workers", c.workers},
      {"live", c.live},
      {"remote",
       {{"api_key_env", c.remote.api_key_env},
        {"timeout_seconds", c.remote.timeout_seconds},
        {"extractor_url", c.remote.extractor_url},
        {"surrogates", remote_models}}},
  };
}

std::uint64_t pair_seed(std::uint64_t root, std::string_view pair_id) {
  return derive_seed(root, "pair/" + std::string(pair_id));
}

namespace {

remote::Endpoint endpoint(const RunConfig& c, std::string url, std::string model) {
  auto key = remote::api_key_from_env(c.remote.api_key_env);
  if (key.empty()) {
    throw Error(ErrorCode::InvalidConfig,
                "live mode needs credentials in the environment variable " + c.remote.api_key_env);
  }
  return {std::move(url), std::move(model), key, c.remote.timeout_seconds};
}

}  // namespace

std::vector<std::shared_ptr<attention::TraceProvider>> make_extractors(const RunConfig& config) {
  std::vector<std::shared_ptr<attention::TraceProvider>> out;
  for (const auto& id : config.extractors) {
    attention::ExtractorProfile profile;
    if (config.live) {
      if (config.remote.extractor_url.empty()) bad_config("live mode needs remote.extractor_url");
      profile = attention::find_profile(id);
      out.push_back(std::make_shared<remote::HttpTraceProvider>(endpoint(config, config.remote.extractor_url, id),
                                                                profile));
    } else {
      profile = attention::find_profile(id);
      out.push_back(std::make_shared<attention::StubTraceProvider>(
          profile, derive_seed(config.attack.seed, "extractor/" + id)));
    }
  }
  return out;
}

surrogate::Ensemble make_ensemble(const RunConfig& config) {
  if (config.live) {
    if (config.remote.surrogates.empty()) bad_config("live mode needs remote.surrogates");
    std::vector<std::shared_ptr<const surrogate::Member>> members;
    for (const auto& m : config.remote.surrogates)
      members.push_back(std::make_shared<remote::HttpEncoderMember>(endpoint(config, m.url, m.model), m.resolution));
    return surrogate::Ensemble(std::move(members));
  }
  try {
    return surrogate::ensemble_from_json(config.surrogates);
  } catch (const Error& e) {
    bad_config(std::string("surrogates: ") + e.what());
  }
}

attention::AttentionMap pair_attention(const std::string& image_id, const Image& image,
                                       std::span<const std::shared_ptr<attention::TraceProvider>> extractors,
                                       const fs::path& cache_dir) {
  std::vector<attention::AttentionMap> maps;
  for (const auto& ex : extractors) {
    const auto& prof = ex->profile();
    fs::path cached;
    if (!cache_dir.empty()) {
      cached = cache_dir / attention::cache_key(image_id, prof.model_id, prof.best_layer);
      if (fs::exists(cached)) {
        auto m = attention::read_map_file(cached);
        if (m.layer == prof.best_layer) {
          maps.push_back(std::move(m.map));
          continue;
        }
      }
    }
    auto map = attention::extract_attention_map(ex->trace(image, prof.prompt), prof);
    if (!cached.empty()) {
      fs::create_directories(cache_dir);
      write_atomic(cached, [&](const fs::path& p) { attention::write_map_file(p, map, prof.best_layer); });
    }
    maps.push_back(std::move(map));
  }
  if (maps.size() == 1) return std::move(maps.front());
  return attention::ensemble_attention(maps);
}

int AttackSummary::aborted() const {
  return static_cast<int>(std::count_if(pairs.begin(), pairs.end(), [](const auto& p) { return p.status == "aborted"; }));
}

namespace {

bool pair_complete(const fs::path& dir, const std::string& config_hash) {
  auto done = dir / "done.json";
  if (!fs::exists(done)) return false;
  try {
    auto j = io::read_json(done);
    if (j.value("schema", "") != kDoneSchema || j.value("config_hash", "") != config_hash) return false;
    for (const char* name : kArtifacts) {
      auto p = dir / name;
      if (!fs::exists(p) || io::sha256_file(p) != j.at("artifacts").at(name).get<std::string>()) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

PairOutcome attack_one(const attack::ImagePair& pair, const RunConfig& config, const std::string& config_hash,
                       std::span<const std::shared_ptr<attention::TraceProvider>> extractors,
                       const surrogate::Ensemble& ensemble) {
  const fs::path root = config.output_root;
  const fs::path dir = root / pair.id;
  PairOutcome outcome;
  outcome.id = pair.id;
  if (pair_complete(dir, config_hash)) {
    outcome.status = "skipped";
    auto trace = io::read_records(dir / "trace.jsonl", kTraceSchema);
    outcome.iterations = static_cast<int>(trace.size());
    if (!trace.empty()) {
      outcome.final_loss = trace.back().at("loss").get<double>();
      outcome.saturation = trace.back().at("saturation").get<double>();
    }
    return outcome;
  }
  fs::create_directories(dir);
  fs::remove(dir / "done.json");
  fs::remove(dir / "failure.json");

  io::write_json(dir / "pair.json", {{"schema", kPairSchema},
                                     {"id", pair.id},
                                     {"target_text", pair.target_text},
                                     {"mode", to_string(config.mode)},
                                     {"height", pair.original.height()},
                                     {"width", pair.original.width()}});
  try {
    auto map = pair_attention(pair.id, pair.original, extractors, root / "cache" / "attention");
    attention::write_map_file(dir / "attention.map", map, extractors.size() == 1 ? extractors[0]->profile().best_layer : 0);

    hotspot::StageSchedule schedule;
    switch (config.mode) {
      case AttackMode::Saga: schedule = hotspot::build_schedule(map, config.attack.schedule_params()); break;
      case AttackMode::Coldspot:
        schedule = hotspot::build_schedule(map, config.attack.schedule_params(hotspot::Mode::Coldspot));
        break;
      case AttackMode::Random:
        schedule = hotspot::whole_image_schedule(map.dims(), config.attack.total_iterations);
        break;
    }
    io::write_json(dir / "schedule.json",
                   hotspot::schedule_to_json(schedule, pair.original.height(), pair.original.width()));

    auto cfg = config.attack;
    cfg.seed = pair_seed(config.attack.seed, pair.id);
    auto result = attack::run_attack(pair, schedule, ensemble, cfg);

    std::vector<json> rows;
    rows.reserve(result.trace.records.size());
    for (const auto& r : result.trace.records) rows.push_back(attack::record_to_json(r));
    io::write_records(dir / "trace.jsonl", kTraceSchema, rows);
    outcome.iterations = static_cast<int>(rows.size());
    if (!result.trace.records.empty()) {
      outcome.final_loss = result.trace.records.back().loss;
      outcome.saturation = result.trace.records.back().saturation;
    }
    if (result.aborted()) {
      outcome.status = "aborted";
      outcome.error = result.failure->what();
      io::write_json(dir / "failure.json", {{"code", to_string(result.failure->code())}, {"message", outcome.error}});
      return outcome;
    }
    io::write_png(dir / "adversarial.png", result.adversarial);
    io::write_delta(dir / "delta.bin", result.perturbation.delta, result.perturbation.epsilon);

    json sums;
    for (const char* name : kArtifacts) sums[name] = io::sha256_file(dir / name);
    io::write_json(dir / "done.json", {{"schema", kDoneSchema}, {"config_hash", config_hash}, {"artifacts", sums}});
    outcome.status = "done";
  } catch (const Error& e) {
    outcome.status = "aborted";
    outcome.error = e.what();
    io::write_json(dir / "failure.json", {{"code", to_string(e.code())}, {"message", outcome.error}});
  }
  return outcome;
}

}  // namespace

AttackSummary cmd_attack(const RunConfig& config, std::ostream& log) {
  config.validate();
  auto pairs = load_manifest(config);
  const fs::path root = config.output_root;
  fs::create_directories(root);
  io::write_json(root / "config.json", config_to_json(config));
  const std::string config_hash = hex64(fnv1a(config_hash_source(config).dump()));

  auto extractors = make_extractors(config);
  auto ensemble = make_ensemble(config);

  AttackSummary summary;
  summary.pairs.resize(pairs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < pairs.size();) {
      summary.pairs[i] = attack_one(pairs[i], config, config_hash, extractors, ensemble);
      std::lock_guard lock(log_mutex);
      const auto& o = summary.pairs[i];
      log << fmt::format("[{}] {}{}\n", o.id, o.status, o.error.empty() ? "" : ": " + o.error);
    }
  };
  if (config.workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < config.workers; ++w) pool.emplace_back(work);
  }
  std::sort(summary.pairs.begin(), summary.pairs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  log << fmt::format("{:<24} {:<8} {:>6} {:>10} {:>10}\n", "pair", "status", "iters", "loss", "saturation");
  json rows = json::array();
  for (const auto& o : summary.pairs) {
    log << fmt::format("{:<24} {:<8} {:>6} {:>10.4f} {:>10.4f}\n", o.id, o.status, o.iterations, o.final_loss,
                       o.saturation);
    if (!o.error.empty()) log << "    " << o.error << '\n';
    json row{{"id", o.id}, {"status", o.status == "skipped" ? "done" : o.status}, {"iterations", o.iterations},
             {"final_loss", o.final_loss}, {"saturation", o.saturation}};
    if (!o.error.empty()) row["error"] = o.error;
    rows.push_back(std::move(row));
  }
  log << fmt::format("{} pairs, {} aborted\n", summary.pairs.size(), summary.aborted());
  io::write_json(root / "summary.json", {{"schema", "saga.attack-summary/1"}, {"pairs", rows}});
  return summary;
}

// ---- analyses -------------------------------------------------------------

namespace {

AnalyzeOutput finish(const fs::path& dir, std::string_view kind, std::vector<fs::path> records, std::string text,
                     std::ostream& log) {
  AnalyzeOutput out;
  out.records = std::move(records);
  out.summary = dir / (std::string(kind) + ".txt");
  out.summary_text = std::move(text);
  io::write_text(out.summary, out.summary_text);
  log << out.summary_text;
  return out;
}

AnalyzeOutput analyze_correlation(const RunConfig& config, const fs::path& dir, std::ostream& log) {
  auto pairs = load_manifest(config);
  std::vector<Image> images;
  std::vector<std::string> texts;
  std::set<std::string> seen;
  for (const auto& p : pairs) {
    if (static_cast<int>(images.size()) < config.study.images) images.push_back(p.original);
    if (static_cast<int>(texts.size()) < config.study.texts && seen.insert(p.target_text).second)
      texts.push_back(p.target_text);
  }
  std::string notes;
  if (static_cast<int>(images.size()) < config.study.images || static_cast<int>(texts.size()) < config.study.texts) {
    notes = fmt::format("note: manifest provides {} images and {} distinct texts (configured {} x {})\n",
                        images.size(), texts.size(), config.study.images, config.study.texts);
  }
  auto extractors = make_extractors(config);
  auto ensemble = make_ensemble(config);
  analysis::CorrelationStudyConfig sc;
  sc.crops_per_pair = config.study.crops_per_pair;
  sc.region_scale_min = config.study.region_scale_min;
  sc.region_scale_max = config.study.region_scale_max;
  sc.epsilon = config.attack.epsilon;
  sc.step_size = config.attack.step_size;
  sc.rule = config.attack.rule;
  sc.layers = config.study.layers;
  sc.seed = derive_seed(config.attack.seed, "study/correlation");
  auto result = analysis::correlation_study(images, texts, ensemble, *extractors.front(), sc);

  std::vector<json> rows;
  for (const auto& lc : result.per_layer) {
    rows.push_back({{"extractor", extractors.front()->profile().model_id},
                    {"layer", lc.layer},
                    {"pearson_r", lc.pearson.coefficient},
                    {"pearson_p", lc.pearson.p_value},
                    {"pearson_significant", lc.pearson_significant},
                    {"spearman_rho", lc.spearman.coefficient},
                    {"spearman_p", lc.spearman.p_value},
                    {"spearman_significant", lc.spearman_significant},
                    {"samples", result.samples.size()}});
  }
  std::vector<json> samples;
  for (const auto& s : result.samples) {
    samples.push_back({{"image", s.image_index},
                       {"text", s.text_index},
                       {"region", {s.region.top, s.region.left, s.region.height, s.region.width}},
                       {"mean_attention", s.mean_attention},
                       {"loss_change", s.loss_change}});
  }
  auto rec = dir / "correlation.jsonl";
  auto smp = dir / "correlation_samples.jsonl";
  io::write_records(rec, kCorrelationSchema, rows);
  io::write_records(smp, kCorrelationSamplesSchema, samples);

  std::ostringstream os;
  os << notes;
  os << fmt::format("correlation study: {} samples, extractor {}\n", result.samples.size(),
                    extractors.front()->profile().model_id);
  os << fmt::format("{:>5} {:>10} {:>10} {:>10} {:>10}\n", "layer", "pearson", "p", "spearman", "p");
  for (const auto& lc : result.per_layer) {
    os << fmt::format("{:>5} {:>9.4f}{} {:>10.3g} {:>9.4f}{} {:>10.3g}\n", lc.layer, lc.pearson.coefficient,
                      lc.pearson_significant ? "*" : " ", lc.pearson.p_value, lc.spearman.coefficient,
                      lc.spearman_significant ? "*" : " ", lc.spearman.p_value);
  }
  os << "(* significant at p <= 0.05)\n";
  return finish(dir, "correlation", {rec, smp}, os.str(), log);
}

AnalyzeOutput analyze_redistribution(const RunConfig& config, const fs::path& dir, std::ostream& log) {
  auto pairs = load_manifest(config);
  if (static_cast<int>(pairs.size()) > config.study.images) pairs.resize(static_cast<std::size_t>(config.study.images));
  auto extractors = make_extractors(config);
  auto ensemble = make_ensemble(config);
  analysis::RedistributionConfig rc;
  rc.epochs = config.study.epochs;
  rc.attack = config.attack;
  rc.attack.seed = derive_seed(config.attack.seed, "study/redistribution");
  auto result = analysis::redistribution_study(pairs, ensemble, *extractors.front(), rc);

  std::vector<json> rows;
  for (const auto& [setting, values] : {std::pair{"random-crop", result.random_crop}, std::pair{"hotspot", result.hotspot}}) {
    for (int r = 0; r < 3; ++r)
      rows.push_back({{"setting", setting}, {"region", r + 1}, {"mean_delta", values[r]}, {"pairs", result.pairs}});
  }
  auto rec = dir / "redistribution.jsonl";
  io::write_records(rec, kRedistributionSchema, rows);
  std::ostringstream os;
  os << fmt::format("attention redistribution over {} pairs, {} epochs\n", result.pairs, rc.epochs);
  os << fmt::format("{:<12} {:>14} {:>14} {:>14}\n", "setting", "region 1", "region 2", "region 3");
  os << fmt::format("{:<12} {:>14.3e} {:>14.3e} {:>14.3e}\n", "random-crop", result.random_crop[0],
                    result.random_crop[1], result.random_crop[2]);
  os << fmt::format("{:<12} {:>14.3e} {:>14.3e} {:>14.3e}\n", "hotspot", result.hotspot[0], result.hotspot[1],
                    result.hotspot[2]);
  return finish(dir, "redistribution", {rec}, os.str(), log);
}

AnalyzeOutput analyze_saturation(const RunConfig& config, const fs::path& dir, std::ostream& log) {
  const fs::path root = config.output_root;
  auto ids = pair_dirs(root);
  if (ids.empty()) throw Error(ErrorCode::MissingArtifacts, "no finished attacks under " + root.string() + "; run `saga attack` first");
  std::vector<json> rows;
  std::map<std::string, std::vector<double>> finals;
  for (const auto& id : ids) {
    auto pj = io::read_json(root / id / "pair.json");
    std::string method = pj.value("mode", "saga");
    auto trace = io::read_records(root / id / "trace.jsonl", kTraceSchema);
    for (const auto& r : trace) {
      rows.push_back({{"pair_id", id}, {"method", method}, {"epoch", r.at("iteration")}, {"saturation", r.at("saturation")}});
    }
    if (!trace.empty()) finals[method].push_back(trace.back().at("saturation").get<double>());
  }
  auto rec = dir / "saturation.jsonl";
  io::write_records(rec, kSaturationSchema, rows);
  std::ostringstream os;
  os << fmt::format("budget saturation over {} pairs\n", ids.size());
  for (const auto& [method, v] : finals) os << fmt::format("{:<10} final mean {:.4f}\n", method, mean(v));
  return finish(dir, "saturation", {rec}, os.str(), log);
}

AnalyzeOutput analyze_shift(const RunConfig& config, const fs::path& dir, std::ostream& log) {
  const fs::path root = config.output_root;
  auto ids = pair_dirs(root);
  if (ids.empty()) throw Error(ErrorCode::MissingArtifacts, "no finished attacks under " + root.string() + "; run `saga attack` first");
  if (!fs::exists(root / "report.json"))
    throw Error(ErrorCode::MissingArtifacts, "no report.json under " + root.string() + "; run `saga evaluate` first");
  auto report = io::read_json(root / "report.json");
  std::map<std::string, std::vector<double>> sims;
  for (const auto& item : report.at("items"))
    if (item.contains("similarity")) sims[item.at("pair_id").get<std::string>()].push_back(item["similarity"].get<double>());

  auto extractors = make_extractors(config);
  std::vector<json> rows;
  std::vector<double> js_all;
  for (const auto& id : ids) {
    auto pre = attention::read_map_file(root / id / "attention.map").map;
    auto adv = io::read_image(root / id / "adversarial.png");
    auto post = pair_attention(id, adv, extractors, {});
    double js = analysis::js_divergence(pre, post);
    js_all.push_back(js);
    auto pj = io::read_json(root / id / "pair.json");
    json row{{"pair_id", id}, {"method", pj.value("mode", "saga")}, {"js", js}};
    auto it = sims.find(id);
    row["avg_sim"] = it == sims.end() ? json(nullptr) : json(mean(it->second));
    rows.push_back(std::move(row));
  }
  auto rec = dir / "attention-shift.jsonl";
  io::write_records(rec, kShiftSchema, rows);
  std::ostringstream os;
  os << fmt::format("attention shift over {} pairs: mean JS {:.5f} nats\n", ids.size(), mean(js_all));
  return finish(dir, "attention-shift", {rec}, os.str(), log);
}

}  // namespace

AnalyzeOutput cmd_analyze(std::string_view kind, const RunConfig& config, std::ostream& log) {
  config.validate();
  const fs::path dir = fs::path(config.output_root) / "analysis";
  fs::create_directories(dir);
  if (kind == "correlation") return analyze_correlation(config, dir, log);
  if (kind == "redistribution") return analyze_redistribution(config, dir, log);
  if (kind == "saturation") return analyze_saturation(config, dir, log);
  if (kind == "attention-shift") return analyze_shift(config, dir, log);
  throw Error(ErrorCode::InvalidArgument,
              "unknown analysis '" + std::string(kind) + "' (correlation, redistribution, saturation, attention-shift)");
}

eval::EvalReport cmd_evaluate(const RunConfig& config, std::ostream& log) {
  config.validate();
  const fs::path root = config.output_root;
  if (config.eval.targets.empty()) bad_config("eval.targets is empty; nothing to caption with");

  std::vector<std::shared_ptr<eval::CaptionModel>> targets;
  for (const auto& t : config.eval.targets) {
    if (!t.url.empty()) {
      targets.push_back(std::make_shared<remote::HttpCaptionModel>(endpoint(config, t.url, t.id)));
    } else {
      targets.push_back(std::make_shared<eval::FixtureCaptionModel>(t.id, fs::path(t.captions)));
    }
  }
  const auto& js = config.eval.judge;
  std::shared_ptr<eval::TextEndpoint> judge_endpoint;
  if (js.kind == "lexical") {
    judge_endpoint = std::make_shared<eval::LexicalOverlapEndpoint>();
  } else if (js.kind == "echo") {
    judge_endpoint = std::make_shared<eval::EchoEndpoint>(js.reply);
  } else {
    judge_endpoint = std::make_shared<remote::HttpTextEndpoint>(endpoint(config, js.url, js.model));
  }
  auto cache = std::make_shared<eval::ReplyCache>(js.cache.empty() ? root / "cache" / "judge.jsonl" : fs::path(js.cache));
  auto limiter = std::make_shared<eval::TokenBucket>(js.rate_per_second, js.burst);
  eval::JudgeClient judge(judge_endpoint, {js.prompt_template, js.max_retries}, cache, limiter);

  eval::EvaluateOptions opts;
  opts.threshold = config.eval.threshold;
  opts.workers = config.workers;
  opts.caption_prompt = config.eval.caption_prompt;
  auto report = eval::evaluate(root, targets, judge, opts);

  auto j = eval::report_to_json(report);
  j["method"] = to_string(config.mode);
  io::write_json(root / "report.json", j);
  std::string header = "| method";
  std::string rule = "|---";
  for (const auto& t : report.targets) {
    header += " | " + t.target_model + " ASR | " + t.target_model + " AvgSim";
    rule += "|---|---";
  }
  header += " | l1 | l2 |";
  rule += "|---|---|";
  std::string table = header + "\n" + rule + "\n" + eval::format_table_row(report, to_string(config.mode)) + "\n";
  io::write_text(root / "report.md", table);
  log << table;
  for (const auto& w : report.warnings) log << "warning: " << w << '\n';
  for (const auto& item : report.items)
    if (!item.error.empty()) log << fmt::format("excluded {} / {}: {}\n", item.pair_id, item.target_model, item.error);
  return report;
}

// ---- demo data --------------------------------------------------------------

void make_demo(const fs::path& dir, int pairs, std::uint64_t seed) {
  if (pairs < 1) throw Error(ErrorCode::InvalidArgument, "make-demo needs at least one pair");
  static const char* const kTexts[] = {
      "a red double decker bus driving down a city street",
      "two dogs playing with a frisbee on green grass",
      "a plate of pasta with tomato sauce and basil",
      "a sailboat on a calm lake at sunset",
      "a cat sleeping on a wooden kitchen table",
  };
  static const char* const kUnrelated[] = {
      "an abstract pattern of soft colored shapes",
      "a blurry picture with smooth gradients",
      "colorful blobs on a plain background",
  };
  fs::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.jsonl");
  std::ofstream captions(dir / "captions.jsonl");
  for (int i = 0; i < pairs; ++i) {
    std::string id = fmt::format("pair-{:03d}", i);
    auto img = io::synthetic_image(224, 224, derive_seed(seed, id));
    io::write_png(dir / "images" / (id + ".png"), img);
    std::string text = kTexts[i % 5];
    manifest << json{{"id", id}, {"image_path", "images/" + id + ".png"}, {"target_text", text}}.dump() << '\n';
    // target-a reproduces the target text on even pairs, target-b never does
    std::string a = i % 2 == 0 ? text : kUnrelated[i % 3];
    captions << json{{"pair_id", id}, {"target", "target-a"}, {"caption", a}}.dump() << '\n';
    captions << json{{"pair_id", id}, {"target", "target-b"}, {"caption", kUnrelated[(i + 1) % 3]}}.dump() << '\n';
  }
  RunConfig c;
  c.surrogates = default_surrogates();
  c.attack.seed = seed;
  c.manifest = (dir / "manifest.jsonl").string();
  c.eval.targets = {{"target-a", (dir / "captions.jsonl").string(), ""},
                    {"target-b", (dir / "captions.jsonl").string(), ""}};
  auto j = config_to_json(c);
  j["output_root"] = (dir / "out").string();
  io::write_json(dir / "config.json", j);
}

}  // namespace saga::pipeline
