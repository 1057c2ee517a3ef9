#include "saga/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "saga/error.hpp"
#include "saga/io.hpp"
#include "saga/rng.hpp"

namespace saga::eval {

using nlohmann::json;

namespace {

std::set<std::string> word_set(std::string_view text) {
  std::set<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      out.insert(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.insert(std::move(cur));
  return out;
}

std::optional<std::string> line_after(std::string_view text, std::string_view marker) {
  auto pos = text.find(marker);
  if (pos == std::string_view::npos) return std::nullopt;
  pos += marker.size();
  auto end = text.find('\n', pos);
  return std::string(text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) {
    s.replace(pos, from.size(), to);
  }
}

void require_nonempty(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorCode::EmptyScores, "no scores to aggregate");
}

bool safe_id(std::string_view id) {
  if (id.empty() || id == "." || id == "..") return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
  });
}

}  // namespace

double lexical_overlap(std::string_view a, std::string_view b) {
  auto wa = word_set(a), wb = word_set(b);
  if (wa.empty() && wb.empty()) return 1.0;
  std::size_t common = 0;
  for (const auto& w : wa) common += wb.count(w);
  return static_cast<double>(common) / static_cast<double>(wa.size() + wb.size() - common);
}

std::string LexicalOverlapEndpoint::complete(const std::string& prompt) {
  auto a = line_after(prompt, "Caption A:");
  auto b = line_after(prompt, "Caption B:");
  if (!a || !b) return "I cannot find two captions to compare.";
  return fmt::format("{:.6f}", lexical_overlap(*a, *b));
}

TokenBucket::TokenBucket(double tokens_per_second, double burst)
    : rate_(tokens_per_second), burst_(std::max(1.0, burst)), tokens_(burst_), last_(std::chrono::steady_clock::now()) {}

void TokenBucket::acquire() {
  if (rate_ <= 0.0) return;
  std::unique_lock lock(mutex_);
  for (;;) {
    auto now = std::chrono::steady_clock::now();
    double dt = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    tokens_ = std::min(burst_, tokens_ + dt * rate_);
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return;
    }
    auto wait = std::chrono::duration<double>((1.0 - tokens_) / rate_);
    lock.unlock();
    std::this_thread::sleep_for(wait);
    lock.lock();
  }
}

ReplyCache::ReplyCache(fs::path file) : file_(std::move(file)) {
  if (file_.empty() || !fs::exists(file_)) return;
  std::ifstream in(file_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("key") || !j.contains("reply")) continue;  // torn tail line
    entries_[j["key"].get<std::string>()] = Entry{j["reply"].get<std::string>(), j.value("retries", 0)};
  }
}

std::optional<ReplyCache::Entry> ReplyCache::get(const std::string& key) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ReplyCache::put(const std::string& key, const Entry& entry) {
  std::lock_guard lock(mutex_);
  entries_.insert_or_assign(key, entry);
  if (!file_.empty()) {
    if (file_.has_parent_path()) fs::create_directories(file_.parent_path());
    std::ofstream out(file_, std::ios::app);
    out << json{{"key", key}, {"reply", entry.reply}, {"retries", entry.retries}}.dump() << '\n';
  }
}

std::size_t ReplyCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

std::string ReplyCache::key(std::string_view caption, std::string_view target, std::string_view prompt_template) {
  return json::array({std::string(caption), std::string(target), fmt::format("{:016x}", fnv1a(prompt_template))})
      .dump();
}

double parse_similarity(std::string_view reply) {
  static const std::regex number(R"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)");
  std::string s(reply);
  std::smatch m;
  if (!std::regex_search(s, m, number)) {
    throw Error(ErrorCode::UnparseableReply, "judge reply contains no number: \"" + s.substr(0, 80) + "\"");
  }
  double v = std::stod(m.str());
  if (!(v >= 0.0 && v <= 1.0)) {
    throw Error(ErrorCode::OutOfRangeScore, fmt::format("judge score {} outside [0, 1]", m.str()));
  }
  return v;
}

JudgeClient::JudgeClient(std::shared_ptr<TextEndpoint> endpoint, JudgeOptions options,
                         std::shared_ptr<ReplyCache> cache, std::shared_ptr<TokenBucket> limiter)
    : endpoint_(std::move(endpoint)), options_(std::move(options)), cache_(std::move(cache)), limiter_(std::move(limiter)) {
  if (!endpoint_) throw Error(ErrorCode::InvalidArgument, "judge client needs an endpoint");
  if (options_.prompt_template.find("{caption}") == std::string::npos ||
      options_.prompt_template.find("{target}") == std::string::npos) {
    throw Error(ErrorCode::InvalidArgument, "judge template must contain {caption} and {target}");
  }
  if (options_.max_retries < 0) throw Error(ErrorCode::InvalidArgument, "max_retries must be >= 0");
}

std::string JudgeClient::render_prompt(std::string_view caption, std::string_view target) const {
  std::string out = options_.prompt_template;
  replace_all(out, "{caption}", caption);
  replace_all(out, "{target}", target);
  return out;
}

JudgeScore JudgeClient::judge(std::string_view caption, std::string_view target) const {
  if (caption.empty() || target.empty()) throw Error(ErrorCode::InvalidArgument, "judge needs non-empty texts");
  JudgeScore score;
  score.target_model = endpoint_->id();
  auto key = ReplyCache::key(caption, target, options_.prompt_template);
  if (cache_) {
    if (auto hit = cache_->get(key)) {
      score.raw_reply = hit->reply;
      score.retries = hit->retries;
      score.similarity = parse_similarity(hit->reply);
      score.cached = true;
      return score;
    }
  }
  auto prompt = render_prompt(caption, target);
  for (int attempt = 0;; ++attempt) {
    score.retries = attempt;
    try {
      if (limiter_) limiter_->acquire();
      score.raw_reply = endpoint_->complete(prompt);
      score.similarity = parse_similarity(score.raw_reply);
      break;
    } catch (const Error& e) {
      bool retryable = e.code() == ErrorCode::TransientFailure || e.code() == ErrorCode::UnparseableReply;
      if (!retryable || attempt >= options_.max_retries) {
        if (e.code() == ErrorCode::TransientFailure) {
          throw Error(ErrorCode::UnparseableReply,
                      fmt::format("no usable judge reply after {} attempts: {}", attempt + 1, e.what()));
        }
        throw;
      }
    }
  }
  if (cache_) cache_->put(key, {score.raw_reply, score.retries});
  return score;
}

double compute_asr(std::span<const double> scores, double threshold) {
  require_nonempty(scores);
  auto hits = std::count_if(scores.begin(), scores.end(), [&](double s) { return s > threshold; });
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

double avg_sim(std::span<const double> scores) {
  require_nonempty(scores);
  double sum = 0.0;
  for (double s : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

std::vector<attack::ImagePair> ingest_manifest(const fs::path& path, int resolution) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open manifest " + path.string());
  if (resolution < 1) throw Error(ErrorCode::InvalidArgument, "resolution must be positive");
  auto base = path.parent_path();
  std::vector<attack::ImagePair> out;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    auto fail = [&](const std::string& what) {
      throw Error(ErrorCode::MalformedRecord, fmt::format("{}:{}: {}", path.string(), line_no, what));
    };
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail("not a JSON object");
    for (const char* field : {"id", "image_path", "target_text"}) {
      if (!j.contains(field) || !j[field].is_string()) fail(fmt::format("missing string field '{}'", field));
    }
    attack::ImagePair pair;
    pair.id = j["id"].get<std::string>();
    pair.target_text = j["target_text"].get<std::string>();
    if (!safe_id(pair.id)) fail("id must be non-empty and use only [A-Za-z0-9._-]");
    if (pair.target_text.empty()) fail("empty target_text");
    if (!seen.insert(pair.id).second) {
      throw Error(ErrorCode::DuplicateId, fmt::format("{}:{}: duplicate id '{}'", path.string(), line_no, pair.id));
    }
    fs::path image_path = j["image_path"].get<std::string>();
    if (image_path.is_relative()) image_path = base / image_path;
    if (!fs::exists(image_path)) {
      throw Error(ErrorCode::MissingImage, fmt::format("{}:{}: image not found: {}", path.string(), line_no,
                                                       image_path.string()));
    }
    Image img = io::read_image(image_path);
    for (double v : img.values()) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw Error(ErrorCode::BadPixelRange, fmt::format("{}:{}: pixel value outside [0, 1]", path.string(), line_no));
      }
    }
    if (img.height() != resolution || img.width() != resolution) {
      img = io::quantize8(resize_bilinear(img, resolution, resolution));
    }
    pair.original = std::move(img);
    out.push_back(std::move(pair));
  }
  return out;
}

FixtureCaptionModel::FixtureCaptionModel(std::string target_id, const fs::path& captions_file)
    : target_(std::move(target_id)) {
  std::ifstream in(captions_file);
  if (!in) throw Error(ErrorCode::Io, "cannot open caption fixture " + captions_file.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("pair_id") || !j.contains("caption")) {
      throw Error(ErrorCode::MalformedRecord, fmt::format("{}:{}: bad caption record", captions_file.string(), line_no));
    }
    if (j.contains("target") && j["target"].get<std::string>() != target_) continue;
    captions_[j["pair_id"].get<std::string>()] = j["caption"].get<std::string>();
  }
}

FixtureCaptionModel::FixtureCaptionModel(std::string target_id, std::map<std::string, std::string> captions)
    : target_(std::move(target_id)), captions_(captions.begin(), captions.end()) {}

std::string FixtureCaptionModel::caption(const Image&, std::string_view pair_id, std::string_view) {
  auto it = captions_.find(pair_id);
  if (it == captions_.end()) {
    throw Error(ErrorCode::MissingArtifacts,
                fmt::format("no recorded caption for pair '{}' on target '{}'", pair_id, target_));
  }
  return it->second;
}

EvalReport evaluate(const fs::path& adversarial_dir, std::span<const std::shared_ptr<CaptionModel>> targets,
                    const JudgeClient& judge, const EvaluateOptions& options) {
  if (targets.empty()) throw Error(ErrorCode::InvalidArgument, "evaluate needs at least one target");
  if (!fs::is_directory(adversarial_dir)) {
    throw Error(ErrorCode::MissingArtifacts, "no adversarial directory at " + adversarial_dir.string());
  }

  struct PairDir {
    std::string id;
    std::string target_text;
    fs::path dir;
  };
  std::vector<PairDir> pairs;
  for (const auto& entry : fs::directory_iterator(adversarial_dir)) {
    if (!entry.is_directory() || !fs::exists(entry.path() / "pair.json")) continue;
    auto pj = io::read_json(entry.path() / "pair.json");
    pairs.push_back({pj.at("id").get<std::string>(), pj.at("target_text").get<std::string>(), entry.path()});
  }
  if (pairs.empty()) {
    throw Error(ErrorCode::MissingArtifacts, "no adversarial pairs under " + adversarial_dir.string());
  }
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  EvalReport report;
  report.threshold = options.threshold;
  report.sample_count = static_cast<int>(pairs.size());

  std::vector<std::optional<Image>> images(pairs.size());
  std::vector<std::string> load_errors(pairs.size());
  std::vector<double> l1s, l2s;
  int missing_delta = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto png = pairs[i].dir / "adversarial.png";
    try {
      images[i] = io::read_image(png);
    } catch (const std::exception& e) {
      load_errors[i] = e.what();
    }
    auto delta_path = pairs[i].dir / "delta.bin";
    if (fs::exists(delta_path)) {
      auto rec = io::read_delta(delta_path);
      auto imp = analysis::imperceptibility(rec.delta);
      l1s.push_back(imp.l1);
      l2s.push_back(imp.l2);
    } else {
      ++missing_delta;
    }
  }
  if (missing_delta > 0) {
    report.warnings.push_back(fmt::format("{} of {} pairs have no stored perturbation", missing_delta, pairs.size()));
  }
  if (!l1s.empty()) {
    report.imperceptibility = analysis::Imperceptibility{avg_sim(l1s), avg_sim(l2s)};
  } else {
    report.warnings.push_back("imperceptibility omitted: no perturbation records found");
  }

  const std::size_t n_items = pairs.size() * targets.size();
  report.items.resize(n_items);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < n_items;) {
      std::size_t pi = k / targets.size(), ti = k % targets.size();
      ItemResult& item = report.items[k];
      item.pair_id = pairs[pi].id;
      item.target_model = targets[ti]->id();
      if (!images[pi]) {
        item.error = "adversarial image unreadable: " + load_errors[pi];
        continue;
      }
      try {
        item.caption = targets[ti]->caption(*images[pi], item.pair_id, options.caption_prompt);
        auto s = judge.judge(item.caption, pairs[pi].target_text);
        s.pair_id = item.pair_id;
        s.target_model = item.target_model;
        item.score = std::move(s);
      } catch (const std::exception& e) {
        item.error = e.what();
      }
    }
  };
  int workers = std::max(1, options.workers);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  }

  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    TargetSummary sum;
    sum.target_model = targets[ti]->id();
    std::vector<double> sims;
    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
      const auto& item = report.items[pi * targets.size() + ti];
      if (item.score) {
        sims.push_back(item.score->similarity);
      } else {
        ++sum.excluded;
      }
    }
    sum.samples = static_cast<int>(sims.size());
    if (sims.empty()) {
      sum.asr = sum.avg_sim = std::nan("");
      report.warnings.push_back("target '" + sum.target_model + "' has no scored items");
    } else {
      sum.asr = compute_asr(sims, options.threshold);
      sum.avg_sim = avg_sim(sims);
    }
    report.targets.push_back(sum);
  }
  return report;
}

json report_to_json(const EvalReport& report) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json targets = json::array();
  for (const auto& t : report.targets) {
    targets.push_back({{"target", t.target_model}, {"asr", num(t.asr)}, {"avg_sim", num(t.avg_sim)},
                       {"samples", t.samples}, {"excluded", t.excluded}});
  }
  json items = json::array();
  json exclusions = json::array();
  for (const auto& it : report.items) {
    json j{{"pair_id", it.pair_id}, {"target", it.target_model}, {"caption", it.caption}};
    if (it.score) {
      j["similarity"] = it.score->similarity;
      j["raw_reply"] = it.score->raw_reply;
      j["retries"] = it.score->retries;
    } else {
      j["error"] = it.error;
      exclusions.push_back({{"pair_id", it.pair_id}, {"target", it.target_model}, {"error", it.error}});
    }
    items.push_back(std::move(j));
  }
  json out{{"schema", "saga.eval_report/1"},
           {"threshold", report.threshold},
           {"sample_count", report.sample_count},
           {"targets", targets},
           {"exclusions", exclusions},
           {"warnings", report.warnings},
           {"items", items}};
  if (report.imperceptibility) {
    out["imperceptibility"] = {{"l1", report.imperceptibility->l1}, {"l2", report.imperceptibility->l2}};
  } else {
    out["imperceptibility"] = nullptr;
  }
  return out;
}

std::string format_table_row(const EvalReport& report, std::string_view method) {
  auto cell = [](double v) { return std::isfinite(v) ? fmt::format("{:.2f}", v) : std::string("-"); };
  std::ostringstream os;
  os << "| " << method;
  for (const auto& t : report.targets) os << " | " << cell(t.asr) << " | " << cell(t.avg_sim);
  if (report.imperceptibility) {
    os << " | " << fmt::format("{:.3f}", report.imperceptibility->l1) << " | "
       << fmt::format("{:.3f}", report.imperceptibility->l2);
  } else {
    os << " | - | -";
  }
  os << " |";
  return os.str();
}

}  // namespace saga::eval
