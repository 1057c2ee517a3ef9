#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "saga/error.hpp"
#include "saga/io.hpp"
#include "saga/pipeline.hpp"
#include "tmpdir.hpp"

using namespace saga;
using namespace saga::pipeline;
using json = nlohmann::json;

namespace {

RunConfig demo_config(const testgen::TempDir& dir, int pairs = 2) {
  make_demo(dir.path, pairs, 7);
  auto cfg = load_config(dir / "config.json");
  cfg.attack.total_iterations = 60;
  cfg.attack.num_stages = 4;
  cfg.attack.per_stage = 2;
  return cfg;
}

std::map<std::string, std::string> tree_digest(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::sha256_file(e.path());
  return out;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("config round trip and validation") {
  RunConfig c;
  c.surrogates = default_surrogates();
  auto j = config_to_json(c);
  CHECK(config_to_json(config_from_json(j)) == j);
  CHECK_FALSE(j.contains("output_root"));

  auto with = [&](const char* ptr, json v) {
    auto copy = j;
    copy[json::json_pointer(ptr)] = std::move(v);
    return copy;
  };
  CHECK(code_of([&] { config_from_json(with("/colour", 1)); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { config_from_json(with("/study/imagez", 3)); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { config_from_json(with("/eval/judge/temperature", 0.1)); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { config_from_json(with("/epsilon", -1.0)); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { config_from_json(with("/mode", "everywhere")); }) != ErrorCode::AllZeroGrid);
  CHECK(code_of([&] { config_from_json(with("/remote/extractor_url", "http://127.0.0.1:1")); }) ==
        ErrorCode::InvalidConfig);
}

TEST_CASE("pair seeds") {
  CHECK(pair_seed(1, "a") == pair_seed(1, "a"));
  CHECK(pair_seed(1, "a") != pair_seed(1, "b"));
  CHECK(pair_seed(1, "a") != pair_seed(2, "a"));
}

TEST_CASE("attention cache") {
  testgen::TempDir dir;
  RunConfig c;
  auto ex = make_extractors(c);
  Image img = io::synthetic_image(48, 48, 3);
  auto first = pair_attention("img", img, ex, dir.path);
  bool any = false;
  for (const auto& e : fs::directory_iterator(dir.path)) any = any || e.is_regular_file();
  CHECK(any);
  auto second = pair_attention("img", img, ex, dir.path);
  CHECK(std::vector<double>(first.cells().begin(), first.cells().end()) ==
        std::vector<double>(second.cells().begin(), second.cells().end()));
}

TEST_CASE("attack command") {
  testgen::TempDir dir;
  auto cfg = demo_config(dir);
  std::ostringstream log;
  auto summary = cmd_attack(cfg, log);
  REQUIRE(summary.pairs.size() == 2);
  CHECK(summary.aborted() == 0);
  for (const auto& p : summary.pairs) {
    CHECK(p.status == "done");
    CHECK(p.iterations == 56);
    for (const char* f : {"adversarial.png", "delta.bin", "trace.jsonl", "schedule.json", "attention.map", "pair.json",
                          "done.json"})
      CHECK(fs::exists(dir.path / "out" / p.id / f));
    auto trace = io::read_records(dir.path / "out" / p.id / "trace.jsonl");
    CHECK(trace.size() == 56);
    auto delta = io::read_delta(dir.path / "out" / p.id / "delta.bin");
    auto adv = io::read_image(dir.path / "out" / p.id / "adversarial.png");
    CHECK(delta.delta.height() == adv.height());
  }

  SUBCASE("resume skips completed pairs") {
    auto again = cmd_attack(cfg, log);
    for (const auto& p : again.pairs) CHECK(p.status == "skipped");
  }
  SUBCASE("tampered artifacts are recomputed") {
    io::write_text(dir.path / "out" / "pair-001" / "trace.jsonl", "{}\n");
    auto again = cmd_attack(cfg, log);
    CHECK(again.pairs[0].status == "skipped");
    CHECK(again.pairs[1].status == "done");
  }
  SUBCASE("a changed config recomputes") {
    cfg.attack.seed = 8;
    auto again = cmd_attack(cfg, log);
    for (const auto& p : again.pairs) CHECK(p.status == "done");
  }
}

TEST_CASE("attack modes") {
  testgen::TempDir dir;
  auto cfg = demo_config(dir, 1);
  std::map<AttackMode, json> schedules;
  for (auto mode : {AttackMode::Saga, AttackMode::Random, AttackMode::Coldspot}) {
    cfg.mode = mode;
    cfg.output_root = (dir.path / std::string(to_string(mode))).string();
    std::ostringstream log;
    auto s = cmd_attack(cfg, log);
    CHECK(s.aborted() == 0);
    schedules[mode] = io::read_json(fs::path(cfg.output_root) / "pair-000" / "schedule.json");
    CHECK(io::read_json(fs::path(cfg.output_root) / "pair-000" / "pair.json").at("mode") == to_string(mode));
  }
  CHECK(schedules[AttackMode::Random].at("entries").size() == 1);
  CHECK(schedules[AttackMode::Random]["entries"][0].at("iterations") == 60);
  CHECK(schedules[AttackMode::Saga].at("entries").size() == 6);
  CHECK(schedules[AttackMode::Saga] != schedules[AttackMode::Coldspot]);
}

TEST_CASE("identical runs give identical trees") {
  testgen::TempDir dir;
  auto cfg = demo_config(dir);
  std::ostringstream log;
  cfg.output_root = (dir.path / "a").string();
  cmd_attack(cfg, log);
  cfg.output_root = (dir.path / "b").string();
  cfg.workers = 2;
  cmd_attack(cfg, log);
  auto a = tree_digest(dir.path / "a"), b = tree_digest(dir.path / "b");
  CHECK(a.size() > 10);
  for (auto& [name, digest] : a) {
    if (name == "config.json") continue;
    CHECK_MESSAGE(b[name] == digest, name);
  }
}

TEST_CASE("analysis and evaluation") {
  testgen::TempDir dir;
  auto cfg = demo_config(dir);
  cfg.study.crops_per_pair = 6;
  cfg.study.layers = {1, 17};
  std::ostringstream log;

  CHECK(code_of([&] { cmd_analyze("saturation", cfg, log); }) == ErrorCode::MissingArtifacts);
  cmd_attack(cfg, log);
  CHECK(code_of([&] { cmd_analyze("attention-shift", cfg, log); }) == ErrorCode::MissingArtifacts);
  CHECK(code_of([&] { cmd_analyze("histogram", cfg, log); }) == ErrorCode::InvalidArgument);

  auto sat = cmd_analyze("saturation", cfg, log);
  auto rows = io::read_records(sat.records.front(), "saga.saturation/1");
  CHECK(rows.size() == 112);

  auto corr = cmd_analyze("correlation", cfg, log);
  CHECK(io::read_records(corr.records.front()).size() == 2);
  CHECK(io::read_records(corr.records.back()).size() == 2 * 2 * 6);

  auto red = cmd_analyze("redistribution", cfg, log);
  CHECK(io::read_records(red.records.front()).size() == 6);

  auto report = cmd_evaluate(cfg, log);
  CHECK(fs::exists(dir.path / "out" / "report.json"));
  CHECK(fs::exists(dir.path / "out" / "report.md"));
  REQUIRE(report.targets.size() == 2);
  CHECK(report.targets[0].asr == 0.5);
  CHECK(report.targets[1].asr == 0.0);

  auto shift = cmd_analyze("attention-shift", cfg, log);
  CHECK(io::read_records(shift.records.front()).size() == 2);

  SUBCASE("plots") {
    auto out = dir.path / "plots";
    const std::pair<const char*, fs::path> kinds[] = {{"saturation", sat.records.front()},
                                                      {"correlation", corr.records.front()},
                                                      {"redistribution", red.records.front()},
                                                      {"shift", shift.records.front()}};
    for (const auto& [kind, file] : kinds) {
      std::vector<fs::path> files{file};
      auto svg = cmd_plot(kind, files, out);
      CHECK(fs::file_size(svg) > 500);
      std::ifstream in(svg);
      std::string head;
      std::getline(in, head);
      CHECK(head.find("<svg") != std::string::npos);
    }
    std::vector<fs::path> wrong{sat.records.front()};
    CHECK(code_of([&] { cmd_plot("shift", wrong, out); }) == ErrorCode::MalformedRecords);
    io::write_text(dir / "empty.jsonl", "");
    std::vector<fs::path> empty{dir / "empty.jsonl"};
    CHECK(code_of([&] { cmd_plot("saturation", empty, out); }) == ErrorCode::MalformedRecords);
    std::vector<fs::path> missing{dir / "nope.jsonl"};
    CHECK(code_of([&] { cmd_plot("saturation", missing, out); }) == ErrorCode::MissingArtifacts);
  }
  SUBCASE("evaluation is idempotent") {
    auto first = io::read_json(dir.path / "out" / "report.json");
    cmd_evaluate(cfg, log);
    auto second = io::read_json(dir.path / "out" / "report.json");
    for (auto* j : {&first, &second})
      for (auto& item : (*j)["items"]) item.erase("cached");
    CHECK(first == second);
  }
}
