#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "saga/attention.hpp"
#include "saga/error.hpp"
#include "saga/io.hpp"

using namespace saga;
using namespace saga::attention;

namespace {

double sum(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

// One layer, 2x2 grid at prompt positions 2..5 of a 6-token prompt.
TokenAttentionTrace toy_trace(const std::vector<std::array<double, 4>>& vision_rows, int layers = 1) {
  TokenAttentionTrace tr;
  tr.num_layers = layers;
  tr.prompt_length = 6;
  tr.generated_length = static_cast<int>(vision_rows.size());
  tr.vision_start = 2;
  tr.grid = {2, 2};
  for (int t = 1; t <= tr.generated_length; ++t) tr.valid_tokens.push_back(t);
  tr.rows.resize(layers);
  for (int l = 0; l < layers; ++l) {
    for (std::size_t t = 0; t < vision_rows.size(); ++t) {
      std::vector<double> row(tr.prompt_length + t, 0.05);
      for (int i = 0; i < 4; ++i) row[1 + i] = vision_rows[t][i];
      tr.rows[l].push_back(row);
    }
  }
  return tr;
}

void require_map(const AttentionMap& m, const std::vector<double>& expected, double tol = 1e-12) {
  REQUIRE(m.cells().size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(m.cells()[i] == doctest::Approx(expected[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("normalize_spatial") {
  SUBCASE("uniform 24x24 grid gives 1/576 per cell, about 0.0017") {
    std::vector<double> ones(576, 1.0);
    auto m = normalize_spatial({24, 24}, ones);
    for (double v : m.cells()) CHECK(v == 1.0 / 576.0);
    CHECK(std::round(m.at(0, 0) * 1e4) / 1e4 == doctest::Approx(0.0017));
  }
  SUBCASE("proportional scaling") { require_map(normalize_spatial({2, 2}, std::vector<double>{2, 0, 0, 2}), {0.5, 0, 0, 0.5}); }
  SUBCASE("all zero grid") {
    CHECK_THROWS_AS(normalize_spatial({2, 2}, std::vector<double>{0, 0, 0, 0}), Error);
    try {
      normalize_spatial({2, 2}, std::vector<double>{0, 0, 0, 0});
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::AllZeroGrid);
    }
  }
  SUBCASE("size mismatch") { CHECK_THROWS_AS(normalize_spatial({2, 3}, std::vector<double>{1, 1}), Error); }
}

TEST_CASE("AttentionMap rejects unnormalised or negative grids") {
  CHECK_THROWS_AS(AttentionMap({1, 2}, {0.5, 0.6}), Error);
  CHECK_THROWS_AS(AttentionMap({1, 2}, {1.5, -0.5}), Error);
  CHECK_NOTHROW(AttentionMap({1, 2}, {0.5, 0.5 + 1e-7}));
}

TEST_CASE("project_token_attention") {
  auto tr = toy_trace({{0.2, 0.1, 0.1, 0.2}});
  REQUIRE_NOTHROW(tr.validate());
  SUBCASE("restriction then normalisation") { require_map(project_token_attention(tr, 1, 1), {1.0 / 3, 1.0 / 6, 1.0 / 6, 1.0 / 3}); }
  SUBCASE("uniform vision row") {
    auto u = toy_trace({{0.3, 0.3, 0.3, 0.3}});
    require_map(project_token_attention(u, 1, 1), {0.25, 0.25, 0.25, 0.25});
  }
  SUBCASE("layer out of range") {
    auto check_code = [&](int layer) {
      try {
        project_token_attention(tr, layer, 1);
        FAIL("expected LayerOutOfRange");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::LayerOutOfRange);
      }
    };
    check_code(2);
    check_code(0);
  }
  SUBCASE("token not valid") {
    tr.valid_tokens = {};
    try {
      project_token_attention(tr, 1, 1);
      FAIL("expected TokenNotValid");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::TokenNotValid);
    }
  }
  SUBCASE("zero vision mass") {
    auto z = toy_trace({{0, 0, 0, 0}});
    try {
      project_token_attention(z, 1, 1);
      FAIL("expected AllZeroGrid");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::AllZeroGrid);
    }
  }
}

TEST_CASE("aggregate_tokens and ensemble_attention") {
  AttentionMap a({2, 2}, {1, 0, 0, 0}, "a"), b({2, 2}, {0, 0, 0, 1}, "b"), c({2, 2}, {0, 1, 0, 0}, "c");
  SUBCASE("single map is unchanged") {
    std::vector<AttentionMap> one{a};
    require_map(aggregate_tokens(one), {1, 0, 0, 0});
  }
  SUBCASE("elementwise mean") {
    std::vector<AttentionMap> two{a, b};
    require_map(aggregate_tokens(two), {0.5, 0, 0, 0.5});
  }
  SUBCASE("empty") {
    std::vector<AttentionMap> none;
    try {
      aggregate_tokens(none);
      FAIL("expected EmptyTokenSet");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::EmptyTokenSet);
    }
  }
  SUBCASE("ensemble of identical maps") {
    AttentionMap m({2, 2}, {0.1, 0.2, 0.3, 0.4});
    std::vector<AttentionMap> three{m, m, m};
    require_map(ensemble_attention(three), {0.1, 0.2, 0.3, 0.4});
  }
  SUBCASE("ensemble of disjoint point masses") {
    std::vector<AttentionMap> three{a, b, c};
    auto e = ensemble_attention(three);
    require_map(e, {1.0 / 3, 1.0 / 3, 0, 1.0 / 3});
    CHECK(e.source_tag() == "a+b+c");
  }
  SUBCASE("grid mismatch") {
    std::vector<AttentionMap> mixed{AttentionMap({24, 24}, std::vector<double>(576, 1.0 / 576)),
                                    AttentionMap({16, 16}, std::vector<double>(256, 1.0 / 256))};
    try {
      ensemble_attention(mixed);
      FAIL("expected GridMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::GridMismatch);
    }
  }
  SUBCASE("permutation invariance") {
    AttentionMap p({2, 2}, {0.1, 0.2, 0.3, 0.4}), q({2, 2}, {0.4, 0.3, 0.2, 0.1}), r({2, 2}, {0.7, 0.1, 0.1, 0.1});
    std::vector<AttentionMap> o1{p, q, r}, o2{r, p, q};
    auto x = aggregate_tokens(o1), y = aggregate_tokens(o2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(x.cells()[i] == doctest::Approx(y.cells()[i]).epsilon(1e-15));
  }
}

TEST_CASE("extract_attention_map") {
  ExtractorProfile prof{"toy", 1, 1, "Describe this image."};
  SUBCASE("single valid token equals its projection") {
    auto tr = toy_trace({{0.2, 0.1, 0.1, 0.2}, {0.4, 0.0, 0.1, 0.0}});
    tr.valid_tokens = {1};
    require_map(extract_attention_map(tr, prof), {1.0 / 3, 1.0 / 6, 1.0 / 6, 1.0 / 3});
  }
  SUBCASE("two tokens give the mean of their projections") {
    auto tr = toy_trace({{0.2, 0.1, 0.1, 0.2}, {0.4, 0.0, 0.1, 0.0}});
    auto m = extract_attention_map(tr, prof);
    require_map(m, {(1.0 / 3 + 0.8) / 2, 1.0 / 12, (1.0 / 6 + 0.2) / 2, 1.0 / 6});
    CHECK(m.source_tag() == "toy@1");
  }
  SUBCASE("per-token normalisation differs from pooling raw rows") {
    auto tr = toy_trace({{0.2, 0.1, 0.1, 0.2}, {0.4, 0.0, 0.1, 0.0}});
    auto m = extract_attention_map(tr, prof);
    std::vector<double> pooled{0.6, 0.1, 0.2, 0.2};
    auto wrong = normalize_spatial({2, 2}, pooled);
    double diff = 0;
    for (std::size_t i = 0; i < 4; ++i) diff += std::abs(m.cells()[i] - wrong.cells()[i]);
    CHECK(diff > 1e-3);
  }
  SUBCASE("no valid tokens") {
    auto tr = toy_trace({{0.2, 0.1, 0.1, 0.2}});
    tr.valid_tokens.clear();
    try {
      extract_attention_map(tr, prof);
      FAIL("expected EmptyTokenSet");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::EmptyTokenSet);
    }
  }
}

TEST_CASE("trace validation") {
  auto tr = toy_trace({{0.2, 0.1, 0.1, 0.2}});
  SUBCASE("vision block outside prompt") {
    tr.vision_start = 4;
    CHECK_THROWS_AS(tr.validate(), Error);
  }
  SUBCASE("negative weight") {
    tr.rows[0][0][0] = -0.1;
    CHECK_THROWS_AS(tr.validate(), Error);
  }
  SUBCASE("json round trip") {
    auto back = trace_from_json(trace_to_json(tr));
    CHECK(back.rows == tr.rows);
    CHECK(back.valid_tokens == tr.valid_tokens);
    CHECK(back.vision_start == tr.vision_start);
  }
}

TEST_CASE("default valid tokens drop special tokens") {
  CHECK(default_valid_tokens({false, true, false, true}) == std::vector<int>{1, 3});
}

TEST_CASE("profiles") {
  CHECK(find_profile("llava-7b").best_layer == 17);
  CHECK(find_profile("llava-7b").num_layers == 32);
  CHECK(find_profile("llava-13b").best_layer == 6);
  CHECK(find_profile("qwen3-vl-8b").best_layer == 29);
  CHECK(find_profile("llava-7b").prompt == "Describe this image.");
  for (const auto& p : known_profiles()) CHECK((p.best_layer >= 1 && p.best_layer <= p.num_layers));
  CHECK_THROWS_AS(find_profile("nope"), Error);
}

TEST_CASE("stub provider") {
  auto img = io::synthetic_image(224, 224, 7);
  StubTraceProvider a(find_profile("llava-7b"), 3), b(find_profile("llava-7b"), 3);
  auto ta = a.trace(img, "Describe this image.");
  REQUIRE_NOTHROW(ta.validate());
  CHECK(ta.grid.rows == 24);
  CHECK(ta.grid.cols == 24);
  CHECK(ta.valid_tokens.size() == static_cast<std::size_t>(ta.generated_length - 1));
  auto ma = extract_attention_map(ta, a.profile());
  auto mb = extract_attention_map(b.trace(img, "Describe this image."), b.profile());
  CHECK(ma.cells().size() == 576);
  CHECK(sum(ma.cells()) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::equal(ma.cells().begin(), ma.cells().end(), mb.cells().begin()));

  SUBCASE("layer-invariant option repeats the best layer") {
    StubTraceOptions opts;
    opts.layer_invariant = true;
    StubTraceProvider inv(find_profile("llava-7b"), 3, opts);
    auto t = inv.trace(img, "Describe this image.");
    auto l1 = extract_layer_map(t, 1), l17 = extract_layer_map(t, 17);
    CHECK(std::equal(l1.cells().begin(), l1.cells().end(), l17.cells().begin()));
  }
}

TEST_CASE("map cache file") {
  auto dir = std::filesystem::temp_directory_path() / "saga_test_mapcache";
  std::filesystem::create_directories(dir);
  AttentionMap m({2, 3}, {0.1, 0.2, 0.3, 0.1, 0.2, 0.1}, "llava-7b@17");
  auto path = dir / cache_key("img-1", "llava-7b", 17);
  write_map_file(path, m, 17);
  auto back = read_map_file(path);
  CHECK(back.layer == 17);
  CHECK(back.map.source_tag() == "llava-7b@17");
  CHECK(std::equal(m.cells().begin(), m.cells().end(), back.map.cells().begin()));

  SUBCASE("corrupted payload fails the sum check") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-8, std::ios::end);
    double bad = 0.9;
    f.write(reinterpret_cast<const char*>(&bad), sizeof bad);
    f.close();
    CHECK_THROWS_AS(read_map_file(path), Error);
  }
  std::filesystem::remove_all(dir);
}
