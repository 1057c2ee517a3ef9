#include <doctest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "map_gen.hpp"
#include "saga/attack.hpp"
#include "saga/error.hpp"
#include "saga/io.hpp"
#include "saga/metrics.hpp"

using namespace saga;
using namespace saga::attack;

namespace {

constexpr double kEps = 16.0 / 255.0;
constexpr double kEta = 1.0 / 255.0;

attack::ImagePair lattice_pair(int h, int w, std::uint64_t seed) {
  return {"p", io::synthetic_image(h, w, seed), "basis:0"};
}

class FailingMember : public surrogate::Member {
 public:
  explicit FailingMember(int after) : after_(after) {}
  std::string id() const override { return "failing"; }
  int resolution() const override { return 0; }
  surrogate::Embedding encode_text(std::string_view) const override { return {1.0, 0.0}; }
  surrogate::Embedding encode_image(const Image&, const Rect&) const override { return {1.0, 0.0}; }
  surrogate::MemberResult similarity(const Image& x, const Rect&, std::span<const double>, bool) const override {
    if (calls_++ >= after_) throw Error(ErrorCode::EncoderUnavailable, "endpoint went away");
    return {0.5, Image(x.height(), x.width(), x.channels(), 1.0)};
  }

 private:
  int after_;
  mutable std::atomic<int> calls_{0};
};

}  // namespace

TEST_CASE("random_crop") {
  Rng rng(1);
  Rect hot{3, 5, 10, 12};
  SUBCASE("unit scale returns the region") { CHECK(random_crop(hot, 1.0, 1.0, rng) == hot); }
  SUBCASE("seeded streams repeat") {
    Rng a(42), b(42);
    for (int i = 0; i < 50; ++i) CHECK(random_crop(hot, 0.5, 1.0, a) == random_crop(hot, 0.5, 1.0, b));
  }
  SUBCASE("single cell") { CHECK(random_crop({4, 4, 1, 1}, 0.5, 0.5, rng) == Rect{4, 4, 1, 1}); }
  SUBCASE("always inside with the drawn scale") {
    for (int i = 0; i < 2000; ++i) {
      auto r = random_crop(hot, 0.5, 1.0, rng);
      CHECK(intersect(r, hot) == r);
      CHECK(r.height >= 5);
      CHECK(r.width >= 6);
    }
  }
  SUBCASE("offsets cover every feasible position") {
    std::set<std::pair<int, int>> seen;
    for (int i = 0; i < 4000; ++i) {
      auto r = random_crop({0, 0, 4, 4}, 0.5, 0.5, rng);
      seen.insert({r.top, r.left});
    }
    CHECK(seen.size() == 9);
  }
  SUBCASE("empty region") { CHECK_THROWS_AS(random_crop({0, 0, 0, 3}, 0.5, 1.0, rng), Error); }
}

TEST_CASE("ascend_step") {
  Image x(4, 4, 3, 0.5);
  Rect crop{1, 1, 2, 2};
  SUBCASE("zero gradient leaves the image unchanged") {
    Image y = x;
    ascend_step(y, crop, Image(2, 2, 3, 0.0), kEta, UpdateRule::Sign);
    CHECK(y == x);
  }
  SUBCASE("positive gradient adds one step inside the crop only") {
    Image y = x;
    ascend_step(y, crop, Image(2, 2, 3, 3.7), kEta, UpdateRule::Sign);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        for (int ch = 0; ch < 3; ++ch) CHECK(y.at(r, c, ch) == (crop.contains(Rect{r, c, 1, 1}) ? 0.5 + kEta : 0.5));
  }
  SUBCASE("raw rule adds step * g") {
    Image y = x, g(2, 2, 3);
    for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] = 0.01 * static_cast<double>(i) - 0.05;
    ascend_step(y, crop, g, kEta, UpdateRule::Raw);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c)
        for (int ch = 0; ch < 3; ++ch) CHECK(y.at(1 + r, 1 + c, ch) == 0.5 + kEta * g.at(r, c, ch));
  }
  SUBCASE("shape mismatch") { CHECK_THROWS_AS(ascend_step(x, crop, Image(3, 2, 3), kEta, UpdateRule::Sign), Error); }
}

TEST_CASE("project") {
  SUBCASE("budget clamp") {
    Image orig(1, 1, 3, 0.5), adv(1, 1, 3, 0.9);
    project(adv, orig, kEps);
    CHECK(adv.at(0, 0, 0) == 0.5 + kEps);
    CHECK(adv.at(0, 0, 0) == doctest::Approx(0.56275).epsilon(1e-5));
  }
  SUBCASE("interior point") {
    Image orig(1, 1, 3, 0.5), adv(1, 1, 3, 0.53);
    project(adv, orig, kEps);
    CHECK(adv.at(0, 0, 1) == 0.53);
  }
  SUBCASE("box clamp") {
    Image orig(1, 1, 3, 0.99), adv(1, 1, 3, 0.99 + kEps);
    project(adv, orig, kEps);
    CHECK(adv.at(0, 0, 2) == 1.0);
  }
  SUBCASE("idempotent") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-0.3, 1.3);
    Image orig(5, 5, 3), adv(5, 5, 3);
    for (std::size_t i = 0; i < orig.size(); ++i) orig.values()[i] = std::clamp(u(rng), 0.0, 1.0), adv.values()[i] = u(rng);
    project(adv, orig, kEps);
    Image again = adv;
    project(again, orig, kEps);
    CHECK(again == adv);
  }
}

TEST_CASE("run_attack closed form on the masked-mean stub") {
  auto pair = lattice_pair(48, 48, 5);
  attention::GridDims grid{12, 12};
  Rect hot_patch{2, 3, 4, 5};
  Rect hot_px = rescale(hot_patch, 12, 12, 48, 48);
  Image mask(48, 48, 1, 0.0);
  for (int y = hot_px.top; y < hot_px.bottom(); ++y)
    for (int x = hot_px.left; x < hot_px.right(); ++x) mask.at(y, x, 0) = 1.0;
  surrogate::Ensemble ens({surrogate::make_masked_mean_stub(mask)});
  auto schedule = hotspot::single_region_schedule(grid, hot_patch, 0.5, 16);
  AttackConfig cfg;
  cfg.scale_min = cfg.scale_max = 1.0;
  auto res = run_attack(pair, schedule, ens, cfg);
  REQUIRE_FALSE(res.aborted());
  REQUIRE(res.trace.records.size() == 16);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x)
      for (int c = 0; c < 3; ++c) {
        const double d = res.perturbation.delta.at(y, x, c);
        const double o = pair.original.at(y, x, c);
        if (hot_px.contains(Rect{y, x, 1, 1})) {
          CHECK(d == std::min(kEps, 1.0 - o));
        } else {
          CHECK(d == 0.0);
        }
      }
}

TEST_CASE("run_attack invariants") {
  auto pair = lattice_pair(64, 64, 9);
  std::mt19937_64 gen(4);
  auto map = testgen::random_map(gen, 16, 16);
  auto schedule = hotspot::build_schedule(map, {10, 3, 0.3, 120, hotspot::Mode::Hotspot});
  surrogate::Ensemble ens({surrogate::make_projection_stub(12, 8, 1), surrogate::make_projection_stub(7, 8, 2)});
  AttackConfig cfg;
  cfg.total_iterations = 120;
  cfg.seed = 17;
  cfg.check_invariants = true;

  Image covered(64, 64, 1, 0.0);
  int calls = 0;
  auto res = run_attack(pair, schedule, ens, cfg, [&](const IterationRecord& r, const Image& xo, const Image& d) {
    ++calls;
    for (std::size_t i = 0; i < d.size(); ++i) {
      REQUIRE(std::abs(d.values()[i]) <= kEps);
      REQUIRE(xo.values()[i] + d.values()[i] >= 0.0);
      REQUIRE(xo.values()[i] + d.values()[i] <= 1.0);
    }
    for (int y = r.crop.top; y < r.crop.bottom(); ++y)
      for (int x = r.crop.left; x < r.crop.right(); ++x) covered.at(y, x, 0) = 1.0;
  });
  REQUIRE_FALSE(res.aborted());
  CHECK(calls == schedule.assigned_iterations());
  CHECK(res.trace.records.size() == static_cast<std::size_t>(schedule.assigned_iterations()));
  CHECK(res.perturbation.linf() <= kEps);

  SUBCASE("lattice and locality") {
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        for (int c = 0; c < 3; ++c) {
          double d = res.perturbation.delta.at(y, x, c);
          CHECK(std::abs(d * 255.0 - std::round(d * 255.0)) < 1e-9);
          if (covered.at(y, x, 0) == 0.0) CHECK(d == 0.0);
        }
  }
  SUBCASE("8-bit raster round trip") {
    auto png = std::filesystem::temp_directory_path() / "saga_test_adv.png";
    io::write_png(png, res.adversarial);
    auto back = io::read_image(png);
    for (std::size_t i = 0; i < back.size(); ++i)
      CHECK(std::lround((back.values()[i] - pair.original.values()[i]) * 255.0) ==
            std::lround(res.perturbation.delta.values()[i] * 255.0));
    std::filesystem::remove(png);
  }
  SUBCASE("seed determinism") {
    auto again = run_attack(pair, schedule, ens, cfg);
    CHECK(again.adversarial == res.adversarial);
    cfg.seed = 18;
    auto other = run_attack(pair, schedule, ens, cfg);
    CHECK_FALSE(other.adversarial == res.adversarial);
  }
  SUBCASE("trace records") {
    for (std::size_t i = 0; i < res.trace.records.size(); ++i) {
      const auto& r = res.trace.records[i];
      CHECK(r.iteration == static_cast<int>(i) + 1);
      CHECK(r.saturation >= 0.0);
      CHECK(r.saturation <= 1.0);
      auto back = record_from_json(record_to_json(r));
      CHECK(back.crop == r.crop);
      CHECK(back.loss == r.loss);
    }
    CHECK(res.trace.records.back().saturation == analysis::budget_saturation(res.perturbation.delta, kEps));
  }
}

TEST_CASE("monotone loss on the linear stub with a fixed crop") {
  auto pair = lattice_pair(32, 32, 2);
  surrogate::Ensemble ens({surrogate::make_linear_stub(32, 4)});
  auto schedule = hotspot::whole_image_schedule({8, 8}, 40);
  AttackConfig cfg;
  cfg.scale_min = cfg.scale_max = 1.0;
  auto res = run_attack(pair, schedule, ens, cfg);
  for (std::size_t i = 1; i < res.trace.records.size(); ++i)
    CHECK(res.trace.records[i].loss >= res.trace.records[i - 1].loss - 1e-15);
}

TEST_CASE("random mode equals the degenerate one-stage schedule") {
  auto pair = lattice_pair(48, 48, 3);
  std::mt19937_64 gen(1);
  auto map = testgen::random_map(gen, 12, 12);
  surrogate::Ensemble ens({surrogate::make_projection_stub(8, 8, 5)});
  AttackConfig cfg;
  cfg.total_iterations = 30;
  cfg.seed = 4;
  auto a = run_attack(pair, hotspot::whole_image_schedule({12, 12}, 30), ens, cfg);
  auto b = run_attack(pair, hotspot::build_schedule(map, {1, 1, 0.3, 30, hotspot::Mode::Hotspot}), ens, cfg);
  CHECK(a.adversarial == b.adversarial);
}

TEST_CASE("gateway failure aborts with a partial trace") {
  auto pair = lattice_pair(32, 32, 1);
  surrogate::Ensemble ens({std::make_shared<FailingMember>(5)});
  AttackConfig cfg;
  auto res = run_attack(pair, hotspot::whole_image_schedule({8, 8}, 20), ens, cfg);
  REQUIRE(res.aborted());
  CHECK(res.failure->code() == ErrorCode::EncoderUnavailable);
  CHECK(res.trace.records.size() == 5);
  CHECK(res.perturbation.linf() <= kEps);
}

TEST_CASE("config validation") {
  AttackConfig c;
  CHECK_NOTHROW(c.validate());
  c.step_size = 0.5;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.total_iterations = 29;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.scale_min = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
}
