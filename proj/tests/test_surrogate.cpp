#include <doctest.h>

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "saga/error.hpp"
#include "saga/surrogate.hpp"

using namespace saga;
using namespace saga::surrogate;

namespace {

Image random_image(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w, 3);
  for (double& v : img.values()) v = u(rng);
  return img;
}

double l2(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double relative_error(const Image& got, const Image& want) {
  std::vector<double> diff(got.size());
  for (std::size_t i = 0; i < got.size(); ++i) diff[i] = got.values()[i] - want.values()[i];
  return l2(diff) / std::max(l2(want.values()), 1e-300);
}

class ScaledMember : public EmbeddingMember {
 public:
  ScaledMember(std::shared_ptr<const Member> inner, double scale)
      : inner_(std::dynamic_pointer_cast<const EmbeddingMember>(std::move(inner))), scale_(scale) {}
  std::string id() const override { return "scaled"; }
  int resolution() const override { return inner_->resolution(); }
  Embedding encode_text(std::string_view t) const override { return inner_->encode_text(t); }
  Embedding raw_image_embedding(const Image& x, const Rect& o) const override {
    auto e = inner_->raw_image_embedding(x, o);
    for (double& v : e) v *= scale_;
    return e;
  }
  Image raw_vjp(const Image& x, const Rect& o, std::span<const double> cot) const override {
    auto g = inner_->raw_vjp(x, o, cot);
    for (double& v : g.values()) v *= scale_;
    return g;
  }

 private:
  std::shared_ptr<const EmbeddingMember> inner_;
  double scale_;
};

class FrozenMember : public Member {
 public:
  std::string id() const override { return "frozen"; }
  int resolution() const override { return 0; }
  bool differentiable() const override { return false; }
  Embedding encode_text(std::string_view) const override { return {1.0, 0.0}; }
  Embedding encode_image(const Image&, const Rect&) const override { return {1.0, 0.0}; }
  MemberResult similarity(const Image&, const Rect&, std::span<const double>, bool) const override { return {1.0, {}}; }
};

}  // namespace

TEST_CASE("encode_text") {
  Ensemble e({make_projection_stub(8, 6, 1)});
  auto t = e.encode_text("basis:3");
  REQUIRE(t.size() == 1);
  CHECK(t[0] == Embedding{0, 0, 0, 1, 0, 0});
  auto a = e.encode_text("a dog on a beach"), b = e.encode_text("a dog on a beach");
  CHECK(a == b);
  CHECK(l2(a[0]) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(e.encode_text(""), Error);
}

TEST_CASE("surrogate_loss examples") {
  Image ones(4, 4, 3, 1.0), zeros(4, 4, 3, 0.0);
  auto all = make_masked_mean_stub(Image(4, 4, 1, 1.0));
  Ensemble one({all});
  auto t = one.encode_text("anything");
  CHECK(one.surrogate_loss(ones, t) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(one.surrogate_loss(zeros, t) == 0.0);

  Image red(4, 4, 3, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) red.at(y, x, 0) = 1.0;
  Image mask_r(4, 4, 3, 0.0), mask_g(4, 4, 3, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) mask_r.at(y, x, 0) = 1.0, mask_g.at(y, x, 1) = 1.0;
  Ensemble two({make_masked_mean_stub(mask_r), make_masked_mean_stub(mask_g)});
  CHECK(two.surrogate_loss(red, two.encode_text("x")) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("loss_and_gradient closed forms") {
  SUBCASE("mean of the crop has constant gradient 1/n") {
    std::mt19937_64 rng(1);
    auto crop = random_image(rng, 5, 6);
    Ensemble e({make_masked_mean_stub(Image(5, 6, 1, 1.0))});
    auto r = e.loss_and_gradient(crop, e.encode_text("t"));
    for (double g : r.gradient.values()) CHECK(g == doctest::Approx(1.0 / 90).epsilon(1e-14));
    CHECK(r.gradient.same_shape(crop));
  }
  SUBCASE("quadratic stub is stationary at zero") {
    Ensemble e({make_quadratic_stub(0)});
    auto r = e.loss_and_gradient(Image(6, 6, 3, 0.0), e.encode_text("t"));
    for (double g : r.gradient.values()) CHECK(g == 0.0);
  }
  SUBCASE("masked-mean with a partial mask") {
    Image mask(8, 8, 1, 0.0);
    for (int y = 2; y < 5; ++y)
      for (int x = 1; x < 3; ++x) mask.at(y, x, 0) = 1.0;
    Ensemble e({make_masked_mean_stub(mask)});
    Image crop(8, 8, 3, 0.25);
    auto r = e.loss_and_gradient(crop, e.encode_text("t"));
    CHECK(r.loss == doctest::Approx(0.25).epsilon(1e-15));
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        for (int c = 0; c < 3; ++c) CHECK(r.gradient.at(y, x, c) == (mask.at(y, x, 0) > 0 ? 1.0 / 18 : 0.0));
  }
  SUBCASE("masked-mean reads the canvas at the crop origin") {
    Image mask(8, 8, 1, 0.0);
    mask.at(5, 6, 0) = 1.0;
    Ensemble e({make_masked_mean_stub(mask)});
    Image crop(3, 3, 3, 0.0);
    crop.at(1, 2, 0) = 0.9;
    crop.at(1, 2, 1) = 0.9;
    crop.at(1, 2, 2) = 0.9;
    CHECK(e.surrogate_loss(crop, Rect{4, 4, 3, 3}, e.encode_text("t")) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK_THROWS_AS(e.surrogate_loss(crop, Rect{6, 6, 3, 3}, e.encode_text("t")), Error);
  }
}

TEST_CASE("finite differences on the smooth stub") {
  std::mt19937_64 rng(77);
  Ensemble e({make_projection_stub(16, 12, 1, "p16"), make_projection_stub(8, 12, 2, "p8"),
              make_projection_stub(5, 12, 3, "p5")});
  auto t = e.encode_text("a cat on a sofa");
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    auto crop = random_image(rng, 8, 8);
    auto r = e.loss_and_gradient(crop, t);
    auto fd = oracle::central_difference([&](const Image& x) { return e.surrogate_loss(x, t); }, crop, 1e-4);
    worst = std::max(worst, relative_error(r.gradient, fd));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("linear stub") {
  std::mt19937_64 rng(5);
  Ensemble e({make_linear_stub(6, 9)});
  auto t = e.encode_text("t");
  auto crop = random_image(rng, 6, 6);
  auto r = e.loss_and_gradient(crop, t);
  SUBCASE("finite differences") {
    auto fd = oracle::central_difference([&](const Image& x) { return e.surrogate_loss(x, t); }, crop, 1e-4);
    CHECK(relative_error(r.gradient, fd) <= 1e-8);
  }
  SUBCASE("first-order change is exact") {
    Image shifted = crop;
    double dot = 0;
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (std::size_t i = 0; i < crop.size(); ++i) {
      double d = u(rng);
      shifted.values()[i] += d;
      dot += r.gradient.values()[i] * d;
    }
    CHECK(e.surrogate_loss(shifted, t) - r.loss == doctest::Approx(dot).epsilon(1e-10));
  }
  SUBCASE("resized input still matches finite differences") {
    auto big = random_image(rng, 9, 11);
    auto g = e.loss_and_gradient(big, t);
    auto fd = oracle::central_difference([&](const Image& x) { return e.surrogate_loss(x, t); }, big, 1e-4);
    CHECK(relative_error(g.gradient, fd) <= 1e-8);
  }
}

TEST_CASE("ensemble properties") {
  std::mt19937_64 rng(8);
  auto p1 = make_projection_stub(8, 10, 1, "a"), p2 = make_projection_stub(12, 10, 2, "b");
  auto q = make_quadratic_stub(4);
  Ensemble all({p1, p2, q});
  auto crop = random_image(rng, 7, 9);
  auto t = all.encode_text("target");
  double mean = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    Ensemble single({i == 0 ? p1 : i == 1 ? p2 : q});
    mean += single.surrogate_loss(crop, single.encode_text("target")) / 3;
  }
  CHECK(std::abs(all.surrogate_loss(crop, t) - mean) <= 1e-7);

  Ensemble scaled({std::make_shared<ScaledMember>(p1, 7.5)}), plain({p1});
  CHECK(scaled.surrogate_loss(crop, scaled.encode_text("target")) ==
        doctest::Approx(plain.surrogate_loss(crop, plain.encode_text("target"))).epsilon(1e-12));

  double l = all.surrogate_loss(crop, t);
  CHECK(l >= -1.0);
  CHECK(l <= 1.0);
  for (const auto& emb : t) CHECK(l2(emb) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("gateway errors") {
  auto code_of = [](const std::function<void()>& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Io;
  };
  CHECK(code_of([] { make_stub_encoder("foo", nlohmann::json::object()); }) == ErrorCode::UnknownKind);
  CHECK(code_of([] { Ensemble e(std::vector<std::shared_ptr<const Member>>{}); }) == ErrorCode::EncoderUnavailable);
  Ensemble frozen({std::make_shared<FrozenMember>()});
  auto t = frozen.encode_text("x");
  CHECK(frozen.surrogate_loss(Image(2, 2, 3, 0.5), t) == 1.0);
  CHECK(code_of([&] { frozen.loss_and_gradient(Image(2, 2, 3, 0.5), t); }) == ErrorCode::NonDifferentiableMember);
  Ensemble one({make_projection_stub(4, 4, 1)});
  std::vector<Embedding> wrong{{1.0, 0.0}};
  CHECK(code_of([&] { one.surrogate_loss(Image(4, 4, 3, 0.5), wrong); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("ensemble_from_json") {
  auto e = ensemble_from_json(nlohmann::json::parse(R"([
    {"kind": "projection", "resolution": 8, "dim": 6, "seed": 4},
    {"kind": "masked-mean", "canvas": [10, 10], "mask_rect": {"top": 1, "left": 1, "height": 3, "width": 3}},
    {"kind": "linear", "resolution": 5, "seed": 2},
    {"kind": "quadratic"}
  ])"));
  CHECK(e.size() == 4);
  CHECK(e.member(0).resolution() == 8);
  CHECK(e.member(1).resolution() == 0);
}
