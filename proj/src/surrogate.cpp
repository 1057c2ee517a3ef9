#include "saga/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "saga/error.hpp"
#include "saga/rng.hpp"

namespace saga::surrogate {

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "embedding dimensions differ");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::InvalidArgument, "cosine of a zero vector");
  return dot / std::sqrt(na * nb);
}

Embedding normalized(std::span<const double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n == 0.0) throw Error(ErrorCode::NonDifferentiableMember, "zero embedding cannot be normalised");
  Embedding out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

// ---- EmbeddingMember ------------------------------------------------------

Embedding EmbeddingMember::encode_image(const Image& input, const Rect& origin) const {
  return normalized(raw_image_embedding(input, origin));
}

MemberResult EmbeddingMember::similarity(const Image& input, const Rect& origin, std::span<const double> target,
                                         bool with_gradient) const {
  const Embedding raw = raw_image_embedding(input, origin);
  if (raw.size() != target.size()) throw Error(ErrorCode::ShapeMismatch, "target embedding has wrong dimension");
  double norm = 0;
  for (double v : raw) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw Error(ErrorCode::NonDifferentiableMember, id() + " produced a zero embedding");
  double cos = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) cos += raw[i] / norm * target[i];
  MemberResult out{cos, {}};
  if (!with_gradient) return out;
  // d cos / d raw = (t - cos * u) / |raw|
  std::vector<double> cot(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) cot[i] = (target[i] - cos * raw[i] / norm) / norm;
  out.gradient = raw_vjp(input, origin, cot);
  return out;
}

namespace {

// Members whose cosine against the "basis:0" direction is a closed-form
// scalar s(x); the image embedding is (s, sqrt(1 - s^2)).
class ScalarStub : public Member {
 public:
  explicit ScalarStub(std::string id) : id_(std::move(id)) {}
  std::string id() const override { return id_; }

  Embedding encode_text(std::string_view text) const override {
    if (text.empty()) throw Error(ErrorCode::InvalidArgument, "empty target text");
    return {1.0, 0.0};
  }

  Embedding encode_image(const Image& input, const Rect& origin) const override {
    const double s = std::clamp(value(input, origin), -1.0, 1.0);
    return {s, std::sqrt(std::max(0.0, 1.0 - s * s))};
  }

  MemberResult similarity(const Image& input, const Rect& origin, std::span<const double> target,
                          bool with_gradient) const override {
    if (target.size() != 2) throw Error(ErrorCode::ShapeMismatch, "scalar stubs use 2-d embeddings");
    const double s = value(input, origin);
    const double c = std::sqrt(std::max(0.0, 1.0 - s * s));
    MemberResult out{target[0] * s + target[1] * c, {}};
    if (!with_gradient) return out;
    double scale = target[0];
    if (target[1] != 0.0) {
      if (c == 0.0) throw Error(ErrorCode::NonDifferentiableMember, id_ + " at |s| = 1 off the basis target");
      scale -= target[1] * s / c;
    }
    out.gradient = value_gradient(input, origin);
    for (double& g : out.gradient.values()) g *= scale;
    return out;
  }

 protected:
  virtual double value(const Image& input, const Rect& origin) const = 0;
  virtual Image value_gradient(const Image& input, const Rect& origin) const = 0;

 private:
  std::string id_;
};

class MaskedMeanStub final : public ScalarStub {
 public:
  MaskedMeanStub(Image mask, std::string id) : ScalarStub(std::move(id)), mask_(std::move(mask)) {
    if (mask_.empty() || (mask_.channels() != 1 && mask_.channels() != 3))
      throw Error(ErrorCode::InvalidArgument, "mask must have one or three channels");
    for (double v : mask_.values())
      if (!(v >= 0.0)) throw Error(ErrorCode::InvalidArgument, "mask weights must be nonnegative");
  }
  int resolution() const override { return 0; }

 protected:
  double weight(const Rect& origin, int y, int x, int c) const {
    return mask_.at(origin.top + y, origin.left + x, mask_.channels() == 1 ? 0 : c);
  }
  void check(const Image& input, const Rect& origin) const {
    if (input.height() != origin.height || input.width() != origin.width ||
        !origin.inside(mask_.height(), mask_.width()))
      throw Error(ErrorCode::ShapeMismatch, "crop does not lie on the mask canvas");
  }
  double mass(const Image& input, const Rect& origin) const {
    double m = 0;
    for (int y = 0; y < input.height(); ++y)
      for (int x = 0; x < input.width(); ++x)
        for (int c = 0; c < input.channels(); ++c) m += weight(origin, y, x, c);
    return m;
  }
  double value(const Image& input, const Rect& origin) const override {
    check(input, origin);
    const double m = mass(input, origin);
    if (m == 0.0) return 0.0;
    double acc = 0;
    for (int y = 0; y < input.height(); ++y)
      for (int x = 0; x < input.width(); ++x)
        for (int c = 0; c < input.channels(); ++c) acc += weight(origin, y, x, c) * input.at(y, x, c);
    return acc / m;
  }
  Image value_gradient(const Image& input, const Rect& origin) const override {
    check(input, origin);
    Image g(input.height(), input.width(), input.channels());
    const double m = mass(input, origin);
    if (m == 0.0) return g;
    for (int y = 0; y < input.height(); ++y)
      for (int x = 0; x < input.width(); ++x)
        for (int c = 0; c < input.channels(); ++c) g.at(y, x, c) = weight(origin, y, x, c) / m;
    return g;
  }

 private:
  Image mask_;
};

class LinearStub final : public ScalarStub {
 public:
  LinearStub(Image direction, std::string id) : ScalarStub(std::move(id)), v_(std::move(direction)) {
    if (v_.empty() || v_.height() != v_.width())
      throw Error(ErrorCode::InvalidArgument, "linear stub direction must be square and non-empty");
    double l1 = 0;
    for (double x : v_.values()) l1 += std::abs(x);
    if (l1 == 0.0) throw Error(ErrorCode::InvalidArgument, "zero direction");
    for (double& x : v_.values()) x /= l1;
  }
  int resolution() const override { return v_.height(); }

 protected:
  double value(const Image& input, const Rect&) const override {
    if (!input.same_shape(v_)) throw Error(ErrorCode::ShapeMismatch, "input does not match direction");
    double acc = 0;
    for (std::size_t i = 0; i < input.size(); ++i) acc += v_.values()[i] * input.values()[i];
    return acc;
  }
  Image value_gradient(const Image& input, const Rect&) const override {
    if (!input.same_shape(v_)) throw Error(ErrorCode::ShapeMismatch, "input does not match direction");
    return v_;
  }

 private:
  Image v_;
};

class QuadraticStub final : public ScalarStub {
 public:
  QuadraticStub(int resolution, std::string id) : ScalarStub(std::move(id)), res_(resolution) {
    if (resolution < 0) throw Error(ErrorCode::InvalidArgument, "negative resolution");
  }
  int resolution() const override { return res_; }

 protected:
  double value(const Image& input, const Rect&) const override {
    double acc = 0;
    for (double x : input.values()) acc += x * x;
    return acc / static_cast<double>(input.size());
  }
  Image value_gradient(const Image& input, const Rect&) const override {
    Image g = input;
    const double n = static_cast<double>(input.size());
    for (double& x : g.values()) x = 2.0 * x / n;
    return g;
  }

 private:
  int res_;
};

class ProjectionStub final : public EmbeddingMember {
 public:
  ProjectionStub(int resolution, int dim, std::uint64_t seed, std::string id)
      : res_(resolution), dim_(dim), seed_(seed), id_(std::move(id)) {
    if (resolution < 1 || dim < 2) throw Error(ErrorCode::InvalidArgument, "projection stub needs res >= 1, dim >= 2");
    const std::size_t n = static_cast<std::size_t>(res_) * res_ * 3;
    Rng rng(derive_seed(seed_, id_ + "/weights"));
    const double gain = 2.0 / std::sqrt(static_cast<double>(n));
    weights_.resize(n * dim_);
    for (double& w : weights_) w = gain * standard_normal(rng);
    bias_.resize(dim_);
    for (double& b : bias_) b = 0.1 * standard_normal(rng);
  }

  std::string id() const override { return id_; }
  int resolution() const override { return res_; }

  Embedding encode_text(std::string_view text) const override {
    if (text.empty()) throw Error(ErrorCode::InvalidArgument, "empty target text");
    constexpr std::string_view prefix = "basis:";
    if (text.starts_with(prefix)) {
      const int i = std::stoi(std::string(text.substr(prefix.size())));
      if (i < 0 || i >= dim_) throw Error(ErrorCode::InvalidArgument, "basis index outside embedding");
      Embedding e(dim_, 0.0);
      e[i] = 1.0;
      return e;
    }
    Rng rng(derive_seed(seed_, id_ + "/text/" + std::string(text)));
    Embedding e(dim_);
    for (double& v : e) v = standard_normal(rng);
    return normalized(e);
  }

  Embedding raw_image_embedding(const Image& input, const Rect&) const override {
    check(input);
    const std::size_t n = input.size();
    Embedding out(dim_);
    for (int k = 0; k < dim_; ++k) {
      const double* w = weights_.data() + static_cast<std::size_t>(k) * n;
      double acc = bias_[k];
      for (std::size_t i = 0; i < n; ++i) acc += w[i] * input.values()[i];
      out[k] = std::tanh(acc);
    }
    return out;
  }

  Image raw_vjp(const Image& input, const Rect& origin, std::span<const double> cot) const override {
    const Embedding h = raw_image_embedding(input, origin);
    const std::size_t n = input.size();
    Image g(input.height(), input.width(), input.channels());
    for (int k = 0; k < dim_; ++k) {
      const double coef = cot[k] * (1.0 - h[k] * h[k]);
      const double* w = weights_.data() + static_cast<std::size_t>(k) * n;
      for (std::size_t i = 0; i < n; ++i) g.values()[i] += coef * w[i];
    }
    return g;
  }

 private:
  void check(const Image& input) const {
    if (input.height() != res_ || input.width() != res_ || input.channels() != 3)
      throw Error(ErrorCode::ShapeMismatch, "projection stub input has wrong shape");
  }

  int res_;
  int dim_;
  std::uint64_t seed_;
  std::string id_;
  std::vector<double> weights_;
  std::vector<double> bias_;
};

}  // namespace

StubKind stub_kind_from_string(std::string_view kind) {
  if (kind == "linear") return StubKind::Linear;
  if (kind == "masked-mean") return StubKind::MaskedMean;
  if (kind == "quadratic") return StubKind::Quadratic;
  if (kind == "projection") return StubKind::Projection;
  throw Error(ErrorCode::UnknownKind, "unknown stub kind '" + std::string(kind) + "'");
}

std::shared_ptr<const Member> make_masked_mean_stub(Image mask, std::string id) {
  return std::make_shared<MaskedMeanStub>(std::move(mask), std::move(id));
}

std::shared_ptr<const Member> make_linear_stub(Image direction, std::string id) {
  return std::make_shared<LinearStub>(std::move(direction), std::move(id));
}

std::shared_ptr<const Member> make_linear_stub(int resolution, std::uint64_t seed, std::string id) {
  if (resolution < 1) throw Error(ErrorCode::InvalidArgument, "seeded linear stub needs a resolution");
  Image v(resolution, resolution, 3);
  Rng rng(derive_seed(seed, id + "/direction"));
  for (double& x : v.values()) x = standard_normal(rng);
  return make_linear_stub(std::move(v), std::move(id));
}

std::shared_ptr<const Member> make_quadratic_stub(int resolution, std::string id) {
  return std::make_shared<QuadraticStub>(resolution, std::move(id));
}

std::shared_ptr<const Member> make_projection_stub(int resolution, int dim, std::uint64_t seed, std::string id) {
  return std::make_shared<ProjectionStub>(resolution, dim, seed, std::move(id));
}

std::shared_ptr<const Member> make_stub_encoder(std::string_view kind, const nlohmann::json& params) {
  const StubKind k = stub_kind_from_string(kind);
  const std::string id = params.value("id", std::string(kind));
  const auto seed = params.value<std::uint64_t>("seed", 0);
  switch (k) {
    case StubKind::Linear:
      return make_linear_stub(params.value("resolution", 16), seed, id);
    case StubKind::Quadratic:
      return make_quadratic_stub(params.value("resolution", 0), id);
    case StubKind::Projection:
      return make_projection_stub(params.value("resolution", 16), params.value("dim", 16), seed, id);
    case StubKind::MaskedMean: {
      const auto canvas = params.at("canvas").get<std::vector<int>>();
      if (canvas.size() != 2) throw Error(ErrorCode::InvalidArgument, "canvas must be [height, width]");
      Image mask(canvas[0], canvas[1], 1, 0.0);
      if (params.contains("mask_rect")) {
        const auto& r = params.at("mask_rect");
        const Rect rect{r.at("top").get<int>(), r.at("left").get<int>(), r.at("height").get<int>(),
                        r.at("width").get<int>()};
        if (!rect.inside(canvas[0], canvas[1])) throw Error(ErrorCode::InvalidArgument, "mask_rect outside canvas");
        for (int y = rect.top; y < rect.bottom(); ++y)
          for (int x = rect.left; x < rect.right(); ++x) mask.at(y, x, 0) = 1.0;
      } else {
        for (double& v : mask.values()) v = 1.0;
      }
      return make_masked_mean_stub(std::move(mask), id);
    }
  }
  throw Error(ErrorCode::UnknownKind, std::string(kind));
}

// ---- Ensemble -------------------------------------------------------------

Ensemble::Ensemble(std::vector<std::shared_ptr<const Member>> members) : members_(std::move(members)) {
  if (members_.empty()) throw Error(ErrorCode::EncoderUnavailable, "ensemble needs at least one member");
  for (const auto& m : members_)
    if (!m) throw Error(ErrorCode::EncoderUnavailable, "null ensemble member");
}

Ensemble::Ensemble(const Ensemble& other) : members_(other.members_) {}

Ensemble& Ensemble::operator=(const Ensemble& other) {
  if (this != &other) {
    members_ = other.members_;
    std::lock_guard lock(cache_mutex_);
    text_cache_.clear();
  }
  return *this;
}

std::vector<Embedding> Ensemble::encode_text(std::string_view text) const {
  if (members_.empty()) throw Error(ErrorCode::EncoderUnavailable, "empty ensemble");
  if (text.empty()) throw Error(ErrorCode::InvalidArgument, "empty target text");
  {
    std::lock_guard lock(cache_mutex_);
    if (auto it = text_cache_.find(text); it != text_cache_.end()) return it->second;
  }
  std::vector<Embedding> out;
  out.reserve(members_.size());
  for (const auto& m : members_) out.push_back(normalized(m->encode_text(text)));
  std::lock_guard lock(cache_mutex_);
  return text_cache_.emplace(std::string(text), std::move(out)).first->second;
}

GradientResult Ensemble::evaluate(const Image& crop, const Rect& origin, std::span<const Embedding> targets,
                                  bool with_gradient) const {
  if (members_.empty()) throw Error(ErrorCode::EncoderUnavailable, "empty ensemble");
  if (targets.size() != members_.size())
    throw Error(ErrorCode::ShapeMismatch, "one target embedding per member is required");
  if (crop.empty() || origin.height != crop.height() || origin.width != crop.width())
    throw Error(ErrorCode::ShapeMismatch, "crop shape does not match its origin rectangle");
  for (double v : crop.values())
    if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite pixel in crop");

  const double inv_s = 1.0 / static_cast<double>(members_.size());
  GradientResult out;
  if (with_gradient) out.gradient = Image(crop.height(), crop.width(), crop.channels());
  for (std::size_t i = 0; i < members_.size(); ++i) {
    const Member& m = *members_[i];
    if (with_gradient && !m.differentiable())
      throw Error(ErrorCode::NonDifferentiableMember, m.id() + " does not provide gradients");
    const int res = m.resolution();
    const bool resize = res > 0 && (res != crop.height() || res != crop.width());
    if (!resize) {
      MemberResult r = m.similarity(crop, origin, targets[i], with_gradient);
      out.loss += r.cosine * inv_s;
      if (with_gradient) {
        if (!r.gradient.same_shape(crop)) throw Error(ErrorCode::ShapeMismatch, m.id() + " returned a bad gradient");
        for (std::size_t j = 0; j < crop.size(); ++j) out.gradient.values()[j] += inv_s * r.gradient.values()[j];
      }
      continue;
    }
    const BilinearResize plan(crop.height(), crop.width(), res, res);
    const Image input = plan.forward(crop);
    MemberResult r = m.similarity(input, origin, targets[i], with_gradient);
    out.loss += r.cosine * inv_s;
    if (with_gradient) {
      if (!r.gradient.same_shape(input)) throw Error(ErrorCode::ShapeMismatch, m.id() + " returned a bad gradient");
      const Image back = plan.adjoint(r.gradient);
      for (std::size_t j = 0; j < crop.size(); ++j) out.gradient.values()[j] += inv_s * back.values()[j];
    }
  }
  return out;
}

double Ensemble::surrogate_loss(const Image& crop, const Rect& origin, std::span<const Embedding> targets) const {
  return evaluate(crop, origin, targets, false).loss;
}

double Ensemble::surrogate_loss(const Image& crop, std::span<const Embedding> targets) const {
  return surrogate_loss(crop, crop.bounds(), targets);
}

GradientResult Ensemble::loss_and_gradient(const Image& crop, const Rect& origin,
                                           std::span<const Embedding> targets) const {
  return evaluate(crop, origin, targets, true);
}

GradientResult Ensemble::loss_and_gradient(const Image& crop, std::span<const Embedding> targets) const {
  return loss_and_gradient(crop, crop.bounds(), targets);
}

Ensemble ensemble_from_json(const nlohmann::json& specs) {
  if (!specs.is_array() || specs.empty())
    throw Error(ErrorCode::InvalidConfig, "ensemble spec must be a non-empty array");
  std::vector<std::shared_ptr<const Member>> members;
  for (const auto& s : specs) members.push_back(make_stub_encoder(s.at("kind").get<std::string>(), s));
  return Ensemble(std::move(members));
}

}  // namespace saga::surrogate
