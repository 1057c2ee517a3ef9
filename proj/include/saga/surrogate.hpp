#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "saga/image.hpp"

namespace saga::surrogate {

using Embedding = std::vector<double>;

struct MemberResult {
  double cosine = 0.0;
  Image gradient;  // d cosine / d input, shaped like the member input; empty if not requested
};

/// One surrogate image/text encoder pair. Inputs arrive already resized to
/// resolution() (or at native crop size when resolution() == 0); `origin` is
/// where the crop sits on the source image, in pixels.
class Member {
 public:
  virtual ~Member() = default;
  virtual std::string id() const = 0;
  virtual int resolution() const = 0;
  virtual bool differentiable() const { return true; }
  virtual Embedding encode_text(std::string_view text) const = 0;
  virtual Embedding encode_image(const Image& input, const Rect& origin) const = 0;
  virtual MemberResult similarity(const Image& input, const Rect& origin, std::span<const double> target,
                                  bool with_gradient) const = 0;
};

/// Encoder exposing a raw (unnormalised) image embedding and its
/// vector-Jacobian product. Normalisation, cosine and the chain rule
/// through the normalisation live here.
class EmbeddingMember : public Member {
 public:
  Embedding encode_image(const Image& input, const Rect& origin) const override;
  MemberResult similarity(const Image& input, const Rect& origin, std::span<const double> target,
                          bool with_gradient) const override;

  virtual Embedding raw_image_embedding(const Image& input, const Rect& origin) const = 0;
  virtual Image raw_vjp(const Image& input, const Rect& origin, std::span<const double> cotangent) const = 0;
};

// ---- analytic stubs -------------------------------------------------------

enum class StubKind { Linear, MaskedMean, Quadratic, Projection };

StubKind stub_kind_from_string(std::string_view kind);

/// Masked mean anchored on the source canvas: cos = <m, crop> / |m|_1 over
/// the crop footprint, gradient m / |m|_1. `mask` is canvas-sized with one
/// channel (broadcast) or three. Native resolution.
std::shared_ptr<const Member> make_masked_mean_stub(Image mask, std::string id = "masked-mean");

/// cos = <v, resize(crop)>, |v|_1 = 1 so the value stays in [-1, 1].
std::shared_ptr<const Member> make_linear_stub(Image direction, std::string id = "linear");
std::shared_ptr<const Member> make_linear_stub(int resolution, std::uint64_t seed, std::string id = "linear");

/// cos = mean(resize(crop)^2); resolution 0 keeps the native crop size.
std::shared_ptr<const Member> make_quadratic_stub(int resolution, std::string id = "quadratic");

/// Smooth nonlinear encoder: embedding tanh(W vec(x) + b) with seeded
/// Gaussian weights. Text "basis:<i>" maps to the i-th unit vector, any
/// other text to a seeded random unit vector.
std::shared_ptr<const Member> make_projection_stub(int resolution, int dim, std::uint64_t seed,
                                                   std::string id = "projection");

/// Factory keyed by kind name: "linear", "masked-mean", "quadratic",
/// "projection". Parameters: resolution, seed, dim, id; masked-mean takes
/// "canvas": [h, w] and "mask_rect": {top,left,height,width} (ones inside).
std::shared_ptr<const Member> make_stub_encoder(std::string_view kind, const nlohmann::json& params);

// ---- ensemble -------------------------------------------------------------

struct GradientResult {
  double loss = 0.0;
  Image gradient;  // same shape as the queried crop
};

class Ensemble {
 public:
  Ensemble() = default;
  explicit Ensemble(std::vector<std::shared_ptr<const Member>> members);
  Ensemble(const Ensemble& other);
  Ensemble& operator=(const Ensemble& other);

  std::size_t size() const noexcept { return members_.size(); }
  const Member& member(std::size_t i) const { return *members_.at(i); }

  /// One unit embedding per member; cached per text.
  std::vector<Embedding> encode_text(std::string_view text) const;

  double surrogate_loss(const Image& crop, const Rect& origin, std::span<const Embedding> targets) const;
  double surrogate_loss(const Image& crop, std::span<const Embedding> targets) const;

  GradientResult loss_and_gradient(const Image& crop, const Rect& origin, std::span<const Embedding> targets) const;
  GradientResult loss_and_gradient(const Image& crop, std::span<const Embedding> targets) const;

 private:
  GradientResult evaluate(const Image& crop, const Rect& origin, std::span<const Embedding> targets,
                          bool with_gradient) const;

  std::vector<std::shared_ptr<const Member>> members_;
  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, std::vector<Embedding>, std::less<>> text_cache_;
};

/// Builds an ensemble from a JSON array of stub specs:
///   [{"kind": "projection", "resolution": 16, "dim": 16, "seed": 1}, ...]
Ensemble ensemble_from_json(const nlohmann::json& specs);

double cosine(std::span<const double> a, std::span<const double> b);
Embedding normalized(std::span<const double> v);

}  // namespace saga::surrogate
