#pragma once

#include <memory>
#include <string>
#include <string_view>

#include <nlohmann/json_fwd.hpp>

#include "saga/attention.hpp"
#include "saga/eval.hpp"
#include "saga/surrogate.hpp"

// HTTP adapters for live models. Every endpoint takes a JSON POST body and
// answers with a JSON object:
//   POST /complete      {"model", "prompt"}                    -> {"text"}
//   POST /caption       {"model", "prompt", "image_png"}        -> {"text"}
//   POST /trace         {"model", "prompt", "image_png"}        -> attention trace document
//   POST /encode_text   {"model", "text"}                       -> {"embedding": [..]}
//   POST /encode_image  {"model", "image"}                      -> {"embedding": [..]}
//   POST /image_vjp     {"model", "image", "cotangent": [..]}   -> {"gradient": [..]}
// "image_png" is base64 PNG; "image" is {"height", "width", "channels",
// "data": [HWC floats]}. HTTP 429 and 5xx map to TransientFailure.
namespace saga::remote {

struct Endpoint {
  std::string base_url;    // e.g. http://127.0.0.1:8080
  std::string model;       // model id forwarded in every request
  std::string api_key;     // sent as a bearer token when non-empty
  double timeout_seconds = 60.0;
};

/// Reads the bearer token from the environment variable named by `env`
/// (empty string if unset).
std::string api_key_from_env(std::string_view env = "SAGA_API_KEY");

nlohmann::json post_json(const Endpoint& ep, std::string_view path, const nlohmann::json& body);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

nlohmann::json image_to_json(const Image& image);
Image image_from_json(const nlohmann::json& j);

class HttpTextEndpoint : public eval::TextEndpoint {
 public:
  explicit HttpTextEndpoint(Endpoint ep) : ep_(std::move(ep)) {}
  std::string id() const override { return ep_.model; }
  std::string complete(const std::string& prompt) override;

 private:
  Endpoint ep_;
};

class HttpCaptionModel : public eval::CaptionModel {
 public:
  explicit HttpCaptionModel(Endpoint ep) : ep_(std::move(ep)) {}
  std::string id() const override { return ep_.model; }
  std::string caption(const Image& image, std::string_view pair_id, std::string_view prompt) override;

 private:
  Endpoint ep_;
};

class HttpTraceProvider : public attention::TraceProvider {
 public:
  HttpTraceProvider(Endpoint ep, attention::ExtractorProfile profile) : ep_(std::move(ep)), profile_(std::move(profile)) {}
  const attention::ExtractorProfile& profile() const override { return profile_; }
  attention::TokenAttentionTrace trace(const Image& image, std::string_view prompt) const override;

 private:
  Endpoint ep_;
  attention::ExtractorProfile profile_;
};

class HttpEncoderMember : public surrogate::EmbeddingMember {
 public:
  HttpEncoderMember(Endpoint ep, int resolution) : ep_(std::move(ep)), resolution_(resolution) {}
  std::string id() const override { return ep_.model; }
  int resolution() const override { return resolution_; }
  surrogate::Embedding encode_text(std::string_view text) const override;
  surrogate::Embedding raw_image_embedding(const Image& input, const Rect& origin) const override;
  Image raw_vjp(const Image& input, const Rect& origin, std::span<const double> cotangent) const override;

 private:
  Endpoint ep_;
  int resolution_;
};

}  // namespace saga::remote
