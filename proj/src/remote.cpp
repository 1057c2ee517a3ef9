#include "saga/remote.hpp"

#include <cstdlib>
#include <regex>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "saga/error.hpp"
#include "saga/io.hpp"

namespace saga::remote {

using nlohmann::json;

namespace {

std::vector<double> numbers(const json& j, const char* field) {
  if (!j.contains(field) || !j[field].is_array())
    throw Error(ErrorCode::MalformedRecord, std::string("response lacks array '") + field + "'");
  return j[field].get<std::vector<double>>();
}

std::string text_field(const json& j) {
  if (!j.contains("text") || !j["text"].is_string())
    throw Error(ErrorCode::MalformedRecord, "response lacks string 'text'");
  return j["text"].get<std::string>();
}

std::string png_b64(const Image& image) {
  auto png = io::encode_png(image);
  return base64_encode({reinterpret_cast<const char*>(png.data()), png.size()});
}

}  // namespace

std::string api_key_from_env(std::string_view env) {
  const char* v = std::getenv(std::string(env).c_str());
  return v ? std::string(v) : std::string();
}

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw Error(ErrorCode::InvalidArgument, "base64 length not a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorCode::InvalidArgument, "invalid base64");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

json image_to_json(const Image& image) {
  auto v = image.values();
  return {{"height", image.height()}, {"width", image.width()}, {"channels", image.channels()},
          {"data", std::vector<double>(v.begin(), v.end())}};
}

Image image_from_json(const json& j) {
  Image img(j.at("height").get<int>(), j.at("width").get<int>(), j.at("channels").get<int>());
  auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != img.values().size()) throw Error(ErrorCode::ShapeMismatch, "image data size mismatch");
  std::copy(data.begin(), data.end(), img.values().begin());
  return img;
}

json post_json(const Endpoint& ep, std::string_view path, const json& body) {
  static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(ep.base_url, m, url))
    throw Error(ErrorCode::InvalidConfig, "bad endpoint url '" + ep.base_url + "'");
  std::string prefix = m[2].matched ? m[2].str() : std::string();
  if (!prefix.empty() && prefix.back() == '/') prefix.pop_back();

  httplib::Client cli(m[1].str());
  auto secs = static_cast<time_t>(ep.timeout_seconds);
  cli.set_connection_timeout(secs, 0);
  cli.set_read_timeout(secs, 0);
  cli.set_write_timeout(secs, 0);
  httplib::Headers headers;
  if (!ep.api_key.empty()) headers.emplace("Authorization", "Bearer " + ep.api_key);

  auto res = cli.Post(prefix + std::string(path), headers, body.dump(), "application/json");
  if (!res) {
    throw Error(ErrorCode::TransientFailure,
                "request to " + ep.base_url + std::string(path) + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status == 429 || res->status >= 500) {
    throw Error(ErrorCode::TransientFailure, "HTTP " + std::to_string(res->status) + " from " + std::string(path));
  }
  if (res->status != 200) {
    throw Error(ErrorCode::EncoderUnavailable, "HTTP " + std::to_string(res->status) + " from " + std::string(path) +
                                                   ": " + res->body.substr(0, 200));
  }
  auto j = json::parse(res->body, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw Error(ErrorCode::MalformedRecord, "non-JSON response from " + std::string(path));
  return j;
}

std::string HttpTextEndpoint::complete(const std::string& prompt) {
  return text_field(post_json(ep_, "/complete", {{"model", ep_.model}, {"prompt", prompt}}));
}

std::string HttpCaptionModel::caption(const Image& image, std::string_view, std::string_view prompt) {
  return text_field(
      post_json(ep_, "/caption", {{"model", ep_.model}, {"prompt", std::string(prompt)}, {"image_png", png_b64(image)}}));
}

attention::TokenAttentionTrace HttpTraceProvider::trace(const Image& image, std::string_view prompt) const {
  auto j = post_json(ep_, "/trace", {{"model", ep_.model}, {"prompt", std::string(prompt)}, {"image_png", png_b64(image)}});
  auto tr = attention::trace_from_json(j);
  if (tr.num_layers != profile_.num_layers)
    throw Error(ErrorCode::MalformedTrace, "remote trace layer count differs from the extractor profile");
  return tr;
}

surrogate::Embedding HttpEncoderMember::encode_text(std::string_view text) const {
  return numbers(post_json(ep_, "/encode_text", {{"model", ep_.model}, {"text", std::string(text)}}), "embedding");
}

surrogate::Embedding HttpEncoderMember::raw_image_embedding(const Image& input, const Rect&) const {
  return numbers(post_json(ep_, "/encode_image", {{"model", ep_.model}, {"image", image_to_json(input)}}), "embedding");
}

Image HttpEncoderMember::raw_vjp(const Image& input, const Rect&, std::span<const double> cotangent) const {
  auto j = post_json(ep_, "/image_vjp",
                     {{"model", ep_.model},
                      {"image", image_to_json(input)},
                      {"cotangent", std::vector<double>(cotangent.begin(), cotangent.end())}});
  auto g = numbers(j, "gradient");
  Image out(input.height(), input.width(), input.channels());
  if (g.size() != out.values().size()) throw Error(ErrorCode::ShapeMismatch, "remote gradient has the wrong size");
  std::copy(g.begin(), g.end(), out.values().begin());
  return out;
}

}  // namespace saga::remote
