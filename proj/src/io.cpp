#include "saga/io.hpp"

#include <png.h>

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "saga/error.hpp"
#include "saga/rng.hpp"

namespace saga::io {

namespace {

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingImage, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Image read_ppm(const std::vector<unsigned char>& bytes, const fs::path& path) {
  std::string text(bytes.begin(), bytes.end());
  std::istringstream in(text);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  in >> magic;
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  in.get();
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
    throw Error(ErrorCode::MalformedRecord, "unsupported PPM " + path.string());
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() < offset + static_cast<std::size_t>(w) * h * 3)
    throw Error(ErrorCode::MalformedRecord, "truncated PPM " + path.string());
  Image img(h, w, 3);
  for (std::size_t i = 0; i < img.size(); ++i) img.values()[i] = bytes[offset + i] / 255.0;
  return img;
}

Image read_png(const std::vector<unsigned char>& bytes, const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw Error(ErrorCode::MalformedRecord, "cannot decode PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(ErrorCode::MalformedRecord, "cannot decode PNG " + path.string() + ": " + image.message);
  }
  Image img(static_cast<int>(image.height), static_cast<int>(image.width), 3);
  for (std::size_t i = 0; i < img.size(); ++i) img.values()[i] = buf[i] / 255.0;
  return img;
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

}  // namespace

Image read_image(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::MissingImage, "no such image " + path.string());
  const auto bytes = slurp(path);
  static constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) return read_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return read_ppm(bytes, path);
  throw Error(ErrorCode::MalformedRecord, "unrecognised image format " + path.string());
}

std::vector<unsigned char> encode_png(const Image& image) {
  if (image.channels() != 3 || image.empty()) throw Error(ErrorCode::ShapeMismatch, "PNG output needs an RGB image");
  std::vector<unsigned char> raw(image.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = to_byte(image.values()[i]);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, raw.data(), 0, nullptr))
    throw Error(ErrorCode::Io, std::string("PNG encode failed: ") + img.message);
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, raw.data(), 0, nullptr))
    throw Error(ErrorCode::Io, std::string("PNG encode failed: ") + img.message);
  out.resize(size);
  return out;
}

void write_png(const fs::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image quantize8(const Image& image) {
  Image out = image;
  for (double& v : out.values()) v = to_byte(v) / 255.0;
  return out;
}

void write_delta(const fs::path& path, const Image& delta, double epsilon) {
  static_assert(std::endian::native == std::endian::little, "delta records are little-endian");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  std::ostringstream header;
  header << std::setprecision(17) << "saga-delta/1 " << delta.height() << ' ' << delta.width() << ' '
         << delta.channels() << ' ' << epsilon << '\n';
  out << header.str();
  out.write(reinterpret_cast<const char*>(delta.values().data()),
            static_cast<std::streamsize>(delta.size() * sizeof(double)));
}

DeltaRecord read_delta(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingArtifacts, "missing perturbation record " + path.string());
  std::string line;
  std::getline(in, line);
  std::istringstream hs(line);
  std::string magic;
  int h = 0, w = 0, c = 0;
  double eps = 0.0;
  hs >> magic >> h >> w >> c >> eps;
  if (magic != "saga-delta/1" || !hs || h <= 0 || w <= 0 || c <= 0)
    throw Error(ErrorCode::MalformedRecord, "bad perturbation header in " + path.string());
  DeltaRecord rec{Image(h, w, c), eps};
  const auto bytes = static_cast<std::streamsize>(rec.delta.size() * sizeof(double));
  in.read(reinterpret_cast<char*>(rec.delta.values().data()), bytes);
  if (in.gcount() != bytes) throw Error(ErrorCode::MalformedRecord, "truncated perturbation " + path.string());
  return rec;
}

void write_records(const fs::path& path, std::string_view schema, const std::vector<nlohmann::json>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << nlohmann::json{{"schema", schema}}.dump() << '\n';
  for (const auto& r : rows) out << r.dump() << '\n';
}

std::string read_schema(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingArtifacts, "missing record file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::MalformedRecords, "empty record file " + path.string());
  try {
    return nlohmann::json::parse(line).at("schema").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::MalformedRecords, "record file without schema header " + path.string());
  }
}

std::vector<nlohmann::json> read_records(const fs::path& path, std::string_view expected_schema) {
  const std::string schema = read_schema(path);
  if (!expected_schema.empty() && schema != expected_schema)
    throw Error(ErrorCode::MalformedRecords,
                "expected schema " + std::string(expected_schema) + ", found " + schema + " in " + path.string());
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<nlohmann::json> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedRecords, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingArtifacts, "missing file " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

std::string sha256_file(const fs::path& path) {
  const auto bytes = slurp(path);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr))
    throw Error(ErrorCode::Io, "SHA-256 failed for " + path.string());
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

Image synthetic_image(int height, int width, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "synthetic-image"));
  Image img(height, width, 3);
  std::array<double, 3> base{}, slope_y{}, slope_x{};
  for (int c = 0; c < 3; ++c) {
    base[c] = uniform(rng, 0.2, 0.5);
    slope_y[c] = uniform(rng, -0.15, 0.15);
    slope_x[c] = uniform(rng, -0.15, 0.15);
  }
  struct Blob {
    double cy, cx, sigma;
    std::array<double, 3> amp;
  };
  std::vector<Blob> blobs(4);
  for (auto& b : blobs) {
    b.cy = uniform(rng, 0.0, height);
    b.cx = uniform(rng, 0.0, width);
    b.sigma = uniform(rng, 0.08, 0.2) * std::min(height, width);
    for (double& a : b.amp) a = uniform(rng, -0.3, 0.45);
  }
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + slope_y[c] * y / height + slope_x[c] * x / width;
        for (const auto& b : blobs) {
          const double dy = y - b.cy, dx = x - b.cx;
          v += b.amp[c] * std::exp(-(dy * dy + dx * dx) / (2 * b.sigma * b.sigma));
        }
        img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
  return quantize8(img);
}

}  // namespace saga::io
