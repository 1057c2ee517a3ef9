#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "saga/image.hpp"

namespace saga::io {

namespace fs = std::filesystem;

/// Reads an 8-bit PNG (gray, gray+alpha, RGB, RGBA) or binary PPM (P6) as
/// RGB in [0, 1]. Alpha is dropped.
Image read_image(const fs::path& path);

/// Writes an 8-bit RGB PNG; values are rounded to the nearest 1/255.
void write_png(const fs::path& path, const Image& image);

/// Encodes as an in-memory PNG (used by HTTP adapters).
std::vector<unsigned char> encode_png(const Image& image);

/// Exact round-to-nearest 8-bit quantisation, v -> round(255 v) / 255.
Image quantize8(const Image& image);

// Perturbation record: header line "saga-delta/1 <h> <w> <c> <epsilon>"
// followed by h*w*c little-endian float64 values (HWC order).
void write_delta(const fs::path& path, const Image& delta, double epsilon);
struct DeltaRecord {
  Image delta;
  double epsilon = 0.0;
};
DeltaRecord read_delta(const fs::path& path);

// Record files: JSON lines whose first line is {"schema": "<tag>"}.
void write_records(const fs::path& path, std::string_view schema, const std::vector<nlohmann::json>& rows);
std::vector<nlohmann::json> read_records(const fs::path& path, std::string_view expected_schema = {});
std::string read_schema(const fs::path& path);

void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);
void write_text(const fs::path& path, std::string_view text);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const fs::path& path);

/// Smooth procedural RGB image on the 8-bit lattice (a few Gaussian blobs
/// over a gradient), deterministic in the seed.
Image synthetic_image(int height, int width, std::uint64_t seed);

}  // namespace saga::io
