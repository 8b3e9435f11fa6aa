#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "oshx/tensor.hpp"

namespace oshx {

/// Interleaved 8-bit RGB image, row-major (HWC).
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<uint8_t> pixels;

  size_t size_bytes() const { return pixels.size(); }
};

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      const std::vector<uint8_t>& bytes);
/// Writes to a temp file in the same directory, then renames into place.
void write_file_atomic(const std::filesystem::path& path,
                       const std::vector<uint8_t>& bytes);

/// True when the byte prefix matches a decodable container
/// (JPEG, PNG, or the raw "OSIM" container).
bool sniff_decodable(const uint8_t* bytes, size_t len);

/// Decodes by content (magic bytes), not extension. Always returns RGB.
/// Throws FormatError (with the path) on undecodable content, IoError on
/// filesystem failures.
ImageU8 decode_image(const std::filesystem::path& path);
ImageU8 decode_image_bytes(const std::vector<uint8_t>& bytes,
                           const std::string& origin);

ImageU8 decode_jpeg(const std::vector<uint8_t>& bytes, const std::string& origin);
ImageU8 decode_png(const std::vector<uint8_t>& bytes, const std::string& origin);

std::vector<uint8_t> encode_jpeg(const ImageU8& img, int quality = 95);
std::vector<uint8_t> encode_png(const ImageU8& img);

/// Raw container: magic "OSIM", u32 LE width, u32 LE height, u8 channels,
/// then row-major 8-bit RGB. Codec-free path for tests and tooling.
std::vector<uint8_t> encode_raw(const ImageU8& img);
ImageU8 decode_raw(const std::vector<uint8_t>& bytes, const std::string& origin);

/// Planar float conversion: (3,H,W), values scaled to [0,1].
Tensor image_to_tensor(const ImageU8& img);
ImageU8 tensor_to_image(const Tensor& chw);

} // namespace oshx
