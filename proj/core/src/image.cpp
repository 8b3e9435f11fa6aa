#include "oshx/image.hpp"

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <jpeglib.h>
#include <png.h>

namespace oshx {

namespace fs = std::filesystem;

std::vector<uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto len = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(len));
  if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!in) throw IoError("short read on " + path.string());
  return bytes;
}

void write_file_bytes(const fs::path& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write on " + path.string());
}

void write_file_atomic(const fs::path& path, const std::vector<uint8_t>& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  write_file_bytes(tmp, bytes);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string() + ": " + ec.message());
  }
}

namespace {

constexpr uint8_t kPngSig[4] = {0x89, 'P', 'N', 'G'};
constexpr char kRawMagic[4] = {'O', 'S', 'I', 'M'};

bool is_jpeg(const uint8_t* b, size_t n) {
  return n >= 2 && b[0] == 0xFF && b[1] == 0xD8;
}
bool is_png(const uint8_t* b, size_t n) {
  return n >= 4 && std::memcmp(b, kPngSig, 4) == 0;
}
bool is_raw(const uint8_t* b, size_t n) {
  return n >= 4 && std::memcmp(b, kRawMagic, 4) == 0;
}

// libjpeg reports errors through a callback; bridge it to exceptions via
// the customary setjmp trampoline.
struct JpegErrorMgr {
  jpeg_error_mgr pub;
  jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_trampoline(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  longjmp(err->jump, 1);
}

void jpeg_silence_output(j_common_ptr) {}

// Quiet error handling: jump back to the caller's setjmp point instead of
// letting libpng print and abort.
void png_error_longjmp(png_structp png, png_const_charp) { png_longjmp(png, 1); }
void png_user_warning(png_structp, png_const_charp) {}

struct PngReadState {
  const uint8_t* data;
  size_t len;
  size_t pos;
};

void png_read_fn(png_structp png, png_bytep out, png_size_t n) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->pos + n > st->len) png_error(png, "unexpected end of stream");
  std::memcpy(out, st->data + st->pos, n);
  st->pos += n;
}

void png_write_fn(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}
void png_flush_fn(png_structp) {}

uint32_t read_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}

void append_u32le(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x & 0xFF));
  v.push_back(static_cast<uint8_t>((x >> 8) & 0xFF));
  v.push_back(static_cast<uint8_t>((x >> 16) & 0xFF));
  v.push_back(static_cast<uint8_t>((x >> 24) & 0xFF));
}

} // namespace

bool sniff_decodable(const uint8_t* bytes, size_t len) {
  return is_jpeg(bytes, len) || is_png(bytes, len) || is_raw(bytes, len);
}

ImageU8 decode_jpeg(const std::vector<uint8_t>& bytes, const std::string& origin) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_trampoline;
  err.pub.output_message = jpeg_silence_output;
  ImageU8 img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError("cannot decode " + origin + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  const size_t stride = static_cast<size_t>(img.width) * 3;
  while (cinfo.output_scanline < cinfo.output_height) {
    uint8_t* row = img.pixels.data() + cinfo.output_scanline * stride;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

std::vector<uint8_t> encode_jpeg(const ImageU8& img, int quality) {
  jpeg_compress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_trampoline;
  err.pub.output_message = jpeg_silence_output;
  unsigned char* buf = nullptr;
  unsigned long buf_len = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    free(buf);
    throw FormatError(std::string("jpeg encode failed: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buf, &buf_len);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const size_t stride = static_cast<size_t>(img.width) * 3;
  while (cinfo.next_scanline < cinfo.image_height) {
    const uint8_t* row = img.pixels.data() + cinfo.next_scanline * stride;
    JSAMPROW rows[1] = {const_cast<JSAMPROW>(row)};
    jpeg_write_scanlines(&cinfo, rows, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<uint8_t> out(buf, buf + buf_len);
  free(buf);
  return out;
}

ImageU8 decode_png(const std::vector<uint8_t>& bytes, const std::string& origin) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           png_error_longjmp, png_user_warning);
  if (!png) throw FormatError("png: allocation failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError("png: allocation failure");
  }
  PngReadState st{bytes.data(), bytes.size(), 0};
  ImageU8 img;
  std::vector<png_bytep> rows;
  bool bad_rowsize = false;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("cannot decode " + origin +
                      (bad_rowsize ? ": unexpected row size" : ": corrupt PNG"));
  }
  png_set_read_fn(png, &st, png_read_fn);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = 3;
  if (png_get_rowbytes(png, info) != static_cast<size_t>(img.width) * 3) {
    bad_rowsize = true;
    png_longjmp(png, 1);
  }
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  rows.resize(static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<size_t>(y)] =
        img.pixels.data() + static_cast<size_t>(y) * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

std::vector<uint8_t> encode_png(const ImageU8& img) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            png_error_longjmp, png_user_warning);
  if (!png) throw FormatError("png: allocation failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("png: allocation failure");
  }
  std::vector<uint8_t> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("png encode failed");
  }
  png_set_write_fn(png, &out, png_write_fn, png_flush_fn);
  // Fixed compression settings keep encoded bytes reproducible.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() +
                                             static_cast<size_t>(y) *
                                                 img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::vector<uint8_t> encode_raw(const ImageU8& img) {
  std::vector<uint8_t> out;
  out.reserve(13 + img.pixels.size());
  out.insert(out.end(), kRawMagic, kRawMagic + 4);
  append_u32le(out, static_cast<uint32_t>(img.width));
  append_u32le(out, static_cast<uint32_t>(img.height));
  out.push_back(static_cast<uint8_t>(img.channels));
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

ImageU8 decode_raw(const std::vector<uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 13 || !is_raw(bytes.data(), bytes.size()))
    throw FormatError("cannot decode " + origin + ": not an OSIM container");
  ImageU8 img;
  img.width = static_cast<int>(read_u32le(bytes.data() + 4));
  img.height = static_cast<int>(read_u32le(bytes.data() + 8));
  img.channels = bytes[12];
  if (img.channels != 3)
    throw FormatError("cannot decode " + origin + ": OSIM channels must be 3");
  const size_t expect = static_cast<size_t>(img.width) * img.height * 3;
  if (bytes.size() != 13 + expect)
    throw FormatError("cannot decode " + origin + ": OSIM payload length " +
                      std::to_string(bytes.size() - 13) + " != " +
                      std::to_string(expect));
  img.pixels.assign(bytes.begin() + 13, bytes.end());
  return img;
}

ImageU8 decode_image_bytes(const std::vector<uint8_t>& bytes,
                           const std::string& origin) {
  if (is_jpeg(bytes.data(), bytes.size())) return decode_jpeg(bytes, origin);
  if (is_png(bytes.data(), bytes.size())) return decode_png(bytes, origin);
  if (is_raw(bytes.data(), bytes.size())) return decode_raw(bytes, origin);
  throw FormatError("cannot decode " + origin + ": unknown image format");
}

ImageU8 decode_image(const fs::path& path) {
  return decode_image_bytes(read_file_bytes(path), path.string());
}

Tensor image_to_tensor(const ImageU8& img) {
  const int h = img.height, w = img.width;
  std::vector<float> data(static_cast<size_t>(3) * h * w);
  constexpr float inv = 1.0f / 255.0f;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const uint8_t* px = img.pixels.data() + (static_cast<size_t>(y) * w + x) * 3;
      for (int c = 0; c < 3; ++c)
        data[static_cast<size_t>(c) * h * w + static_cast<size_t>(y) * w + x] =
            static_cast<float>(px[c]) * inv;
    }
  }
  return Tensor::from_data({3, h, w}, std::move(data));
}

ImageU8 tensor_to_image(const Tensor& chw) {
  if (chw.ndim() != 3 || chw.dim(0) != 3)
    throw ShapeError("tensor_to_image: expected (3,H,W), got " +
                     shape_str(chw.shape()));
  ImageU8 img;
  img.height = chw.dim(1);
  img.width = chw.dim(2);
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  const auto& v = chw.values();
  const size_t plane = static_cast<size_t>(img.height) * img.width;
  for (size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      float f = v[static_cast<size_t>(c) * plane + i];
      f = f < 0.0f ? 0.0f : (f > 1.0f ? 1.0f : f);
      img.pixels[i * 3 + static_cast<size_t>(c)] =
          static_cast<uint8_t>(f * 255.0f + 0.5f);
    }
  }
  return img;
}

} // namespace oshx
