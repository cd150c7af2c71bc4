#include "idm/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

namespace idm {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IngestError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw IngestError(msg); }
void png_warn(png_structp, png_const_charp) {}

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> bytes;
};

// Decodes any PNG to 8-bit gray or RGB (alpha stripped, palettes expanded).
PngImage decode_png(const std::filesystem::path& path, bool want_gray) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  PngImage out;
  try {
    png_init_io(png, file.get());
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
      png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
    if (want_gray && !is_gray) {
      throw IngestError(path.string() + ": label PNG must be single-channel");
    }
    if (!want_gray && is_gray) png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = want_gray ? 1 : 3;
    const std::size_t stride = png_get_rowbytes(png, info);
    out.bytes.resize(stride * out.height);
    std::vector<png_bytep> rows(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = out.bytes.data() + y * stride;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
  } catch (const IngestError& e) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError(path.string() + ": " + e.what());
  }
  return out;
}

void encode_png(const std::filesystem::path& path, int width, int height, int channels,
                const std::uint8_t* bytes) {
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  try {
    png_init_io(png, file.get());
    png_set_IHDR(png, info, width, height, 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
      png_write_row(png, const_cast<png_bytep>(bytes + static_cast<std::size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
}

ImageTensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw IngestError(path.string() + ": unsupported PPM (expect binary P6, 8-bit)");
  }
  in.get();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw IngestError(path.string() + ": truncated PPM");
  ImageTensor img(h, w, 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / static_cast<float>(maxval);
  return img;
}

}  // namespace

ImageTensor read_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  if (ext == ".ppm") return read_ppm(path);
  const PngImage png = decode_png(path, false);
  ImageTensor img(png.height, png.width, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = png.bytes[i] / 255.0f;
  return img;
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ContractError("write_png: expected 1 or 3 channels");
  }
  std::vector<std::uint8_t> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = std::clamp(image.data[i], 0.0f, 1.0f);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  encode_png(path, image.width, image.height, image.channels, bytes.data());
}

LabelMap read_label_png(const std::filesystem::path& path) {
  PngImage png = decode_png(path, true);
  LabelMap label(png.height, png.width);
  label.data = std::move(png.bytes);
  return label;
}

void write_label_png(const std::filesystem::path& path, const LabelMap& label) {
  encode_png(path, label.width, label.height, 1, label.data.data());
}

}  // namespace idm
