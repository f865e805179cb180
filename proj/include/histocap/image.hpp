#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "histocap/error.hpp"

namespace histocap {

// 8-bit interleaved RGB raster, row-major.
struct SlideImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  SlideImage() = default;
  SlideImage(std::size_t w, std::size_t h, std::uint8_t fill = 255)
      : width(w), height(h), pixels(3 * w * h, fill) {
    if (w == 0 || h == 0) throw ValueError("image extents must be positive");
  }

  std::uint8_t* at(std::size_t x, std::size_t y) { return pixels.data() + 3 * (y * width + x); }
  const std::uint8_t* at(std::size_t x, std::size_t y) const {
    return pixels.data() + 3 * (y * width + x);
  }

  void set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    auto* p = at(x, y);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }

  SlideImage crop(std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) const {
    if (x0 + w > width || y0 + h > height) throw ValueError("crop outside image bounds");
    SlideImage out(w, h);
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(at(x0, y0 + y), 3 * w, out.at(0, y));
    return out;
  }

  bool operator==(const SlideImage&) const = default;
};

// 8-bit single-channel raster.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

// Reads the next whitespace-delimited header field of a netpbm file,
// skipping '#' comments.
inline std::size_t pnm_field(const std::string& s, std::size_t& pos, const std::string& origin) {
  while (pos < s.size()) {
    if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  std::size_t start = pos;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
  if (start == pos) throw DataError(origin + ": malformed PNM header");
  return std::stoul(s.substr(start, pos - start));
}

}  // namespace detail

inline SlideImage read_ppm(const std::filesystem::path& path) {
  const std::string s = detail::read_file(path);
  const std::string origin = path.string();
  if (s.size() < 2 || s[0] != 'P' || s[1] != '6') throw DataError(origin + ": not a binary PPM (P6)");
  std::size_t pos = 2;
  const auto w = detail::pnm_field(s, pos, origin);
  const auto h = detail::pnm_field(s, pos, origin);
  const auto maxval = detail::pnm_field(s, pos, origin);
  if (maxval != 255) throw DataError(origin + ": only 8-bit PPM is supported");
  if (w == 0 || h == 0) throw DataError(origin + ": empty image");
  ++pos;  // single whitespace before the raster
  if (s.size() < pos + 3 * w * h) throw DataError(origin + ": truncated PPM raster");
  SlideImage img(w, h);
  std::memcpy(img.pixels.data(), s.data() + pos, 3 * w * h);
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const SlideImage& img) {
  std::string bytes = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  detail::write_file(path, bytes);
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::string bytes = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  detail::write_file(path, bytes);
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  const std::string s = detail::read_file(path);
  const std::string origin = path.string();
  if (s.size() < 2 || s[0] != 'P' || s[1] != '5') throw DataError(origin + ": not a binary PGM (P5)");
  std::size_t pos = 2;
  GrayImage img;
  img.width = detail::pnm_field(s, pos, origin);
  img.height = detail::pnm_field(s, pos, origin);
  if (detail::pnm_field(s, pos, origin) != 255) throw DataError(origin + ": only 8-bit PGM is supported");
  ++pos;
  if (s.size() < pos + img.width * img.height) throw DataError(origin + ": truncated PGM raster");
  img.pixels.assign(s.begin() + static_cast<std::ptrdiff_t>(pos),
                    s.begin() + static_cast<std::ptrdiff_t>(pos + img.width * img.height));
  return img;
}

inline SlideImage read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw DataError(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  if (image.width == 0 || image.height == 0) {
    png_image_free(&image);
    throw DataError(path.string() + ": empty image");
  }
  SlideImage img(image.width, image.height);
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError(path.string() + ": " + msg);
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const SlideImage& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw DataError(path.string() + ": " + image.message);
  }
}

// Dispatches on extension: .png, or .ppm/.pnm for binary PPM.
inline SlideImage read_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm" || ext == ".pnm") return read_ppm(path);
  throw DataError(path.string() + ": unsupported raster format '" + ext + "'");
}

inline void write_image(const std::filesystem::path& path, const SlideImage& img) {
  const std::string ext = path.extension().string();
  if (ext == ".png") return write_png(path, img);
  if (ext == ".ppm" || ext == ".pnm") return write_ppm(path, img);
  throw DataError(path.string() + ": unsupported raster format '" + ext + "'");
}

}  // namespace histocap
