// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "gruaunet/core/error.hpp"
#include "gruaunet/tensor/tensor.hpp"

namespace gruaunet::pipeline {

/// Interleaved 8-bit RGB, row-major.
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
};

inline Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  Image out(img.width, img.height);
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image& im) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.rgb.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

/// Binary PPM (P6, maxval 255).
inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (f.get(ch)) {
      if (ch == '#') {
        std::string rest;
        std::getline(f, rest);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t += ch;
      }
    }
    return t;
  };
  if (token() != "P6") throw IoError(path.string() + ": not a binary PPM");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed PPM header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw IoError(path.string() + ": only 8-bit non-empty PPM is supported");
  Image out(w, h);
  f.read(reinterpret_cast<char*>(out.rgb.data()), static_cast<std::streamsize>(out.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(out.rgb.size())) throw IoError(path.string() + ": truncated PPM");
  return out;
}

inline void write_ppm(const std::filesystem::path& path, const Image& im) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P6\n" << im.width << ' ' << im.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(im.rgb.data()), static_cast<std::streamsize>(im.rgb.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

/// Dispatches on the file signature, not the extension.
inline Image read_image(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image " + path.string());
  unsigned char sig[8] = {};
  f.read(reinterpret_cast<char*>(sig), 8);
  if (f.gcount() >= 2 && sig[0] == 'P' && sig[1] == '6') return read_ppm(path);
  if (f.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  throw IoError(path.string() + ": unsupported image format (PNG or binary PPM expected)");
}

/// [3,size,size] in [0,1], bilinear with half-pixel centers.
template <std::floating_point T>
Tensor<T> image_to_tensor(const Image& im, std::size_t size, bool hflip = false) {
  if (im.width == 0 || im.height == 0) throw ValidationError("empty image");
  Tensor<T> out(Shape{3, size, size});
  T* o = out.ptr();
  const double sx = static_cast<double>(im.width) / static_cast<double>(size);
  const double sy = static_cast<double>(im.height) / static_cast<double>(size);
  auto taps = [](double pos, std::size_t n, std::size_t& i0, std::size_t& i1, double& w) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, n - 1);
    w = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < size; ++y) {
    std::size_t y0, y1;
    double wy;
    taps((static_cast<double>(y) + 0.5) * sy - 0.5, im.height, y0, y1, wy);
    for (std::size_t x = 0; x < size; ++x) {
      std::size_t x0, x1;
      double wx;
      const std::size_t xs = hflip ? size - 1 - x : x;
      taps((static_cast<double>(xs) + 0.5) * sx - 0.5, im.width, x0, x1, wx);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - wx) * im.at(y0, x0, c) + wx * im.at(y0, x1, c);
        const double bot = (1 - wx) * im.at(y1, x0, c) + wx * im.at(y1, x1, c);
        o[(c * size + y) * size + x] = static_cast<T>(((1 - wy) * top + wy * bot) / 255.0);
      }
    }
  }
  return out;
}

template <std::floating_point T>
Tensor<T> load_image_tensor(const std::filesystem::path& path, std::size_t size, bool hflip = false) {
  return image_to_tensor<T>(read_image(path), size, hflip);
}

}  // namespace gruaunet::pipeline
