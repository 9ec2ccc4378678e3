#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace gcrl {

// H x W x 3 float image, RGB interleaved, row-major, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * 3 +
                static_cast<std::size_t>(c)];
  }
  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * 3 +
                static_cast<std::size_t>(c)];
  }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
};

// Binary PPM ("P6", maxval 255). Values are clamped to [0, 1] and rounded
// half-up to a byte, so 0.5 maps to 128. Output bytes are a pure function of
// the image.
void write_ppm(const Image& image, const std::string& path);
std::vector<unsigned char> ppm_bytes(const Image& image);
Image read_ppm(const std::string& path);

// Bilinear sample of the axis-aligned rectangle [y0, y0+h) x [x0, x0+w)
// resized to out_h x out_w, with half-pixel centers and edge clamping.
// Sampling the full frame at the same size reproduces the input.
Image bilinear_resize_crop(const Image& src, double y0, double x0, double h, double w, int out_h,
                           int out_w);

} // namespace gcrl
