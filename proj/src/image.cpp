#include "gcrl/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "gcrl/errors.hpp"

namespace gcrl {

std::vector<unsigned char> ppm_bytes(const Image& image) {
  std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                       "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + image.data.size());
  for (float v : image.data) {
    float c = std::clamp(v, 0.0f, 1.0f);
    out.push_back(static_cast<unsigned char>(std::floor(c * 255.0f + 0.5f)));
  }
  return out;
}

void write_ppm(const Image& image, const std::string& path) {
  auto bytes = ppm_bytes(image);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("write_ppm: cannot open '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write_ppm: short write to '" + path + "'");
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open '" + path + "'");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
    throw IoError("read_ppm: '" + path + "' is not a maxval-255 P6 file");
  f.get(); // single whitespace before the raster
  Image img(h, w);
  std::vector<unsigned char> raw(img.data.size());
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IoError("read_ppm: truncated raster in '" + path + "'");
  for (std::size_t i = 0; i < raw.size(); ++i) img.data[i] = static_cast<float>(raw[i]) / 255.0f;
  return img;
}

Image bilinear_resize_crop(const Image& src, double y0, double x0, double h, double w, int out_h,
                           int out_w) {
  if (out_h <= 0 || out_w <= 0 || h <= 0.0 || w <= 0.0)
    throw ValueError("bilinear_resize_crop: empty output or crop region");
  Image out(out_h, out_w);
  double sy = h / static_cast<double>(out_h);
  double sx = w / static_cast<double>(out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = y0 + (static_cast<double>(oy) + 0.5) * sy - 0.5;
    int y_lo = static_cast<int>(std::floor(fy));
    double wy = fy - y_lo;
    int y0c = std::clamp(y_lo, 0, src.height - 1);
    int y1c = std::clamp(y_lo + 1, 0, src.height - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = x0 + (static_cast<double>(ox) + 0.5) * sx - 0.5;
      int x_lo = static_cast<int>(std::floor(fx));
      double wx = fx - x_lo;
      int x0c = std::clamp(x_lo, 0, src.width - 1);
      int x1c = std::clamp(x_lo + 1, 0, src.width - 1);
      for (int c = 0; c < 3; ++c) {
        double top = (1.0 - wx) * src.at(y0c, x0c, c) + wx * src.at(y0c, x1c, c);
        double bot = (1.0 - wx) * src.at(y1c, x0c, c) + wx * src.at(y1c, x1c, c);
        out.at(oy, ox, c) = static_cast<float>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

} // namespace gcrl
