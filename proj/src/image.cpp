#include "xcvae/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>

namespace xcvae {
namespace {

std::uint8_t to_byte(double v) { return std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void require_plane(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ValidationError(std::string(what) + ": expected a (H, W) plane, got " +
                          to_string(t.shape()));
  }
}

}  // namespace

RgbImage::RgbImage(std::size_t w, std::size_t h, std::uint8_t fill)
    : width(w), height(h), pixels(w * h * 3, fill) {}

void RgbImage::set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (x >= width || y >= height) return;
  std::uint8_t* p = &pixels[(y * width + x) * 3];
  p[0] = r;
  p[1] = g;
  p[2] = b;
}

void write_png(const std::string& path, const RgbImage& image) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw RuntimeError("cannot write '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw RuntimeError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeError("libpng failed writing '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(image.width), png_uint_32(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(&image.pixels[y * image.width * 3]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

RgbImage grey_image(const Tensor& plane) {
  require_plane(plane, "grey_image");
  RgbImage img(plane.dim(1), plane.dim(0));
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::uint8_t g = to_byte(plane.at(y, x));
      img.set(x, y, g, g, g);
    }
  }
  return img;
}

RgbImage relevance_image(const Tensor& plane, double scale, bool positive_only) {
  require_plane(plane, "relevance_image");
  RgbImage img(plane.dim(1), plane.dim(0));
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double v = std::clamp(plane.at(y, x) / scale, positive_only ? 0.0 : -1.0, 1.0);
      if (v >= 0) {
        img.set(x, y, 255, to_byte(1 - v), to_byte(1 - v));
      } else {
        img.set(x, y, to_byte(1 + v), to_byte(1 + v), 255);
      }
    }
  }
  return img;
}

RgbImage relevance_overlay(const Tensor& intensity, const Tensor& relevance, double scale,
                           double max_alpha) {
  require_plane(intensity, "relevance_overlay");
  require_same_shape(intensity, relevance, "relevance_overlay");
  RgbImage img(intensity.dim(1), intensity.dim(0));
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double g = std::clamp(intensity.at(y, x), 0.0, 1.0);
      const double v = std::clamp(relevance.at(y, x) / scale, 0.0, 1.0);
      const double a = max_alpha * v;
      // hot ramp: red at low relevance, yellow at saturation
      const double r = 1.0, gg = v, b = 0.0;
      img.set(x, y, to_byte((1 - a) * g + a * r), to_byte((1 - a) * g + a * gg),
              to_byte((1 - a) * g + a * b));
    }
  }
  return img;
}

double relevance_scale(const Tensor& values, double q) {
  std::vector<double> mags;
  mags.reserve(values.size());
  for (double v : values.values()) {
    if (v != 0.0) mags.push_back(std::abs(v));
  }
  if (mags.empty()) return 1.0;
  const double s = quantile(std::move(mags), q);
  return s > 0 ? s : 1.0;
}

RgbImage upscale(const RgbImage& image, std::size_t factor) {
  if (factor == 0) throw ValidationError("upscale: factor must be positive");
  RgbImage out(image.width * factor, image.height * factor);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      const std::uint8_t* p = &image.pixels[((y / factor) * image.width + x / factor) * 3];
      out.set(x, y, p[0], p[1], p[2]);
    }
  }
  return out;
}

namespace {

void draw_line(RgbImage& img, double x0, double y0, double x1, double y1, std::uint8_t r,
               std::uint8_t g, std::uint8_t b, int thickness = 1) {
  const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  const int steps = std::max(1, int(std::ceil(len)));
  for (int i = 0; i <= steps; ++i) {
    const double t = double(i) / steps;
    const double x = x0 + t * (x1 - x0), y = y0 + t * (y1 - y0);
    for (int dy = 0; dy < thickness; ++dy) {
      for (int dx = 0; dx < thickness; ++dx) {
        const long px = std::lround(x) + dx, py = std::lround(y) + dy;
        if (px >= 0 && py >= 0) img.set(std::size_t(px), std::size_t(py), r, g, b);
      }
    }
  }
}

}  // namespace

RgbImage plot_roc(const RocCurve& curve, const std::vector<RocBandPoint>& band, std::size_t size) {
  if (size < 64) throw ValidationError("plot_roc: size must be at least 64");
  RgbImage img(size, size);
  const double margin = double(size) * 0.08, span = double(size) - 2 * margin;
  auto px = [&](double fpr) { return margin + fpr * span; };
  auto py = [&](double tpr) { return margin + (1.0 - tpr) * span; };

  // Band: fill each column between the interpolated lower and upper TPR.
  if (band.size() >= 2) {
    for (long c = long(std::ceil(px(0))); c <= long(std::floor(px(1))); ++c) {
      const double f = std::clamp((double(c) - margin) / span, 0.0, 1.0);
      const double pos = f * double(band.size() - 1);
      const std::size_t i = std::min(std::size_t(pos), band.size() - 2);
      const double w = pos - double(i);
      const double lo = (1 - w) * band[i].tpr_low + w * band[i + 1].tpr_low;
      const double hi = (1 - w) * band[i].tpr_high + w * band[i + 1].tpr_high;
      for (long r = std::lround(py(hi)); r <= std::lround(py(lo)); ++r) {
        img.set(std::size_t(c), std::size_t(r), 190, 210, 240);
      }
    }
  }
  draw_line(img, px(0), py(0), px(1), py(1), 170, 170, 170);
  draw_line(img, px(0), py(0), px(1), py(0), 0, 0, 0);
  draw_line(img, px(0), py(0), px(0), py(1), 0, 0, 0);
  draw_line(img, px(0), py(1), px(1), py(1), 0, 0, 0);
  draw_line(img, px(1), py(0), px(1), py(1), 0, 0, 0);
  for (int t = 1; t < 10; ++t) {
    const double v = t / 10.0;
    draw_line(img, px(v), py(0), px(v), py(0) + 5, 0, 0, 0);
    draw_line(img, px(0) - 5, py(v), px(0), py(v), 0, 0, 0);
  }
  // Straight segments between consecutive operating points.
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const RocPoint& a = curve.points[i - 1];
    const RocPoint& b = curve.points[i];
    draw_line(img, px(a.fpr), py(a.tpr), px(b.fpr), py(b.tpr), 20, 60, 160, 2);
  }
  return img;
}

}  // namespace xcvae
