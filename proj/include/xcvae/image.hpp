#pragma once

// Minimal raster output: PNG writing, relevance colour maps and a ROC plot.

#include <cstdint>
#include <string>
#include <vector>

#include "xcvae/metrics.hpp"
#include "xcvae/tensor.hpp"

namespace xcvae {

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 255);
  void set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

void write_png(const std::string& path, const RgbImage& image);

/// Grey image of a (H, W) plane with values in [0, 1].
RgbImage grey_image(const Tensor& plane);

/// Blue-white-red map of a (H, W) relevance plane; |r| >= scale saturates.
/// With positive_only, negative relevance is drawn white.
RgbImage relevance_image(const Tensor& plane, double scale, bool positive_only = true);

/// Positive relevance blended in red-yellow over the grey slice.
RgbImage relevance_overlay(const Tensor& intensity, const Tensor& relevance, double scale,
                           double max_alpha = 0.75);

/// Quantile of |values| used as the colour scale; never returns zero.
double relevance_scale(const Tensor& values, double quantile);

RgbImage upscale(const RgbImage& image, std::size_t factor);

/// Empirical ROC curve over a shaded pointwise confidence band.
RgbImage plot_roc(const RocCurve& curve, const std::vector<RocBandPoint>& band,
                  std::size_t size = 400);

}  // namespace xcvae
