#pragma once

// RGB images as row-major float planes in [0,1], with binary PPM (P6,
// maxval 255) as the on-disk format.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ctrlnerf {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;  // height * width * 3, row-major

  Image() = default;
  Image(int w, int h, float fill = 0.0f)
      : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, fill) {}

  bool empty() const { return width <= 0 || height <= 0; }
  size_t pixel_index(int x, int y) const {
    return (static_cast<size_t>(y) * width + x) * 3;
  }
  float* pixel(int x, int y) { return rgb.data() + pixel_index(x, y); }
  const float* pixel(int x, int y) const { return rgb.data() + pixel_index(x, y); }
};

// Bilinear sample at continuous pixel coordinates (pixel centers at integers),
// coordinates clamped to the image border. out = 3 floats.
void sample_bilinear(const Image& img, double x, double y, float out[3]);

// Quantizes to 8 bits per channel (round, clamp) and writes P6.
void write_ppm(const Image& img, const std::filesystem::path& path);

// Reads a P6 file with maxval 255; values scaled back to [0,1].
Image read_ppm(const std::filesystem::path& path);

// Bilinear resize (used to bring patches/images to a common feature
// resolution for the metrics pipeline).
Image resize_bilinear(const Image& img, int new_width, int new_height);

}  // namespace ctrlnerf
