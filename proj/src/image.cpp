#include "ctrlnerf/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "ctrlnerf/errors.hpp"

namespace ctrlnerf {

void sample_bilinear(const Image& img, double x, double y, float out[3]) {
  if (img.empty()) throw ContractViolation("sample_bilinear: empty image");
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double tx = x - x0;
  const double ty = y - y0;
  const float* p00 = img.pixel(x0, y0);
  const float* p10 = img.pixel(x1, y0);
  const float* p01 = img.pixel(x0, y1);
  const float* p11 = img.pixel(x1, y1);
  for (int c = 0; c < 3; ++c) {
    const double top = p00[c] * (1.0 - tx) + p10[c] * tx;
    const double bot = p01[c] * (1.0 - tx) + p11[c] * tx;
    out[c] = static_cast<float>(top * (1.0 - ty) + bot * ty);
  }
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  if (img.empty()) throw ContractViolation("write_ppm: empty image");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open " + path.string());
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.rgb.size());
  for (size_t i = 0; i < img.rgb.size(); ++i) {
    const float v = std::clamp(img.rgb[i], 0.0f, 1.0f);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write_ppm: write failed for " + path.string());
}

namespace {

// Reads one whitespace/comment-delimited PPM header token.
std::string next_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {  // comment to end of line
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw IoError("read_ppm: truncated header in " + path.string());
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open " + path.string());
  if (next_token(f, path) != "P6") throw IoError("read_ppm: not a P6 file: " + path.string());
  int w, h, maxval;
  try {
    w = std::stoi(next_token(f, path));
    h = std::stoi(next_token(f, path));
    maxval = std::stoi(next_token(f, path));
  } catch (const std::exception&) {
    throw IoError("read_ppm: malformed header in " + path.string());
  }
  if (w <= 0 || h <= 0) throw IoError("read_ppm: bad dimensions in " + path.string());
  if (maxval != 255) throw IoError("read_ppm: unsupported maxval in " + path.string());
  // Header tokens are separated by exactly one whitespace byte before data.
  std::vector<unsigned char> bytes(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw IoError("read_ppm: truncated pixel data in " + path.string());
  Image img(w, h);
  for (size_t i = 0; i < bytes.size(); ++i) img.rgb[i] = bytes[i] / 255.0f;
  return img;
}

Image resize_bilinear(const Image& img, int new_width, int new_height) {
  if (img.empty()) throw ContractViolation("resize_bilinear: empty image");
  if (new_width <= 0 || new_height <= 0)
    throw ContractViolation("resize_bilinear: target size must be positive");
  Image out(new_width, new_height);
  // align_corners mapping: endpoints of the grids coincide.
  const double sx = new_width > 1 ? static_cast<double>(img.width - 1) / (new_width - 1) : 0.0;
  const double sy = new_height > 1 ? static_cast<double>(img.height - 1) / (new_height - 1) : 0.0;
  for (int y = 0; y < new_height; ++y)
    for (int x = 0; x < new_width; ++x) {
      float px[3];
      sample_bilinear(img, x * sx, y * sy, px);
      float* dst = out.pixel(x, y);
      dst[0] = px[0];
      dst[1] = px[1];
      dst[2] = px[2];
    }
  return out;
}

}  // namespace ctrlnerf
