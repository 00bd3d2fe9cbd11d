#pragma once

// Procedural posed-and-labeled dataset: analytic ray-traced primitives with
// class-controlled shape and style-controlled color, written as binary PPM
// plus a tab-separated manifest.

#include <filesystem>
#include <string>
#include <vector>

#include "ctrlnerf/geometry.hpp"
#include "ctrlnerf/image.hpp"
#include "ctrlnerf/rng.hpp"

namespace ctrlnerf {

// class_id: 0 sphere, 1 box, 2 cylinder, 3 torus (inscribed in the unit
// sphere at scale 1). style_id: 0 red, 1 green, 2 blue, 3 yellow.
struct SceneSpec {
  int class_id = 0;
  int style_id = 0;
  double scale = 1.0;
  bool lambertian = true;

  void validate() const;
  void base_color(float out[3]) const;
  static constexpr int kShapeCount = 4;
  static constexpr int kStyleCount = 4;
};

// Nearest analytic ray-primitive intersection beyond t_min. Returns false on
// a miss; on a hit fills t_hit and the outward unit normal.
bool intersect_shape(int class_id, double scale, const Vec3& origin, const Vec3& dir,
                     double t_min, double& t_hit, Vec3& normal);

// Full-image ground-truth render: hit -> style color times the headlight
// Lambertian factor max(0, n . l) with l pointing back along the ray; miss ->
// white background.
Image raytrace_reference(const SceneSpec& spec, const Intrinsics& K, const Pose& pose);

struct DatasetItem {
  std::string path;  // relative to the dataset root
  int class_id = 0;
  int style_id = 0;
  Pose pose;
};

struct LabeledImageSet {
  std::filesystem::path root;
  std::vector<DatasetItem> items;
  std::vector<Image> images;  // parallel to items
  int m = 0;                  // class count
  int n = 0;                  // style count
};

struct DatasetConfig {
  int m = 4;
  int n = 4;
  int poses_per_cell = 50;
  int image_size = 64;
  double radius = 4.0;
  double fov_deg = 40.0;
  double phi_min = 0.0, phi_max = 90.0;
  double shift_min = 0.0, shift_max = 0.0;
  double scale = 1.0;
  uint64_t seed = 0;

  void validate() const;
};

// Renders m*n*poses_per_cell images on hemisphere poses (uniform yaw/pitch),
// writes them plus the manifest under out_dir, and returns the loaded set.
// Byte-identical output for a given config; image generation is parallel.
LabeledImageSet generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir);

// Reads a manifest and decodes every referenced image. Malformed rows raise
// ParseError with their 1-based line number; missing files raise IoError.
LabeledImageSet load_dataset(const std::filesystem::path& root);

// Uniform-with-replacement batch of item indices.
std::vector<int> sample_batch(const LabeledImageSet& set, int batch_size, Rng& rng);

inline constexpr const char* kManifestName = "manifest.tsv";
inline constexpr const char* kManifestHeader = "ctrlnerf-manifest 1";

}  // namespace ctrlnerf
