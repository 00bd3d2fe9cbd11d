#pragma once

// Pinhole camera model, hemisphere pose parameterization, patch-based ray
// generation, and bilinear patch extraction.
//
// Conventions: y-up world, camera looks down its local -z. Angles are degrees
// at the interface, radians internally. All geometry runs in double.

#include <array>
#include <vector>

#include "ctrlnerf/image.hpp"
#include "ctrlnerf/rng.hpp"

namespace ctrlnerf {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const;
  Vec3 normalized() const;
};

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  // Square pinhole model from a horizontal field of view; principal point at
  // the image center on the pixel-center grid.
  static Intrinsics from_fov(int width, int height, double fov_x_deg);
  void validate() const;
};

// Camera on the upper hemisphere of radius r, aimed at (shift, 0, 0); the
// shift translates camera and look-target together.
struct Pose {
  double radius = 4.0;
  double theta_deg = 0.0;  // yaw in [-180, 180]
  double phi_deg = 0.0;    // pitch in [0, 90]
  double shift = 0.0;

  void validate() const;
};

// Square grid of sample coordinates: axis i in 0..k-1 maps to
// center + scale * (i - (k-1)/2), in pixels.
struct PatchPattern {
  double ux = 0, uy = 0;
  double scale = 1.0;
  int k = 2;

  void validate() const;
  double coord_x(int i) const { return ux + scale * (i - (k - 1) / 2.0); }
  double coord_y(int j) const { return uy + scale * (j - (k - 1) / 2.0); }
  // Full-image pattern: one sample per pixel.
  static PatchPattern full_image(int width, int height);
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
  double t_near = 0, t_far = 0;
};

// Rigid camera-to-world transform: world = R * cam + position. R is row-major
// 3x3 with columns (right, up, -forward).
struct CameraFrame {
  Vec3 position;
  std::array<double, 9> rot;

  Vec3 to_world(const Vec3& cam_dir) const {
    return {rot[0] * cam_dir.x + rot[1] * cam_dir.y + rot[2] * cam_dir.z,
            rot[3] * cam_dir.x + rot[4] * cam_dir.y + rot[5] * cam_dir.z,
            rot[6] * cam_dir.x + rot[7] * cam_dir.y + rot[8] * cam_dir.z};
  }
  Vec3 forward() const { return {-rot[2], -rot[5], -rot[8]}; }
};

CameraFrame pose_to_camera(const Pose& pose);

// One ray per pattern sample, row-major (y outer, x inner).
std::vector<Ray> generate_patch_rays(const Intrinsics& K, const Pose& pose,
                                     const PatchPattern& pattern, double t_near,
                                     double t_far);

// Bilinear patch extraction: k x k RGB samples at the pattern coordinates,
// clamped to the image border.
Image extract_patch(const Image& img, const PatchPattern& pattern);

struct PoseRanges {
  double theta_min = -180.0, theta_max = 180.0;
  double phi_min = 0.0, phi_max = 90.0;
  double radius = 4.0;
  double shift_min = 0.0, shift_max = 0.0;
};

Pose sample_pose(const PoseRanges& ranges, Rng& rng);

// Scale range is a fraction of the image extent covered by the patch
// footprint; the center is drawn so the footprint fits inside the image.
PatchPattern sample_pattern(int width, int height, double scale_frac_min,
                            double scale_frac_max, int k, Rng& rng);

}  // namespace ctrlnerf
