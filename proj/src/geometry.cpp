#include "ctrlnerf/geometry.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "ctrlnerf/errors.hpp"

namespace ctrlnerf {

namespace {
constexpr double kDegToRad = std::numbers::pi / 180.0;
}

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

Vec3 Vec3::normalized() const {
  const double n = norm();
  if (n == 0.0) throw ContractViolation("Vec3::normalized: zero vector");
  return {x / n, y / n, z / n};
}

Intrinsics Intrinsics::from_fov(int width, int height, double fov_x_deg) {
  if (width < 2 || height < 2)
    throw ContractViolation("Intrinsics::from_fov: image must be at least 2x2");
  if (fov_x_deg <= 0.0 || fov_x_deg >= 180.0)
    throw ContractViolation("Intrinsics::from_fov: fov out of (0, 180)");
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.cx = (width - 1) / 2.0;
  k.cy = (height - 1) / 2.0;
  k.fx = ((width - 1) / 2.0) / std::tan(fov_x_deg * kDegToRad / 2.0);
  k.fy = k.fx;  // square pixels
  k.validate();
  return k;
}

void Intrinsics::validate() const {
  if (fx <= 0 || fy <= 0) throw ContractViolation("Intrinsics: focal lengths must be positive");
  if (cx < 0 || cx >= width || cy < 0 || cy >= height)
    throw ContractViolation("Intrinsics: principal point outside image");
}

void Pose::validate() const {
  if (radius <= 0) throw ContractViolation("Pose: radius must be positive");
  if (theta_deg < -180.0 || theta_deg > 180.0)
    throw ContractViolation("Pose: yaw " + std::to_string(theta_deg) + " outside [-180, 180]");
  if (phi_deg < 0.0 || phi_deg > 90.0)
    throw ContractViolation("Pose: pitch " + std::to_string(phi_deg) + " outside [0, 90]");
}

void PatchPattern::validate() const {
  if (k < 2) throw ContractViolation("PatchPattern: side length must be at least 2");
  if (scale <= 0) throw ContractViolation("PatchPattern: scale must be positive");
}

PatchPattern PatchPattern::full_image(int width, int height) {
  PatchPattern p;
  p.ux = (width - 1) / 2.0;
  p.uy = (height - 1) / 2.0;
  p.scale = 1.0;
  p.k = width;
  if (width != height)
    throw ContractViolation("PatchPattern::full_image: image must be square");
  return p;
}

CameraFrame pose_to_camera(const Pose& pose) {
  pose.validate();
  const double theta = pose.theta_deg * kDegToRad;
  const double phi = pose.phi_deg * kDegToRad;

  CameraFrame frame;
  frame.position = {pose.radius * std::cos(phi) * std::sin(theta) + pose.shift,
                    pose.radius * std::sin(phi),
                    pose.radius * std::cos(phi) * std::cos(theta)};
  const Vec3 target{pose.shift, 0.0, 0.0};
  const Vec3 fwd = (target - frame.position).normalized();

  // At the hemisphere pole the view direction is parallel to world +y; use
  // -z as up there so the frame stays well defined.
  const Vec3 up_hint = std::abs(std::cos(phi)) < 1e-9 ? Vec3{0, 0, -1} : Vec3{0, 1, 0};

  const Vec3 right = fwd.cross(up_hint).normalized();
  const Vec3 up = right.cross(fwd);
  frame.rot = {right.x, up.x, -fwd.x,   //
               right.y, up.y, -fwd.y,   //
               right.z, up.z, -fwd.z};
  return frame;
}

std::vector<Ray> generate_patch_rays(const Intrinsics& K, const Pose& pose,
                                     const PatchPattern& pattern, double t_near,
                                     double t_far) {
  K.validate();
  pattern.validate();
  if (t_near <= 0 || t_near >= t_far)
    throw ContractViolation("generate_patch_rays: need 0 < t_near < t_far");

  const CameraFrame frame = pose_to_camera(pose);
  std::vector<Ray> rays;
  rays.reserve(static_cast<size_t>(pattern.k) * pattern.k);
  for (int j = 0; j < pattern.k; ++j) {
    const double py = pattern.coord_y(j);
    for (int i = 0; i < pattern.k; ++i) {
      const double px = pattern.coord_x(i);
      const Vec3 cam_dir{(px - K.cx) / K.fx, -(py - K.cy) / K.fy, -1.0};
      Ray r;
      r.origin = frame.position;
      r.dir = frame.to_world(cam_dir).normalized();
      r.t_near = t_near;
      r.t_far = t_far;
      rays.push_back(r);
    }
  }
  return rays;
}

Image extract_patch(const Image& img, const PatchPattern& pattern) {
  if (img.empty()) throw ContractViolation("extract_patch: empty image");
  pattern.validate();
  Image out(pattern.k, pattern.k);
  for (int j = 0; j < pattern.k; ++j)
    for (int i = 0; i < pattern.k; ++i) {
      float px[3];
      sample_bilinear(img, pattern.coord_x(i), pattern.coord_y(j), px);
      float* dst = out.pixel(i, j);
      dst[0] = px[0];
      dst[1] = px[1];
      dst[2] = px[2];
    }
  return out;
}

Pose sample_pose(const PoseRanges& ranges, Rng& rng) {
  Pose p;
  p.radius = ranges.radius;
  p.theta_deg = rng.uniform(ranges.theta_min, ranges.theta_max);
  p.phi_deg = rng.uniform(ranges.phi_min, ranges.phi_max);
  p.shift = rng.uniform(ranges.shift_min, ranges.shift_max);
  p.validate();
  return p;
}

PatchPattern sample_pattern(int width, int height, double scale_frac_min,
                            double scale_frac_max, int k, Rng& rng) {
  if (k < 2) throw ContractViolation("sample_pattern: side length must be at least 2");
  if (scale_frac_min <= 0 || scale_frac_min > scale_frac_max || scale_frac_max > 1.0)
    throw ContractViolation("sample_pattern: need 0 < min <= max <= 1 for the scale range");

  const double frac = rng.uniform(scale_frac_min, scale_frac_max);
  PatchPattern p;
  p.k = k;
  // footprint = scale * (k - 1) pixels = frac * (extent - 1)
  const double extent = std::min(width, height) - 1.0;
  p.scale = frac * extent / (k - 1);
  const double half = p.scale * (k - 1) / 2.0;
  p.ux = rng.uniform(half, (width - 1) - half);
  p.uy = rng.uniform(half, (height - 1) - half);
  p.validate();
  return p;
}

}  // namespace ctrlnerf
