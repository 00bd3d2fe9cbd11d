#include "ctrlnerf/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ctrlnerf/errors.hpp"

namespace ctrlnerf {

namespace {

constexpr float kStyleColors[4][3] = {
    {0.9f, 0.1f, 0.1f},  // red
    {0.1f, 0.9f, 0.1f},  // green
    {0.1f, 0.1f, 0.9f},  // blue
    {0.9f, 0.9f, 0.1f},  // yellow
};

// --- analytic intersections ------------------------------------------------
// All shapes are inscribed in the sphere of radius `scale`.

bool hit_sphere(double s, const Vec3& o, const Vec3& d, double t_min, double& t, Vec3& n) {
  const double b = o.dot(d);
  const double c = o.dot(o) - s * s;
  const double disc = b * b - c;
  if (disc < 0.0) return false;
  const double sq = std::sqrt(disc);
  double root = -b - sq;
  if (root <= t_min) root = -b + sq;
  if (root <= t_min) return false;
  t = root;
  n = (o + d * t) * (1.0 / s);
  return true;
}

bool hit_box(double s, const Vec3& o, const Vec3& d, double t_min, double& t, Vec3& n) {
  const double h = s / std::sqrt(3.0);  // half-extent, diagonal = scale
  double t_enter = -1e30, t_exit = 1e30;
  int enter_axis = -1;
  double enter_sign = 0.0;
  const double ov[3] = {o.x, o.y, o.z};
  const double dv[3] = {d.x, d.y, d.z};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dv[a]) < 1e-15) {
      if (std::abs(ov[a]) > h) return false;
      continue;
    }
    double t0 = (-h - ov[a]) / dv[a];
    double t1 = (h - ov[a]) / dv[a];
    double sign = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      sign = 1.0;
    }
    if (t0 > t_enter) {
      t_enter = t0;
      enter_axis = a;
      enter_sign = sign;
    }
    t_exit = std::min(t_exit, t1);
  }
  if (t_enter > t_exit || t_exit <= t_min) return false;
  if (t_enter <= t_min) return false;  // origin inside: treat as miss
  t = t_enter;
  n = {0, 0, 0};
  if (enter_axis == 0) n.x = enter_sign;
  if (enter_axis == 1) n.y = enter_sign;
  if (enter_axis == 2) n.z = enter_sign;
  return true;
}

bool hit_cylinder(double s, const Vec3& o, const Vec3& d, double t_min, double& t, Vec3& n) {
  // y-axis aligned, radius = half-height = scale / sqrt(2)
  const double r = s / std::sqrt(2.0);
  const double h = r;
  double best = 1e30;
  Vec3 best_n;

  // lateral surface x^2 + z^2 = r^2
  const double a = d.x * d.x + d.z * d.z;
  if (a > 1e-15) {
    const double b = o.x * d.x + o.z * d.z;
    const double c = o.x * o.x + o.z * o.z - r * r;
    const double disc = b * b - a * c;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      for (double root : {(-b - sq) / a, (-b + sq) / a}) {
        if (root <= t_min || root >= best) continue;
        const double y = o.y + root * d.y;
        if (std::abs(y) > h) continue;
        best = root;
        const Vec3 p = o + d * root;
        best_n = Vec3{p.x, 0.0, p.z} * (1.0 / r);
      }
    }
  }
  // end caps y = +-h
  if (std::abs(d.y) > 1e-15) {
    for (double cap : {h, -h}) {
      const double root = (cap - o.y) / d.y;
      if (root <= t_min || root >= best) continue;
      const Vec3 p = o + d * root;
      if (p.x * p.x + p.z * p.z > r * r) continue;
      best = root;
      best_n = {0.0, cap > 0 ? 1.0 : -1.0, 0.0};
    }
  }
  if (best >= 1e30) return false;
  t = best;
  n = best_n;
  return true;
}

// Real roots of x^3 + a x^2 + b x + c (Cardano; trig form for 3 real roots).
int solve_cubic(double a, double b, double c, double roots[3]) {
  const double p = b - a * a / 3.0;
  const double q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
  const double off = -a / 3.0;
  const double disc = q * q / 4.0 + p * p * p / 27.0;
  if (disc > 1e-14) {
    const double sq = std::sqrt(disc);
    const double u = std::cbrt(-q / 2.0 + sq);
    const double v = std::cbrt(-q / 2.0 - sq);
    roots[0] = u + v + off;
    return 1;
  }
  if (std::abs(p) < 1e-14) {
    roots[0] = std::cbrt(-q) + off;
    return 1;
  }
  const double rho = std::sqrt(-p * p * p / 27.0);
  const double theta = std::acos(std::clamp(-q / (2.0 * rho), -1.0, 1.0));
  const double mag = 2.0 * std::sqrt(-p / 3.0);
  for (int k = 0; k < 3; ++k)
    roots[k] = mag * std::cos((theta + 2.0 * M_PI * k) / 3.0) + off;
  return 3;
}

// Real roots of t^4 + a t^3 + b t^2 + c t + d via Ferrari's factorization
// into two quadratics, Newton-polished on the original quartic.
int solve_quartic(double a, double b, double c, double d, double roots[4]) {
  // depressed quartic u^4 + p u^2 + q u + r, t = u - a/4
  const double a2 = a * a;
  const double p = b - 3.0 * a2 / 8.0;
  const double q = c - a * b / 2.0 + a2 * a / 8.0;
  const double r = d - a * c / 4.0 + a2 * b / 16.0 - 3.0 * a2 * a2 / 256.0;
  const double off = -a / 4.0;

  int count = 0;
  auto push_quadratic = [&](double bb, double cc) {
    const double disc = bb * bb - 4.0 * cc;
    if (disc < 0.0) return;
    const double sq = std::sqrt(disc);
    roots[count++] = (-bb - sq) / 2.0 + off;
    roots[count++] = (-bb + sq) / 2.0 + off;
  };

  if (std::abs(q) < 1e-12) {
    // biquadratic: u^2 = y with y^2 + p y + r = 0
    const double disc = p * p - 4.0 * r;
    if (disc < 0.0) return 0;
    const double sq = std::sqrt(disc);
    for (double y : {(-p - sq) / 2.0, (-p + sq) / 2.0}) {
      if (y < 0.0) continue;
      const double u = std::sqrt(y);
      roots[count++] = -u + off;
      roots[count++] = u + off;
    }
  } else {
    // resolvent: y^3 + 2p y^2 + (p^2 - 4r) y - q^2 = 0 has a positive root
    double cub[3];
    const int nc = solve_cubic(2.0 * p, p * p - 4.0 * r, -q * q, cub);
    double y = -1.0;
    for (int i = 0; i < nc; ++i) y = std::max(y, cub[i]);
    if (y <= 0.0) return 0;
    const double s = std::sqrt(y);
    const double w1 = (p + y - q / s) / 2.0;
    const double w2 = (p + y + q / s) / 2.0;
    push_quadratic(s, w1);
    push_quadratic(-s, w2);
  }

  // polish against the original quartic
  for (int i = 0; i < count; ++i) {
    double t = roots[i];
    for (int it = 0; it < 3; ++it) {
      const double f = (((t + a) * t + b) * t + c) * t + d;
      const double df = ((4.0 * t + 3.0 * a) * t + 2.0 * b) * t + c;
      if (std::abs(df) < 1e-12) break;
      t -= f / df;
    }
    roots[i] = t;
  }
  std::sort(roots, roots + count);
  return count;
}

bool hit_torus(double s, const Vec3& o, const Vec3& d, double t_min, double& t, Vec3& n) {
  // ring radius R, tube radius r, inscribed: R + r = scale
  const double big_r = 0.65 * s;
  const double tube_r = 0.3 * s;

  const double beta = 2.0 * o.dot(d);
  const double gamma = o.dot(o) + big_r * big_r - tube_r * tube_r;
  const double dxz = d.x * d.x + d.z * d.z;
  const double oxz = o.x * d.x + o.z * d.z;
  const double pxz = o.x * o.x + o.z * o.z;
  const double k4 = 4.0 * big_r * big_r;

  const double a = 2.0 * beta;
  const double b = beta * beta + 2.0 * gamma - k4 * dxz;
  const double c = 2.0 * beta * gamma - 2.0 * k4 * oxz;
  const double e = gamma * gamma - k4 * pxz;

  double roots[4];
  const int count = solve_quartic(a, b, c, e, roots);
  for (int i = 0; i < count; ++i) {
    if (roots[i] <= t_min) continue;
    t = roots[i];
    const Vec3 p = o + d * t;
    const double q = std::sqrt(p.x * p.x + p.z * p.z);
    if (q < 1e-12) continue;  // on the axis: not on the surface
    const Vec3 ring{big_r * p.x / q, 0.0, big_r * p.z / q};
    n = (p - ring) * (1.0 / tube_r);
    return true;
  }
  return false;
}

}  // namespace

void SceneSpec::validate() const {
  if (class_id < 0 || class_id >= kShapeCount)
    throw ContractViolation("SceneSpec: class id " + std::to_string(class_id) + " outside [0,4)");
  if (style_id < 0 || style_id >= kStyleCount)
    throw ContractViolation("SceneSpec: style id " + std::to_string(style_id) + " outside [0,4)");
  if (scale <= 0.0) throw ContractViolation("SceneSpec: scale must be positive");
}

void SceneSpec::base_color(float out[3]) const {
  validate();
  for (int c = 0; c < 3; ++c) out[c] = kStyleColors[style_id][c];
}

bool intersect_shape(int class_id, double scale, const Vec3& origin, const Vec3& dir,
                     double t_min, double& t_hit, Vec3& normal) {
  switch (class_id) {
    case 0: return hit_sphere(scale, origin, dir, t_min, t_hit, normal);
    case 1: return hit_box(scale, origin, dir, t_min, t_hit, normal);
    case 2: return hit_cylinder(scale, origin, dir, t_min, t_hit, normal);
    case 3: return hit_torus(scale, origin, dir, t_min, t_hit, normal);
    default:
      throw ContractViolation("intersect_shape: class id " + std::to_string(class_id) +
                              " outside [0,4)");
  }
}

Image raytrace_reference(const SceneSpec& spec, const Intrinsics& K, const Pose& pose) {
  spec.validate();
  K.validate();
  const CameraFrame frame = pose_to_camera(pose);
  float color[3];
  spec.base_color(color);
  Image img(K.width, K.height, 1.0f);  // white background
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x) {
      const Vec3 cam_dir{(x - K.cx) / K.fx, -(y - K.cy) / K.fy, -1.0};
      const Vec3 dir = frame.to_world(cam_dir).normalized();
      double t;
      Vec3 n;
      if (!intersect_shape(spec.class_id, spec.scale, frame.position, dir, 1e-6, t, n)) continue;
      float* px = img.pixel(x, y);
      if (spec.lambertian) {
        const double lambert = std::max(0.0, n.dot(dir * -1.0));
        for (int ci = 0; ci < 3; ++ci) px[ci] = static_cast<float>(color[ci] * lambert);
      } else {
        for (int ci = 0; ci < 3; ++ci) px[ci] = color[ci];
      }
    }
  return img;
}

void DatasetConfig::validate() const {
  if (m < 1 || m > SceneSpec::kShapeCount || n < 1 || n > SceneSpec::kStyleCount)
    throw ContractViolation("DatasetConfig: class/style counts must be in [1,4]");
  if (poses_per_cell < 1) throw ContractViolation("DatasetConfig: poses_per_cell must be >= 1");
  if (image_size < 2) throw ContractViolation("DatasetConfig: image size must be >= 2");
  if (radius <= 0.0 || scale <= 0.0)
    throw ContractViolation("DatasetConfig: radius and scale must be positive");
  if (phi_min < 0.0 || phi_max > 90.0 || phi_min > phi_max)
    throw ContractViolation("DatasetConfig: pitch range must sit inside [0,90]");
  if (shift_min > shift_max) throw ContractViolation("DatasetConfig: inverted shift range");
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

LabeledImageSet generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (!std::filesystem::is_directory(out_dir))
    throw IoError("generate_dataset: cannot create " + out_dir.string());

  LabeledImageSet set;
  set.root = out_dir;
  set.m = cfg.m;
  set.n = cfg.n;

  const int total = cfg.m * cfg.n * cfg.poses_per_cell;
  set.items.resize(total);
  set.images.resize(total);
  const auto K = Intrinsics::from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg);

  PoseRanges ranges;
  ranges.radius = cfg.radius;
  ranges.phi_min = cfg.phi_min;
  ranges.phi_max = cfg.phi_max;
  ranges.shift_min = cfg.shift_min;
  ranges.shift_max = cfg.shift_max;

#pragma omp parallel for schedule(dynamic)
  for (int idx = 0; idx < total; ++idx) {
    const int cell = idx / cfg.poses_per_cell;
    const int pose_idx = idx % cfg.poses_per_cell;
    const int class_id = cell / cfg.n;
    const int style_id = cell % cfg.n;

    Rng rng = Rng::stream(cfg.seed, static_cast<uint64_t>(idx));
    const Pose pose = sample_pose(ranges, rng);

    SceneSpec spec;
    spec.class_id = class_id;
    spec.style_id = style_id;
    spec.scale = cfg.scale;
    Image img = raytrace_reference(spec, K, pose);

    char name[64];
    std::snprintf(name, sizeof name, "c%d_s%d_p%04d.ppm", class_id, style_id, pose_idx);
    write_ppm(img, out_dir / name);
    // Keep the in-memory copy on the 8-bit grid the file stores, so the
    // returned set is pixel-identical to a later load_dataset().
    for (float& v : img.rgb)
      v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0);

    set.items[idx] = DatasetItem{name, class_id, style_id, pose};
    set.images[idx] = std::move(img);
  }

  std::ofstream mf(out_dir / kManifestName, std::ios::binary);
  if (!mf) throw IoError("generate_dataset: cannot write manifest in " + out_dir.string());
  mf << kManifestHeader << "\n";
  for (const auto& it : set.items)
    mf << it.path << "\t" << it.class_id << "\t" << it.style_id << "\t"
       << format_double(it.pose.theta_deg) << "\t" << format_double(it.pose.phi_deg) << "\t"
       << format_double(it.pose.radius) << "\t" << format_double(it.pose.shift) << "\n";
  if (!mf.flush()) throw IoError("generate_dataset: manifest write failed");
  return set;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

int parse_int(const std::string& s, int line_no, const char* what) {
  int v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ParseError(std::string("manifest: bad ") + what + " '" + s + "'", line_no);
  return v;
}

double parse_double(const std::string& s, int line_no, const char* what) {
  if (s.empty()) throw ParseError(std::string("manifest: empty ") + what, line_no);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v))
    throw ParseError(std::string("manifest: bad ") + what + " '" + s + "'", line_no);
  return v;
}

}  // namespace

LabeledImageSet load_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / kManifestName;
  std::ifstream mf(manifest_path, std::ios::binary);
  if (!mf) throw IoError("load_dataset: cannot open " + manifest_path.string());

  std::string line;
  if (!std::getline(mf, line)) throw ParseError("manifest: empty file", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) throw ParseError("manifest: unrecognized header '" + line + "'", 1);

  LabeledImageSet set;
  set.root = root;
  int line_no = 1;
  while (std::getline(mf, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 7)
      throw ParseError("manifest: expected 7 tab-separated fields, got " +
                           std::to_string(fields.size()),
                       line_no);
    DatasetItem item;
    item.path = fields[0];
    if (item.path.empty()) throw ParseError("manifest: empty path", line_no);
    item.class_id = parse_int(fields[1], line_no, "class id");
    item.style_id = parse_int(fields[2], line_no, "style id");
    if (item.class_id < 0 || item.style_id < 0)
      throw ParseError("manifest: negative label id", line_no);
    item.pose.theta_deg = parse_double(fields[3], line_no, "yaw");
    item.pose.phi_deg = parse_double(fields[4], line_no, "pitch");
    item.pose.radius = parse_double(fields[5], line_no, "radius");
    item.pose.shift = parse_double(fields[6], line_no, "shift");
    try {
      item.pose.validate();
    } catch (const ContractViolation& e) {
      throw ParseError(std::string("manifest: ") + e.what(), line_no);
    }
    set.items.push_back(std::move(item));
  }

  set.images.reserve(set.items.size());
  for (const auto& it : set.items) {
    const auto img_path = root / it.path;
    if (!std::filesystem::exists(img_path))
      throw IoError("load_dataset: missing image " + img_path.string());
    set.images.push_back(read_ppm(img_path));
    set.m = std::max(set.m, it.class_id + 1);
    set.n = std::max(set.n, it.style_id + 1);
  }
  return set;
}

std::vector<int> sample_batch(const LabeledImageSet& set, int batch_size, Rng& rng) {
  if (set.items.empty()) throw ContractViolation("sample_batch: empty dataset");
  if (batch_size < 1) throw ContractViolation("sample_batch: batch size must be >= 1");
  std::vector<int> out(batch_size);
  for (auto& v : out) v = static_cast<int>(rng.uniform_index(set.items.size()));
  return out;
}

}  // namespace ctrlnerf
