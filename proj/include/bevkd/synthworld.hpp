#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bevkd/geometry.hpp"
#include "bevkd/rng.hpp"

namespace bevkd::world {

// Per-class BEV footprint size ranges in meters.
struct SizeRange {
  float w_lo = 0.5f, w_hi = 1.0f;
  float l_lo = 0.5f, l_hi = 1.0f;
};

// World geometry and sensor model. The sensor sits at the origin, which is
// the midpoint of the square world's near edge: x in [-extent/2, extent/2],
// y in [0, extent].
struct WorldSpec {
  float extent = 40.0f;
  std::int32_t num_classes = 3;
  std::int32_t max_objects = 6;
  std::vector<SizeRange> class_sizes;  // one per class
  float min_center_distance = 3.0f;    // keep boxes off the sensor
  float density_k = 200.0f;            // expected lidar returns at 1 m
  bool occlusion = true;
  float lidar_noise = 0.05f;           // sigma_pt, meters
  float camera_range_noise = 0.05f;    // range cue noise std per meter of distance
  std::int32_t azimuth_bins = 128;
  std::uint64_t seed = 0;

  static WorldSpec defaults();
  void validate() const;
  // Panorama channel layout: [one-hot class .. m) | angular width | range cue | background flag.
  std::int32_t panorama_channels() const { return num_classes + 3; }
};

struct BoxLabel {
  std::int32_t class_id = 0;
  float x = 0.0f, y = 0.0f;  // center, world frame
  float w = 0.0f, l = 0.0f;  // BEV size
  float yaw = 0.0f;          // (-pi, pi]

  OrientedRect rect() const { return {{x, y}, w, l, static_cast<double>(yaw)}; }
  double distance() const { return std::hypot(static_cast<double>(x), static_cast<double>(y)); }

  bool operator==(const BoxLabel&) const = default;
};

struct LidarPoint {
  float x = 0.0f, y = 0.0f;

  bool operator==(const LidarPoint&) const = default;
};

struct Scene {
  std::int64_t scene_id = 0;
  std::vector<BoxLabel> boxes;
  std::vector<LidarPoint> points;
  std::vector<float> panorama;  // row-major [azimuth_bins x panorama_channels]

  bool operator==(const Scene&) const = default;
};

// Draw ground-truth boxes only; sensors are rendered separately.
Scene sample_scene(Rng& rng, const WorldSpec& spec, std::int64_t scene_id);

// Perimeter returns with k/d^2 density, optional occlusion shadowing and
// position noise clamped to magnitude lidar_noise.
std::vector<LidarPoint> render_lidar(const Scene& scene, const WorldSpec& spec, Rng& rng);

double expected_point_count(const BoxLabel& box, const WorldSpec& spec);

// 1D panorama: per azimuth bin the nearest intersected box contributes class
// one-hot, angular width, and a range cue with noise growing linearly in
// distance. Class channels are never corrupted.
std::vector<float> render_camera(const Scene& scene, const WorldSpec& spec, Rng& rng);

// Nearest ray-box hit distance per azimuth bin, or a negative value for
// background rays. Noise-free; also used for depth supervision targets.
std::vector<double> nearest_hit_ranges(const Scene& scene, const WorldSpec& spec);

double azimuth_of_bin(std::int32_t bin, const WorldSpec& spec);

// Convenience: sample boxes and render both sensors.
Scene make_scene(Rng& rng, const WorldSpec& spec, std::int64_t scene_id);
std::vector<Scene> make_dataset(const WorldSpec& spec, std::int64_t count, std::uint64_t seed,
                                std::int64_t first_scene_id = 0);

// Versioned binary dataset: header (magic, version, WorldSpec), then one
// record per scene. Field order is documented in the README.
void serialize_dataset(const std::vector<Scene>& scenes, const WorldSpec& spec,
                       const std::filesystem::path& path);
struct Dataset {
  WorldSpec spec;
  std::vector<Scene> scenes;
};
Dataset load_dataset(const std::filesystem::path& path);

constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace bevkd::world
