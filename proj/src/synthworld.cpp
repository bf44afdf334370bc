#include "bevkd/synthworld.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bevkd/util.hpp"

namespace bevkd::world {

WorldSpec WorldSpec::defaults() {
  WorldSpec s;
  s.class_sizes = {
      {1.6f, 2.2f, 3.5f, 5.0f},  // car-like
      {2.4f, 3.0f, 6.0f, 9.0f},  // truck-like
      {0.5f, 0.9f, 0.5f, 0.9f},  // pedestrian-like
  };
  return s;
}

void WorldSpec::validate() const {
  if (extent <= 0.0f) throw Error(ErrorKind::kConfig, "world.extent must be > 0");
  if (num_classes < 2) throw Error(ErrorKind::kConfig, "world.num_classes must be >= 2");
  if (max_objects < 1) throw Error(ErrorKind::kConfig, "world.max_objects must be >= 1");
  if (static_cast<std::int32_t>(class_sizes.size()) != num_classes)
    throw Error(ErrorKind::kConfig, "world.class_sizes must have one entry per class");
  if (lidar_noise < 0.0f || camera_range_noise < 0.0f)
    throw Error(ErrorKind::kConfig, "noise sigmas must be >= 0");
  if (azimuth_bins < 4) throw Error(ErrorKind::kConfig, "world.azimuth_bins must be >= 4");
  for (const auto& r : class_sizes) {
    if (r.w_lo <= 0.0f || r.l_lo <= 0.0f || r.w_hi < r.w_lo || r.l_hi < r.l_lo)
      throw Error(ErrorKind::kConfig, "invalid class size range");
  }
}

Scene sample_scene(Rng& rng, const WorldSpec& spec, std::int64_t scene_id) {
  spec.validate();
  Scene scene;
  scene.scene_id = scene_id;
  const std::int64_t n = rng.uniform_int(1, spec.max_objects);
  const double half = spec.extent * 0.5;

  for (std::int64_t k = 0; k < n; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      BoxLabel box;
      box.class_id = static_cast<std::int32_t>(rng.uniform_int(0, spec.num_classes - 1));
      const SizeRange& sr = spec.class_sizes[static_cast<std::size_t>(box.class_id)];
      box.w = static_cast<float>(rng.uniform(sr.w_lo, sr.w_hi));
      box.l = static_cast<float>(rng.uniform(sr.l_lo, sr.l_hi));
      box.yaw = static_cast<float>(wrap_angle(rng.uniform(-M_PI, M_PI)));
      const double margin = box.rect().half_diagonal();
      box.x = static_cast<float>(rng.uniform(-half + margin, half - margin));
      box.y = static_cast<float>(rng.uniform(margin, spec.extent - margin));
      if (box.distance() < spec.min_center_distance) continue;

      bool ok = true;
      for (const BoxLabel& other : scene.boxes) {
        const double min_sep = 0.8 * (box.rect().half_diagonal() + other.rect().half_diagonal());
        const double d = std::hypot(box.x - other.x, box.y - other.y);
        if (d <= min_sep) {
          ok = false;
          break;
        }
      }
      if (ok) {
        scene.boxes.push_back(box);
        placed = true;
      }
    }
    if (!placed) {
      std::ostringstream ss;
      ss << "scene " << scene_id << ": failed to place box " << k << " after 1000 attempts";
      throw Error(ErrorKind::kRuntime, ss.str());
    }
  }
  return scene;
}

double expected_point_count(const BoxLabel& box, const WorldSpec& spec) {
  const double d = box.distance();
  return spec.density_k / std::max(1.0, d * d);
}

namespace {

struct Edge {
  Vec2 a, b;
  double length;
};

// Edges of the box whose outward normal faces the sensor at the origin.
std::vector<Edge> sensor_facing_edges(const BoxLabel& box) {
  const auto cs = box.rect().corners();
  std::vector<Edge> edges;
  for (int i = 0; i < 4; ++i) {
    const Vec2 a = cs[i], b = cs[(i + 1) % 4];
    const Vec2 mid = (a + b) * 0.5;
    const Vec2 e = b - a;
    Vec2 normal{e.y, -e.x};
    const Vec2 center{box.x, box.y};
    if (normal.dot(mid - center) < 0.0) normal = normal * -1.0;  // point outward
    if (normal.dot(Vec2{0, 0} - mid) > 0.0) edges.push_back({a, b, e.norm()});
  }
  return edges;
}

}  // namespace

std::vector<LidarPoint> render_lidar(const Scene& scene, const WorldSpec& spec, Rng& rng) {
  std::vector<LidarPoint> points;
  for (std::size_t bi = 0; bi < scene.boxes.size(); ++bi) {
    const BoxLabel& box = scene.boxes[bi];
    const auto edges = sensor_facing_edges(box);
    double total_len = 0.0;
    for (const auto& e : edges) total_len += e.length;
    if (edges.empty() || total_len <= 0.0) continue;

    const std::int64_t count = rng.poisson(expected_point_count(box, spec));
    const double box_dist = box.distance();
    for (std::int64_t p = 0; p < count; ++p) {
      double u = rng.uniform(0.0, total_len);
      Vec2 pt = edges.back().b;
      for (const auto& e : edges) {
        if (u <= e.length) {
          pt = e.a + (e.b - e.a) * (u / e.length);
          break;
        }
        u -= e.length;
      }

      // Noise is drawn before the shadow test so the rng stream is identical
      // with occlusion on or off; the vector is clamped to magnitude sigma so
      // points stay within sigma of the source perimeter.
      if (spec.lidar_noise > 0.0f) {
        Vec2 noise{rng.normal(0.0, spec.lidar_noise), rng.normal(0.0, spec.lidar_noise)};
        const double mag = noise.norm();
        if (mag > spec.lidar_noise) noise = noise * (spec.lidar_noise / mag);
        pt = pt + noise;
      }

      if (spec.occlusion) {
        const double az = std::atan2(pt.y, pt.x);
        bool shadowed = false;
        for (std::size_t oi = 0; oi < scene.boxes.size() && !shadowed; ++oi) {
          if (oi == bi) continue;
          const BoxLabel& other = scene.boxes[oi];
          if (other.distance() >= box_dist) continue;
          if (angular_interval({0, 0}, other.rect()).contains(az)) shadowed = true;
        }
        if (shadowed) continue;
      }
      points.push_back({static_cast<float>(pt.x), static_cast<float>(pt.y)});
    }
  }
  return points;
}

double azimuth_of_bin(std::int32_t bin, const WorldSpec& spec) {
  // Panorama spans [0, pi]: the half plane containing the world.
  return (bin + 0.5) * M_PI / spec.azimuth_bins;
}

std::vector<double> nearest_hit_ranges(const Scene& scene, const WorldSpec& spec) {
  std::vector<double> ranges(static_cast<std::size_t>(spec.azimuth_bins), -1.0);
  std::vector<int> hit_box(static_cast<std::size_t>(spec.azimuth_bins), -1);
  for (std::int32_t a = 0; a < spec.azimuth_bins; ++a) {
    const double az = azimuth_of_bin(a, spec);
    const Vec2 dir{std::cos(az), std::sin(az)};
    double best = -1.0;
    for (std::size_t bi = 0; bi < scene.boxes.size(); ++bi) {
      const auto t = ray_rect_entry({0, 0}, dir, scene.boxes[bi].rect());
      if (t && (best < 0.0 || *t < best)) best = *t;
    }
    ranges[static_cast<std::size_t>(a)] = best;
  }
  return ranges;
}

std::vector<float> render_camera(const Scene& scene, const WorldSpec& spec, Rng& rng) {
  const std::int32_t ch = spec.panorama_channels();
  std::vector<float> pano(static_cast<std::size_t>(spec.azimuth_bins * ch), 0.0f);
  for (std::int32_t a = 0; a < spec.azimuth_bins; ++a) {
    const double az = azimuth_of_bin(a, spec);
    const Vec2 dir{std::cos(az), std::sin(az)};
    double best_t = -1.0;
    const BoxLabel* best_box = nullptr;
    for (const BoxLabel& box : scene.boxes) {
      const auto t = ray_rect_entry({0, 0}, dir, box.rect());
      if (t && (best_t < 0.0 || *t < best_t)) {
        best_t = *t;
        best_box = &box;
      }
    }
    float* col = pano.data() + static_cast<std::size_t>(a * ch);
    if (best_box == nullptr) {
      col[ch - 1] = 1.0f;  // background flag
      continue;
    }
    col[best_box->class_id] = 1.0f;  // semantics stay exact at every distance
    col[spec.num_classes] = static_cast<float>(angular_interval({0, 0}, best_box->rect()).width());
    const double noisy = best_t + rng.normal(0.0, spec.camera_range_noise * best_t);
    col[spec.num_classes + 1] = static_cast<float>(std::max(0.0, noisy));
  }
  return pano;
}

Scene make_scene(Rng& rng, const WorldSpec& spec, std::int64_t scene_id) {
  Scene scene = sample_scene(rng, spec, scene_id);
  scene.points = render_lidar(scene, spec, rng);
  scene.panorama = render_camera(scene, spec, rng);
  return scene;
}

std::vector<Scene> make_dataset(const WorldSpec& spec, std::int64_t count, std::uint64_t seed,
                                std::int64_t first_scene_id) {
  spec.validate();
  Rng root(seed);
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    // Child stream per scene: scene content depends only on (seed, scene_id).
    Rng rng = root.child(static_cast<std::uint64_t>(first_scene_id + i));
    scenes.push_back(make_scene(rng, spec, first_scene_id + i));
  }
  return scenes;
}

namespace {

constexpr char kMagic[4] = {'B', 'K', 'D', 'S'};

template <typename T>
void put(std::string& out, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& what) : buf_(buf), what_(what) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > buf_.size())
      throw Error(ErrorKind::kRuntime, what_ + ": truncated file");
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void raw(void* dst, std::size_t n) {
    if (pos_ + n > buf_.size()) throw Error(ErrorKind::kRuntime, what_ + ": truncated file");
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

void put_spec(std::string& out, const WorldSpec& s) {
  put(out, s.extent);
  put(out, s.num_classes);
  put(out, s.max_objects);
  for (const auto& r : s.class_sizes) {
    put(out, r.w_lo);
    put(out, r.w_hi);
    put(out, r.l_lo);
    put(out, r.l_hi);
  }
  put(out, s.min_center_distance);
  put(out, s.density_k);
  put(out, static_cast<std::int32_t>(s.occlusion ? 1 : 0));
  put(out, s.lidar_noise);
  put(out, s.camera_range_noise);
  put(out, s.azimuth_bins);
  put(out, s.seed);
}

WorldSpec get_spec(Reader& r) {
  WorldSpec s;
  s.extent = r.get<float>();
  s.num_classes = r.get<std::int32_t>();
  s.max_objects = r.get<std::int32_t>();
  if (s.num_classes < 0 || s.num_classes > 1024)
    throw Error(ErrorKind::kRuntime, "dataset: implausible class count");
  s.class_sizes.resize(static_cast<std::size_t>(s.num_classes));
  for (auto& range : s.class_sizes) {
    range.w_lo = r.get<float>();
    range.w_hi = r.get<float>();
    range.l_lo = r.get<float>();
    range.l_hi = r.get<float>();
  }
  s.min_center_distance = r.get<float>();
  s.density_k = r.get<float>();
  s.occlusion = r.get<std::int32_t>() != 0;
  s.lidar_noise = r.get<float>();
  s.camera_range_noise = r.get<float>();
  s.azimuth_bins = r.get<std::int32_t>();
  s.seed = r.get<std::uint64_t>();
  return s;
}

}  // namespace

void serialize_dataset(const std::vector<Scene>& scenes, const WorldSpec& spec,
                       const std::filesystem::path& path) {
  std::string out;
  out.append(kMagic, 4);
  put(out, kDatasetVersion);
  put_spec(out, spec);
  put(out, static_cast<std::int64_t>(scenes.size()));
  const std::int64_t pano_len = spec.azimuth_bins * spec.panorama_channels();
  for (const Scene& s : scenes) {
    put(out, s.scene_id);
    put(out, static_cast<std::int32_t>(s.boxes.size()));
    for (const BoxLabel& b : s.boxes) {
      put(out, b.class_id);
      put(out, b.x);
      put(out, b.y);
      put(out, b.w);
      put(out, b.l);
      put(out, b.yaw);
    }
    put(out, static_cast<std::int32_t>(s.points.size()));
    for (const LidarPoint& p : s.points) {
      put(out, p.x);
      put(out, p.y);
    }
    if (static_cast<std::int64_t>(s.panorama.size()) != pano_len)
      throw Error(ErrorKind::kRuntime, "scene panorama size inconsistent with spec");
    out.append(reinterpret_cast<const char*>(s.panorama.data()), s.panorama.size() * sizeof(float));
  }
  atomic_write_file(path, out);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const std::string buf = read_file(path);
  Reader r(buf, path.string());
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw Error(ErrorKind::kRuntime, path.string() + ": not a dataset file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion) {
    std::ostringstream ss;
    ss << path.string() << ": dataset version mismatch (file " << version << ", expected "
       << kDatasetVersion << ")";
    throw Error(ErrorKind::kRuntime, ss.str());
  }
  Dataset ds;
  ds.spec = get_spec(r);
  const auto count = r.get<std::int64_t>();
  if (count < 0) throw Error(ErrorKind::kRuntime, path.string() + ": negative record count");
  const std::int64_t pano_len = ds.spec.azimuth_bins * ds.spec.panorama_channels();
  ds.scenes.resize(static_cast<std::size_t>(count));
  for (auto& s : ds.scenes) {
    s.scene_id = r.get<std::int64_t>();
    const auto nb = r.get<std::int32_t>();
    s.boxes.resize(static_cast<std::size_t>(nb));
    for (auto& b : s.boxes) {
      b.class_id = r.get<std::int32_t>();
      b.x = r.get<float>();
      b.y = r.get<float>();
      b.w = r.get<float>();
      b.l = r.get<float>();
      b.yaw = r.get<float>();
    }
    const auto np = r.get<std::int32_t>();
    s.points.resize(static_cast<std::size_t>(np));
    for (auto& p : s.points) {
      p.x = r.get<float>();
      p.y = r.get<float>();
    }
    s.panorama.resize(static_cast<std::size_t>(pano_len));
    r.raw(s.panorama.data(), static_cast<std::size_t>(pano_len) * sizeof(float));
  }
  if (!r.at_end())
    throw Error(ErrorKind::kRuntime, path.string() + ": trailing bytes after last record");
  return ds;
}

}  // namespace bevkd::world
