#include "upm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "text_format.hpp"
#include "upm/error.hpp"
#include "upm/log.hpp"
#include "upm/rng.hpp"

namespace upm {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kPlacementAttempts = 1000;
constexpr std::size_t kRegenerations = 64;
constexpr double kPlacementGap = 0.05;
constexpr std::array<double, 3> kFloorColor{0.45, 0.42, 0.40};

CatalogEntry box(const char* name, Vec3 lo, Vec3 hi) { return {name, lo, hi}; }

}  // namespace

SceneSpec SceneSpec::desk() {
  SceneSpec s;
  s.catalog = {
      box("bed", {1.4, 0.9, 0.4}, {2.0, 1.6, 0.6}),
      box("wardrobe", {0.8, 0.45, 1.6}, {1.2, 0.6, 2.0}),
      box("nightstand", {0.4, 0.4, 0.45}, {0.5, 0.5, 0.6}),
      box("lamp", {0.2, 0.2, 1.2}, {0.3, 0.3, 1.6}),
      box("chair", {0.4, 0.4, 0.8}, {0.5, 0.5, 1.0}),
      box("fridge", {0.6, 0.6, 1.6}, {0.8, 0.7, 1.9}),
      box("stove", {0.6, 0.6, 0.85}, {0.7, 0.65, 0.95}),
      box("counter", {1.2, 0.55, 0.85}, {2.0, 0.65, 0.95}),
      box("cabinet", {0.6, 0.4, 0.8}, {1.0, 0.5, 1.8}),
      box("table", {0.8, 0.7, 0.7}, {1.4, 0.9, 0.8}),
      box("desk", {1.0, 0.6, 0.7}, {1.6, 0.8, 0.78}),
      box("bookshelf", {0.8, 0.3, 1.5}, {1.2, 0.4, 2.0}),
      box("bathtub", {1.5, 0.7, 0.5}, {1.7, 0.8, 0.6}),
      box("toilet", {0.4, 0.6, 0.7}, {0.45, 0.7, 0.8}),
      box("sink", {0.5, 0.4, 0.8}, {0.6, 0.5, 0.9}),
      box("shower", {0.8, 0.8, 1.9}, {0.9, 0.9, 2.1}),
  };
  s.palette = {
      {"red", {0.85, 0.15, 0.15}},   {"green", {0.15, 0.7, 0.2}},  {"blue", {0.15, 0.25, 0.85}},
      {"yellow", {0.9, 0.85, 0.15}}, {"orange", {0.95, 0.55, 0.1}}, {"purple", {0.55, 0.2, 0.7}},
      {"white", {0.95, 0.95, 0.95}}, {"black", {0.08, 0.08, 0.08}},
  };
  s.scene_types = {
      {"bedroom", {"bed", "wardrobe", "nightstand", "lamp", "chair"}},
      {"kitchen", {"fridge", "stove", "counter", "cabinet", "table"}},
      {"office", {"desk", "chair", "bookshelf", "cabinet", "lamp"}},
      {"bathroom", {"bathtub", "toilet", "sink", "shower", "cabinet"}},
  };
  return s;
}

void SceneSpec::validate() const {
  if (!(extent_min > 0.0 && extent_max >= extent_min)) throw ConfigError("room extents must be positive and ordered");
  if (min_objects > max_objects) throw ConfigError("min_objects exceeds max_objects");
  if (ring.view_count < 2) throw ConfigError("camera ring needs at least 2 views");
  if (!(ring.radius_min > 0.0 && ring.radius_max >= ring.radius_min)) throw ConfigError("bad camera radius range");
  if (!(ring.height_min > 0.0 && ring.height_max >= ring.height_min)) throw ConfigError("bad camera height range");
  if (image_size < 1) throw ConfigError("image_size must be >= 1");
  if (!(horizontal_fov_deg > 0.0 && horizontal_fov_deg < 180.0)) throw ConfigError("fov must lie in (0, 180)");
  if (min_points < 1) throw ConfigError("min_points must be >= 1");
  if (max_objects > 0) {
    if (palette.size() < max_objects) throw ConfigError("palette must have at least max_objects colors");
    if (scene_types.empty()) throw ConfigError("at least one scene type is required");
  }
  for (const auto& t : scene_types) {
    if (t.categories.empty()) throw ConfigError("scene type '" + t.name + "' has no categories");
    for (const auto& c : t.categories) (void)entry(c);
  }
  if (!scene_type.empty() &&
      std::none_of(scene_types.begin(), scene_types.end(), [&](const auto& t) { return t.name == scene_type; })) {
    throw ConfigError("unknown scene type '" + scene_type + "'");
  }
}

const CatalogEntry& SceneSpec::entry(const std::string& category) const {
  for (const auto& e : catalog) {
    if (e.category == category) return e;
  }
  throw ConfigError("category '" + category + "' is not in the catalog");
}

Pointmap View::pointmap() const { return back_project(depth, height, width, intrinsics, pose); }

std::vector<Pointmap> Scene::pointmaps() const {
  std::vector<Pointmap> out;
  out.reserve(views.size());
  for (const auto& v : views) out.push_back(v.pointmap());
  return out;
}

void Scene::validate() const {
  if (views.size() < 2) throw ContractError("scene " + scene_id + " has fewer than 2 views");
  if (view_captions.size() != views.size()) throw ContractError("scene " + scene_id + ": one caption per view required");
  for (const auto& v : views) {
    if (v.image.size() != v.height * v.width * 3 || v.depth.size() != v.height * v.width) {
      throw ShapeError("scene " + scene_id + ": view rasters disagree with their dimensions");
    }
  }
}

// --- Generation --------------------------------------------------------------

namespace {

struct Placed {
  std::string category;
  const NamedColor* color;
  Aabb aabb;
};

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int object = -1;  // -1 floor, -2 nothing
  int axis = 2;
};

bool overlaps(const Aabb& a, const Aabb& b, double gap) {
  return a.min.x < b.max.x + gap && b.min.x < a.max.x + gap && a.min.y < b.max.y + gap && b.min.y < a.max.y + gap;
}

/// Slab test; returns entry distance and the entry axis, or nothing when the ray misses.
bool intersect_box(const Vec3& o, const Vec3& d, const Aabb& b, double& t_enter, int& axis) {
  const double org[3] = {o.x, o.y, o.z}, dir[3] = {d.x, d.y, d.z};
  const double lo[3] = {b.min.x, b.min.y, b.min.z}, hi[3] = {b.max.x, b.max.y, b.max.z};
  double tn = -std::numeric_limits<double>::infinity(), tf = std::numeric_limits<double>::infinity();
  int ax = -1;
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (org[a] < lo[a] || org[a] > hi[a]) return false;
      continue;
    }
    double t1 = (lo[a] - org[a]) / dir[a], t2 = (hi[a] - org[a]) / dir[a];
    if (t1 > t2) std::swap(t1, t2);
    if (t1 > tn) {
      tn = t1;
      ax = a;
    }
    tf = std::min(tf, t2);
  }
  if (ax < 0 || tn > tf || tn <= 0.0) return false;
  t_enter = tn;
  axis = ax;
  return true;
}

View render_view(const SceneSpec& spec, const std::vector<Placed>& objects, double half_x, double half_y,
                 const CameraPose& pose) {
  View view;
  const std::size_t n = spec.image_size;
  view.height = view.width = n;
  const double f = (static_cast<double>(n) / 2.0) / std::tan(spec.horizontal_fov_deg * std::numbers::pi / 360.0);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  view.intrinsics = {f, f, c, c};
  view.pose = pose;
  view.image.assign(n * n * 3, 0.0);
  view.depth.assign(n * n, 0.0);
  const Vec3 origin = pose.translation;
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t u = 0; u < n; ++u) {
      const Vec3 dir = pose.rotation * Vec3{(static_cast<double>(u) - c) / f, (static_cast<double>(v) - c) / f, 1.0};
      Hit hit;
      hit.object = -2;
      if (dir.z < 0.0) {
        const double t = -origin.z / dir.z;
        const Vec3 p = origin + t * dir;
        if (std::abs(p.x) <= half_x && std::abs(p.y) <= half_y) hit = {t, -1, 2};
      }
      for (std::size_t k = 0; k < objects.size(); ++k) {
        double t = 0.0;
        int axis = 0;
        if (intersect_box(origin, dir, objects[k].aabb, t, axis) && t < hit.t) hit = {t, static_cast<int>(k), axis};
      }
      if (hit.object == -2) continue;
      const std::size_t px = v * n + u;
      view.depth[px] = hit.t;
      std::array<double, 3> rgb = kFloorColor;
      if (hit.object >= 0) {
        static constexpr double kShade[3] = {0.8, 0.65, 1.0};
        rgb = objects[static_cast<std::size_t>(hit.object)].color->rgb;
        for (auto& ch : rgb) ch *= kShade[hit.axis];
      }
      for (std::size_t ch = 0; ch < 3; ++ch) view.image[px * 3 + ch] = rgb[ch];
    }
  }
  return view;
}

std::string article(const std::string& word) {
  return (!word.empty() && std::string("aeiou").find(word.front()) != std::string::npos) ? "an" : "a";
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += (i + 1 == items.size()) ? " and " : ", ";
    out += items[i];
  }
  return out;
}

Vec3 center(const Aabb& b) { return 0.5 * (b.min + b.max); }

std::optional<Scene> try_generate(const SceneSpec& spec, std::uint64_t seed, std::uint64_t reported_seed) {
  Rng rng(seed);
  Scene scene;
  const SceneType* type = nullptr;
  if (!spec.scene_type.empty()) {
    for (const auto& t : spec.scene_types) {
      if (t.name == spec.scene_type) type = &t;
    }
  } else if (!spec.scene_types.empty()) {
    type = &spec.scene_types[rng.below(spec.scene_types.size())];
  }
  scene.scene_type = type ? type->name : "room";

  const double ex = rng.uniform(spec.extent_min, spec.extent_max);
  const double ey = rng.uniform(spec.extent_min, spec.extent_max);
  const double hx = ex / 2.0, hy = ey / 2.0;
  const std::size_t count = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);

  std::vector<std::size_t> color_order(spec.palette.size());
  for (std::size_t i = 0; i < color_order.size(); ++i) color_order[i] = i;
  rng.shuffle(color_order);
  std::vector<std::string> categories = type ? type->categories : std::vector<std::string>{};
  rng.shuffle(categories);

  struct Pending {
    const CatalogEntry* entry;
    Vec3 size;
  };
  std::vector<Pending> pending;
  for (std::size_t k = 0; k < count; ++k) {
    const CatalogEntry& e = spec.entry(categories[k % categories.size()]);
    Vec3 size{rng.uniform(e.size_min.x, e.size_max.x), rng.uniform(e.size_min.y, e.size_max.y),
              rng.uniform(e.size_min.z, e.size_max.z)};
    if (rng.uniform() < 0.5) std::swap(size.x, size.y);
    pending.push_back({&e, size});
  }
  // Largest footprints first keeps rejection sampling from boxing itself in.
  std::stable_sort(pending.begin(), pending.end(),
                   [](const Pending& a, const Pending& b) { return a.size.x * a.size.y > b.size.x * b.size.y; });

  std::vector<Placed> placed;
  for (std::size_t k = 0; k < count; ++k) {
    const CatalogEntry& e = *pending[k].entry;
    const Vec3 size = pending[k].size;
    bool ok = false;
    for (std::size_t attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      if (size.x > ex || size.y > ey) break;
      const double cx = rng.uniform(-hx + size.x / 2.0, hx - size.x / 2.0);
      const double cy = rng.uniform(-hy + size.y / 2.0, hy - size.y / 2.0);
      const Aabb b{{cx - size.x / 2.0, cy - size.y / 2.0, 0.0}, {cx + size.x / 2.0, cy + size.y / 2.0, size.z}};
      if (std::none_of(placed.begin(), placed.end(), [&](const Placed& p) { return overlaps(p.aabb, b, kPlacementGap); })) {
        placed.push_back({e.category, &spec.palette[color_order[k]], b});
        ok = true;
      }
    }
    if (!ok) {
      throw GenerationError("seed " + std::to_string(reported_seed) + ": could not place a " + e.category +
                            " after " + std::to_string(kPlacementAttempts) + " attempts");
    }
  }

  const std::size_t nv = spec.ring.view_count;
  const double step = 2.0 * std::numbers::pi / static_cast<double>(nv);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < nv; ++i) {
    const double angle = phase + step * static_cast<double>(i) + spec.ring.angle_jitter * step * (rng.uniform() - 0.5);
    const double r = rng.uniform(spec.ring.radius_min, spec.ring.radius_max);
    const double h = rng.uniform(spec.ring.height_min, spec.ring.height_max);
    const Vec3 eye{r * std::cos(angle), r * std::sin(angle), h};
    const Vec3 target{spec.ring.target_jitter * (2.0 * rng.uniform() - 1.0),
                      spec.ring.target_jitter * (2.0 * rng.uniform() - 1.0), 0.3};
    scene.views.push_back(render_view(spec, placed, hx, hy, CameraPose::look_at(eye, target)));
  }

  for (std::size_t k = 0; k < placed.size(); ++k) {
    ObjectAnnotation a;
    a.object_id = k;
    a.aabb = placed[k].aabb;
    a.category = placed[k].category;
    a.color = placed[k].color->name;
    scene.objects.push_back(a);
  }

  const auto pms = scene.pointmaps();
  std::vector<std::vector<std::size_t>> area(nv, std::vector<std::size_t>(placed.size(), 0));
  for (std::size_t v = 0; v < nv; ++v) {
    for (std::size_t k = 0; k < placed.size(); ++k) area[v][k] = visible_area(pms[v], scene.objects[k]);
  }
  for (std::size_t k = 0; k < placed.size(); ++k) {
    std::size_t best = 0;
    for (std::size_t v = 0; v < nv; ++v) best = std::max(best, area[v][k]);
    if (best < spec.min_points) return std::nullopt;
  }

  for (std::size_t k = 0; k < placed.size(); ++k) {
    auto& a = scene.objects[k];
    a.referring_text = "the " + a.color + " " + a.category;
    if (placed.size() >= 2 && rng.uniform() < 0.5) {
      std::size_t nearest = k == 0 ? 1 : 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < placed.size(); ++j) {
        if (j == k) continue;
        const double d = squared_distance(center(a.aabb), center(placed[j].aabb));
        if (d < best) {
          best = d;
          nearest = j;
        }
      }
      a.referring_text += " near the " + placed[nearest].color->name + " " + placed[nearest].category;
    }
  }

  for (std::size_t v = 0; v < nv; ++v) {
    std::vector<std::size_t> seen;
    for (std::size_t k = 0; k < placed.size(); ++k) {
      if (area[v][k] >= spec.min_points) seen.push_back(k);
    }
    std::stable_sort(seen.begin(), seen.end(), [&](std::size_t a, std::size_t b) { return area[v][a] > area[v][b]; });
    std::vector<std::string> items;
    for (const auto k : seen) items.push_back(article(placed[k].color->name) + " " + placed[k].color->name + " " + placed[k].category);
    scene.view_captions.push_back(items.empty() ? "a view of the floor" : "a view of " + join_list(items));
  }

  std::vector<std::string> inventory;
  for (const auto& p : placed) inventory.push_back(article(p.color->name) + " " + p.color->name + " " + p.category);
  scene.scene_caption = inventory.empty() ? "an empty " + scene.scene_type
                                          : article(scene.scene_type) + " " + scene.scene_type + " with " + join_list(inventory);
  return scene;
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  for (std::size_t attempt = 0; attempt < kRegenerations; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : mix_seed(seed, attempt);
    if (auto scene = try_generate(spec, s, seed)) {
      scene->scene_id = "scene-" + std::to_string(seed);
      return *std::move(scene);
    }
  }
  throw GenerationError("seed " + std::to_string(seed) + ": some object stayed invisible after " +
                        std::to_string(kRegenerations) + " regenerations");
}

double render_depth_consistency_check(const Scene& scene) {
  double worst = 0.0;
  for (const auto& view : scene.views) {
    const Pointmap pm = view.pointmap();
    for (std::size_t i = 0; i < pm.points.size(); ++i) {
      if (!pm.valid[i]) continue;
      const Vec3& p = pm.points[i];
      double err = std::abs(p.z);
      for (const auto& obj : scene.objects) {
        const Aabb& b = obj.aabb;
        const double dx = std::max({b.min.x - p.x, 0.0, p.x - b.max.x});
        const double dy = std::max({b.min.y - p.y, 0.0, p.y - b.max.y});
        const double dz = std::max({b.min.z - p.z, 0.0, p.z - b.max.z});
        double d = std::sqrt(dx * dx + dy * dy + dz * dz);
        if (d == 0.0) {
          d = std::min({p.x - b.min.x, b.max.x - p.x, p.y - b.min.y, b.max.y - p.y, p.z - b.min.z, b.max.z - p.z});
        }
        err = std::min(err, d);
      }
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// --- Scene files ---------------------------------------------------------------

namespace {

constexpr const char* kSceneFile = "scene.txt";
constexpr const char* kSceneFormat = "upm-scene-1";

std::string raster_name(std::size_t v, const char* kind) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "view_%03zu.%s", v, kind);
  return buf;
}

void write_raster(const fs::path& path, std::size_t h, std::size_t w, std::size_t c, const std::vector<double>& data) {
  binary::Writer out;
  out.bytes("UPMV", 4);
  out.u32(static_cast<std::uint32_t>(h));
  out.u32(static_cast<std::uint32_t>(w));
  out.u32(static_cast<std::uint32_t>(c));
  for (const double x : data) out.f64(x);
  out.save(path);
}

std::vector<double> read_raster(const fs::path& path, std::size_t h, std::size_t w, std::size_t c) {
  binary::Reader in(path);
  in.expect_magic("UPMV");
  const std::size_t rh = in.u32(), rw = in.u32(), rc = in.u32();
  if (rh != h || rw != w || rc != c) in.fail("raster dimensions disagree with scene metadata");
  std::vector<double> data(h * w * c);
  for (auto& x : data) x = in.f64();
  if (in.remaining() != 0) in.fail("trailing bytes after raster data");
  return data;
}

std::string numbers(std::initializer_list<double> xs) {
  std::string out;
  for (const double x : xs) {
    if (!out.empty()) out += ' ';
    out += text::number(x);
  }
  return out;
}

}  // namespace

void save_scene(const Scene& scene, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream meta;
  meta << "format=" << kSceneFormat << '\n';
  meta << "scene_id=" << text::escape(scene.scene_id) << '\n';
  meta << "scene_type=" << text::escape(scene.scene_type) << '\n';
  meta << "scene_caption=" << text::escape(scene.scene_caption) << '\n';
  meta << "view_count=" << scene.views.size() << '\n';
  meta << "object_count=" << scene.objects.size() << '\n';
  for (std::size_t v = 0; v < scene.views.size(); ++v) {
    const View& view = scene.views[v];
    const std::string p = "view." + std::to_string(v) + ".";
    meta << p << "size=" << view.height << ' ' << view.width << '\n';
    const auto& k = view.intrinsics;
    meta << p << "intrinsics=" << numbers({k.fx, k.fy, k.cx, k.cy}) << '\n';
    const auto& r = view.pose.rotation.m;
    meta << p << "rotation=" << numbers({r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]}) << '\n';
    const auto& t = view.pose.translation;
    meta << p << "translation=" << numbers({t.x, t.y, t.z}) << '\n';
    meta << p << "caption=" << text::escape(v < scene.view_captions.size() ? scene.view_captions[v] : "") << '\n';
    write_raster(dir / raster_name(v, "rgb"), view.height, view.width, 3, view.image);
    write_raster(dir / raster_name(v, "depth"), view.height, view.width, 1, view.depth);
  }
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    const auto& o = scene.objects[k];
    const std::string p = "object." + std::to_string(k) + ".";
    meta << p << "id=" << o.object_id << '\n';
    meta << p << "category=" << text::escape(o.category) << '\n';
    meta << p << "color=" << text::escape(o.color) << '\n';
    meta << p << "aabb=" << numbers({o.aabb.min.x, o.aabb.min.y, o.aabb.min.z, o.aabb.max.x, o.aabb.max.y, o.aabb.max.z})
         << '\n';
    meta << p << "text=" << text::escape(o.referring_text) << '\n';
  }
  std::ofstream out(dir / kSceneFile, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / kSceneFile).string());
  out << meta.str();
  if (!out) throw IoError("failed writing " + (dir / kSceneFile).string());
}

namespace {

class MetaReader {
 public:
  MetaReader(fs::path path, std::map<std::string, std::pair<std::string, std::size_t>> values)
      : path_(std::move(path)), values_(std::move(values)) {}

  [[noreturn]] void fail(const std::string& what) const { throw FormatError(path_.string() + ": " + what); }

  const std::string& raw(const std::string& key) {
    const auto it = values_.find(key);
    if (it == values_.end()) fail("missing key '" + key + "'");
    used_.insert(key);
    return it->second.first;
  }
  std::string str(const std::string& key) { return text::unescape(raw(key)); }
  std::size_t count(const std::string& key) {
    const auto v = text::parse_u64(raw(key));
    if (!v) fail("key '" + key + "' is not a non-negative integer");
    return static_cast<std::size_t>(*v);
  }
  std::vector<double> doubles(const std::string& key, std::size_t n) {
    const auto parts = text::split(raw(key), ' ');
    if (parts.size() != n) fail("key '" + key + "' needs " + std::to_string(n) + " numbers");
    std::vector<double> out;
    for (const auto& s : parts) {
      const auto v = text::parse_double(s);
      if (!v) fail("key '" + key + "' has a malformed number '" + s + "'");
      out.push_back(*v);
    }
    return out;
  }
  void warn_unused() const {
    for (const auto& [key, value] : values_) {
      if (!used_.contains(key)) {
        log::warning(path_.string() + ":" + std::to_string(value.second) + ": unknown key '" + key + "' ignored");
      }
    }
  }

 private:
  fs::path path_;
  std::map<std::string, std::pair<std::string, std::size_t>> values_;
  std::set<std::string> used_;
};

}  // namespace

Scene load_scene(const fs::path& dir) {
  const fs::path meta_path = dir / kSceneFile;
  std::ifstream in(meta_path);
  if (!in) throw IoError("cannot open " + meta_path.string());
  std::map<std::string, std::pair<std::string, std::size_t>> values;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(meta_path.string() + ":" + std::to_string(no) + ": expected key=value");
    values[line.substr(0, eq)] = {line.substr(eq + 1), no};
  }
  MetaReader meta(meta_path, std::move(values));
  if (meta.raw("format") != kSceneFormat) meta.fail("unsupported format '" + meta.raw("format") + "'");
  Scene scene;
  scene.scene_id = meta.str("scene_id");
  scene.scene_type = meta.str("scene_type");
  scene.scene_caption = meta.str("scene_caption");
  const std::size_t nv = meta.count("view_count"), no = meta.count("object_count");
  for (std::size_t v = 0; v < nv; ++v) {
    const std::string p = "view." + std::to_string(v) + ".";
    View view;
    const auto size = meta.doubles(p + "size", 2);
    view.height = static_cast<std::size_t>(size[0]);
    view.width = static_cast<std::size_t>(size[1]);
    if (view.height == 0 || view.width == 0 || static_cast<double>(view.height) != size[0] ||
        static_cast<double>(view.width) != size[1]) {
      meta.fail("bad size for view " + std::to_string(v));
    }
    const auto k = meta.doubles(p + "intrinsics", 4);
    view.intrinsics = {k[0], k[1], k[2], k[3]};
    const auto r = meta.doubles(p + "rotation", 9);
    std::copy(r.begin(), r.end(), view.pose.rotation.m.begin());
    const auto t = meta.doubles(p + "translation", 3);
    view.pose.translation = {t[0], t[1], t[2]};
    scene.view_captions.push_back(meta.str(p + "caption"));
    view.image = read_raster(dir / raster_name(v, "rgb"), view.height, view.width, 3);
    view.depth = read_raster(dir / raster_name(v, "depth"), view.height, view.width, 1);
    scene.views.push_back(std::move(view));
  }
  for (std::size_t k = 0; k < no; ++k) {
    const std::string p = "object." + std::to_string(k) + ".";
    ObjectAnnotation o;
    o.object_id = meta.count(p + "id");
    o.category = meta.str(p + "category");
    o.color = meta.str(p + "color");
    const auto b = meta.doubles(p + "aabb", 6);
    o.aabb = {{b[0], b[1], b[2]}, {b[3], b[4], b[5]}};
    o.referring_text = meta.str(p + "text");
    scene.objects.push_back(std::move(o));
  }
  meta.warn_unused();
  return scene;
}

// --- Manifest ----------------------------------------------------------------

std::vector<fs::path> Manifest::split(const std::string& name) const {
  std::vector<fs::path> out;
  for (const auto& e : entries) {
    if (e.split == name) out.push_back(e.dir.is_absolute() ? e.dir : root / e.dir);
  }
  return out;
}

std::vector<std::string> assign_splits(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t held = count / 10;
  std::vector<std::string> out(count, "train");
  for (std::size_t i = 0; i < held; ++i) out[order[i]] = "val";
  for (std::size_t i = held; i < 2 * held; ++i) out[order[i]] = "test";
  return out;
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# split\tdir\n";
  for (const auto& e : manifest.entries) out << e.split << '\t' << e.dir.generic_string() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (text::trim(line).empty() || line.front() == '#') continue;
    const auto parts = text::split(line, '\t');
    if (parts.size() != 2 || (parts[0] != "train" && parts[0] != "val" && parts[0] != "test")) {
      throw FormatError(path.string() + ":" + std::to_string(no) + ": expected '<train|val|test>\\t<dir>'");
    }
    m.entries.push_back({parts[0], fs::path(parts[1])});
  }
  return m;
}

std::vector<Scene> load_split(const Manifest& manifest, const std::string& split) {
  std::vector<Scene> out;
  for (const auto& dir : manifest.split(split)) out.push_back(load_scene(dir));
  return out;
}

}  // namespace upm
