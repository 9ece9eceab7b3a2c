#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "upm/data.hpp"
#include "upm/error.hpp"
#include "upm/log.hpp"

using namespace upm;
namespace fs = std::filesystem;

namespace {

SceneSpec small_spec() {
  SceneSpec s = SceneSpec::desk();
  s.image_size = 16;
  s.ring.view_count = 4;
  s.min_points = 4;
  return s;
}

bool strictly_inside(const Vec3& p, const Aabb& b, double margin) {
  return p.x > b.min.x + margin && p.x < b.max.x - margin && p.y > b.min.y + margin && p.y < b.max.y - margin &&
         p.z > b.min.z + margin && p.z < b.max.z - margin;
}

double surface_distance(const Vec3& p, const Aabb& b) {
  const double dx = std::max({b.min.x - p.x, 0.0, p.x - b.max.x});
  const double dy = std::max({b.min.y - p.y, 0.0, p.y - b.max.y});
  const double dz = std::max({b.min.z - p.z, 0.0, p.z - b.max.z});
  const double out = std::sqrt(dx * dx + dy * dy + dz * dz);
  if (out > 0.0) return out;
  return std::min({p.x - b.min.x, b.max.x - p.x, p.y - b.min.y, b.max.y - p.y, p.z - b.min.z, b.max.z - p.z});
}

// Every valid pixel lands on the floor or a box face, and nothing solid sits between it and the camera.
void check_render(const Scene& scene) {
  for (const auto& view : scene.views) {
    const Pointmap pm = view.pointmap();
    const Vec3 eye = view.pose.translation;
    for (std::size_t i = 0; i < pm.points.size(); ++i) {
      if (!pm.valid[i]) continue;
      const Vec3 p = pm.points[i];
      double d = std::abs(p.z);
      for (const auto& o : scene.objects) d = std::min(d, surface_distance(p, o.aabb));
      CHECK(d <= 1e-9);
      for (int s = 1; s < 50; ++s) {
        const Vec3 q = eye + (static_cast<double>(s) / 50.0) * (p - eye);
        CHECK(q.z > -1e-9);
        for (const auto& o : scene.objects) CHECK_FALSE(strictly_inside(q, o.aabb, 1e-6));
      }
    }
  }
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::trunc);
  out << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("desk preset validates") {
    const SceneSpec s = SceneSpec::desk();
    CHECK_NOTHROW(s.validate());
    CHECK(s.scene_types.size() == 4);
    CHECK(s.catalog.size() == 16);
    CHECK(s.palette.size() == 8);
    CHECK(s.ring.view_count == 16);
  }

  TEST_CASE("invalid specs are rejected") {
    SceneSpec s = small_spec();
    s.min_objects = 6;
    s.max_objects = 2;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.ring.view_count = 1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.scene_type = "garage";
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.horizontal_fov_deg = 180.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
  }

  TEST_CASE("generation is a pure function of the seed") {
    const SceneSpec s = small_spec();
    const Scene a = generate_scene(s, 5), b = generate_scene(s, 5), c = generate_scene(s, 6);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    CHECK_NOTHROW(a.validate());
    CHECK(a.views.size() == 4);
    CHECK(a.view_captions.size() == 4);
  }

  TEST_CASE("empty room renders only floor at z = 0") {
    SceneSpec s = small_spec();
    s.min_objects = s.max_objects = 0;
    const Scene scene = generate_scene(s, 3);
    CHECK(scene.objects.empty());
    std::size_t valid = 0;
    for (const auto& pm : scene.pointmaps()) {
      for (std::size_t i = 0; i < pm.points.size(); ++i) {
        if (!pm.valid[i]) continue;
        ++valid;
        CHECK(std::abs(pm.points[i].z) <= 1e-9);
      }
    }
    CHECK(valid > 0);
    CHECK(render_depth_consistency_check(scene) <= 1e-9);
    for (const auto& c : scene.view_captions) CHECK(c == "a view of the floor");
  }

  TEST_CASE("rendered depth agrees with the annotated boxes") {
    const SceneSpec s = small_spec();
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const Scene scene = generate_scene(s, seed);
      check_render(scene);
      CHECK(render_depth_consistency_check(scene) <= 1e-9);
    }
  }

  TEST_CASE("a lone object near the room center is seen by every ring view") {
    SceneSpec s = small_spec();
    s.min_objects = s.max_objects = 1;
    s.extent_min = s.extent_max = 1.2;
    s.ring.target_jitter = 0.0;
    s.ring.view_count = 8;
    for (std::uint64_t seed = 30; seed < 35; ++seed) {
      const Scene scene = generate_scene(s, seed);
      REQUIRE(scene.objects.size() == 1);
      check_render(scene);
      for (const auto& pm : scene.pointmaps()) CHECK(visible_area(pm, scene.objects[0]) > 0);
    }
  }

  TEST_CASE("every object is visible in some view and uses a distinct palette color") {
    const SceneSpec s = small_spec();
    for (std::uint64_t seed = 10; seed < 16; ++seed) {
      const Scene scene = generate_scene(s, seed);
      CHECK(scene.objects.size() >= s.min_objects);
      CHECK(scene.objects.size() <= s.max_objects);
      const auto pms = scene.pointmaps();
      std::set<std::string> colors;
      for (const auto& o : scene.objects) {
        std::size_t best = 0;
        for (const auto& pm : pms) best = std::max(best, visible_area(pm, o));
        CHECK(best >= s.min_points);
        colors.insert(o.color);
        CHECK(o.referring_text.find(o.category) != std::string::npos);
        CHECK(o.aabb.min.z == 0.0);
      }
      CHECK(colors.size() == scene.objects.size());
    }
  }

  TEST_CASE("scene type override") {
    SceneSpec s = small_spec();
    s.scene_type = "kitchen";
    const Scene scene = generate_scene(s, 4);
    CHECK(scene.scene_type == "kitchen");
    CHECK(scene.scene_caption.find("kitchen") != std::string::npos);
  }

  TEST_CASE("save and load round trip exactly") {
    testing::TempDir tmp("scene");
    const Scene a = generate_scene(small_spec(), 8);
    save_scene(a, tmp / "s");
    CHECK(load_scene(tmp / "s") == a);
  }

  TEST_CASE("truncated raster is a format error") {
    testing::TempDir tmp("trunc");
    save_scene(generate_scene(small_spec(), 9), tmp / "s");
    const fs::path r = tmp / "s" / "view_001.depth";
    fs::resize_file(r, fs::file_size(r) / 2);
    CHECK_THROWS_AS(load_scene(tmp / "s"), FormatError);
  }

  TEST_CASE("missing scene is an io error, missing key a format error") {
    testing::TempDir tmp("missing");
    CHECK_THROWS_AS(load_scene(tmp / "none"), IoError);
    save_scene(generate_scene(small_spec(), 9), tmp / "s");
    std::string meta = read_text(tmp / "s" / "scene.txt");
    const auto pos = meta.find("scene_caption=");
    meta.erase(pos, meta.find('\n', pos) - pos + 1);
    write_text(tmp / "s" / "scene.txt", meta);
    CHECK_THROWS_AS(load_scene(tmp / "s"), FormatError);
  }

  TEST_CASE("unknown scene key warns with its line number") {
    testing::TempDir tmp("unknown");
    const Scene a = generate_scene(small_spec(), 9);
    save_scene(a, tmp / "s");
    const std::string meta = read_text(tmp / "s" / "scene.txt");
    const auto lines = static_cast<std::size_t>(std::count(meta.begin(), meta.end(), '\n'));
    write_text(tmp / "s" / "scene.txt", meta + "lighting=warm\n");
    log::ScopedCapture cap;
    CHECK(load_scene(tmp / "s") == a);
    CHECK(cap.warnings() == 1);
    CHECK(cap.text().find(":" + std::to_string(lines + 1) + ": unknown key 'lighting'") != std::string::npos);
  }

  TEST_CASE("split assignment sizes and determinism") {
    const auto s = assign_splits(64, 7);
    std::map<std::string, int> n;
    for (const auto& x : s) ++n[x];
    CHECK(n["train"] == 52);
    CHECK(n["val"] == 6);
    CHECK(n["test"] == 6);
    CHECK(assign_splits(64, 7) == s);
    CHECK(assign_splits(64, 8) != s);
    CHECK(assign_splits(1, 7) == std::vector<std::string>{"train"});
    CHECK(assign_splits(9, 7) == std::vector<std::string>(9, "train"));
  }

  TEST_CASE("manifest round trip and bad lines") {
    testing::TempDir tmp("manifest");
    Manifest m;
    m.entries = {{"train", "scene_0000"}, {"test", "scene_0001"}, {"val", "scene_0002"}};
    save_manifest(m, tmp / "manifest.tsv");
    const Manifest back = load_manifest(tmp / "manifest.tsv");
    CHECK(back.entries == m.entries);
    CHECK(back.root == tmp.path());
    CHECK(back.split("test") == std::vector<fs::path>{tmp / "scene_0001"});
    write_text(tmp / "bad.tsv", "holdout\tscene_0000\n");
    CHECK_THROWS_AS(load_manifest(tmp / "bad.tsv"), FormatError);
    CHECK_THROWS_AS(load_manifest(tmp / "none.tsv"), IoError);
  }

  TEST_CASE("load_split reads scenes in manifest order") {
    testing::TempDir tmp("split");
    const SceneSpec s = small_spec();
    Manifest m;
    m.root = tmp.path();
    for (std::uint64_t i = 0; i < 3; ++i) {
      save_scene(generate_scene(s, 20 + i), tmp / ("s" + std::to_string(i)));
      m.entries.push_back({i == 1 ? "val" : "train", "s" + std::to_string(i)});
    }
    const auto train = load_split(m, "train");
    REQUIRE(train.size() == 2);
    CHECK(train[0] == generate_scene(s, 20));
    CHECK(train[1] == generate_scene(s, 22));
    CHECK(load_split(m, "test").empty());
  }
}
