#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "upm/geometry.hpp"

namespace upm {

struct NamedColor {
  std::string name;
  std::array<double, 3> rgb{};
};

/// Box category with per-axis size ranges in meters (x, y = footprint, z = height).
struct CatalogEntry {
  std::string category;
  Vec3 size_min, size_max;
};

struct SceneType {
  std::string name;
  std::vector<std::string> categories;
};

struct CameraRing {
  double radius_min = 2.8, radius_max = 3.4;
  double height_min = 1.4, height_max = 2.0;
  std::size_t view_count = 16;
  double angle_jitter = 0.3;   // fraction of the angular step
  double target_jitter = 0.3;  // meters, look-at point offset in the floor plane
};

struct SceneSpec {
  std::uint64_t seed = 0;
  double extent_min = 3.0, extent_max = 4.0;  // room side lengths (meters)
  std::size_t min_objects = 3, max_objects = 5;
  std::vector<CatalogEntry> catalog;
  std::vector<NamedColor> palette;
  std::vector<SceneType> scene_types;
  /// Empty picks a scene type uniformly from scene_types.
  std::string scene_type;
  CameraRing ring;
  std::size_t image_size = 32;
  double horizontal_fov_deg = 60.0;
  /// Pixels inside a box needed for that box to count as visible in a view.
  std::size_t min_points = 16;

  /// Four room types over a shared 16-category catalog and an 8-color palette.
  static SceneSpec desk();
  void validate() const;
  [[nodiscard]] const CatalogEntry& entry(const std::string& category) const;
};

struct View {
  std::size_t height = 0, width = 0;
  std::vector<double> image;  // H×W×3 in [0,1]
  std::vector<double> depth;  // H×W meters, 0 where nothing was hit
  CameraIntrinsics intrinsics;
  CameraPose pose;

  [[nodiscard]] Pointmap pointmap() const;
  friend bool operator==(const View&, const View&) = default;
};

struct Scene {
  std::string scene_id;
  std::string scene_type;
  std::vector<View> views;
  std::vector<ObjectAnnotation> objects;
  std::string scene_caption;
  std::vector<std::string> view_captions;

  [[nodiscard]] std::vector<Pointmap> pointmaps() const;
  void validate() const;
  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Pure function of (spec, seed). Scenes where some object is seen by no view
/// are regenerated from a derived seed.
Scene generate_scene(const SceneSpec& spec, std::uint64_t seed);
inline Scene generate_scene(const SceneSpec& spec) { return generate_scene(spec, spec.seed); }

/// Largest distance from a back-projected object pixel to its box surface,
/// and from a floor pixel to the z=0 plane.
double render_depth_consistency_check(const Scene& scene);

/// One directory per scene: scene.txt (key=value) plus view_NNN.rgb / view_NNN.depth rasters.
void save_scene(const Scene& scene, const std::filesystem::path& dir);
Scene load_scene(const std::filesystem::path& dir);

struct ManifestEntry {
  std::string split;  // train, val or test
  std::filesystem::path dir;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  [[nodiscard]] std::vector<std::filesystem::path> split(const std::string& name) const;
};

/// Seeded shuffle, then floor(10%) val, floor(10%) test, the rest train.
std::vector<std::string> assign_splits(std::size_t count, std::uint64_t seed);

/// Tab-separated "split<TAB>relative dir" lines; paths resolve against the manifest's folder.
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);
std::vector<Scene> load_split(const Manifest& manifest, const std::string& split);

}  // namespace upm
