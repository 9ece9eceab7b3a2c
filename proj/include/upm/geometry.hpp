#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace upm {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  friend Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, const Vec3& a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

double dot(const Vec3& a, const Vec3& b);
Vec3 cross(const Vec3& a, const Vec3& b);
double norm(const Vec3& a);
Vec3 normalized(const Vec3& a);
/// Squared Euclidean distance; the single formula every nearest-neighbour path uses.
inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

/// Row-major 3×3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  double operator()(std::size_t r, std::size_t c) const { return m[r * 3 + c]; }
  Vec3 operator*(const Vec3& v) const;
  Mat3 transposed() const;
  double determinant() const;
  friend bool operator==(const Mat3&, const Mat3&) = default;
};

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

  void validate() const;
  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

/// Camera-to-world rigid transform. Camera frame: x right, y down, z forward.
struct CameraPose {
  Mat3 rotation;
  Vec3 translation;

  static CameraPose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = {0, 0, 1});
  Vec3 to_world(const Vec3& camera_point) const { return rotation * camera_point + translation; }
  Vec3 to_camera(const Vec3& world_point) const;
  /// Throws ContractError unless rotation is orthonormal with det +1 (1e-9).
  void validate() const;
  friend bool operator==(const CameraPose&, const CameraPose&) = default;
};

/// Per-pixel world coordinates, pixel-aligned with an image; row-major (v, u).
struct Pointmap {
  std::size_t height = 0, width = 0;
  std::vector<Vec3> points;
  std::vector<std::uint8_t> valid;

  std::size_t valid_count() const;
  std::vector<Vec3> valid_points() const;
  /// 1×N pointmap with every point valid.
  static Pointmap from_points(std::vector<Vec3> pts);
  friend bool operator==(const Pointmap&, const Pointmap&) = default;
};

struct Aabb {
  Vec3 min, max;

  bool contains(const Vec3& p) const {
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y && p.z >= min.z &&
           p.z <= max.z;
  }
  friend bool operator==(const Aabb&, const Aabb&) = default;
};

/// An annotated object; its 3D extent is a world-frame axis-aligned box.
struct ObjectAnnotation {
  std::size_t object_id = 0;
  Aabb aabb;
  std::string referring_text;
  std::string category;
  std::string color;
  friend bool operator==(const ObjectAnnotation&, const ObjectAnnotation&) = default;
};

/// Back-projects a depth map (meters, zero = invalid) to a world-frame pointmap.
Pointmap back_project(std::span<const double> depth, std::size_t height, std::size_t width,
                      const CameraIntrinsics& intrinsics, const CameraPose& pose);

enum class NearestNeighbor { kBruteForce, kGrid };

struct Subsample {
  std::size_t count = 512;
  std::uint64_t seed = 0;
};

/// Valid points of `pm`; with `subsample`, a seeded uniform subset without
/// replacement (kept in pixel order) when more than `count` are valid.
std::vector<Vec3> sample_points(const Pointmap& pm, const std::optional<Subsample>& subsample);

/// Mean over `from` of the squared distance to the nearest point of `to`.
double mean_nearest_squared(std::span<const Vec3> from, std::span<const Vec3> to,
                            NearestNeighbor method = NearestNeighbor::kBruteForce);

/// Symmetric Chamfer distance between two point sets (squared meters).
double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b,
                        NearestNeighbor method = NearestNeighbor::kBruteForce);
double chamfer_distance(const Pointmap& a, const Pointmap& b,
                        const std::optional<Subsample>& subsample = std::nullopt,
                        NearestNeighbor method = NearestNeighbor::kBruteForce);

/// Symmetric V×V matrix of pairwise Chamfer distances (row-major, zero diagonal).
std::vector<double> chamfer_matrix(std::span<const Pointmap> views,
                                   const std::optional<Subsample>& subsample = std::nullopt,
                                   NearestNeighbor method = NearestNeighbor::kGrid);

/// Ordinal proximity of every other view to `anchor`.
struct ProximityRanks {
  std::size_t anchor = 0;
  std::vector<std::size_t> candidates;  // ascending view indices, anchor excluded
  std::vector<std::size_t> ranks;       // ranks[i] belongs to candidates[i]

  std::size_t rank_of(std::size_t view) const;
};

/// Ranks from a precomputed V×V distance matrix; ties go to the lower view index.
ProximityRanks proximity_ranks(std::span<const double> distances, std::size_t view_count,
                               std::size_t anchor);
ProximityRanks proximity_ranks(std::span<const Pointmap> views, std::size_t anchor,
                               const std::optional<Subsample>& subsample = std::nullopt);

/// Valid pixels of `pm` inside the object's box (inclusive bounds).
std::size_t visible_area(const Pointmap& pm, const ObjectAnnotation& object);

/// (view, object index) pairs where at least `min_points` valid points fall in the box.
std::vector<std::pair<std::size_t, std::size_t>> visibility_pairs(
    std::span<const Pointmap> views, std::span<const ObjectAnnotation> objects,
    std::size_t min_points);

using VoxelKey = std::array<std::int64_t, 3>;

/// Sorted distinct voxels touched by the valid points of `pm`.
std::vector<VoxelKey> voxelize(const Pointmap& pm, double voxel_size);

/// Number of distinct voxels covered by the union of `subset`.
std::size_t voxel_coverage(std::span<const Pointmap> views, std::span<const std::size_t> subset,
                           double voxel_size);

/// Greedy maximum-coverage view selection; returns `budget` view indices in pick order.
std::vector<std::size_t> max_coverage_sample(std::span<const Pointmap> views, std::size_t budget,
                                             double voxel_size);

}  // namespace upm
