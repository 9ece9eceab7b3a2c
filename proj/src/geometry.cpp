#include "upm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>

#include "upm/error.hpp"
#include "upm/rng.hpp"

namespace upm {

double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 normalized(const Vec3& a) {
  const double n = norm(a);
  if (!(n > 0.0)) throw DegenerateInputError("cannot normalize a zero vector");
  return (1.0 / n) * a;
}

Vec3 Mat3::operator*(const Vec3& v) const {
  return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
          m[6] * v.x + m[7] * v.y + m[8] * v.z};
}

Mat3 Mat3::transposed() const {
  return {{m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}};
}

double Mat3::determinant() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ContractError("camera focal lengths must be positive");
}

CameraPose CameraPose::look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 forward = normalized(target - eye);
  const Vec3 right = normalized(cross(forward, up));
  const Vec3 down = cross(forward, right);
  CameraPose pose;
  // Columns are the camera axes expressed in world coordinates.
  pose.rotation = Mat3{{right.x, down.x, forward.x, right.y, down.y, forward.y, right.z, down.z,
                        forward.z}};
  pose.translation = eye;
  return pose;
}

Vec3 CameraPose::to_camera(const Vec3& world_point) const {
  return rotation.transposed() * (world_point - translation);
}

void CameraPose::validate() const {
  const Mat3 rt = rotation.transposed();
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += rotation(r, k) * rt(k, c);
      if (std::abs(s - (r == c ? 1.0 : 0.0)) > 1e-9) {
        throw ContractError("camera rotation is not orthonormal");
      }
    }
  }
  if (std::abs(rotation.determinant() - 1.0) > 1e-9) {
    throw ContractError("camera rotation must have determinant +1");
  }
}

std::size_t Pointmap::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

std::vector<Vec3> Pointmap::valid_points() const {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    if (valid[i]) out.push_back(points[i]);
  return out;
}

Pointmap Pointmap::from_points(std::vector<Vec3> pts) {
  Pointmap pm;
  pm.height = 1;
  pm.width = pts.size();
  pm.valid.assign(pts.size(), 1);
  pm.points = std::move(pts);
  return pm;
}

Pointmap back_project(std::span<const double> depth, std::size_t height, std::size_t width,
                      const CameraIntrinsics& intrinsics, const CameraPose& pose) {
  if (depth.size() != height * width) {
    throw ShapeError("back_project: depth has " + std::to_string(depth.size()) + " values, expected " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  intrinsics.validate();
  Pointmap pm;
  pm.height = height;
  pm.width = width;
  pm.points.assign(height * width, Vec3{});
  pm.valid.assign(height * width, 0);
  for (std::size_t v = 0; v < height; ++v) {
    for (std::size_t u = 0; u < width; ++u) {
      const std::size_t i = v * width + u;
      const double z = depth[i];
      if (z < 0.0 || !std::isfinite(z)) {
        throw ContractError("back_project: depth must be finite and >= 0");
      }
      if (z == 0.0) continue;
      const Vec3 cam{(static_cast<double>(u) - intrinsics.cx) * z / intrinsics.fx,
                     (static_cast<double>(v) - intrinsics.cy) * z / intrinsics.fy, z};
      pm.points[i] = pose.to_world(cam);
      pm.valid[i] = 1;
    }
  }
  return pm;
}

std::vector<Vec3> sample_points(const Pointmap& pm, const std::optional<Subsample>& subsample) {
  std::vector<Vec3> pts = pm.valid_points();
  if (!subsample || pts.size() <= subsample->count) return pts;
  std::vector<std::size_t> idx(pts.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(subsample->seed);
  // Partial Fisher-Yates: the first `count` slots become a uniform subset.
  for (std::size_t i = 0; i < subsample->count; ++i) {
    const std::size_t j = i + rng.below(idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(subsample->count);
  std::sort(idx.begin(), idx.end());
  std::vector<Vec3> out;
  out.reserve(idx.size());
  for (const auto i : idx) out.push_back(pts[i]);
  return out;
}

namespace {

/// Uniform grid over a point set for exact nearest-neighbour queries.
class PointGrid {
 public:
  explicit PointGrid(std::span<const Vec3> pts) : pts_(pts) {
    lo_ = hi_ = pts.front();
    for (const auto& p : pts) {
      lo_ = {std::min(lo_.x, p.x), std::min(lo_.y, p.y), std::min(lo_.z, p.z)};
      hi_ = {std::max(hi_.x, p.x), std::max(hi_.y, p.y), std::max(hi_.z, p.z)};
    }
    const Vec3 ext = hi_ - lo_;
    const double emax = std::max({ext.x, ext.y, ext.z});
    const double volume_cell = std::cbrt(std::max(ext.x * ext.y * ext.z, 0.0) /
                                         static_cast<double>(pts.size()));
    cell_ = std::max({volume_cell, emax / 48.0, 1e-9});
    dims_ = {cell_index(ext.x) + 1, cell_index(ext.y) + 1, cell_index(ext.z) + 1};

    const std::size_t ncells = static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
    std::vector<std::size_t> cell_of(pts.size());
    starts_.assign(ncells + 1, 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto c = coords(pts[i]);
      cell_of[i] = flat(std::clamp(c[0], std::int64_t{0}, dims_[0] - 1),
                        std::clamp(c[1], std::int64_t{0}, dims_[1] - 1),
                        std::clamp(c[2], std::int64_t{0}, dims_[2] - 1));
      ++starts_[cell_of[i] + 1];
    }
    std::partial_sum(starts_.begin(), starts_.end(), starts_.begin());
    order_.resize(pts.size());
    std::vector<std::size_t> fill(starts_.begin(), starts_.end() - 1);
    for (std::size_t i = 0; i < pts.size(); ++i) order_[fill[cell_of[i]]++] = i;
  }

  double nearest_squared(const Vec3& q) const {
    const auto c = coords(q);
    // First ring that can intersect the grid at all.
    std::int64_t r0 = 0;
    for (int a = 0; a < 3; ++a) {
      r0 = std::max(r0, std::max(-c[a], c[a] - (dims_[a] - 1)));
    }
    const std::int64_t rmax = r0 + std::max({dims_[0], dims_[1], dims_[2]});
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t r = r0; r <= rmax; ++r) {
      visit_ring(c, r, q, best);
      // Unvisited cells are at least r cells away; the margin absorbs rounding in cell assignment.
      const double bound = (static_cast<double>(r) - 0.01) * cell_;
      if (bound > 0.0 && best <= bound * bound) break;
    }
    return best;
  }

 private:
  std::int64_t cell_index(double offset) const {
    return static_cast<std::int64_t>(std::floor(offset / cell_));
  }
  std::array<std::int64_t, 3> coords(const Vec3& p) const {
    return {cell_index(p.x - lo_.x), cell_index(p.y - lo_.y), cell_index(p.z - lo_.z)};
  }
  std::size_t flat(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>((x * dims_[1] + y) * dims_[2] + z);
  }

  void visit_ring(const std::array<std::int64_t, 3>& c, std::int64_t r, const Vec3& q,
                  double& best) const {
    const std::int64_t x0 = std::max<std::int64_t>(c[0] - r, 0), x1 = std::min(c[0] + r, dims_[0] - 1);
    const std::int64_t y0 = std::max<std::int64_t>(c[1] - r, 0), y1 = std::min(c[1] + r, dims_[1] - 1);
    const std::int64_t z0 = std::max<std::int64_t>(c[2] - r, 0), z1 = std::min(c[2] + r, dims_[2] - 1);
    for (std::int64_t x = x0; x <= x1; ++x) {
      const bool x_edge = std::abs(x - c[0]) == r;
      for (std::int64_t y = y0; y <= y1; ++y) {
        const bool xy_edge = x_edge || std::abs(y - c[1]) == r;
        for (std::int64_t z = z0; z <= z1; ++z) {
          if (!xy_edge && std::abs(z - c[2]) != r) {
            // Interior of the shell: jump to the far face.
            if (z < c[2] + r) z = std::min(c[2] + r, z1 + 1) - 1;
            continue;
          }
          const std::size_t cell = flat(x, y, z);
          for (std::size_t k = starts_[cell]; k < starts_[cell + 1]; ++k) {
            const double d = squared_distance(q, pts_[order_[k]]);
            if (d < best) best = d;
          }
        }
      }
    }
  }

  std::span<const Vec3> pts_;
  Vec3 lo_, hi_;
  double cell_ = 1.0;
  std::array<std::int64_t, 3> dims_{};
  std::vector<std::size_t> starts_;
  std::vector<std::size_t> order_;
};

}  // namespace

double mean_nearest_squared(std::span<const Vec3> from, std::span<const Vec3> to,
                            NearestNeighbor method) {
  if (from.empty() || to.empty()) throw DegenerateInputError("Chamfer distance needs non-empty point sets");
  double total = 0.0;
  if (method == NearestNeighbor::kBruteForce) {
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double d = squared_distance(p, q);
        if (d < best) best = d;
      }
      total += best;
    }
  } else {
    const PointGrid grid(to);
    for (const auto& p : from) total += grid.nearest_squared(p);
  }
  return total / static_cast<double>(from.size());
}

double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b, NearestNeighbor method) {
  return mean_nearest_squared(a, b, method) + mean_nearest_squared(b, a, method);
}

double chamfer_distance(const Pointmap& a, const Pointmap& b, const std::optional<Subsample>& subsample,
                        NearestNeighbor method) {
  const auto pa = sample_points(a, subsample);
  const auto pb = sample_points(b, subsample);
  if (pa.empty() || pb.empty()) throw DegenerateInputError("Chamfer distance: pointmap has no valid points");
  return chamfer_distance(pa, pb, method);
}

std::vector<double> chamfer_matrix(std::span<const Pointmap> views, const std::optional<Subsample>& subsample,
                                   NearestNeighbor method) {
  const std::size_t n = views.size();
  std::vector<std::vector<Vec3>> pts;
  pts.reserve(n);
  for (const auto& v : views) {
    pts.push_back(sample_points(v, subsample));
    if (pts.back().empty()) throw DegenerateInputError("Chamfer distance: pointmap has no valid points");
  }
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      out[i * n + j] = out[j * n + i] = chamfer_distance(pts[i], pts[j], method);
    }
  }
  return out;
}

std::size_t ProximityRanks::rank_of(std::size_t view) const {
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (candidates[i] == view) return ranks[i];
  throw ContractError("view " + std::to_string(view) + " is not a candidate of anchor " +
                      std::to_string(anchor));
}

ProximityRanks proximity_ranks(std::span<const double> distances, std::size_t view_count,
                               std::size_t anchor) {
  if (view_count < 2) throw DegenerateInputError("proximity ranks need at least two views");
  if (distances.size() != view_count * view_count) throw ShapeError("distance matrix size mismatch");
  if (anchor >= view_count) throw ContractError("anchor view out of range");
  ProximityRanks out;
  out.anchor = anchor;
  for (std::size_t u = 0; u < view_count; ++u)
    if (u != anchor) out.candidates.push_back(u);
  std::vector<std::size_t> order(out.candidates.size());
  std::iota(order.begin(), order.end(), 0);
  const double* row = distances.data() + anchor * view_count;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return row[out.candidates[a]] < row[out.candidates[b]];
  });
  out.ranks.assign(order.size(), 0);
  for (std::size_t r = 0; r < order.size(); ++r) out.ranks[order[r]] = r;
  return out;
}

ProximityRanks proximity_ranks(std::span<const Pointmap> views, std::size_t anchor,
                               const std::optional<Subsample>& subsample) {
  if (views.size() < 2) throw DegenerateInputError("proximity ranks need at least two views");
  if (anchor >= views.size()) throw ContractError("anchor view out of range");
  std::vector<double> row(views.size() * views.size(), 0.0);
  for (std::size_t u = 0; u < views.size(); ++u) {
    if (u == anchor) continue;
    row[anchor * views.size() + u] = chamfer_distance(views[anchor], views[u], subsample);
  }
  return proximity_ranks(row, views.size(), anchor);
}

std::size_t visible_area(const Pointmap& pm, const ObjectAnnotation& object) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < pm.points.size(); ++i)
    if (pm.valid[i] && object.aabb.contains(pm.points[i])) ++count;
  return count;
}

std::vector<std::pair<std::size_t, std::size_t>> visibility_pairs(
    std::span<const Pointmap> views, std::span<const ObjectAnnotation> objects,
    std::size_t min_points) {
  if (min_points < 1) throw ContractError("visibility_pairs: min_points must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t v = 0; v < views.size(); ++v)
    for (std::size_t o = 0; o < objects.size(); ++o)
      if (visible_area(views[v], objects[o]) >= min_points) pairs.emplace_back(v, o);
  return pairs;
}

std::vector<VoxelKey> voxelize(const Pointmap& pm, double voxel_size) {
  if (!(voxel_size > 0.0)) throw ContractError("voxel size must be > 0");
  std::vector<VoxelKey> keys;
  keys.reserve(pm.points.size());
  for (std::size_t i = 0; i < pm.points.size(); ++i) {
    if (!pm.valid[i]) continue;
    const auto& p = pm.points[i];
    keys.push_back({static_cast<std::int64_t>(std::floor(p.x / voxel_size)),
                    static_cast<std::int64_t>(std::floor(p.y / voxel_size)),
                    static_cast<std::int64_t>(std::floor(p.z / voxel_size))});
  }
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

std::size_t voxel_coverage(std::span<const Pointmap> views, std::span<const std::size_t> subset,
                           double voxel_size) {
  std::set<VoxelKey> covered;
  for (const auto v : subset) {
    if (v >= views.size()) throw ContractError("voxel_coverage: view index out of range");
    for (const auto& k : voxelize(views[v], voxel_size)) covered.insert(k);
  }
  return covered.size();
}

std::vector<std::size_t> max_coverage_sample(std::span<const Pointmap> views, std::size_t budget,
                                             double voxel_size) {
  if (budget < 1 || budget > views.size()) {
    throw ContractError("max_coverage_sample: budget must be in [1, " + std::to_string(views.size()) + "]");
  }
  if (!(voxel_size > 0.0)) throw ContractError("voxel size must be > 0");
  std::vector<std::vector<VoxelKey>> voxels;
  voxels.reserve(views.size());
  for (const auto& v : views) voxels.push_back(voxelize(v, voxel_size));

  std::set<VoxelKey> covered;
  std::vector<bool> taken(views.size(), false);
  std::vector<std::size_t> order;
  while (order.size() < budget) {
    std::size_t best_view = views.size();
    std::size_t best_gain = 0;
    for (std::size_t v = 0; v < views.size(); ++v) {
      if (taken[v]) continue;
      std::size_t gain = 0;
      for (const auto& k : voxels[v]) gain += covered.count(k) == 0 ? 1 : 0;
      if (gain > best_gain) {
        best_gain = gain;
        best_view = v;
      }
    }
    if (best_view == views.size()) break;  // coverage saturated
    taken[best_view] = true;
    order.push_back(best_view);
    covered.insert(voxels[best_view].begin(), voxels[best_view].end());
  }
  for (std::size_t v = 0; v < views.size() && order.size() < budget; ++v) {
    if (!taken[v]) {
      taken[v] = true;
      order.push_back(v);
    }
  }
  return order;
}

}  // namespace upm
