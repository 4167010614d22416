#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <tuple>
#include <vector>

#include "mimlearn/common.hpp"

namespace mim {

// Axis-aligned cube grid over the coordinates of a k-dimensional subspace.
// Thresholds z_i = -H + i*width + offset for i = 0..cells_per_axis, where the
// default half-width H = sqrt(2 ln(k/width)) captures all but a slice of the
// Gaussian mass. dim = 0 is the trivial partition with one cell covering
// everything.
struct CubePartition {
  int dim = 0;
  double width = 0.0;
  double offset = 0.0;
  double halfwidth = 0.0;
  int cells_per_axis = 0;

  double z0() const { return -halfwidth + offset; }
  double threshold(int i) const { return z0() + i * width; }
};

// Length-width intervals centered at integer multiples of the width, bounded
// cells covering (-B, B) up to a half-cell fringe, plus the two tails
// (-inf, -B] and [B, inf). Index 0 is the cell centered at 0; the tails get
// index +-(max_bounded + 1).
struct IntervalPartition {
  double width = 0.0;
  double bound = 0.0;
  int max_bounded = 0;

  int left_tail_index() const { return -(max_bounded + 1); }
  int right_tail_index() const { return max_bounded + 1; }
  int bounded_count() const { return 2 * max_bounded + 1; }
  int total_count() const { return bounded_count() + 2; }
  bool is_tail(int idx) const { return idx == left_tail_index() || idx == right_tail_index(); }
};

struct Discretization {
  CubePartition cube;
  IntervalPartition interval;
};

struct CellId {
  std::vector<int32_t> cube;
  int32_t interval = 0;

  friend bool operator==(const CellId& a, const CellId& b) {
    return a.cube == b.cube && a.interval == b.interval;
  }
  friend bool operator<(const CellId& a, const CellId& b) {
    return std::tie(a.cube, a.interval) < std::tie(b.cube, b.interval);
  }
};

inline double default_cube_halfwidth(int dim, double width) {
  return std::sqrt(2.0 * std::log(static_cast<double>(std::max(dim, 1)) / width));
}

inline Discretization build_discretization(int dim, double eps1, double eps2, double bound,
                                           double offset = 0.0, double halfwidth = 0.0) {
  if (dim < 0) throw ConfigError("discretization: subspace dimension must be nonnegative");
  if (!(eps1 > 0.0 && eps1 < 1.0)) throw ConfigError("discretization: cube width must be in (0, 1)");
  if (!(eps2 > 0.0)) throw ConfigError("discretization: interval width must be positive");
  if (!(bound >= eps2)) throw ConfigError("discretization: tail bound must be at least the interval width");
  if (!(offset >= 0.0 && offset < eps1 / 2.0))
    throw ConfigError("discretization: offset must lie in [0, width/2)");
  if (halfwidth < 0.0) throw ConfigError("discretization: halfwidth must be nonnegative");

  Discretization d;
  d.cube.dim = dim;
  d.cube.width = eps1;
  d.cube.offset = offset;
  if (dim > 0) {
    d.cube.halfwidth = halfwidth > 0.0 ? halfwidth : default_cube_halfwidth(dim, eps1);
    d.cube.cells_per_axis = static_cast<int>(std::ceil(2.0 * d.cube.halfwidth / eps1));
  }
  d.interval.width = eps2;
  d.interval.bound = bound;
  d.interval.max_bounded = std::max(0, static_cast<int>(std::floor(bound / eps2 + 1e-9)) - 1);
  return d;
}

// Cube cell of a coordinate vector, or nullopt when any coordinate falls
// outside [z_0, z_M]. Points on a shared threshold go to the lower cell.
inline std::optional<std::vector<int32_t>> locate_cube(const CubePartition& part,
                                                       const double* coords) {
  std::vector<int32_t> cell(static_cast<size_t>(part.dim));
  for (int j = 0; j < part.dim; ++j) {
    const double q = (coords[j] - part.z0()) / part.width;
    if (q < 0.0 || q > part.cells_per_axis) return std::nullopt;
    double f = std::floor(q);
    if (f == q && f > 0.0) f -= 1.0;  // boundary tie: lower cell
    if (f >= part.cells_per_axis) f = part.cells_per_axis - 1;
    cell[static_cast<size_t>(j)] = static_cast<int32_t>(f);
  }
  return cell;
}

// Interval of a label. Always defined: indices past the bounded range clamp to
// the tails, which also absorb the half-cell fringe next to +-B. Points on a
// shared endpoint go to the lower cell.
inline int32_t locate_interval(const IntervalPartition& part, double y) {
  const double i = std::ceil(y / part.width - 0.5);
  if (i < -part.max_bounded) return part.left_tail_index();
  if (i > part.max_bounded) return part.right_tail_index();
  return static_cast<int32_t>(i);
}

inline CellId locate(const Discretization& d, const double* coords, double y) {
  auto cube = locate_cube(d.cube, coords);
  if (!cube) throw ShapeError("locate: point outside the cube grid");
  return CellId{std::move(*cube), locate_interval(d.interval, y)};
}

// Exact Gaussian mass of a cube cell: a product of CDF differences.
inline double cube_cell_mass(const CubePartition& part, const std::vector<int32_t>& cell) {
  if (static_cast<int>(cell.size()) != part.dim) throw ShapeError("cube_cell_mass: arity mismatch");
  double mass = 1.0;
  for (int j = 0; j < part.dim; ++j) {
    const int32_t c = cell[static_cast<size_t>(j)];
    if (c < 0 || c >= part.cells_per_axis) throw ShapeError("cube_cell_mass: cell out of range");
    mass *= normal_cdf(part.threshold(c + 1)) - normal_cdf(part.threshold(c));
  }
  return mass;
}

}  // namespace mim
