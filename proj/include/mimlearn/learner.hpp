#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "mimlearn/common.hpp"
#include "mimlearn/discretization.hpp"
#include "mimlearn/hermite.hpp"
#include "mimlearn/subspace.hpp"
#include "mimlearn/synthetic.hpp"

namespace mim {

struct LearnerConfig {
  enum class Mode { agnostic, mim_distribution, fast_m2 };

  int m = 2;
  double eps1 = 0.25;
  double eps2 = 0.1;
  double bound = 0.0;     // 0: 1/eps2^2
  double offset = 0.0;
  double lambda_floor = 0.0;  // 0: 1e-3 (regression), 0.02 (fast_m2)
  double lambda_rel = 0.1;
  int T = 0;              // 0: k_target+1 (mim_distribution), else 3*max(k_target,2)+5
  double eta = 0.1;       // nominal regression slack, recorded but not used numerically
  Eigen::Index n_min_cell = 30;
  Mode mode = Mode::agnostic;
  int mom_blocks = 9;
  uint64_t seed = 0;
  int k_target = 0;       // hidden dimension when known; 0 = unknown
  int max_subspace_dim = 0;  // 0: k_target if set, else T
  Eigen::Index batch_size = 0;  // per-iteration direction batch; 0 = auto split
  double fit_fraction = 0.5;
  double fit_width = 0.0;   // 0: eps1
  double find_width = 0.0;  // 0: eps1
  double fit_halfwidth = 0.0;  // 0: max(formula at the dim cap, 4.0)
  int sketch_r = 0;  // restrict regression coordinates to the top-r fast-path directions
  int workers = 1;
  bool trace_hypotheses = false;

  static const char* mode_name(Mode m_) {
    switch (m_) {
      case Mode::agnostic: return "agnostic";
      case Mode::mim_distribution: return "mim_distribution";
      case Mode::fast_m2: return "fast_m2";
    }
    return "?";
  }

  double bound_or_default() const { return bound > 0.0 ? bound : 1.0 / (eps2 * eps2); }
  double fit_width_or_default() const { return fit_width > 0.0 ? fit_width : eps1; }
  double find_width_or_default() const { return find_width > 0.0 ? find_width : eps1; }

  double lambda_floor_or_default() const {
    if (lambda_floor > 0.0) return lambda_floor;
    return mode == Mode::fast_m2 ? 0.02 : 1e-3;
  }

  int iterations_or_default() const {
    if (T > 0) return T;
    if (mode == Mode::mim_distribution) {
      if (k_target < 1)
        throw ConfigError("learner: mim_distribution mode needs k_target (or an explicit T)");
      return k_target + 1;
    }
    return 3 * std::max(k_target, 2) + 5;
  }

  int dim_cap_or_default(int d) const {
    int cap = max_subspace_dim > 0 ? max_subspace_dim
                                   : (k_target > 0 ? k_target : iterations_or_default());
    return std::min(cap, d);
  }

  double fit_halfwidth_or_default(int d) const {
    if (fit_halfwidth > 0.0) return fit_halfwidth;
    const int cap = std::max(1, dim_cap_or_default(d));
    return std::max(default_cube_halfwidth(cap, fit_width_or_default()), 4.0);
  }

  void validate() const {
    if (m < 1) throw ConfigError("learner: m must be at least 1");
    if (!(eps1 > 0.0 && eps1 < 1.0)) throw ConfigError("learner: eps1 must be in (0, 1)");
    if (!(eps2 > 0.0)) throw ConfigError("learner: eps2 must be positive");
    if (bound < 0.0) throw ConfigError("learner: bound must be nonnegative");
    if (!(offset >= 0.0 && offset < eps1 / 2.0))
      throw ConfigError("learner: offset must lie in [0, eps1/2)");
    if (lambda_floor < 0.0 || lambda_rel < 0.0)
      throw ConfigError("learner: eigenvalue thresholds must be nonnegative");
    if (T < 0) throw ConfigError("learner: T must be nonnegative");
    if (n_min_cell < 1) throw ConfigError("learner: n_min_cell must be positive");
    if (mom_blocks < 1) throw ConfigError("learner: mom_blocks must be positive");
    if (batch_size < 0) throw ConfigError("learner: batch_size must be nonnegative");
    if (!(fit_fraction > 0.0 && fit_fraction < 1.0))
      throw ConfigError("learner: fit_fraction must be in (0, 1)");
    if (fit_width < 0.0 || find_width < 0.0 || fit_halfwidth < 0.0)
      throw ConfigError("learner: widths must be nonnegative");
    if (fit_width > 0.0 && fit_width >= 1.0) throw ConfigError("learner: fit_width must be below 1");
    if (find_width > 0.0 && find_width >= 1.0)
      throw ConfigError("learner: find_width must be below 1");
    if (sketch_r < 0) throw ConfigError("learner: sketch_r must be nonnegative");
    if (workers < 1) throw ConfigError("learner: workers must be positive");
    if (k_target < 0 || max_subspace_dim < 0)
      throw ConfigError("learner: dimension fields must be nonnegative");
    if (mode == Mode::mim_distribution && T == 0 && k_target < 1)
      throw ConfigError("learner: mim_distribution mode needs k_target (or an explicit T)");
  }
};

// Cell -> value lookup over a cube grid on V; predicts 0 outside the grid and
// on unseen cells. dim(V) = 0 is a single global cell.
struct PiecewiseConstantHypothesis {
  Subspace v;
  CubePartition partition;
  std::map<std::vector<int32_t>, double> cell_values;

  double predict(const VectorXd& x) const {
    if (x.size() != v.ambient_dim()) throw ShapeError("predict: dimension mismatch");
    VectorXd coords = v.basis.transpose() * x;
    const auto cell = locate_cube(partition, coords.data());
    if (!cell) return 0.0;
    const auto it = cell_values.find(*cell);
    return it == cell_values.end() ? 0.0 : it->second;
  }
};

struct IterationEntry {
  int t = 0;
  Eigen::Index dim_v = 0;      // dim(V) after this iteration's growth
  int n_directions = 0;        // |E_t| actually added
  std::vector<double> eigenvalues;  // accepted eigenvalues, descending
  double lambda_max = 0.0;
  double lambda_used = 0.0;
  double aggregate_frobenius = 0.0;
  int cells_used = 0;
  int cells_skipped = 0;
  double err_fit = std::numeric_limits<double>::quiet_NaN();
  double phi = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> betas;   // per added direction, |proj_W v| when W is known
  double wall_ms = 0.0;        // excluded from determinism guarantees
};

struct IterationTrace {
  std::vector<IterationEntry> entries;
};

// Full output of one direction-finding call; find_direction returns just the
// directions, this carries what the invariants and the trace need.
struct DirectionFindings {
  DirectionList directions;
  std::vector<double> eigenvalues;
  double lambda_max = 0.0;
  double lambda_used = 0.0;
  double aggregate_frobenius = 0.0;
  MatrixXd aggregate;   // in the coordinates of `frame`
  MatrixXd frame;       // d x d_work orthonormal frame the aggregate lives in
  std::vector<double> pair_traces;  // per (cell, interval) influence-matrix traces
  int cells_used = 0;
  int cells_skipped = 0;
};

namespace detail {

// Orthonormal frame of the complement of V, deterministically derived from the
// coordinate axes.
inline Subspace complement_frame(const Subspace& v) {
  const Eigen::Index d = v.ambient_dim();
  DirectionList axes;
  axes.reserve(static_cast<size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) axes.push_back(VectorXd::Unit(d, j));
  return subspace_from_directions(d, orthonormalize(axes, v, 1e-6));
}

inline void canonical_sign(VectorXd& v) {
  Eigen::Index arg = 0;
  double best = -1.0;
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    const double a = std::abs(v[j]);
    if (a > best) {
      best = a;
      arg = j;
    }
  }
  if (v[arg] < 0.0) v = -v;
}

inline double median_inplace(std::vector<double>& vals) {
  const size_t n = vals.size();
  auto mid = vals.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(vals.begin(), mid, vals.end());
  const double hi = *mid;
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(n / 2));
  return 0.5 * (lo + hi);
}

inline double median_of_means(const std::vector<double>& labels, int blocks) {
  const size_t n = labels.size();
  const size_t b = std::min<size_t>(static_cast<size_t>(blocks), n);
  std::vector<double> means;
  means.reserve(b);
  const size_t base = n / b, extra = n % b;
  size_t pos = 0;
  for (size_t i = 0; i < b; ++i) {
    const size_t len = base + (i < extra ? 1 : 0);
    double s = 0.0;
    for (size_t j = 0; j < len; ++j) s += labels[pos + j];
    means.push_back(s / static_cast<double>(len));
    pos += len;
  }
  return median_inplace(means);
}

struct SampleRange {
  const MatrixXd* xs = nullptr;
  const VectorXd* ys = nullptr;
  Eigen::Index begin = 0;
  Eigen::Index count = 0;

  Eigen::Index dim() const { return xs->cols(); }
  double y(Eigen::Index i) const { return (*ys)[begin + i]; }
};

// Sample indices grouped by cube cell, cells in canonical order.
struct CubeGroup {
  std::vector<int32_t> cell;
  std::vector<Eigen::Index> rows;  // offsets within the range
};

inline std::vector<CubeGroup> group_by_cube(const SampleRange& range, const CubePartition& part,
                                            const MatrixXd& coords_v) {
  std::map<std::vector<int32_t>, std::vector<Eigen::Index>> groups;
  std::vector<double> buf(static_cast<size_t>(std::max(part.dim, 1)));
  for (Eigen::Index i = 0; i < range.count; ++i) {
    for (int j = 0; j < part.dim; ++j) buf[static_cast<size_t>(j)] = coords_v(i, j);
    auto cell = locate_cube(part, buf.data());
    if (!cell) continue;
    groups[std::move(*cell)].push_back(i);
  }
  std::vector<CubeGroup> out;
  out.reserve(groups.size());
  for (auto& [cell, rows] : groups) out.push_back(CubeGroup{cell, std::move(rows)});
  return out;
}

// Run fn(i) for i in [0, n) across the configured worker threads. Results must
// be written to disjoint slots so the outcome is identical for any worker count.
template <typename Fn>
inline void parallel_for(int workers, size_t n, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const size_t w = std::min<size_t>(static_cast<size_t>(workers), n);
  std::vector<std::thread> pool;
  pool.reserve(w);
  std::atomic<size_t> next{0};
  for (size_t t = 0; t < w; ++t)
    pool.emplace_back([&]() {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& th : pool) th.join();
}

struct CubeFindings {
  MatrixXd aggregate_part;          // this cube's (unweighted-by-n) contribution, times n_S/n already applied
  std::vector<double> pair_traces;  // per occupied interval
  bool used = false;
};

}  // namespace detail

namespace detail {

// Shared setup for both direction-finding paths.
struct FindContext {
  Discretization disc;
  MatrixXd frame;      // d x d_work
  MatrixXd coords_v;   // n x dim(V)
  MatrixXd coords_w;   // n x d_work
  std::vector<CubeGroup> groups;
  Eigen::Index n = 0;
};

inline FindContext prepare_find(const Subspace& v, const SampleRange& range,
                                const LearnerConfig& config, const MatrixXd& frame) {
  FindContext ctx;
  ctx.n = range.count;
  ctx.frame = frame;
  const int kdim = static_cast<int>(v.dim());
  ctx.disc = build_discretization(kdim, config.find_width_or_default(), config.eps2,
                                  config.bound_or_default(), config.offset);
  const auto rows = range.xs->middleRows(range.begin, range.count);
  if (kdim > 0) ctx.coords_v = rows * v.basis;
  ctx.coords_w = rows * ctx.frame;
  ctx.groups = group_by_cube(range, ctx.disc.cube, ctx.coords_v);
  return ctx;
}

// Eigen-filter shared by both paths: keep unit eigenvectors with eigenvalue at
// least max(floor, rel * lambda_max), descending; lift to ambient coordinates.
inline void filter_and_lift(const MatrixXd& aggregate, const MatrixXd& frame,
                            const LearnerConfig& config, DirectionFindings& out) {
  out.aggregate = aggregate;
  out.frame = frame;
  out.aggregate_frobenius = aggregate.norm();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(aggregate);
  const VectorXd& evals = es.eigenvalues();  // ascending
  out.lambda_max = evals.size() > 0 ? evals[evals.size() - 1] : 0.0;
  out.lambda_used = std::max(config.lambda_floor_or_default(),
                             config.lambda_rel * std::max(out.lambda_max, 0.0));
  for (Eigen::Index r = evals.size() - 1; r >= 0; --r) {
    if (!(evals[r] >= out.lambda_used)) break;
    VectorXd lifted = frame * es.eigenvectors().col(r);
    lifted.normalize();
    canonical_sign(lifted);
    out.directions.push_back(std::move(lifted));
    out.eigenvalues.push_back(evals[r]);
  }
}

}  // namespace detail

// Degree-m projection regression of interval indicators on the complement
// coordinates, one influence matrix per (cube, interval) pair, aggregated with
// empirical cube-mass weights. Cubes with fewer than max(n_min_cell, basis
// size) samples are skipped.
inline DirectionFindings find_direction_full(const Subspace& v, const detail::SampleRange& range,
                                             const LearnerConfig& config) {
  config.validate();
  if (range.count <= 0) throw ShapeError("find_direction: empty sample range");
  if (v.ambient_dim() != range.dim()) throw ShapeError("find_direction: dimension mismatch");

  DirectionFindings out;
  Subspace full_frame = detail::complement_frame(v);
  MatrixXd frame = full_frame.basis;
  if (frame.cols() == 0) return out;

  // Optional sketch: restrict the regression to the leading directions of the
  // covariance fast path when the complement is too wide.
  if (config.sketch_r > 0 && frame.cols() > config.sketch_r) {
    LearnerConfig probe = config;
    probe.sketch_r = 0;
    probe.mode = LearnerConfig::Mode::fast_m2;
    detail::FindContext ctx = detail::prepare_find(v, range, probe, frame);
    MatrixXd agg = MatrixXd::Zero(frame.cols(), frame.cols());
    for (const auto& g : ctx.groups) {
      if (static_cast<Eigen::Index>(g.rows.size()) <
          std::max<Eigen::Index>(config.n_min_cell, frame.cols() + 2))
        continue;
      // covariance accumulation identical to the fast path below, unweighted
      std::map<int32_t, std::pair<MatrixXd, Eigen::Index>> per_interval;
      for (Eigen::Index i : g.rows) {
        const int32_t idx = locate_interval(ctx.disc.interval, range.y(i));
        auto [it, fresh] = per_interval.try_emplace(
            idx, std::make_pair(MatrixXd::Zero(frame.cols(), frame.cols()), 0));
        it->second.first.noalias() +=
            ctx.coords_w.row(i).transpose() * ctx.coords_w.row(i);
        it->second.second += 1;
      }
      const double n_s = static_cast<double>(g.rows.size());
      for (auto& [idx, acc] : per_interval) {
        MatrixXd m = (acc.first - static_cast<double>(acc.second) *
                                      MatrixXd::Identity(frame.cols(), frame.cols())) /
                     n_s;
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
        Eigen::Index arg = 0;
        es.eigenvalues().cwiseAbs().maxCoeff(&arg);
        const double lam = es.eigenvalues()[arg];
        const VectorXd u = es.eigenvectors().col(arg);
        agg.noalias() += std::abs(lam) * (n_s / ctx.n) * (u * u.transpose());
      }
    }
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(agg);
    MatrixXd top(frame.cols(), std::min<Eigen::Index>(config.sketch_r, frame.cols()));
    for (Eigen::Index c = 0; c < top.cols(); ++c)
      top.col(c) = es.eigenvectors().col(agg.cols() - 1 - c);
    frame = frame * top;
  }

  const int d_work = static_cast<int>(frame.cols());
  if (multi_index_count(d_work, config.m) > kMaxBasisSize)
    throw ResourceError(
        "find_direction: regression basis over " + std::to_string(d_work) +
        " coordinates at degree " + std::to_string(config.m) +
        " exceeds the cap; set sketch_r to restrict the working dimension");

  detail::FindContext ctx = detail::prepare_find(v, range, config, frame);
  const HermiteBasis basis(d_work, config.m);
  const Eigen::Index min_cell = std::max<Eigen::Index>(config.n_min_cell, basis.size());

  std::vector<detail::CubeFindings> per_cube(ctx.groups.size());
  detail::parallel_for(config.workers, ctx.groups.size(), [&](size_t gi) {
    const auto& g = ctx.groups[gi];
    auto& res = per_cube[gi];
    if (static_cast<Eigen::Index>(g.rows.size()) < min_cell) return;
    res.used = true;

    // Numerators of the projection estimator per occupied interval.
    std::map<int32_t, VectorXd> numer;
    detail::HermiteScratch scratch;
    VectorXd row;
    std::vector<double> xbuf(static_cast<size_t>(d_work));
    for (Eigen::Index i : g.rows) {
      for (int j = 0; j < d_work; ++j) xbuf[static_cast<size_t>(j)] = ctx.coords_w(i, j);
      basis.eval_row(xbuf.data(), row, scratch);
      const int32_t idx = locate_interval(ctx.disc.interval, range.y(i));
      auto [it, fresh] = numer.try_emplace(idx, VectorXd::Zero(basis.size()));
      it->second += row;
    }
    const double n_s = static_cast<double>(g.rows.size());
    MatrixXd cube_sum = MatrixXd::Zero(d_work, d_work);
    for (auto& [idx, num] : numer) {
      const VectorXd coef = num / n_s;
      const MatrixXd infl = influence_matrix(basis.to_expansion(coef));
      res.pair_traces.push_back(infl.trace());
      cube_sum += infl;
    }
    res.aggregate_part = (n_s / static_cast<double>(ctx.n)) * cube_sum;
  });

  MatrixXd aggregate = MatrixXd::Zero(d_work, d_work);
  for (const auto& res : per_cube) {
    if (!res.used) {
      ++out.cells_skipped;
      continue;
    }
    ++out.cells_used;
    aggregate += res.aggregate_part;
    out.pair_traces.insert(out.pair_traces.end(), res.pair_traces.begin(),
                           res.pair_traces.end());
  }
  detail::filter_and_lift(aggregate, frame, config, out);
  return out;
}

// Covariance fast path: per (cube, interval) pair the centered second-moment
// matrix of the complement coordinates, represented in the aggregate by its
// dominant eigenvector scaled by |dominant eigenvalue| and the cube mass. The
// eigenvalue factor makes a signal-free pair contribute nothing, which is what
// the aggregate's null behavior requires.
inline DirectionFindings find_direction_m2_full(const Subspace& v,
                                                const detail::SampleRange& range,
                                                const LearnerConfig& config) {
  config.validate();
  if (range.count <= 0) throw ShapeError("find_direction_m2: empty sample range");
  if (v.ambient_dim() != range.dim()) throw ShapeError("find_direction_m2: dimension mismatch");

  DirectionFindings out;
  Subspace frame = detail::complement_frame(v);
  if (frame.dim() == 0) return out;
  const Eigen::Index d_work = frame.dim();

  detail::FindContext ctx = detail::prepare_find(v, range, config, frame.basis);
  const Eigen::Index min_cell = std::max<Eigen::Index>(config.n_min_cell, d_work + 2);

  std::vector<detail::CubeFindings> per_cube(ctx.groups.size());
  detail::parallel_for(config.workers, ctx.groups.size(), [&](size_t gi) {
    const auto& g = ctx.groups[gi];
    auto& res = per_cube[gi];
    if (static_cast<Eigen::Index>(g.rows.size()) < min_cell) return;
    res.used = true;

    std::map<int32_t, std::pair<MatrixXd, Eigen::Index>> per_interval;
    for (Eigen::Index i : g.rows) {
      const int32_t idx = locate_interval(ctx.disc.interval, range.y(i));
      auto [it, fresh] =
          per_interval.try_emplace(idx, std::make_pair(MatrixXd::Zero(d_work, d_work), 0));
      it->second.first.noalias() += ctx.coords_w.row(i).transpose() * ctx.coords_w.row(i);
      it->second.second += 1;
    }
    const double n_s = static_cast<double>(g.rows.size());
    MatrixXd cube_sum = MatrixXd::Zero(d_work, d_work);
    for (auto& [idx, acc] : per_interval) {
      MatrixXd m = (acc.first - static_cast<double>(acc.second) *
                                    MatrixXd::Identity(d_work, d_work)) /
                   n_s;
      res.pair_traces.push_back(m.trace());
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
      Eigen::Index arg = 0;
      es.eigenvalues().cwiseAbs().maxCoeff(&arg);
      const double lam = es.eigenvalues()[arg];
      const VectorXd u = es.eigenvectors().col(arg);
      cube_sum.noalias() += std::abs(lam) * (u * u.transpose());
    }
    res.aggregate_part = (n_s / static_cast<double>(ctx.n)) * cube_sum;
  });

  MatrixXd aggregate = MatrixXd::Zero(d_work, d_work);
  for (const auto& res : per_cube) {
    if (!res.used) {
      ++out.cells_skipped;
      continue;
    }
    ++out.cells_used;
    aggregate += res.aggregate_part;
    out.pair_traces.insert(out.pair_traces.end(), res.pair_traces.begin(),
                           res.pair_traces.end());
  }
  detail::filter_and_lift(aggregate, frame.basis, config, out);
  return out;
}

inline DirectionList find_direction(const Subspace& v, const LabeledDataset& dataset,
                                    const LearnerConfig& config) {
  detail::SampleRange range{&dataset.xs, &dataset.ys, 0, dataset.size()};
  return find_direction_full(v, range, config).directions;
}

inline DirectionList find_direction_m2(const Subspace& v, const LabeledDataset& dataset,
                                       const LearnerConfig& config) {
  detail::SampleRange range{&dataset.xs, &dataset.ys, 0, dataset.size()};
  return find_direction_m2_full(v, range, config).directions;
}

// Degree-m projection regression of the indicator 1(y in I) on the complement
// coordinates for the samples of one cell, as a sparse expansion.
inline HermiteExpansion regress_cell(const LabeledDataset& dataset,
                                     const std::vector<Eigen::Index>& cell_rows,
                                     double interval_lo, double interval_hi,
                                     const Subspace& v, int m) {
  if (m < 1) throw ConfigError("regress_cell: m must be at least 1");
  Subspace frame = detail::complement_frame(v);
  const int d_work = static_cast<int>(frame.dim());
  const HermiteBasis basis(d_work, m);
  VectorXd numer = VectorXd::Zero(basis.size());
  detail::HermiteScratch scratch;
  VectorXd row;
  for (Eigen::Index i : cell_rows) {
    const double y = dataset.ys[i];
    if (!(y >= interval_lo && y <= interval_hi)) continue;
    const VectorXd coords = frame.basis.transpose() * dataset.xs.row(i).transpose();
    basis.eval_row(coords.data(), row, scratch);
    numer += row;
  }
  return basis.to_expansion(numer / static_cast<double>(cell_rows.size()));
}

namespace detail {

inline PiecewiseConstantHypothesis fit_piecewise_rows(const Subspace& v, const SampleRange& range,
                                                      double width, int mom_blocks, double offset,
                                                      double halfwidth) {
  if (mom_blocks < 1) throw ConfigError("fit_piecewise_constant: mom_blocks must be positive");
  PiecewiseConstantHypothesis h;
  h.v = v;
  h.partition = build_discretization(static_cast<int>(v.dim()), width, 1.0, 1.0, offset, halfwidth).cube;
  MatrixXd coords_v;
  if (v.dim() > 0) coords_v = range.xs->middleRows(range.begin, range.count) * v.basis;
  const auto groups = group_by_cube(range, h.partition, coords_v);
  for (const auto& g : groups) {
    std::vector<double> labels;
    labels.reserve(g.rows.size());
    for (Eigen::Index i : g.rows) labels.push_back(range.y(i));
    h.cell_values[g.cell] = median_of_means(labels, mom_blocks);
  }
  return h;
}

}  // namespace detail

inline PiecewiseConstantHypothesis fit_piecewise_constant(const Subspace& v,
                                                          const LabeledDataset& dataset,
                                                          double width, int mom_blocks,
                                                          double offset = 0.0,
                                                          double halfwidth = 0.0) {
  detail::SampleRange range{&dataset.xs, &dataset.ys, 0, dataset.size()};
  return detail::fit_piecewise_rows(v, range, width, mom_blocks, offset, halfwidth);
}

struct EvaluationReport {
  double mse = 0.0;
  double coverage_fraction = 0.0;
  std::optional<double> mse_vs_clean;
};

inline EvaluationReport evaluate(const PiecewiseConstantHypothesis& h, const LabeledDataset& test,
                                 const MimInstance* ground_truth = nullptr) {
  EvaluationReport rep;
  const Eigen::Index n = test.size();
  if (n == 0) throw ConfigError("evaluate: empty dataset");
  double clean_acc = 0.0;
  Eigen::Index covered = 0;
  MatrixXd coords_v;
  if (h.v.dim() > 0) coords_v = test.xs * h.v.basis;
  std::vector<double> buf(static_cast<size_t>(std::max<int>(h.partition.dim, 1)));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < h.partition.dim; ++j) buf[static_cast<size_t>(j)] = coords_v(i, j);
    const auto cell = locate_cube(h.partition, buf.data());
    double pred = 0.0;
    if (cell) {
      ++covered;
      const auto it = h.cell_values.find(*cell);
      if (it != h.cell_values.end()) pred = it->second;
    }
    const double r = test.ys[i] - pred;
    rep.mse += r * r;
    if (ground_truth) {
      const double rc = ground_truth->evaluate(test.xs.row(i).transpose()) - pred;
      clean_acc += rc * rc;
    }
  }
  rep.mse /= static_cast<double>(n);
  rep.coverage_fraction = static_cast<double>(covered) / static_cast<double>(n);
  if (ground_truth) rep.mse_vs_clean = clean_acc / static_cast<double>(n);
  return rep;
}

struct LearnResult {
  PiecewiseConstantHypothesis hypothesis;
  IterationTrace trace;
  Subspace v;
  std::vector<PiecewiseConstantHypothesis> per_iteration;  // when trace_hypotheses
  std::string stop_reason;
};

// The outer loop: per iteration, direction-finding on a fresh slice, subspace
// growth, and (optionally) a nested-partition hypothesis refit on the held-out
// slice. mim_distribution mode adds only the leading direction per iteration.
inline LearnResult learn(const LabeledDataset& dataset, const LearnerConfig& config,
                         const MimInstance* ground_truth = nullptr,
                         const Subspace* warm_start = nullptr) {
  config.validate();
  const Eigen::Index n = dataset.size();
  const int d = static_cast<int>(dataset.dim());
  if (n < 1) throw ConfigError("learn: empty dataset");

  const int iters = config.iterations_or_default();
  const int cap = config.dim_cap_or_default(d);

  Eigen::Index n_fit, find_total;
  if (config.batch_size > 0) {
    find_total = config.batch_size * iters;
    n_fit = n - find_total;
    if (n_fit < 1)
      throw ConfigError("learn: sample budget below T direction batches plus a fit slice");
  } else {
    n_fit = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(
                                          static_cast<double>(n) * config.fit_fraction)));
    find_total = n - n_fit;
    if (find_total < iters)
      throw ConfigError("learn: sample budget below T direction batches plus a fit slice");
  }
  const detail::SampleRange fit_range{&dataset.xs, &dataset.ys, find_total, n_fit};

  LearnResult result;
  Subspace v = warm_start ? *warm_start : Subspace::zero(d);
  if (warm_start && warm_start->ambient_dim() != d)
    throw ConfigError("learn: warm start has wrong ambient dimension");

  const double fit_w = config.fit_width_or_default();
  const double fit_h = config.fit_halfwidth_or_default(d);

  auto fit_current = [&]() {
    return detail::fit_piecewise_rows(v, fit_range, fit_w, config.mom_blocks, config.offset,
                                      fit_h);
  };
  auto fit_error = [&](const PiecewiseConstantHypothesis& h) {
    double acc = 0.0;
    MatrixXd coords_v;
    if (h.v.dim() > 0) coords_v = dataset.xs.middleRows(fit_range.begin, fit_range.count) * h.v.basis;
    std::vector<double> buf(static_cast<size_t>(std::max<int>(h.partition.dim, 1)));
    for (Eigen::Index i = 0; i < fit_range.count; ++i) {
      for (int j = 0; j < h.partition.dim; ++j) buf[static_cast<size_t>(j)] = coords_v(i, j);
      const auto cell = locate_cube(h.partition, buf.data());
      double pred = 0.0;
      if (cell) {
        const auto it = h.cell_values.find(*cell);
        if (it != h.cell_values.end()) pred = it->second;
      }
      const double r = fit_range.y(i) - pred;
      acc += r * r;
    }
    return acc / static_cast<double>(fit_range.count);
  };

  if (config.trace_hypotheses) result.per_iteration.push_back(fit_current());

  for (int t = 1; t <= iters; ++t) {
    if (static_cast<int>(v.dim()) >= cap) {
      result.stop_reason = "dimension cap reached";
      break;
    }
    const Eigen::Index slice_begin = find_total * (t - 1) / iters;
    const Eigen::Index slice_end = find_total * t / iters;
    const detail::SampleRange slice{&dataset.xs, &dataset.ys, slice_begin,
                                    slice_end - slice_begin};
    const auto t0 = std::chrono::steady_clock::now();

    DirectionFindings found = config.mode == LearnerConfig::Mode::fast_m2
                                  ? find_direction_m2_full(v, slice, config)
                                  : find_direction_full(v, slice, config);

    DirectionList picked;
    if (!found.directions.empty()) {
      if (config.mode == LearnerConfig::Mode::mim_distribution) {
        // Top eigenvalue only; exact ties break toward the lexicographically
        // larger vector.
        size_t best = 0;
        for (size_t i = 1; i < found.directions.size(); ++i) {
          if (found.eigenvalues[i] != found.eigenvalues[best]) break;
          if (std::lexicographical_compare(found.directions[best].data(),
                                           found.directions[best].data() + d,
                                           found.directions[i].data(),
                                           found.directions[i].data() + d))
            best = i;
        }
        picked.push_back(found.directions[best]);
      } else {
        picked = found.directions;
      }
    }

    DirectionList added = orthonormalize(picked, v, 1e-8);
    const int room = cap - static_cast<int>(v.dim());
    if (static_cast<int>(added.size()) > room)
      added.resize(static_cast<size_t>(room));
    v = extended(v, added);

    IterationEntry entry;
    entry.t = t;
    entry.dim_v = v.dim();
    entry.n_directions = static_cast<int>(added.size());
    entry.eigenvalues = found.eigenvalues;
    entry.lambda_max = found.lambda_max;
    entry.lambda_used = found.lambda_used;
    entry.aggregate_frobenius = found.aggregate_frobenius;
    entry.cells_used = found.cells_used;
    entry.cells_skipped = found.cells_skipped;
    if (ground_truth) {
      entry.phi = potential(ground_truth->hidden, v);
      for (const VectorXd& u : added)
        entry.betas.push_back(project_onto(u, ground_truth->hidden).norm());
    }
    if (config.trace_hypotheses) {
      result.per_iteration.push_back(fit_current());
      entry.err_fit = fit_error(result.per_iteration.back());
    }
    entry.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    result.trace.entries.push_back(std::move(entry));

    if (added.empty()) {
      result.stop_reason = "no direction above threshold";
      break;
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "iteration budget exhausted";

  result.hypothesis = fit_current();
  result.v = v;
  return result;
}

}  // namespace mim
