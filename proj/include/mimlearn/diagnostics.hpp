#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mimlearn/common.hpp"
#include "mimlearn/hermite.hpp"
#include "mimlearn/learner.hpp"
#include "mimlearn/subspace.hpp"
#include "mimlearn/synthetic.hpp"

namespace mim {

namespace detail {

// Occupied label bins (floor(y/width)) merged left to right until every group
// reaches min_bin samples; a short trailing group joins its neighbor. Returns
// groups of row offsets in canonical order and reports whether any merge
// happened.
inline std::vector<std::vector<Eigen::Index>> merge_label_bins(
    const std::vector<std::pair<int64_t, Eigen::Index>>& keyed, Eigen::Index min_bin,
    bool* widened) {
  std::map<int64_t, std::vector<Eigen::Index>> bins;
  for (const auto& [key, row] : keyed) bins[key].push_back(row);
  std::vector<std::vector<Eigen::Index>> groups;
  std::vector<Eigen::Index> current;
  for (auto& [key, rows] : bins) {
    current.insert(current.end(), rows.begin(), rows.end());
    if (static_cast<Eigen::Index>(current.size()) >= min_bin) {
      groups.push_back(std::move(current));
      current.clear();
    } else if (widened) {
      *widened = true;
    }
  }
  if (!current.empty()) {
    if (!groups.empty()) {
      groups.back().insert(groups.back().end(), current.begin(), current.end());
      if (widened) *widened = true;
    } else {
      groups.push_back(std::move(current));
    }
  }
  return groups;
}

}  // namespace detail

struct ConditionalMomentProfile {
  int m_max = 0;
  double bin_width = 0.0;
  Eigen::Index n = 0;
  std::vector<double> values;  // degree k at index k-1
  std::vector<double> ses;
  bool widened = false;  // undersampled bins were merged
};

struct GenerativeExponentResult {
  std::optional<int> m_star;  // empty: NOT_FOUND up to m_max
  ConditionalMomentProfile profile;
  double threshold = 0.0;
};

struct GenerativeExponentOptions {
  double y_bin_width = 0.1;
  double threshold = 0.02;
  Eigen::Index min_bin = 30;
};

// Estimates, per degree k <= m_max, the L2 norm over the label marginal of
// E[h_k(t) | y] by conditioning on label bins. The squared per-bin mean is
// debiased by var/n; the decision rule asks for value > threshold + 3 SE.
inline GenerativeExponentResult generative_exponent(const VectorXd& ts, const VectorXd& ys,
                                                    int m_max,
                                                    const GenerativeExponentOptions& opts = {}) {
  if (m_max < 1) throw ConfigError("generative_exponent: m_max must be at least 1");
  if (ts.size() != ys.size() || ts.size() == 0)
    throw ShapeError("generative_exponent: mismatched or empty samples");
  if (!(opts.y_bin_width > 0.0))
    throw ConfigError("generative_exponent: y_bin_width must be positive");

  const Eigen::Index n = ts.size();
  GenerativeExponentResult result;
  result.threshold = opts.threshold;
  auto& profile = result.profile;
  profile.m_max = m_max;
  profile.bin_width = opts.y_bin_width;
  profile.n = n;

  std::vector<std::pair<int64_t, Eigen::Index>> keyed;
  keyed.reserve(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    keyed.emplace_back(static_cast<int64_t>(std::floor(ys[i] / opts.y_bin_width)), i);
  const auto groups = detail::merge_label_bins(keyed, opts.min_bin, &profile.widened);

  MatrixXd hk(n, m_max + 1);
  std::vector<double> row(static_cast<size_t>(m_max) + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    hermite_univariate_all(m_max, ts[i], row.data());
    for (int k = 0; k <= m_max; ++k) hk(i, k) = row[static_cast<size_t>(k)];
  }

  for (int k = 1; k <= m_max; ++k) {
    double vhat = 0.0, var_vhat = 0.0;
    for (const auto& g : groups) {
      const double n_g = static_cast<double>(g.size());
      double s = 0.0, s2 = 0.0;
      for (Eigen::Index i : g) {
        s += hk(i, k);
        s2 += hk(i, k) * hk(i, k);
      }
      const double mean = s / n_g;
      const double var = n_g > 1 ? (s2 - n_g * mean * mean) / (n_g - 1.0) : 0.0;
      const double mass = n_g / static_cast<double>(n);
      vhat += mass * (mean * mean - var / n_g);
      var_vhat += mass * mass *
                  (4.0 * mean * mean * var / n_g + 2.0 * var * var / (n_g * n_g));
    }
    const double v_pos = std::max(vhat, 0.0);
    const double value = std::sqrt(v_pos);
    // SE on the value scale: the increase if the squared estimate grew by one SE
    const double se = std::sqrt(v_pos + std::sqrt(var_vhat)) - value;
    profile.values.push_back(value);
    profile.ses.push_back(se);
    if (!result.m_star && value > opts.threshold + 3.0 * se) result.m_star = k;
  }
  return result;
}

inline GenerativeExponentResult generative_exponent(const std::function<double(double)>& link,
                                                    int m_max, Eigen::Index n, uint64_t seed,
                                                    const GenerativeExponentOptions& opts = {}) {
  if (n < 1) throw ConfigError("generative_exponent: need a positive sample count");
  Rng rng(seed);
  VectorXd ts(n), ys(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    ts[i] = rng.gauss();
    ys[i] = link(ts[i]);
  }
  return generative_exponent(ts, ys, m_max, opts);
}

struct MomentDefectOptions {
  double cube_width = 1.0;   // conditioning cells over V, unbounded integer grid
  double y_bin_width = 0.5;
  Eigen::Index min_bin = 30;
  int max_working_dim = 8;
  MatrixXd working_frame;  // optional explicit frame for the complement coordinates
  int workers = 1;
};

struct MomentDefectResult {
  double value = 0.0;    // debiased, floored at 0
  double raw_rms = 0.0;  // plain RMS, no small-sample debiasing
  double se = 0.0;
  double included_mass = 1.0;  // fraction of samples inside usable groups
  bool widened = false;
  Eigen::Index groups = 0;
};

// Mass-weighted RMS over (cell of V, label bin) pairs of the conditional mean
// vector of H_alpha over complement-frame coordinates, 1 <= |alpha| <= m. An
// empirical lower proxy for the moment-matching defect: ~0 certifies
// approximate matching at this conditioning resolution. The complement is
// truncated to a working frame (<= max_working_dim coordinates, or a caller
// frame when the relevant directions are known).
inline MomentDefectResult moment_match_defect(const LabeledDataset& dataset, const Subspace& v,
                                              int m, const MomentDefectOptions& opts = {}) {
  if (m < 1) throw ConfigError("moment_match_defect: m must be at least 1");
  if (dataset.size() == 0) throw ShapeError("moment_match_defect: empty dataset");
  if (v.ambient_dim() != dataset.dim())
    throw ShapeError("moment_match_defect: subspace/dataset dimension mismatch");
  if (!(opts.cube_width > 0.0 && opts.y_bin_width > 0.0))
    throw ConfigError("moment_match_defect: widths must be positive");

  MatrixXd frame;
  if (opts.working_frame.size() > 0) {
    if (opts.working_frame.rows() != dataset.dim())
      throw ShapeError("moment_match_defect: working frame has wrong ambient dimension");
    DirectionList cols;
    for (Eigen::Index c = 0; c < opts.working_frame.cols(); ++c)
      cols.push_back(opts.working_frame.col(c));
    const DirectionList on = orthonormalize(cols, v, 1e-8);
    if (on.empty()) throw ConfigError("moment_match_defect: working frame collapses onto V");
    frame = subspace_from_directions(dataset.dim(), on).basis;
  } else {
    const Subspace comp = detail::complement_frame(v);
    const Eigen::Index take = std::min<Eigen::Index>(comp.dim(), opts.max_working_dim);
    if (take == 0) throw ConfigError("moment_match_defect: V has no complement");
    frame = comp.basis.leftCols(take);
  }

  const Eigen::Index n = dataset.size();
  const int kdim = static_cast<int>(v.dim());
  MatrixXd coords_v;
  if (kdim > 0) coords_v = dataset.xs * v.basis;
  const MatrixXd coords_w = dataset.xs * frame;

  // group rows by V-cell, then merge label bins within each cell
  std::map<std::vector<int64_t>, std::vector<std::pair<int64_t, Eigen::Index>>> cells;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<int64_t> key(static_cast<size_t>(kdim));
    for (int j = 0; j < kdim; ++j)
      key[static_cast<size_t>(j)] =
          static_cast<int64_t>(std::floor(coords_v(i, j) / opts.cube_width));
    cells[std::move(key)].emplace_back(
        static_cast<int64_t>(std::floor(dataset.ys[i] / opts.y_bin_width)), i);
  }

  MomentDefectResult result;
  std::vector<std::vector<Eigen::Index>> groups;
  Eigen::Index included = 0;
  for (auto& [key, keyed] : cells) {
    if (static_cast<Eigen::Index>(keyed.size()) < opts.min_bin) {
      result.widened = true;  // cell too thin to condition on at all
      continue;
    }
    auto cell_groups = detail::merge_label_bins(keyed, opts.min_bin, &result.widened);
    for (auto& g : cell_groups) {
      included += static_cast<Eigen::Index>(g.size());
      groups.push_back(std::move(g));
    }
  }
  if (groups.empty()) throw ConfigError("moment_match_defect: no group reaches min_bin samples");
  result.groups = static_cast<Eigen::Index>(groups.size());
  result.included_mass = static_cast<double>(included) / static_cast<double>(n);

  const HermiteBasis basis(static_cast<int>(frame.cols()), m);
  struct GroupStat {
    double corrected = 0.0, raw = 0.0, var = 0.0, mass = 0.0;
  };
  std::vector<GroupStat> stats(groups.size());
  detail::parallel_for(opts.workers, groups.size(), [&](size_t gi) {
    const auto& g = groups[gi];
    const double n_g = static_cast<double>(g.size());
    VectorXd sum = VectorXd::Zero(basis.size());
    VectorXd sumsq = VectorXd::Zero(basis.size());
    detail::HermiteScratch scratch;
    VectorXd row;
    std::vector<double> xbuf(static_cast<size_t>(frame.cols()));
    for (Eigen::Index i : g) {
      for (Eigen::Index j = 0; j < frame.cols(); ++j)
        xbuf[static_cast<size_t>(j)] = coords_w(i, j);
      basis.eval_row(xbuf.data(), row, scratch);
      sum += row;
      sumsq += row.cwiseProduct(row);
    }
    GroupStat s;
    s.mass = n_g / static_cast<double>(included);
    for (Eigen::Index a = 1; a < basis.size(); ++a) {  // a = 0 is the constant
      const double mean = sum[a] / n_g;
      const double var = n_g > 1 ? (sumsq[a] - n_g * mean * mean) / (n_g - 1.0) : 0.0;
      s.raw += mean * mean;
      s.corrected += mean * mean - var / n_g;
      s.var += 4.0 * mean * mean * var / n_g + 2.0 * var * var / (n_g * n_g);
    }
    stats[gi] = s;
  });

  double vhat = 0.0, raw = 0.0, var_vhat = 0.0;
  for (const auto& s : stats) {
    vhat += s.mass * s.corrected;
    raw += s.mass * s.raw;
    var_vhat += s.mass * s.mass * s.var;
  }
  const double v_pos = std::max(vhat, 0.0);
  result.value = std::sqrt(v_pos);
  result.raw_rms = std::sqrt(std::max(raw, 0.0));
  result.se = std::sqrt(v_pos + std::sqrt(var_vhat)) - result.value;
  return result;
}

struct FilteredSecondMoment {
  MatrixXd matrix;  // ambient d x d, restriction to V projected out
  double active_fraction = 0.0;
  double null_frobenius_se = 0.0;  // scale of ||matrix||_F under the no-signal null
};

// Empirical E[1(|y - f(x_V)| > tau) (x_{V_perp} x_{V_perp}^T - Pi_{V_perp})].
inline FilteredSecondMoment filtered_second_moment(
    const LabeledDataset& dataset, const Subspace& v,
    const std::function<double(const VectorXd&)>& f_on_v, double tau) {
  if (!(tau > 0.0)) throw ConfigError("filtered_second_moment: tau must be positive");
  if (dataset.size() == 0) throw ShapeError("filtered_second_moment: empty dataset");
  if (v.ambient_dim() != dataset.dim())
    throw ShapeError("filtered_second_moment: subspace/dataset dimension mismatch");

  const Eigen::Index n = dataset.size();
  const Eigen::Index d = dataset.dim();
  const MatrixXd proj = v.complement_projector();
  MatrixXd sum = MatrixXd::Zero(d, d);
  MatrixXd sumsq = MatrixXd::Zero(d, d);
  Eigen::Index active = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const VectorXd x = dataset.xs.row(i).transpose();
    if (std::abs(dataset.ys[i] - f_on_v(x)) <= tau) continue;
    ++active;
    const VectorXd z = proj * x;
    const MatrixXd term = z * z.transpose() - proj;
    sum += term;
    sumsq += term.cwiseProduct(term);
  }
  FilteredSecondMoment out;
  out.active_fraction = static_cast<double>(active) / static_cast<double>(n);
  MatrixXd mhat = sum / static_cast<double>(n);
  mhat = proj * mhat * proj;  // restriction to V is projected out
  out.matrix = 0.5 * (mhat + mhat.transpose());
  double var_total = 0.0;
  for (Eigen::Index a = 0; a < d; ++a)
    for (Eigen::Index b = 0; b < d; ++b) {
      const double mean = sum(a, b) / static_cast<double>(n);
      var_total += sumsq(a, b) / static_cast<double>(n) - mean * mean;
    }
  out.null_frobenius_se = std::sqrt(std::max(var_total, 0.0) / static_cast<double>(n));
  return out;
}

// Per-sample quadratic form w^T M w with its standard error, for testing that
// a specific direction carries signal.
inline std::pair<double, double> filtered_quadratic_form(
    const LabeledDataset& dataset, const Subspace& v,
    const std::function<double(const VectorXd&)>& f_on_v, double tau, const VectorXd& w) {
  if (!(tau > 0.0)) throw ConfigError("filtered_quadratic_form: tau must be positive");
  if (w.size() != dataset.dim()) throw ShapeError("filtered_quadratic_form: direction dimension");
  const Eigen::Index n = dataset.size();
  if (n < 2) throw ShapeError("filtered_quadratic_form: need at least two samples");
  const VectorXd wp = w - v.basis * (v.basis.transpose() * w);
  const double base = wp.squaredNorm();
  double s = 0.0, s2 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const VectorXd x = dataset.xs.row(i).transpose();
    double term = 0.0;
    if (std::abs(dataset.ys[i] - f_on_v(x)) > tau) {
      const double zw = wp.dot(x);
      term = zw * zw - base;
    }
    s += term;
    s2 += term * term;
  }
  const double mean = s / static_cast<double>(n);
  const double var = (s2 - static_cast<double>(n) * mean * mean) / static_cast<double>(n - 1);
  return {mean, std::sqrt(std::max(var, 0.0) / static_cast<double>(n))};
}

inline std::string profile_to_csv(const ConditionalMomentProfile& profile) {
  std::ostringstream os;
  os.precision(17);
  os << "degree,value,se\n";
  for (int k = 1; k <= profile.m_max; ++k)
    os << k << ',' << profile.values[static_cast<size_t>(k - 1)] << ','
       << profile.ses[static_cast<size_t>(k - 1)] << '\n';
  return os.str();
}

inline std::string matrix_to_csv(const MatrixXd& m) {
  std::ostringstream os;
  os.precision(17);
  for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << 'c' << j;
  os << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
    os << '\n';
  }
  return os.str();
}

}  // namespace mim
