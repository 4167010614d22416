#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mimlearn/common.hpp"

namespace mim {

using MultiIndex = std::vector<int>;

inline int total_degree(const MultiIndex& a) {
  return std::accumulate(a.begin(), a.end(), 0);
}

// Normalized probabilists' Hermite polynomial h_k = He_k / sqrt(k!), an
// orthonormal family under the standard Gaussian. The normalized recurrence
// h_{k+1} = (t h_k - sqrt(k) h_{k-1}) / sqrt(k+1) never touches a factorial.
inline void hermite_univariate_all(int k, double t, double* out) {
  out[0] = 1.0;
  if (k == 0) return;
  out[1] = t;
  for (int i = 1; i < k; ++i)
    out[i + 1] = (t * out[i] - std::sqrt(static_cast<double>(i)) * out[i - 1]) /
                 std::sqrt(static_cast<double>(i + 1));
}

inline double hermite_univariate(int k, double t) {
  if (k < 0) throw ShapeError("hermite_univariate: negative degree");
  std::vector<double> buf(static_cast<size_t>(k) + 1);
  hermite_univariate_all(k, t, buf.data());
  return buf[static_cast<size_t>(k)];
}

// C(dim + m, m), saturating instead of overflowing.
inline uint64_t multi_index_count(int dim, int max_degree) {
  if (dim < 0 || max_degree < 0) throw ShapeError("multi_index_count: negative argument");
  uint64_t r = 1;
  for (int i = 1; i <= max_degree; ++i) {
    const uint64_t f = static_cast<uint64_t>(dim) + static_cast<uint64_t>(i);
    if (r > std::numeric_limits<uint64_t>::max() / f)
      return std::numeric_limits<uint64_t>::max();
    r = r * f / static_cast<uint64_t>(i);
  }
  return r;
}

inline constexpr uint64_t kMaxBasisSize = 200000;

// All multi-indices with total degree <= max_degree in graded lexicographic
// order: degree ascending, ties broken lexicographically descending, so for
// dim = 2, m = 2 the order is (0,0), (1,0), (0,1), (2,0), (1,1), (0,2).
inline std::vector<MultiIndex> enumerate_multi_indices(int dim, int max_degree) {
  if (dim <= 0) throw ShapeError("enumerate_multi_indices: dim must be positive");
  if (max_degree < 0) throw ShapeError("enumerate_multi_indices: negative degree");
  const uint64_t count = multi_index_count(dim, max_degree);
  if (count > kMaxBasisSize)
    throw ResourceError("multi-index basis would hold " + std::to_string(count) +
                        " elements, above the cap of " + std::to_string(kMaxBasisSize));
  std::vector<MultiIndex> out;
  out.reserve(count);
  MultiIndex cur(static_cast<size_t>(dim), 0);
  auto rec = [&](auto&& self, int pos, int remaining) -> void {
    if (pos == dim - 1) {
      cur[static_cast<size_t>(pos)] = remaining;
      out.push_back(cur);
      return;
    }
    for (int v = remaining; v >= 0; --v) {
      cur[static_cast<size_t>(pos)] = v;
      self(self, pos + 1, remaining - v);
    }
  };
  for (int deg = 0; deg <= max_degree; ++deg) rec(rec, 0, deg);
  return out;
}

// Sparse polynomial in the normalized Hermite basis.
struct HermiteExpansion {
  int dim = 0;
  std::map<MultiIndex, double> coeffs;

  explicit HermiteExpansion(int dim_ = 0) : dim(dim_) {}

  void set(const MultiIndex& a, double c) {
    if (static_cast<int>(a.size()) != dim)
      throw ShapeError("HermiteExpansion::set: index arity mismatch");
    for (int v : a)
      if (v < 0) throw ShapeError("HermiteExpansion::set: negative exponent");
    if (c == 0.0)
      coeffs.erase(a);
    else
      coeffs[a] = c;
  }

  double coefficient(const MultiIndex& a) const {
    auto it = coeffs.find(a);
    return it == coeffs.end() ? 0.0 : it->second;
  }

  int degree() const {
    int m = 0;
    for (const auto& [a, c] : coeffs) m = std::max(m, total_degree(a));
    return m;
  }

  // E[p^2] under the standard Gaussian (Parseval).
  double squared_norm() const {
    double s = 0.0;
    for (const auto& [a, c] : coeffs) s += c * c;
    return s;
  }
};

namespace detail {

// Per-thread scratch: univariate values h_0..h_m at each coordinate.
struct HermiteScratch {
  MatrixXd table;  // (m+1) x dim

  void fill(int max_degree, const double* x, int dim) {
    table.resize(max_degree + 1, dim);
    for (int j = 0; j < dim; ++j) {
      std::vector<double> col(static_cast<size_t>(max_degree) + 1);
      hermite_univariate_all(max_degree, x[j], col.data());
      for (int k = 0; k <= max_degree; ++k) table(k, j) = col[static_cast<size_t>(k)];
    }
  }
};

}  // namespace detail

inline double eval_multi_hermite(const MultiIndex& a, const VectorXd& x) {
  if (static_cast<int>(a.size()) != x.size())
    throw ShapeError("eval_multi_hermite: arity mismatch");
  double prod = 1.0;
  for (size_t j = 0; j < a.size(); ++j)
    if (a[j] > 0) prod *= hermite_univariate(a[j], x[static_cast<Eigen::Index>(j)]);
  return prod;
}

inline double eval_expansion(const HermiteExpansion& p, const VectorXd& x) {
  if (x.size() != p.dim) throw ShapeError("eval_expansion: arity mismatch");
  if (p.coeffs.empty()) return 0.0;
  detail::HermiteScratch scratch;
  scratch.fill(p.degree(), x.data(), p.dim);
  double s = 0.0;
  for (const auto& [a, c] : p.coeffs) {
    double prod = 1.0;
    for (int j = 0; j < p.dim; ++j)
      if (a[static_cast<size_t>(j)] > 0) prod *= scratch.table(a[static_cast<size_t>(j)], j);
    s += c * prod;
  }
  return s;
}

// Ladder rule: the coefficient of h_{a - e_i} in the i-th partial is
// sqrt(a_i) times the coefficient of h_a.
inline std::vector<HermiteExpansion> gradient_expansion(const HermiteExpansion& p) {
  std::vector<HermiteExpansion> grad(static_cast<size_t>(p.dim), HermiteExpansion(p.dim));
  for (const auto& [a, c] : p.coeffs) {
    for (int i = 0; i < p.dim; ++i) {
      const int ai = a[static_cast<size_t>(i)];
      if (ai == 0) continue;
      MultiIndex b = a;
      b[static_cast<size_t>(i)] -= 1;
      auto& g = grad[static_cast<size_t>(i)];
      g.set(b, g.coefficient(b) + std::sqrt(static_cast<double>(ai)) * c);
    }
  }
  return grad;
}

// E[grad p grad p^T] in closed form. Grouping the ladder-rule coefficients by
// target index beta makes the matrix a sum of outer products g_beta g_beta^T
// with g_beta[i] = sqrt(beta_i + 1) c(beta + e_i), hence PSD by construction.
inline MatrixXd influence_matrix(const HermiteExpansion& p) {
  MatrixXd m = MatrixXd::Zero(p.dim, p.dim);
  std::map<MultiIndex, VectorXd> buckets;
  for (const auto& [a, c] : p.coeffs) {
    for (int i = 0; i < p.dim; ++i) {
      const int ai = a[static_cast<size_t>(i)];
      if (ai == 0) continue;
      MultiIndex b = a;
      b[static_cast<size_t>(i)] -= 1;
      auto [it, fresh] = buckets.try_emplace(std::move(b), VectorXd::Zero(p.dim));
      it->second[i] += std::sqrt(static_cast<double>(ai)) * c;
    }
  }
  for (const auto& [b, g] : buckets) m.noalias() += g * g.transpose();
  return m;
}

// Dense view of a degree-capped basis, for regression over samples.
struct HermiteBasis {
  int dim = 0;
  int max_degree = 0;
  std::vector<MultiIndex> indices;

  HermiteBasis(int dim_, int max_degree_)
      : dim(dim_), max_degree(max_degree_), indices(enumerate_multi_indices(dim_, max_degree_)) {}

  Eigen::Index size() const { return static_cast<Eigen::Index>(indices.size()); }

  void eval_row(const double* x, VectorXd& row, detail::HermiteScratch& scratch) const {
    scratch.fill(max_degree, x, dim);
    row.resize(size());
    for (Eigen::Index t = 0; t < size(); ++t) {
      const MultiIndex& a = indices[static_cast<size_t>(t)];
      double prod = 1.0;
      for (int j = 0; j < dim; ++j)
        if (a[static_cast<size_t>(j)] > 0) prod *= scratch.table(a[static_cast<size_t>(j)], j);
      row[t] = prod;
    }
  }

  HermiteExpansion to_expansion(const VectorXd& coef) const {
    if (coef.size() != size()) throw ShapeError("HermiteBasis::to_expansion: size mismatch");
    HermiteExpansion p(dim);
    for (Eigen::Index t = 0; t < size(); ++t)
      if (coef[t] != 0.0) p.set(indices[static_cast<size_t>(t)], coef[t]);
    return p;
  }
};

}  // namespace mim
