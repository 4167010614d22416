#pragma once

#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "mimlearn/common.hpp"

namespace mim {

// A subspace of R^d held as a d x k matrix with orthonormal columns. k = 0 is
// the trivial subspace.
struct Subspace {
  MatrixXd basis;

  static Subspace zero(Eigen::Index d) { return Subspace{MatrixXd(d, 0)}; }

  Eigen::Index ambient_dim() const { return basis.rows(); }
  Eigen::Index dim() const { return basis.cols(); }

  MatrixXd projector() const { return basis * basis.transpose(); }
  MatrixXd complement_projector() const {
    return MatrixXd::Identity(basis.rows(), basis.rows()) - projector();
  }
};

using DirectionList = std::vector<VectorXd>;

inline VectorXd project_onto(const VectorXd& x, const Subspace& v) {
  if (x.size() != v.ambient_dim()) throw ShapeError("project_onto: dimension mismatch");
  if (v.dim() == 0) return VectorXd::Zero(x.size());
  return v.basis * (v.basis.transpose() * x);
}

inline VectorXd project_out(const VectorXd& x, const Subspace& v) {
  if (x.size() != v.ambient_dim()) throw ShapeError("project_out: dimension mismatch");
  if (v.dim() == 0) return x;
  return x - v.basis * (v.basis.transpose() * x);
}

// Gram-Schmidt with two projection passes per vector (the second pass removes
// the residue the first leaves behind in near-degenerate inputs). Vectors whose
// residual norm falls below tol are dropped.
inline DirectionList orthonormalize(const DirectionList& vectors, const Subspace& against,
                                    double tol = 1e-10) {
  DirectionList out;
  for (const VectorXd& v : vectors) {
    if (against.ambient_dim() > 0 && v.size() != against.ambient_dim())
      throw ShapeError("orthonormalize: dimension mismatch");
    VectorXd r = v;
    for (int pass = 0; pass < 2; ++pass) {
      if (against.dim() > 0) r -= against.basis * (against.basis.transpose() * r);
      for (const VectorXd& u : out) r -= u * u.dot(r);
    }
    const double n = r.norm();
    if (n >= tol) out.push_back(r / n);
  }
  return out;
}

inline DirectionList orthonormalize(const DirectionList& vectors, double tol = 1e-10) {
  const Eigen::Index d = vectors.empty() ? 0 : vectors.front().size();
  return orthonormalize(vectors, Subspace::zero(d), tol);
}

inline Subspace extended(const Subspace& v, const DirectionList& directions) {
  MatrixXd b(v.ambient_dim(), v.dim() + static_cast<Eigen::Index>(directions.size()));
  b.leftCols(v.dim()) = v.basis;
  Eigen::Index c = v.dim();
  for (const VectorXd& u : directions) {
    if (u.size() != v.ambient_dim()) throw ShapeError("extended: dimension mismatch");
    b.col(c++) = u;
  }
  return Subspace{std::move(b)};
}

inline Subspace subspace_from_directions(Eigen::Index d, const DirectionList& directions) {
  return extended(Subspace::zero(d), directions);
}

// Residual mass of W outside V: sum over basis vectors w_i of ||w_i - proj_V w_i||^2.
// Equal to dim(W) when V is trivial; adding a unit direction u (orthogonal to V)
// to V decreases it by exactly ||proj_W u||^2.
inline double potential(const Subspace& w, const Subspace& v) {
  if (w.ambient_dim() != v.ambient_dim()) throw ShapeError("potential: dimension mismatch");
  double phi = 0.0;
  for (Eigen::Index i = 0; i < w.dim(); ++i)
    phi += project_out(w.basis.col(i), v).squaredNorm();
  return phi;
}

// Principal angles between equal-dimension subspaces, nondecreasing, in [0, pi/2].
inline VectorXd principal_angles(const Subspace& a, const Subspace& b) {
  if (a.ambient_dim() != b.ambient_dim()) throw ShapeError("principal_angles: ambient mismatch");
  if (a.dim() != b.dim() || a.dim() == 0)
    throw ShapeError("principal_angles: subspace dimensions must match and be positive");
  Eigen::JacobiSVD<MatrixXd> svd(a.basis.transpose() * b.basis);
  VectorXd s = svd.singularValues();
  VectorXd angles(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i)
    angles[i] = std::acos(std::clamp(s[i], -1.0, 1.0));
  return angles;
}

// Angles of the true subspace against an estimate whose dimension may differ.
// Returns dim(truth) angles, nondecreasing; dimensions of truth that the
// estimate cannot cover show up as pi/2.
inline VectorXd recovery_angles(const Subspace& estimate, const Subspace& truth) {
  if (estimate.ambient_dim() != truth.ambient_dim())
    throw ShapeError("recovery_angles: ambient mismatch");
  if (truth.dim() == 0) return VectorXd(0);
  VectorXd cosines = VectorXd::Zero(truth.dim());
  if (estimate.dim() > 0) {
    Eigen::JacobiSVD<MatrixXd> svd(truth.basis.transpose() * estimate.basis);
    const VectorXd s = svd.singularValues();
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(s.size(), truth.dim()); ++i)
      cosines[i] = s[i];
  }
  VectorXd angles(truth.dim());
  for (Eigen::Index i = 0; i < truth.dim(); ++i)
    angles[i] = std::acos(std::clamp(cosines[i], -1.0, 1.0));
  return angles;
}

}  // namespace mim
