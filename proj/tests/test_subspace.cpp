#include <catch2/catch_amalgamated.hpp>

#include "mimlearn/subspace.hpp"

using namespace mim;

namespace {

Subspace random_subspace(Rng& rng, Eigen::Index d, Eigen::Index k) {
  DirectionList vs;
  for (Eigen::Index i = 0; i < k; ++i) vs.push_back(rng.gauss_vector(d));
  DirectionList on = orthonormalize(vs);
  REQUIRE(on.size() == static_cast<size_t>(k));
  return subspace_from_directions(d, on);
}

}  // namespace

TEST_CASE("orthonormalize produces unit, mutually orthogonal vectors", "[subspace]") {
  Rng rng(71);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index d = 6 + trial % 5;
    DirectionList vs;
    for (int i = 0; i < 4; ++i) vs.push_back(rng.gauss_vector(d));
    DirectionList on = orthonormalize(vs);
    REQUIRE(on.size() == 4);
    for (size_t i = 0; i < on.size(); ++i) {
      CHECK(std::abs(on[i].norm() - 1.0) < 1e-10);
      for (size_t j = 0; j < i; ++j) CHECK(std::abs(on[i].dot(on[j])) < 1e-10);
    }
  }
}

TEST_CASE("orthonormalize respects the against subspace and drops dependents", "[subspace]") {
  Rng rng(72);
  const Eigen::Index d = 8;
  Subspace v = random_subspace(rng, d, 3);

  DirectionList vs;
  vs.push_back(rng.gauss_vector(d));
  vs.push_back(v.basis.col(0) + 1e-13 * rng.gauss_vector(d));  // inside V, must drop
  vs.push_back(rng.gauss_vector(d));
  vs.push_back(vs[0] * 2.5);  // dependent on an earlier survivor, must drop

  DirectionList on = orthonormalize(vs, v);
  REQUIRE(on.size() == 2);
  for (const auto& u : on) {
    CHECK(std::abs(u.norm() - 1.0) < 1e-10);
    CHECK(project_onto(u, v).norm() < 1e-10);
  }
}

TEST_CASE("projection operators", "[subspace]") {
  Rng rng(73);
  const Eigen::Index d = 9;
  Subspace v = random_subspace(rng, d, 4);

  const MatrixXd p = v.projector();
  CHECK((p * p - p).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((p - p.transpose()).cwiseAbs().maxCoeff() < 1e-12);

  const VectorXd x = rng.gauss_vector(d);
  const VectorXd xin = project_onto(x, v);
  const VectorXd xout = project_out(x, v);
  CHECK((xin + xout - x).norm() < 1e-12);
  CHECK(std::abs(xin.dot(xout)) < 1e-10);
  CHECK(project_out(xout, v).isApprox(xout, 1e-10));

  Subspace trivial = Subspace::zero(d);
  CHECK(project_onto(x, trivial).norm() == 0.0);
  CHECK(project_out(x, trivial).isApprox(x));

  CHECK_THROWS_AS(project_onto(VectorXd::Zero(d + 1), v), ShapeError);
}

TEST_CASE("potential starts at dim(W), is monotone, and drops by the squared overlap",
          "[subspace]") {
  Rng rng(74);
  const Eigen::Index d = 10;
  Subspace w = random_subspace(rng, d, 3);

  Subspace v = Subspace::zero(d);
  CHECK(potential(w, v) == Catch::Approx(3.0).margin(1e-12));

  double prev = potential(w, v);
  for (int step = 0; step < 5; ++step) {
    DirectionList cand{rng.gauss_vector(d)};
    DirectionList add = orthonormalize(cand, v);
    REQUIRE(add.size() == 1);
    const double overlap = project_onto(add[0], w).squaredNorm();
    Subspace vnext = extended(v, add);
    const double cur = potential(w, vnext);
    CHECK(cur <= prev + 1e-10);
    CHECK(cur == Catch::Approx(prev - overlap).margin(1e-10));
    v = vnext;
    prev = cur;
  }

  // Once V contains W the potential is zero.
  Subspace full = subspace_from_directions(
      d, orthonormalize({w.basis.col(0), w.basis.col(1), w.basis.col(2)}));
  CHECK(potential(w, full) < 1e-10);
}

TEST_CASE("principal angles on known configurations", "[subspace]") {
  const Eigen::Index d = 5;
  MatrixXd a(d, 2), b(d, 2);
  a.setZero();
  b.setZero();
  a(0, 0) = 1.0;
  a(1, 1) = 1.0;
  const double theta = 0.3;
  b(0, 0) = std::cos(theta);
  b(2, 0) = std::sin(theta);
  b(1, 1) = 1.0;
  VectorXd angles = principal_angles(Subspace{a}, Subspace{b});
  REQUIRE(angles.size() == 2);
  CHECK(angles[0] == Catch::Approx(0.0).margin(1e-12));
  CHECK(angles[1] == Catch::Approx(theta).margin(1e-12));

  MatrixXd c(d, 2);
  c.setZero();
  c(2, 0) = 1.0;
  c(3, 1) = 1.0;
  VectorXd perp = principal_angles(Subspace{a}, Subspace{c});
  CHECK(perp[1] == Catch::Approx(M_PI / 2).margin(1e-12));

  CHECK_THROWS_AS(principal_angles(Subspace{a}, Subspace{a.leftCols(1)}), ShapeError);
}

TEST_CASE("principal angles are sorted and bounded", "[subspace]") {
  Rng rng(75);
  for (int trial = 0; trial < 15; ++trial) {
    Subspace a = random_subspace(rng, 8, 3);
    Subspace b = random_subspace(rng, 8, 3);
    VectorXd angles = principal_angles(a, b);
    for (Eigen::Index i = 0; i < angles.size(); ++i) {
      CHECK(angles[i] >= 0.0);
      CHECK(angles[i] <= M_PI / 2 + 1e-12);
      if (i > 0) CHECK(angles[i] >= angles[i - 1] - 1e-12);
    }
    CHECK(principal_angles(a, a).maxCoeff() < 1e-7);
  }
}

TEST_CASE("recovery angles pad missing dimensions with pi/2", "[subspace]") {
  Rng rng(76);
  const Eigen::Index d = 7;
  Subspace w = random_subspace(rng, d, 2);

  Subspace partial = subspace_from_directions(d, {w.basis.col(0)});
  VectorXd angles = recovery_angles(partial, w);
  REQUIRE(angles.size() == 2);
  CHECK(angles[0] == Catch::Approx(0.0).margin(1e-7));
  CHECK(angles[1] == Catch::Approx(M_PI / 2).margin(1e-12));

  CHECK(recovery_angles(Subspace::zero(d), w).minCoeff() == Catch::Approx(M_PI / 2));
  CHECK(recovery_angles(w, w).maxCoeff() < 1e-7);

  // A larger estimate containing W still recovers it exactly.
  Subspace big = extended(w, orthonormalize({rng.gauss_vector(d)}, w));
  CHECK(recovery_angles(big, w).maxCoeff() < 1e-7);
}
