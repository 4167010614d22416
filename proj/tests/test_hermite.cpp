#include <catch2/catch_amalgamated.hpp>

#include "frozen_oracles.hpp"
#include "mimlearn/hermite.hpp"

using namespace mim;

namespace {

HermiteExpansion fixed_expansion() {
  HermiteExpansion p(2);
  p.set({2, 0}, 0.5);
  p.set({1, 1}, -1.2);
  p.set({0, 3}, 0.3);
  return p;
}

HermiteExpansion random_expansion(Rng& rng, int dim, int degree, double density = 0.4) {
  HermiteExpansion p(dim);
  for (const MultiIndex& a : enumerate_multi_indices(dim, degree)) {
    if (total_degree(a) == 0) continue;
    if (rng.uniform01() < density) p.set(a, rng.gauss());
  }
  return p;
}

}  // namespace

TEST_CASE("univariate values match the frozen high-precision table", "[hermite]") {
  for (int pi = 0; pi < 7; ++pi) {
    const double t = oracles::kHermitePoints[pi];
    std::vector<double> all(11);
    hermite_univariate_all(10, t, all.data());
    for (int k = 0; k <= 10; ++k) {
      CHECK(all[static_cast<size_t>(k)] ==
            Catch::Approx(oracles::kHermiteTable[pi][k]).margin(1e-13).epsilon(1e-13));
      CHECK(hermite_univariate(k, t) == all[static_cast<size_t>(k)]);
    }
  }
}

TEST_CASE("recurrence stays accurate at high degree", "[hermite]") {
  CHECK(hermite_univariate(40, 1.9) == Catch::Approx(oracles::kHermite40At19).epsilon(1e-12));
  CHECK(hermite_univariate(25, -0.5) == Catch::Approx(oracles::kHermite25AtNeg05).epsilon(1e-12));
  CHECK(hermite_univariate(12, 3.1) == Catch::Approx(oracles::kHermite12At31).epsilon(1e-12));
  CHECK(std::isfinite(hermite_univariate(80, 5.0)));
}

TEST_CASE("quadrature confirms orthonormality for a sample of pairs", "[hermite]") {
  // The full degree grid is covered by the acceptance suite; spot pairs here.
  const std::pair<int, int> pairs[] = {{0, 0}, {3, 3}, {10, 10}, {0, 2}, {3, 5}, {7, 10}};
  for (auto [i, j] : pairs) {
    double q = 0.0;
    for (int n = 0; n < 40; ++n)
      q += oracles::kGhWeights[n] * hermite_univariate(i, oracles::kGhNodes[n]) *
           hermite_univariate(j, oracles::kGhNodes[n]);
    CHECK(q == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-12));
  }
}

TEST_CASE("multi-index enumeration is graded lexicographic with exact counts", "[hermite]") {
  const std::vector<MultiIndex> expect = {{0, 0}, {1, 0}, {0, 1}, {2, 0}, {1, 1}, {0, 2}};
  CHECK(enumerate_multi_indices(2, 2) == expect);

  CHECK(multi_index_count(4, 3) == 35);
  CHECK(multi_index_count(3, 3) == 20);
  CHECK(enumerate_multi_indices(4, 3).size() == 35);
  CHECK(enumerate_multi_indices(3, 3).size() == 20);
  CHECK(enumerate_multi_indices(1, 0) == std::vector<MultiIndex>{{0}});

  auto big = enumerate_multi_indices(10, 5);
  CHECK(big.size() == multi_index_count(10, 5));
  for (size_t i = 1; i < big.size(); ++i) {
    const int da = total_degree(big[i - 1]), db = total_degree(big[i]);
    CHECK(da <= db);
    if (da == db) CHECK(big[i - 1] > big[i]);  // lexicographically descending within a grade
  }

  CHECK_THROWS_AS(enumerate_multi_indices(50, 6), ResourceError);
  CHECK_THROWS_AS(enumerate_multi_indices(0, 2), ShapeError);
}

TEST_CASE("expansion evaluation and gradient match the frozen oracle", "[hermite]") {
  const HermiteExpansion p = fixed_expansion();
  VectorXd x(2);
  x << 0.7, -1.3;

  CHECK(eval_expansion(p, x) == Catch::Approx(oracles::kExpansionValue).epsilon(1e-14));
  CHECK(p.squared_norm() == Catch::Approx(oracles::kExpansionNormSq).epsilon(1e-14));
  CHECK(p.degree() == 3);

  const auto grad = gradient_expansion(p);
  REQUIRE(grad.size() == 2);
  CHECK(eval_expansion(grad[0], x) == Catch::Approx(oracles::kExpansionD1).epsilon(1e-14));
  CHECK(eval_expansion(grad[1], x) == Catch::Approx(oracles::kExpansionD2).epsilon(1e-14));
  CHECK(grad[0].coefficient({1, 0}) == Catch::Approx(std::sqrt(2.0) * 0.5).epsilon(1e-15));
  CHECK(grad[0].coefficient({0, 1}) == Catch::Approx(-1.2).epsilon(1e-15));
  CHECK(grad[1].coefficient({1, 0}) == Catch::Approx(-1.2).epsilon(1e-15));
  CHECK(grad[1].coefficient({0, 2}) == Catch::Approx(std::sqrt(3.0) * 0.3).epsilon(1e-15));
}

TEST_CASE("influence matrix matches the frozen oracle", "[hermite]") {
  const MatrixXd m = influence_matrix(fixed_expansion());
  REQUIRE(m.rows() == 2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(m(i, j) == Catch::Approx(oracles::kExpansionInfluence[i][j]).margin(1e-14));
  CHECK(m.trace() == Catch::Approx(oracles::kExpansionTrace).epsilon(1e-14));
}

TEST_CASE("gradient matches central differences on random expansions", "[hermite]") {
  Rng rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    const int dim = 2 + trial % 3;
    HermiteExpansion p = random_expansion(rng, dim, 3);
    const auto grad = gradient_expansion(p);
    const VectorXd x = rng.gauss_vector(dim);
    const double eps = 1e-6;
    for (int i = 0; i < dim; ++i) {
      VectorXd xp = x, xm = x;
      xp[i] += eps;
      xm[i] -= eps;
      const double fd = (eval_expansion(p, xp) - eval_expansion(p, xm)) / (2 * eps);
      CHECK(eval_expansion(grad[static_cast<size_t>(i)], x) ==
            Catch::Approx(fd).margin(1e-7).epsilon(1e-7));
    }
  }
}

TEST_CASE("influence matrix structural invariants", "[hermite]") {
  Rng rng(102);
  for (int trial = 0; trial < 12; ++trial) {
    const int dim = 2 + trial % 4;
    const int deg = 1 + trial % 3;
    HermiteExpansion p = random_expansion(rng, dim, deg, 0.6);
    const MatrixXd m = influence_matrix(p);

    CHECK((m - m.transpose()).cwiseAbs().maxCoeff() < 1e-12);

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
    CHECK(es.eigenvalues().minCoeff() > -1e-12);

    // Diagonal entries have the exact closed form sum_a a_i c(a)^2.
    for (int i = 0; i < dim; ++i) {
      double want = 0.0;
      for (const auto& [a, c] : p.coeffs) want += a[static_cast<size_t>(i)] * c * c;
      CHECK(m(i, i) == Catch::Approx(want).margin(1e-12));
    }

    double trace_want = 0.0;
    for (const auto& [a, c] : p.coeffs) trace_want += total_degree(a) * c * c;
    CHECK(m.trace() == Catch::Approx(trace_want).margin(1e-12));
    CHECK(m.trace() <= deg * p.squared_norm() + 1e-12);
  }
}

TEST_CASE("basis rows agree with per-index evaluation", "[hermite]") {
  Rng rng(103);
  HermiteBasis basis(3, 3);
  REQUIRE(basis.size() == 20);
  detail::HermiteScratch scratch;
  VectorXd row;
  for (int trial = 0; trial < 5; ++trial) {
    const VectorXd x = rng.gauss_vector(3);
    basis.eval_row(x.data(), row, scratch);
    for (Eigen::Index t = 0; t < basis.size(); ++t)
      CHECK(row[t] ==
            Catch::Approx(eval_multi_hermite(basis.indices[static_cast<size_t>(t)], x))
                .margin(1e-13));
  }

  VectorXd coef = VectorXd::Zero(basis.size());
  coef[3] = 1.25;
  coef[10] = -0.5;
  HermiteExpansion p = basis.to_expansion(coef);
  CHECK(p.coeffs.size() == 2);
  const VectorXd x = rng.gauss_vector(3);
  basis.eval_row(x.data(), row, scratch);
  CHECK(eval_expansion(p, x) == Catch::Approx(coef.dot(row)).epsilon(1e-12));
}
