#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mimlearn/diagnostics.hpp"

using namespace mim;

namespace {

LabeledDataset product_dataset(Eigen::Index n, Eigen::Index d, uint64_t seed) {
  LabeledDataset ds;
  ds.seed = seed;
  ds.xs.resize(n, d);
  ds.ys.resize(n);
  Rng xrng = Rng(seed).child(101);
  Rng yrng = Rng(seed).child(103);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) ds.xs(i, j) = xrng.gauss();
    ds.ys[i] = yrng.gauss();
  }
  ds.provenance = "{\"kind\":\"product\"}";
  return ds;
}

LabeledDataset square_coordinate_dataset(Eigen::Index n, Eigen::Index d, uint64_t seed) {
  LabeledDataset ds = product_dataset(n, d, seed);
  for (Eigen::Index i = 0; i < n; ++i) ds.ys[i] = ds.xs(i, 0) * ds.xs(i, 0);
  ds.provenance = "{\"kind\":\"squared first coordinate\"}";
  return ds;
}

}  // namespace

TEST_CASE("generative exponent identifies link degrees", "[diagnostics]") {
  const Eigen::Index n = 100000;

  const auto identity = generative_exponent([](double t) { return t; }, 4, n, 401);
  REQUIRE(identity.m_star.has_value());
  CHECK(*identity.m_star == 1);
  CHECK(identity.profile.values.size() == 4);
  CHECK(identity.profile.values[0] == Catch::Approx(1.0).margin(0.02));
  for (double val : identity.profile.values) CHECK(val >= 0.0);

  const auto square = generative_exponent([](double t) { return t * t; }, 4, n, 402);
  REQUIRE(square.m_star.has_value());
  CHECK(*square.m_star == 2);
  // odd moments vanish by symmetry; e.g. E[h2 | y] = (y-1)/sqrt(2) has norm 1
  CHECK(square.profile.values[0] < 0.05);
  CHECK(square.profile.values[1] == Catch::Approx(1.0).margin(0.03));

  const auto absval = generative_exponent([](double t) { return std::abs(t); }, 4, n, 403);
  REQUIRE(absval.m_star.has_value());
  CHECK(*absval.m_star == 2);
  CHECK(absval.profile.values[0] < 0.05);
}

TEST_CASE("generative exponent is invariant to monotone relabeling", "[diagnostics]") {
  const Eigen::Index n = 100000;
  const auto plain = generative_exponent([](double t) { return t; }, 2, n, 404);
  const auto warped =
      generative_exponent([](double t) { return t * t * t + t; }, 2, n, 404);
  REQUIRE(plain.m_star.has_value());
  REQUIRE(warped.m_star.has_value());
  CHECK(*plain.m_star == *warped.m_star);
  const double gap = std::abs(plain.profile.values[0] - warped.profile.values[0]);
  CHECK(gap <= plain.profile.ses[0] + warped.profile.ses[0] + 0.01);
}

TEST_CASE("generative exponent on independent labels finds nothing", "[diagnostics]") {
  const Eigen::Index n = 100000;
  Rng rng(405);
  VectorXd ts(n), ys(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    ts[i] = rng.gauss();
    ys[i] = rng.gauss();
  }
  const auto res = generative_exponent(ts, ys, 4);
  CHECK_FALSE(res.m_star.has_value());
  for (double val : res.profile.values) CHECK(val < 0.02);
}

TEST_CASE("generative exponent widens undersampled bins", "[diagnostics]") {
  GenerativeExponentOptions opts;
  opts.y_bin_width = 0.001;  // far finer than 200 samples can support
  const auto res = generative_exponent([](double t) { return t; }, 2, 200, 406, opts);
  CHECK(res.profile.widened);
  CHECK(res.profile.values.size() == 2);

  CHECK_THROWS_AS(generative_exponent([](double t) { return t; }, 0, 100, 1), ConfigError);
  CHECK_THROWS_AS(generative_exponent([](double t) { return t; }, 2, 0, 1), ConfigError);
}

TEST_CASE("moment defect separates product from mismatched labels", "[diagnostics]") {
  const int d = 4;
  DirectionList last{VectorXd::Unit(d, 3)};
  const Subspace v = subspace_from_directions(d, last);

  const LabeledDataset big = product_dataset(1000000, d, 407);
  const MomentDefectResult nu_big = moment_match_defect(big, v, 2);
  CHECK(nu_big.value < 0.02);
  CHECK(nu_big.included_mass > 0.9);

  // consistency: the uncorrected RMS shrinks with sample size (the debiased
  // value saturates at zero on product data, so the raw scale carries this)
  const LabeledDataset small = product_dataset(10000, d, 407);
  const MomentDefectResult nu_small = moment_match_defect(small, v, 2);
  CHECK(nu_big.raw_rms < nu_small.raw_rms);

  const LabeledDataset mism = square_coordinate_dataset(100000, d, 408);
  const MomentDefectResult nu_mism = moment_match_defect(mism, v, 2);
  CHECK(nu_mism.value >= 0.2);
}

TEST_CASE("moment defect vanishes when labels depend only on V", "[diagnostics]") {
  const MimInstance inst = make_relu_network(5, 2, {2}, 42);
  const LabeledDataset ds = sample_dataset(inst, NoiseModel::realizable(), 200000, 421);
  const MomentDefectResult nu = moment_match_defect(ds, inst.hidden, 2);
  CHECK(nu.value < 0.02);
}

TEST_CASE("moment defect honors a supplied working frame", "[diagnostics]") {
  const int d = 12;
  const Subspace v0 = Subspace::zero(d);
  const LabeledDataset ds = square_coordinate_dataset(100000, d, 409);

  // default frame keeps the first working coordinates, which include the signal
  const MomentDefectResult seen = moment_match_defect(ds, v0, 2);
  CHECK(seen.value >= 0.2);

  MomentDefectOptions blind;
  blind.working_frame = MatrixXd::Zero(d, 1);
  blind.working_frame(5, 0) = 1.0;  // direction carrying no mismatch
  const MomentDefectResult unseen = moment_match_defect(ds, v0, 2, blind);
  CHECK(unseen.value < 0.02);

  MomentDefectOptions collapsed;
  DirectionList axis{VectorXd::Unit(d, 3)};
  const Subspace v3 = subspace_from_directions(d, axis);
  collapsed.working_frame = v3.basis;
  CHECK_THROWS_AS(moment_match_defect(ds, v3, 2, collapsed), ConfigError);
}

TEST_CASE("moment defect is worker-count invariant", "[diagnostics]") {
  const LabeledDataset ds = square_coordinate_dataset(50000, 4, 410);
  const Subspace v0 = Subspace::zero(4);
  MomentDefectOptions seq;
  MomentDefectOptions par;
  par.workers = 3;
  const MomentDefectResult a = moment_match_defect(ds, v0, 2, seq);
  const MomentDefectResult b = moment_match_defect(ds, v0, 2, par);
  CHECK(a.value == b.value);
  CHECK(a.raw_rms == b.raw_rms);
  CHECK(a.se == b.se);
}

TEST_CASE("filtered second moment finds the unrecovered neuron", "[diagnostics]") {
  const int d = 8;
  const MimInstance inst = make_relu_network(d, 1, {1}, 43);
  const LabeledDataset ds = sample_dataset(inst, NoiseModel::realizable(), 100000, 431);
  const double tau = 2.0 * inst.lipschitz;  // 2 sqrt(K) L with K = 1
  const Subspace v0 = Subspace::zero(d);
  const auto zero_fn = [](const VectorXd&) { return 0.0; };

  const FilteredSecondMoment fsm = filtered_second_moment(ds, v0, zero_fn, tau);
  CHECK(fsm.matrix == fsm.matrix.transpose());
  CHECK(fsm.active_fraction > 0.0);

  Eigen::SelfAdjointEigenSolver<MatrixXd> es(fsm.matrix);
  const VectorXd top = es.eigenvectors().col(d - 1);
  const double cosang = std::abs(top.dot(inst.hidden.basis.col(0)));
  CHECK(std::acos(std::min(1.0, cosang)) < 0.12);

  const auto [quad, quad_se] =
      filtered_quadratic_form(ds, v0, zero_fn, tau, inst.hidden.basis.col(0));
  CHECK(quad > 3.0 * quad_se);

  // with the hidden subspace recovered the residual filter never fires
  const auto truth_fn = [&](const VectorXd& x) { return inst.evaluate(x); };
  const FilteredSecondMoment closed = filtered_second_moment(ds, inst.hidden, truth_fn, tau);
  CHECK(closed.active_fraction == 0.0);
  CHECK(closed.matrix.norm() == 0.0);

  // the restriction to V is projected out
  DirectionList axis{VectorXd::Unit(d, 2)};
  const Subspace v2 = subspace_from_directions(d, axis);
  const FilteredSecondMoment part = filtered_second_moment(ds, v2, zero_fn, tau);
  CHECK((v2.basis.transpose() * part.matrix * v2.basis).norm() < 1e-12);
  CHECK((part.matrix * v2.basis).norm() < 1e-12);
}

TEST_CASE("filtered second moment is null on independent labels", "[diagnostics]") {
  const LabeledDataset ds = product_dataset(50000, 6, 411);
  const Subspace v0 = Subspace::zero(6);
  const FilteredSecondMoment fsm =
      filtered_second_moment(ds, v0, [](const VectorXd&) { return 0.0; }, 2.0);
  CHECK(fsm.active_fraction == Catch::Approx(0.0455).margin(0.01));
  CHECK(fsm.matrix.norm() <= 3.0 * fsm.null_frobenius_se);
}

TEST_CASE("diagnostics exports are csv shaped", "[diagnostics]") {
  const auto res = generative_exponent([](double t) { return t; }, 3, 5000, 412);
  const std::string csv = profile_to_csv(res.profile);
  CHECK(csv.rfind("degree,value,se\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  MatrixXd m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  const std::string mc = matrix_to_csv(m);
  CHECK(mc.rfind("c0,c1,c2\n", 0) == 0);
  CHECK(std::count(mc.begin(), mc.end(), '\n') == 3);
}
