#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include <json.hpp>

#include "mimlearn/common.hpp"
#include "mimlearn/hermite.hpp"
#include "mimlearn/subspace.hpp"

namespace mim {

// A target function f(x) = g(W^T x) with known hidden subspace W, normalized
// to E[f^2] = 1. The latent map g is either a feed-forward ReLU network with no
// biases (positively homogeneous), the norm of rectified projections (also
// homogeneous), or a sparse Hermite polynomial.
struct MimInstance {
  enum class Family { relu_network, positive_homogeneous, low_rank_polynomial };

  Family family = Family::relu_network;
  int d = 0;
  int k = 0;
  Subspace hidden;
  std::vector<MatrixXd> layers;  // latent-space weights; layers[0] has k columns
  HermiteExpansion link;         // low_rank_polynomial only
  double scale = 1.0;
  uint64_t seed = 0;

  // Recorded surrogates for the class parameters.
  double lipschitz = 0.0;
  double norm_bound = 1.0;
  double tail_bound = 0.0;

  double evaluate_latent(const VectorXd& z) const {
    switch (family) {
      case Family::relu_network: {
        VectorXd a = z;
        for (size_t j = 0; j < layers.size(); ++j) {
          a = layers[j] * a;
          if (j + 1 < layers.size()) a = a.cwiseMax(0.0);
        }
        return scale * a[0];
      }
      case Family::positive_homogeneous:
        return scale * (layers[0] * z).cwiseMax(0.0).norm();
      case Family::low_rank_polynomial:
        return scale * eval_expansion(link, z);
    }
    return 0.0;
  }

  double evaluate(const VectorXd& x) const {
    if (x.size() != d) throw ShapeError("MimInstance::evaluate: dimension mismatch");
    return evaluate_latent(hidden.basis.transpose() * x);
  }

  static const char* family_name(Family f) {
    switch (f) {
      case Family::relu_network: return "relu_network";
      case Family::positive_homogeneous: return "positive_homogeneous";
      case Family::low_rank_polynomial: return "low_rank_polynomial";
    }
    return "?";
  }
};

struct NoiseModel {
  enum class Kind { realizable, additive_independent, adversarial };

  Kind kind = Kind::realizable;
  double sigma = 0.0;
  double rho_adv = 0.0;

  static NoiseModel realizable() { return {}; }
  static NoiseModel additive(double sigma) {
    if (!(sigma >= 0.0)) throw ConfigError("noise: sigma must be nonnegative");
    return {Kind::additive_independent, sigma, 0.0};
  }
  static NoiseModel adversarial(double rho) {
    if (!(rho >= 0.0)) throw ConfigError("noise: adversarial budget must be nonnegative");
    return {Kind::adversarial, 0.0, rho};
  }

  const char* name() const {
    switch (kind) {
      case Kind::realizable: return "realizable";
      case Kind::additive_independent: return "additive_independent";
      case Kind::adversarial: return "adversarial";
    }
    return "?";
  }
};

struct LabeledDataset {
  MatrixXd xs;  // n x d
  VectorXd ys;
  uint64_t seed = 0;
  std::string provenance;  // JSON text: instance + noise descriptors

  Eigen::Index size() const { return ys.size(); }
  Eigen::Index dim() const { return xs.cols(); }
};

inline nlohmann::json matrix_to_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline MatrixXd matrix_from_json(const nlohmann::json& rows) {
  const Eigen::Index nr = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index nc = nr > 0 ? static_cast<Eigen::Index>(rows[0].size()) : 0;
  MatrixXd m(nr, nc);
  for (Eigen::Index i = 0; i < nr; ++i)
    for (Eigen::Index j = 0; j < nc; ++j) m(i, j) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)].get<double>();
  return m;
}

inline nlohmann::json instance_to_json(const MimInstance& inst) {
  nlohmann::json j;
  j["family"] = MimInstance::family_name(inst.family);
  j["d"] = inst.d;
  j["k"] = inst.k;
  j["seed"] = inst.seed;
  j["hidden_basis"] = matrix_to_json(inst.hidden.basis);
  nlohmann::json layers = nlohmann::json::array();
  for (const MatrixXd& w : inst.layers) layers.push_back(matrix_to_json(w));
  j["layers"] = std::move(layers);
  nlohmann::json link = nlohmann::json::array();
  for (const auto& [a, c] : inst.link.coeffs) link.push_back({a, c});
  j["link"] = std::move(link);
  j["link_dim"] = inst.link.dim;
  j["scale"] = inst.scale;
  j["lipschitz"] = inst.lipschitz;
  j["norm_bound"] = inst.norm_bound;
  j["tail_bound"] = inst.tail_bound;
  return j;
}

inline MimInstance instance_from_json(const nlohmann::json& j) {
  MimInstance inst;
  const std::string fam = j.at("family").get<std::string>();
  if (fam == "relu_network")
    inst.family = MimInstance::Family::relu_network;
  else if (fam == "positive_homogeneous")
    inst.family = MimInstance::Family::positive_homogeneous;
  else if (fam == "low_rank_polynomial")
    inst.family = MimInstance::Family::low_rank_polynomial;
  else
    throw IoError("unknown instance family: " + fam);
  inst.d = j.at("d").get<int>();
  inst.k = j.at("k").get<int>();
  inst.seed = j.at("seed").get<uint64_t>();
  inst.hidden = Subspace{matrix_from_json(j.at("hidden_basis"))};
  for (const auto& w : j.at("layers")) inst.layers.push_back(matrix_from_json(w));
  inst.link = HermiteExpansion(j.at("link_dim").get<int>());
  for (const auto& entry : j.at("link"))
    inst.link.set(entry[0].get<MultiIndex>(), entry[1].get<double>());
  inst.scale = j.at("scale").get<double>();
  inst.lipschitz = j.at("lipschitz").get<double>();
  inst.norm_bound = j.at("norm_bound").get<double>();
  inst.tail_bound = j.at("tail_bound").get<double>();
  return inst;
}

inline nlohmann::json noise_to_json(const NoiseModel& noise) {
  nlohmann::json j;
  j["kind"] = noise.name();
  j["sigma"] = noise.sigma;
  j["rho_adv"] = noise.rho_adv;
  return j;
}

inline NoiseModel noise_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  NoiseModel n;
  if (kind == "realizable")
    n = NoiseModel::realizable();
  else if (kind == "additive_independent")
    n = NoiseModel::additive(j.at("sigma").get<double>());
  else if (kind == "adversarial")
    n = NoiseModel::adversarial(j.at("rho_adv").get<double>());
  else
    throw IoError("unknown noise kind: " + kind);
  return n;
}

namespace detail {

inline Subspace random_subspace_frame(Rng& rng, int d, int k) {
  for (int attempt = 0; attempt < 32; ++attempt) {
    DirectionList vs;
    for (int i = 0; i < k; ++i) vs.push_back(rng.gauss_vector(d));
    DirectionList on = orthonormalize(vs, 1e-8);
    if (static_cast<int>(on.size()) == k) return subspace_from_directions(d, on);
  }
  throw ResourceError("random subspace frame: repeated rank deficiency");
}

inline MatrixXd row_normalized_gaussian(Rng& rng, int rows, int cols) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    VectorXd row = rng.gauss_vector(cols);
    m.row(i) = row.transpose() / std::max(row.norm(), 1e-300);
  }
  return m;
}

inline double spectral_norm(const MatrixXd& m) {
  Eigen::JacobiSVD<MatrixXd> svd(m);
  return svd.singularValues().size() > 0 ? svd.singularValues()[0] : 0.0;
}

// Monte-Carlo normalization over the latent Gaussian; returns sqrt(E[f^2])
// before scaling. Degenerate (vanishing) outputs return 0.
inline double latent_rms(const MimInstance& inst, Rng& rng, int n = 1000000) {
  double acc = 0.0;
  VectorXd z(inst.k);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < inst.k; ++j) z[j] = rng.gauss();
    const double f = inst.evaluate_latent(z);
    acc += f * f;
  }
  return std::sqrt(acc / n);
}

}  // namespace detail

// Random homogeneous ReLU network with first-layer rank exactly K. layer_widths
// are the hidden widths; the output layer is a single row. The first layer is
// drawn inside the W frame and row-normalized; deeper layers get 1/sqrt(fan-in)
// Gaussian entries. Rescaled so E[f^2] = 1 by a latent Monte Carlo pass.
inline MimInstance make_relu_network(int d, int k, const std::vector<int>& layer_widths,
                                     uint64_t seed) {
  if (k < 1 || k > d) throw ConfigError("make_relu_network: need 1 <= K <= d");
  if (layer_widths.empty()) throw ConfigError("make_relu_network: need at least one hidden width");
  for (int w : layer_widths)
    if (w < 1) throw ConfigError("make_relu_network: widths must be positive");

  Rng frame_rng = Rng(seed).child(11);
  MimInstance inst;
  inst.family = MimInstance::Family::relu_network;
  inst.d = d;
  inst.k = k;
  inst.seed = seed;
  inst.hidden = detail::random_subspace_frame(frame_rng, d, k);

  const int retry_cap = 24;
  for (int attempt = 0; attempt < retry_cap; ++attempt) {
    Rng rng = Rng(seed).child(13 + static_cast<uint64_t>(attempt));
    inst.layers.clear();
    inst.layers.push_back(detail::row_normalized_gaussian(rng, layer_widths[0], k));
    for (size_t j = 1; j < layer_widths.size(); ++j) {
      MatrixXd w(layer_widths[j], layer_widths[j - 1]);
      for (int r = 0; r < w.rows(); ++r)
        w.row(r) = rng.gauss_vector(w.cols()).transpose() / std::sqrt(double(w.cols()));
      inst.layers.push_back(w);
    }
    MatrixXd out(1, layer_widths.back());
    out.row(0) = rng.gauss_vector(layer_widths.back()).transpose() /
                 std::sqrt(double(layer_widths.back()));
    inst.layers.push_back(out);
    inst.scale = 1.0;

    // First layer must actually span K directions.
    Eigen::JacobiSVD<MatrixXd> svd(inst.layers[0]);
    if (svd.singularValues().size() < k || svd.singularValues()[k - 1] < 1e-6) continue;

    Rng mc = Rng(seed).child(17);
    const double rms = detail::latent_rms(inst, mc);
    if (rms < 1e-6) continue;  // output degenerate, resample weights
    inst.scale = 1.0 / rms;

    double lip = inst.scale;
    for (const MatrixXd& w : inst.layers) lip *= detail::spectral_norm(w);
    inst.lipschitz = lip;
    inst.norm_bound = 1.0;
    inst.tail_bound = 10.0 * std::sqrt(double(k)) * lip;
    return inst;
  }
  throw ResourceError("make_relu_network: degenerate network after " +
                      std::to_string(retry_cap) + " attempts");
}

// Norm of rectified projections: f(x) = || max(A W^T x, 0) ||_2. Positively
// homogeneous and Lipschitz but not a ReLU network.
inline MimInstance make_positive_homogeneous(int d, int k, int width, uint64_t seed) {
  if (k < 1 || k > d) throw ConfigError("make_positive_homogeneous: need 1 <= K <= d");
  if (width < 1) throw ConfigError("make_positive_homogeneous: width must be positive");

  Rng frame_rng = Rng(seed).child(11);
  MimInstance inst;
  inst.family = MimInstance::Family::positive_homogeneous;
  inst.d = d;
  inst.k = k;
  inst.seed = seed;
  inst.hidden = detail::random_subspace_frame(frame_rng, d, k);

  const int retry_cap = 24;
  for (int attempt = 0; attempt < retry_cap; ++attempt) {
    Rng rng = Rng(seed).child(29 + static_cast<uint64_t>(attempt));
    inst.layers.assign(1, detail::row_normalized_gaussian(rng, width, k));
    inst.scale = 1.0;

    Eigen::JacobiSVD<MatrixXd> svd(inst.layers[0]);
    if (svd.singularValues().size() < std::min(width, k) ||
        svd.singularValues()[std::min(width, k) - 1] < 1e-6)
      continue;

    Rng mc = Rng(seed).child(17);
    const double rms = detail::latent_rms(inst, mc);
    if (rms < 1e-6) continue;
    inst.scale = 1.0 / rms;
    inst.lipschitz = inst.scale * detail::spectral_norm(inst.layers[0]);
    inst.norm_bound = 1.0;
    inst.tail_bound = 10.0 * std::sqrt(double(k)) * inst.lipschitz;
    return inst;
  }
  throw ResourceError("make_positive_homogeneous: degenerate map after " +
                      std::to_string(retry_cap) + " attempts");
}

// Random zero-mean unit-variance degree-m polynomial in K latent variables,
// resampled until the gradient second-moment matrix is well conditioned:
// lambda_min / lambda_max >= alpha_target.
inline MimInstance make_low_rank_polynomial(int d, int k, int m, double alpha_target,
                                            uint64_t seed) {
  if (k < 1 || k > d) throw ConfigError("make_low_rank_polynomial: need 1 <= K <= d");
  if (m < 1) throw ConfigError("make_low_rank_polynomial: need m >= 1");
  if (!(alpha_target >= 0.0 && alpha_target <= 1.0))
    throw ConfigError("make_low_rank_polynomial: alpha_target must lie in [0, 1]");

  Rng frame_rng = Rng(seed).child(11);
  MimInstance inst;
  inst.family = MimInstance::Family::low_rank_polynomial;
  inst.d = d;
  inst.k = k;
  inst.seed = seed;
  inst.hidden = detail::random_subspace_frame(frame_rng, d, k);

  const auto indices = enumerate_multi_indices(k, m);
  const int retry_cap = 200;
  double best_alpha = -1.0;
  for (int attempt = 0; attempt < retry_cap; ++attempt) {
    Rng rng = Rng(seed).child(37 + static_cast<uint64_t>(attempt));
    HermiteExpansion q(k);
    for (const MultiIndex& a : indices) {
      if (total_degree(a) == 0) continue;  // zero mean
      q.set(a, rng.gauss());
    }
    const double norm = std::sqrt(q.squared_norm());
    if (norm < 1e-12) continue;
    for (auto& [a, c] : q.coeffs) c /= norm;

    const MatrixXd grad_moment = influence_matrix(q);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(grad_moment);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    const double alpha = hi > 0.0 ? lo / hi : 0.0;
    best_alpha = std::max(best_alpha, alpha);
    if (alpha < alpha_target) continue;

    inst.link = std::move(q);
    inst.scale = 1.0;
    inst.norm_bound = 1.0;
    // Empirical slope surrogate with headroom; polynomials have no global bound.
    Rng pair_rng = Rng(seed).child(41);
    double max_slope = 0.0;
    VectorXd za(k), zb(k);
    for (int t = 0; t < 10000; ++t) {
      for (int j = 0; j < k; ++j) {
        za[j] = pair_rng.gauss();
        zb[j] = pair_rng.gauss();
      }
      const double num = std::abs(inst.evaluate_latent(za) - inst.evaluate_latent(zb));
      const double den = (za - zb).norm();
      if (den > 1e-9) max_slope = std::max(max_slope, num / den);
    }
    inst.lipschitz = 1.25 * max_slope;
    inst.tail_bound = 10.0 * std::sqrt(double(k)) * inst.lipschitz;
    return inst;
  }
  throw ResourceError("make_low_rank_polynomial: non-degeneracy target " +
                      std::to_string(alpha_target) + " not reached in " +
                      std::to_string(retry_cap) + " attempts (best " +
                      std::to_string(best_alpha) + ")");
}

// N i.i.d. standard Gaussian samples labeled by the instance and transformed
// by the noise model. The x draw and the noise draw use separate substreams,
// so datasets with the same seed share their design matrix across noise kinds.
inline LabeledDataset sample_dataset(const MimInstance& inst, const NoiseModel& noise,
                                     Eigen::Index n, uint64_t seed) {
  if (n < 1) throw ConfigError("sample_dataset: need at least one sample");

  LabeledDataset ds;
  ds.seed = seed;
  nlohmann::json prov;
  prov["instance"] = instance_to_json(inst);
  prov["noise"] = noise_to_json(noise);
  prov["n"] = n;
  prov["seed"] = seed;
  ds.provenance = prov.dump();
  ds.xs.resize(n, inst.d);
  ds.ys.resize(n);

  Rng xrng = Rng(seed).child(101);
  VectorXd x(inst.d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < inst.d; ++j) x[j] = xrng.gauss();
    ds.xs.row(i) = x.transpose();
    ds.ys[i] = inst.evaluate(x);
  }

  switch (noise.kind) {
    case NoiseModel::Kind::realizable:
      break;
    case NoiseModel::Kind::additive_independent: {
      Rng nrng = Rng(seed).child(103);
      for (Eigen::Index i = 0; i < n; ++i) ds.ys[i] += noise.sigma * nrng.gauss();
      break;
    }
    case NoiseModel::Kind::adversarial: {
      // Sign-flip the largest-|f| labels while the empirical squared
      // corruption stays within the budget: sum of 4 f_i^2 / N <= rho.
      std::vector<Eigen::Index> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        const double fa = std::abs(ds.ys[a]), fb = std::abs(ds.ys[b]);
        if (fa != fb) return fa > fb;
        return a < b;
      });
      double used = 0.0;
      const double budget = noise.rho_adv * static_cast<double>(n);
      for (Eigen::Index idx : order) {
        const double cost = 4.0 * ds.ys[idx] * ds.ys[idx];
        if (used + cost > budget) break;
        used += cost;
        ds.ys[idx] = -ds.ys[idx];
      }
      break;
    }
  }
  return ds;
}

}  // namespace mim
