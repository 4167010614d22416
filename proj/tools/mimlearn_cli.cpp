#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mimlearn/diagnostics.hpp"
#include "mimlearn/io.hpp"
#include "mimlearn/learner.hpp"
#include "mimlearn/subspace.hpp"
#include "mimlearn/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double x) {
  if (std::isnan(x)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string resolve_out_dir(std::string out) {
  if (out.empty()) {
    const char* env = std::getenv("MIMLEARN_OUT_DIR");
    out = env && *env ? env : ".";
  }
  fs::create_directories(out);
  return out;
}

json load_cli_config(const std::string& path) {
  return path.empty() ? json::object() : mim::read_json_file(path);
}

template <typename T>
void cfg_fill(const CLI::App& cmd, const json& cfg, const std::string& name, T& var) {
  if (!cfg.contains(name)) return;
  if (cmd.count("--" + name) > 0) return;
  var = cfg.at(name).get<T>();
}

// Learner flags shared by learn and selftest; `workers` lives outside the
// recorded config so records stay byte-identical across worker counts.
struct LearnerOpts {
  int m = 2;
  double eps1 = 0.25, eps2 = 0.1, bound = 0.0, offset = 0.0;
  double lambda_floor = 0.0, lambda_rel = 0.1;
  int T = 0;
  double eta = 0.1;
  long long n_min_cell = 30;
  std::string mode = "agnostic";
  int mom_blocks = 9;
  uint64_t seed = 0;
  int k_target = 0, max_dim = 0;
  long long batch_size = 0;
  double fit_fraction = 0.5, fit_width = 0.0, find_width = 0.0, fit_halfwidth = 0.0;
  int sketch_r = 0;

  void add(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "agnostic, mim_distribution, or fast_m2")
        ->check(CLI::IsMember({"agnostic", "mim_distribution", "fast_m2"}));
    cmd->add_option("--m", m, "regression degree");
    cmd->add_option("--eps1", eps1, "cube side length");
    cmd->add_option("--eps2", eps2, "label interval width");
    cmd->add_option("--bound", bound, "label interval range (0: 1/eps2^2)");
    cmd->add_option("--offset", offset, "grid offset in [0, eps1/2)");
    cmd->add_option("--lambda-floor", lambda_floor, "absolute eigenvalue floor (0: auto)");
    cmd->add_option("--lambda-rel", lambda_rel, "eigenvalue threshold relative to the top");
    cmd->add_option("--T", T, "iteration budget (0: auto)");
    cmd->add_option("--eta", eta, "nominal regression slack (recorded only)");
    cmd->add_option("--n-min-cell", n_min_cell, "minimum samples per cube cell");
    cmd->add_option("--mom-blocks", mom_blocks, "median-of-means block count");
    cmd->add_option("--seed", seed, "learner seed stamp");
    cmd->add_option("--k-target", k_target, "hidden dimension when known");
    cmd->add_option("--max-dim", max_dim, "subspace dimension cap (0: auto)");
    cmd->add_option("--batch-size", batch_size, "per-iteration sample batch (0: split)");
    cmd->add_option("--fit-fraction", fit_fraction, "held-out fraction for fitting");
    cmd->add_option("--fit-width", fit_width, "fit partition width (0: eps1)");
    cmd->add_option("--find-width", find_width, "direction partition width (0: eps1)");
    cmd->add_option("--fit-halfwidth", fit_halfwidth, "fit grid halfwidth (0: auto)");
    cmd->add_option("--sketch-r", sketch_r, "regression working-dimension sketch (0: off)");
  }

  void fill(const CLI::App& cmd, const json& cfg) {
    cfg_fill(cmd, cfg, "mode", mode);
    cfg_fill(cmd, cfg, "m", m);
    cfg_fill(cmd, cfg, "eps1", eps1);
    cfg_fill(cmd, cfg, "eps2", eps2);
    cfg_fill(cmd, cfg, "bound", bound);
    cfg_fill(cmd, cfg, "offset", offset);
    cfg_fill(cmd, cfg, "lambda-floor", lambda_floor);
    cfg_fill(cmd, cfg, "lambda-rel", lambda_rel);
    cfg_fill(cmd, cfg, "T", T);
    cfg_fill(cmd, cfg, "eta", eta);
    cfg_fill(cmd, cfg, "n-min-cell", n_min_cell);
    cfg_fill(cmd, cfg, "mom-blocks", mom_blocks);
    cfg_fill(cmd, cfg, "seed", seed);
    cfg_fill(cmd, cfg, "k-target", k_target);
    cfg_fill(cmd, cfg, "max-dim", max_dim);
    cfg_fill(cmd, cfg, "batch-size", batch_size);
    cfg_fill(cmd, cfg, "fit-fraction", fit_fraction);
    cfg_fill(cmd, cfg, "fit-width", fit_width);
    cfg_fill(cmd, cfg, "find-width", find_width);
    cfg_fill(cmd, cfg, "fit-halfwidth", fit_halfwidth);
    cfg_fill(cmd, cfg, "sketch-r", sketch_r);
  }

  mim::LearnerConfig resolve(int workers, bool trace_hypotheses) const {
    mim::LearnerConfig c;
    c.m = m;
    c.eps1 = eps1;
    c.eps2 = eps2;
    c.bound = bound;
    c.offset = offset;
    c.lambda_floor = lambda_floor;
    c.lambda_rel = lambda_rel;
    c.T = T;
    c.eta = eta;
    c.n_min_cell = n_min_cell;
    if (mode == "agnostic") c.mode = mim::LearnerConfig::Mode::agnostic;
    else if (mode == "mim_distribution") c.mode = mim::LearnerConfig::Mode::mim_distribution;
    else if (mode == "fast_m2") c.mode = mim::LearnerConfig::Mode::fast_m2;
    else throw mim::ConfigError("unknown mode: " + mode);
    c.mom_blocks = mom_blocks;
    c.seed = seed;
    c.k_target = k_target;
    c.max_subspace_dim = max_dim;
    c.batch_size = batch_size;
    c.fit_fraction = fit_fraction;
    c.fit_width = fit_width;
    c.find_width = find_width;
    c.fit_halfwidth = fit_halfwidth;
    c.sketch_r = sketch_r;
    c.workers = workers;
    c.trace_hypotheses = trace_hypotheses;
    c.validate();
    return c;
  }

  json to_json(int d) const {
    const mim::LearnerConfig c = resolve(1, false);
    json j;
    j["mode"] = mode;
    j["m"] = m;
    j["eps1"] = eps1;
    j["eps2"] = eps2;
    j["bound"] = bound;
    j["offset"] = offset;
    j["lambda-floor"] = lambda_floor;
    j["lambda-rel"] = lambda_rel;
    j["T"] = T;
    j["eta"] = eta;
    j["n-min-cell"] = n_min_cell;
    j["mom-blocks"] = mom_blocks;
    j["seed"] = seed;
    j["k-target"] = k_target;
    j["max-dim"] = max_dim;
    j["batch-size"] = batch_size;
    j["fit-fraction"] = fit_fraction;
    j["fit-width"] = fit_width;
    j["find-width"] = find_width;
    j["fit-halfwidth"] = fit_halfwidth;
    j["sketch-r"] = sketch_r;
    j["resolved"] = {{"bound", c.bound_or_default()},
                     {"lambda-floor", c.lambda_floor_or_default()},
                     {"T", c.iterations_or_default()},
                     {"max-dim", c.dim_cap_or_default(d)},
                     {"fit-width", c.fit_width_or_default()},
                     {"find-width", c.find_width_or_default()},
                     {"fit-halfwidth", c.fit_halfwidth_or_default(d)}};
    return j;
  }
};

std::optional<mim::MimInstance> instance_from_manifest(const std::string& path) {
  if (path.empty()) return std::nullopt;
  const json manifest = mim::read_json_file(path);
  if (!manifest.contains("instance")) return std::nullopt;
  return mim::instance_from_json(manifest.at("instance"));
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string family = "relu";
  int d = 20, k = 2;
  std::vector<int> widths;
  int poly_m = 3;
  double poly_alpha = 0.25;
  std::string noise = "realizable";
  double sigma = 0.1, rho = 0.05;
  long long n_train = 200000, n_eval = 100000;
  uint64_t instance_seed = 1, data_seed = 1;
  std::string out, tag = "experiment", config_path;
};

void run_generate(const CLI::App& cmd, GenerateArgs a) {
  const json cfg = load_cli_config(a.config_path);
  cfg_fill(cmd, cfg, "family", a.family);
  cfg_fill(cmd, cfg, "d", a.d);
  cfg_fill(cmd, cfg, "k", a.k);
  cfg_fill(cmd, cfg, "widths", a.widths);
  cfg_fill(cmd, cfg, "poly-m", a.poly_m);
  cfg_fill(cmd, cfg, "poly-alpha", a.poly_alpha);
  cfg_fill(cmd, cfg, "noise", a.noise);
  cfg_fill(cmd, cfg, "sigma", a.sigma);
  cfg_fill(cmd, cfg, "rho", a.rho);
  cfg_fill(cmd, cfg, "n-train", a.n_train);
  cfg_fill(cmd, cfg, "n-eval", a.n_eval);
  cfg_fill(cmd, cfg, "instance-seed", a.instance_seed);
  cfg_fill(cmd, cfg, "data-seed", a.data_seed);
  cfg_fill(cmd, cfg, "out", a.out);
  cfg_fill(cmd, cfg, "tag", a.tag);

  if (a.n_train < 1 || a.n_eval < 1)
    throw mim::ConfigError("generate: n-train and n-eval must be positive");

  json spec;
  spec["command"] = "generate";
  spec["family"] = a.family;
  spec["d"] = a.d;
  spec["k"] = a.k;
  spec["widths"] = a.widths;
  spec["poly-m"] = a.poly_m;
  spec["poly-alpha"] = a.poly_alpha;
  spec["noise"] = a.noise;
  spec["sigma"] = a.sigma;
  spec["rho"] = a.rho;
  spec["n-train"] = a.n_train;
  spec["n-eval"] = a.n_eval;
  spec["instance-seed"] = a.instance_seed;
  spec["data-seed"] = a.data_seed;
  const std::string hash = mim::spec_hash(spec);

  mim::MimInstance inst;
  if (a.family == "relu") {
    std::vector<int> widths = a.widths.empty() ? std::vector<int>{a.k} : a.widths;
    inst = mim::make_relu_network(a.d, a.k, widths, a.instance_seed);
  } else if (a.family == "homog") {
    const int width = a.widths.empty() ? a.k : a.widths.front();
    inst = mim::make_positive_homogeneous(a.d, a.k, width, a.instance_seed);
  } else if (a.family == "poly") {
    inst = mim::make_low_rank_polynomial(a.d, a.k, a.poly_m, a.poly_alpha, a.instance_seed);
  } else {
    throw mim::ConfigError("generate: unknown family: " + a.family);
  }

  mim::NoiseModel noise;
  if (a.noise == "realizable") noise = mim::NoiseModel::realizable();
  else if (a.noise == "additive") noise = mim::NoiseModel::additive(a.sigma);
  else if (a.noise == "adversarial") noise = mim::NoiseModel::adversarial(a.rho);
  else throw mim::ConfigError("generate: unknown noise kind: " + a.noise);

  const std::string out = resolve_out_dir(a.out);
  const std::string train_path = (fs::path(out) / (a.tag + "_train.mlds")).string();
  const std::string eval_path = (fs::path(out) / (a.tag + "_eval.mlds")).string();
  const std::string manifest_path = (fs::path(out) / (a.tag + "_manifest.json")).string();

  const mim::LabeledDataset train = mim::sample_dataset(inst, noise, a.n_train, a.data_seed);
  const mim::LabeledDataset eval = mim::sample_dataset(inst, noise, a.n_eval, a.data_seed + 1);
  mim::save_dataset(train, train_path, hash);
  mim::save_dataset(eval, eval_path, hash);

  double mean_sq_clean = 0.0, noise_mse = 0.0;
  for (Eigen::Index i = 0; i < train.size(); ++i) {
    const double f = inst.evaluate(train.xs.row(i).transpose());
    mean_sq_clean += f * f;
    noise_mse += (train.ys[i] - f) * (train.ys[i] - f);
  }
  mean_sq_clean /= static_cast<double>(train.size());
  noise_mse /= static_cast<double>(train.size());

  json manifest;
  manifest["format_version"] = mim::kFormatVersion;
  manifest["spec"] = spec;
  manifest["spec_hash"] = hash;
  manifest["instance"] = mim::instance_to_json(inst);
  manifest["noise"] = mim::noise_to_json(noise);
  manifest["files"] = {{"train", train_path}, {"eval", eval_path}};
  manifest["measured"] = {{"mean_sq_clean", mean_sq_clean}, {"noise_mse", noise_mse}};
  mim::write_json_file(manifest_path, manifest);

  std::cout << "spec_hash " << hash << "\n"
            << "train " << train_path << "\n"
            << "eval " << eval_path << "\n"
            << "manifest " << manifest_path << "\n";
}

// ------------------------------------------------------------------- learn

struct LearnArgs {
  std::vector<std::string> trains, evals, manifests;
  std::string out, tag = "run", config_path;
  int workers = 1;
  bool trace_hypotheses = true;
  LearnerOpts opts;
};

json iteration_to_json(const mim::IterationEntry& e) {
  json j;
  j["t"] = e.t;
  j["dim_v"] = e.dim_v;
  j["n_directions"] = e.n_directions;
  j["eigenvalues"] = e.eigenvalues;
  j["lambda_max"] = e.lambda_max;
  j["lambda_used"] = e.lambda_used;
  j["aggregate_frobenius"] = e.aggregate_frobenius;
  j["cells_used"] = e.cells_used;
  j["cells_skipped"] = e.cells_skipped;
  j["err_fit"] = e.err_fit;  // NaN serializes as null
  j["phi"] = e.phi;
  j["betas"] = e.betas;
  return j;
}

void run_learn(const CLI::App& cmd, LearnArgs a) {
  const json cfg = load_cli_config(a.config_path);
  cfg_fill(cmd, cfg, "train", a.trains);
  cfg_fill(cmd, cfg, "eval", a.evals);
  cfg_fill(cmd, cfg, "manifest", a.manifests);
  cfg_fill(cmd, cfg, "out", a.out);
  cfg_fill(cmd, cfg, "tag", a.tag);
  cfg_fill(cmd, cfg, "workers", a.workers);
  cfg_fill(cmd, cfg, "trace-hypotheses", a.trace_hypotheses);
  a.opts.fill(cmd, cfg);

  if (a.trains.empty()) throw mim::ConfigError("learn: at least one --train file is required");
  const size_t reps = a.trains.size();
  if (!a.evals.empty() && a.evals.size() != 1 && a.evals.size() != reps)
    throw mim::ConfigError("learn: --eval count must be 0, 1, or match --train count");
  if (!a.manifests.empty() && a.manifests.size() != 1 && a.manifests.size() != reps)
    throw mim::ConfigError("learn: --manifest count must be 0, 1, or match --train count");
  if (a.workers < 1) throw mim::ConfigError("learn: workers must be positive");

  const std::string out = resolve_out_dir(a.out);

  // repetition r reads train file r; the worker pool runs repetitions when
  // there are several, cell-level work otherwise
  const int inner_workers = reps > 1 ? 1 : a.workers;
  const int pool_workers = reps > 1 ? a.workers : 1;

  std::vector<std::string> data_hashes(reps);
  std::vector<std::string> provenances(reps);
  for (size_t r = 0; r < reps; ++r) {
    const json header = mim::read_container_header(a.trains[r]);
    data_hashes[r] = header.value("spec_hash", std::string{});
    provenances[r] = header.contains("provenance") ? header.at("provenance").dump() : "";
  }

  std::vector<std::optional<mim::MimInstance>> instances(reps);
  for (size_t r = 0; r < reps; ++r) {
    const std::string path = a.manifests.empty()
                                 ? ""
                                 : (a.manifests.size() == 1 ? a.manifests[0] : a.manifests[r]);
    instances[r] = instance_from_manifest(path);
  }

  struct RepOutcome {
    mim::LearnResult result;
    mim::EvaluationReport report;
    std::string mse_dataset;
    Eigen::Index train_n = 0;
    int train_d = 0;
    double wall_ms = 0.0;
    std::vector<double> iteration_ms;
  };
  std::vector<RepOutcome> outcomes(reps);

  const auto t_start = std::chrono::steady_clock::now();
  mim::detail::parallel_for(pool_workers, reps, [&](size_t r) {
    const auto t0 = std::chrono::steady_clock::now();
    const mim::LabeledDataset train = mim::load_dataset(a.trains[r]);
    const mim::LearnerConfig config = a.opts.resolve(inner_workers, a.trace_hypotheses);
    const mim::MimInstance* gt = instances[r] ? &*instances[r] : nullptr;
    auto& slot = outcomes[r];
    slot.train_n = train.size();
    slot.train_d = static_cast<int>(train.dim());
    slot.result = mim::learn(train, config, gt);
    for (const auto& e : slot.result.trace.entries) slot.iteration_ms.push_back(e.wall_ms);
    if (!a.evals.empty()) {
      const std::string eval_path = a.evals.size() == 1 ? a.evals[0] : a.evals[r];
      const mim::LabeledDataset eval = mim::load_dataset(eval_path);
      if (eval.dim() != train.dim())
        throw mim::ConfigError("learn: eval dimension " + std::to_string(eval.dim()) +
                               " does not match train dimension " + std::to_string(train.dim()));
      slot.report = mim::evaluate(slot.result.hypothesis, eval, gt);
      slot.mse_dataset = "eval";
    } else {
      slot.report = mim::evaluate(slot.result.hypothesis, train, gt);
      slot.mse_dataset = "train";
    }
    slot.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  });
  const double total_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
          .count();

  json spec;
  spec["command"] = "learn";
  spec["config"] = a.opts.to_json(outcomes[0].train_d);
  spec["train_provenance"] = provenances;
  const std::string hash = mim::spec_hash(spec);

  json record;
  record["command"] = "learn";
  record["format_version"] = mim::kFormatVersion;
  record["spec_hash"] = hash;
  record["data_hashes"] = data_hashes;
  record["config"] = spec["config"];
  record["environment"] = {{"version", mim::kVersion}, {"seed", a.opts.seed}};
  record["train_files"] = a.trains;
  record["eval_files"] = a.evals;

  double mse_min = 0.0, mse_max = 0.0, mse_sum = 0.0;
  json rep_array = json::array();
  for (size_t r = 0; r < reps; ++r) {
    const auto& slot = outcomes[r];
    const std::string model_path =
        (fs::path(out) /
         (reps == 1 ? a.tag + "_model.mlhy" : a.tag + "_rep" + std::to_string(r) + "_model.mlhy"))
            .string();
    mim::save_hypothesis(slot.result.hypothesis, model_path, hash, data_hashes[r]);

    json rep;
    rep["rep"] = r;
    rep["train"] = a.trains[r];
    rep["model"] = model_path;
    json metrics;
    metrics["mse"] = slot.report.mse;
    metrics["coverage"] = slot.report.coverage_fraction;
    metrics["mse_dataset"] = slot.mse_dataset;
    metrics["n_train"] = slot.train_n;
    metrics["subspace_dim"] = slot.result.v.dim();
    metrics["stop_reason"] = slot.result.stop_reason;
    if (slot.report.mse_vs_clean) metrics["mse_vs_clean"] = *slot.report.mse_vs_clean;
    if (instances[r]) {
      const mim::VectorXd angles = mim::recovery_angles(slot.result.v, instances[r]->hidden);
      metrics["largest_principal_angle_deg"] = angles.maxCoeff() * 180.0 / M_PI;
      metrics["phi"] = mim::potential(instances[r]->hidden, slot.result.v);
    }
    rep["metrics"] = metrics;
    json iters = json::array();
    for (const auto& e : slot.result.trace.entries) iters.push_back(iteration_to_json(e));
    rep["iterations"] = iters;
    rep_array.push_back(rep);

    mse_sum += slot.report.mse;
    mse_min = r == 0 ? slot.report.mse : std::min(mse_min, slot.report.mse);
    mse_max = r == 0 ? slot.report.mse : std::max(mse_max, slot.report.mse);
  }
  record["repetitions"] = rep_array;
  record["aggregate"] = {{"mse_mean", mse_sum / static_cast<double>(reps)},
                         {"mse_min", mse_min},
                         {"mse_max", mse_max}};

  const std::string record_path = (fs::path(out) / (a.tag + "_record.json")).string();
  mim::write_json_file(record_path, record);

  std::ostringstream trace_csv;
  trace_csv << "rep,t,dim_v,n_directions,lambda_max,lambda_used,aggregate_frobenius,"
               "cells_used,cells_skipped,err_fit,phi\n";
  for (size_t r = 0; r < reps; ++r)
    for (const auto& e : outcomes[r].result.trace.entries)
      trace_csv << r << ',' << e.t << ',' << e.dim_v << ',' << e.n_directions << ','
                << fmt(e.lambda_max) << ',' << fmt(e.lambda_used) << ','
                << fmt(e.aggregate_frobenius) << ',' << e.cells_used << ',' << e.cells_skipped
                << ',' << fmt(e.err_fit) << ',' << fmt(e.phi) << '\n';
  const std::string trace_path = (fs::path(out) / (a.tag + "_trace.csv")).string();
  {
    std::ofstream os(trace_path, std::ios::trunc);
    if (!os) throw mim::IoError(trace_path + ": cannot open for writing");
    os << trace_csv.str();
  }

  json timing;
  timing["total_ms"] = total_ms;
  timing["workers"] = a.workers;
  json rep_timing = json::array();
  for (size_t r = 0; r < reps; ++r)
    rep_timing.push_back(
        {{"rep", r}, {"ms", outcomes[r].wall_ms}, {"iteration_ms", outcomes[r].iteration_ms}});
  timing["repetitions"] = rep_timing;
  mim::write_json_file((fs::path(out) / (a.tag + "_record.timing.json")).string(), timing);

  std::cout << "spec_hash " << hash << "\n"
            << "record " << record_path << "\n"
            << "trace " << trace_path << "\n"
            << "mse_mean " << fmt(mse_sum / static_cast<double>(reps)) << "\n";
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string model, data, manifest, out, tag = "eval", config_path;
  bool force = false;
};

void run_eval(const CLI::App& cmd, EvalArgs a) {
  const json cfg = load_cli_config(a.config_path);
  cfg_fill(cmd, cfg, "model", a.model);
  cfg_fill(cmd, cfg, "data", a.data);
  cfg_fill(cmd, cfg, "manifest", a.manifest);
  cfg_fill(cmd, cfg, "out", a.out);
  cfg_fill(cmd, cfg, "tag", a.tag);
  cfg_fill(cmd, cfg, "force", a.force);

  const json model_header = mim::read_container_header(a.model);
  const json data_header = mim::read_container_header(a.data);
  const auto model_d = model_header.value("d", Eigen::Index{0});
  const auto data_d = data_header.value("d", Eigen::Index{0});
  if (model_d != data_d)
    throw mim::ConfigError("eval: model dimension " + std::to_string(model_d) +
                           " does not match data dimension " + std::to_string(data_d));

  const std::string model_hash =
      model_header.value("data_hash", model_header.value("spec_hash", std::string{}));
  const std::string data_hash = data_header.value("spec_hash", std::string{});
  if (!model_hash.empty() && !data_hash.empty() && model_hash != data_hash && !a.force)
    throw mim::ConfigError("eval: spec hash mismatch (model data " + model_hash + ", dataset " +
                           data_hash + "); pass --force to evaluate anyway");

  const mim::PiecewiseConstantHypothesis h = mim::load_hypothesis(a.model);
  const mim::LabeledDataset data = mim::load_dataset(a.data);
  const auto instance = instance_from_manifest(a.manifest);
  const mim::EvaluationReport rep =
      mim::evaluate(h, data, instance ? &*instance : nullptr);

  std::ostringstream csv;
  csv << "metric,value\n";
  csv << "mse," << fmt(rep.mse) << '\n';
  csv << "coverage," << fmt(rep.coverage_fraction) << '\n';
  csv << "n," << data.size() << '\n';
  if (rep.mse_vs_clean) csv << "mse_vs_clean," << fmt(*rep.mse_vs_clean) << '\n';
  if (instance) {
    const mim::VectorXd angles = mim::recovery_angles(h.v, instance->hidden);
    csv << "largest_principal_angle_deg," << fmt(angles.maxCoeff() * 180.0 / M_PI) << '\n';
    csv << "phi," << fmt(mim::potential(instance->hidden, h.v)) << '\n';
  }

  const std::string out = resolve_out_dir(a.out);
  const std::string csv_path = (fs::path(out) / (a.tag + "_metrics.csv")).string();
  {
    std::ofstream os(csv_path, std::ios::trunc);
    if (!os) throw mim::IoError(csv_path + ": cannot open for writing");
    os << csv.str();
  }
  std::cout << "metrics " << csv_path << "\n" << "mse " << fmt(rep.mse) << "\n";
}

// ----------------------------------------------------------------- diagnose

struct DiagnoseArgs {
  std::string mode, data, manifest, link, v = "none", frame = "default";
  long long n = 100000;
  uint64_t seed = 0;
  int m_max = 4, m = 2, max_working_dim = 8, workers = 1;
  double y_bin_width = 0.0;  // 0: per-mode default
  double cube_width = 1.0, threshold = 0.02, tau = 0.0;
  std::string out, tag = "diagnostic", config_path;
};

std::function<double(double)> named_link(const std::string& name) {
  if (name == "identity") return [](double t) { return t; };
  if (name == "square") return [](double t) { return t * t; };
  if (name == "abs") return [](double t) { return std::abs(t); };
  if (name == "relu") return [](double t) { return std::max(0.0, t); };
  if (name == "sign") return [](double t) { return t < 0.0 ? -1.0 : 1.0; };
  if (name == "cube") return [](double t) { return t * t * t; };
  if (name == "noise") return nullptr;  // handled by the caller
  throw mim::ConfigError("diagnose: unknown link: " + name);
}

void run_diagnose(const CLI::App& cmd, DiagnoseArgs a) {
  const json cfg = load_cli_config(a.config_path);
  cfg_fill(cmd, cfg, "mode", a.mode);
  cfg_fill(cmd, cfg, "data", a.data);
  cfg_fill(cmd, cfg, "manifest", a.manifest);
  cfg_fill(cmd, cfg, "link", a.link);
  cfg_fill(cmd, cfg, "v", a.v);
  cfg_fill(cmd, cfg, "frame", a.frame);
  cfg_fill(cmd, cfg, "n", a.n);
  cfg_fill(cmd, cfg, "seed", a.seed);
  cfg_fill(cmd, cfg, "m-max", a.m_max);
  cfg_fill(cmd, cfg, "m", a.m);
  cfg_fill(cmd, cfg, "max-working-dim", a.max_working_dim);
  cfg_fill(cmd, cfg, "workers", a.workers);
  cfg_fill(cmd, cfg, "y-bin-width", a.y_bin_width);
  cfg_fill(cmd, cfg, "cube-width", a.cube_width);
  cfg_fill(cmd, cfg, "threshold", a.threshold);
  cfg_fill(cmd, cfg, "tau", a.tau);
  cfg_fill(cmd, cfg, "out", a.out);
  cfg_fill(cmd, cfg, "tag", a.tag);

  const std::string out = resolve_out_dir(a.out);
  const std::string csv_path = (fs::path(out) / (a.tag + "_diagnose.csv")).string();
  const std::string json_path = (fs::path(out) / (a.tag + "_diagnose.json")).string();
  json result;
  result["mode"] = a.mode;
  result["format_version"] = mim::kFormatVersion;
  std::string csv;

  const auto instance = instance_from_manifest(a.manifest);
  auto pick_subspace = [&](Eigen::Index d) -> mim::Subspace {
    if (a.v == "none") return mim::Subspace::zero(d);
    if (a.v == "manifest") {
      if (!instance) throw mim::ConfigError("diagnose: --v manifest needs --manifest");
      return instance->hidden;
    }
    throw mim::ConfigError("diagnose: --v must be none or manifest");
  };

  if (a.mode == "generative_exponent") {
    mim::GenerativeExponentOptions opts;
    if (a.y_bin_width > 0.0) opts.y_bin_width = a.y_bin_width;
    opts.threshold = a.threshold;
    mim::GenerativeExponentResult res;
    if (!a.link.empty()) {
      const auto link = named_link(a.link);
      if (link) {
        res = mim::generative_exponent(link, a.m_max, a.n, a.seed, opts);
      } else {  // independent noise labels
        mim::Rng rng(a.seed);
        mim::VectorXd ts(a.n), ys(a.n);
        for (Eigen::Index i = 0; i < a.n; ++i) ts[i] = rng.gauss();
        for (Eigen::Index i = 0; i < a.n; ++i) ys[i] = rng.gauss();
        res = mim::generative_exponent(ts, ys, a.m_max, opts);
      }
      result["link"] = a.link;
    } else if (!a.data.empty()) {
      const mim::LabeledDataset ds = mim::load_dataset(a.data);
      if (ds.dim() != 1)
        throw mim::ConfigError("diagnose: generative_exponent over a dataset needs d = 1");
      res = mim::generative_exponent(ds.xs.col(0), ds.ys, a.m_max, opts);
      result["data"] = a.data;
    } else {
      throw mim::ConfigError("diagnose: generative_exponent needs --link or --data");
    }
    csv = mim::profile_to_csv(res.profile);
    if (res.m_star) result["m_star"] = *res.m_star;
    else result["m_star"] = nullptr;
    result["values"] = res.profile.values;
    result["ses"] = res.profile.ses;
    result["threshold"] = res.threshold;
    result["warnings"] = json::array();
    if (res.profile.widened) result["warnings"].push_back("label bins merged to reach 30 samples");
    std::cout << "m_star "
              << (res.m_star ? std::to_string(*res.m_star) : std::string("NOT_FOUND")) << "\n";
  } else if (a.mode == "moment_defect") {
    if (a.data.empty()) throw mim::ConfigError("diagnose: moment_defect needs --data");
    const mim::LabeledDataset ds = mim::load_dataset(a.data);
    const mim::Subspace v = pick_subspace(ds.dim());
    mim::MomentDefectOptions opts;
    opts.cube_width = a.cube_width;
    if (a.y_bin_width > 0.0) opts.y_bin_width = a.y_bin_width;
    opts.max_working_dim = a.max_working_dim;
    opts.workers = a.workers;
    if (a.frame == "manifest") {
      if (!instance) throw mim::ConfigError("diagnose: --frame manifest needs --manifest");
      opts.working_frame = instance->hidden.basis;
    } else if (a.frame != "default") {
      throw mim::ConfigError("diagnose: --frame must be default or manifest");
    }
    const mim::MomentDefectResult res = mim::moment_match_defect(ds, v, a.m, opts);
    std::ostringstream os;
    os.precision(17);
    os << "metric,value\n"
       << "nu_hat," << res.value << "\nraw_rms," << res.raw_rms << "\nse," << res.se
       << "\nincluded_mass," << res.included_mass << "\ngroups," << res.groups << "\n";
    csv = os.str();
    result["nu_hat"] = res.value;
    result["raw_rms"] = res.raw_rms;
    result["se"] = res.se;
    result["included_mass"] = res.included_mass;
    result["groups"] = res.groups;
    result["m"] = a.m;
    result["warnings"] = json::array();
    if (res.widened) result["warnings"].push_back("label bins merged to reach 30 samples");
    std::cout << "nu_hat " << fmt(res.value) << "\n";
  } else if (a.mode == "filtered_moment") {
    if (a.data.empty()) throw mim::ConfigError("diagnose: filtered_moment needs --data");
    const mim::LabeledDataset ds = mim::load_dataset(a.data);
    const mim::Subspace v = pick_subspace(ds.dim());
    double tau = a.tau;
    if (tau <= 0.0) {
      if (!instance)
        throw mim::ConfigError("diagnose: filtered_moment needs --tau or --manifest");
      tau = 2.0 * std::sqrt(static_cast<double>(instance->k)) * instance->lipschitz;
    }
    std::function<double(const mim::VectorXd&)> f_on_v = [](const mim::VectorXd&) {
      return 0.0;
    };
    if (a.v == "manifest") {
      const mim::MimInstance inst_copy = *instance;
      f_on_v = [inst_copy](const mim::VectorXd& x) { return inst_copy.evaluate(x); };
    }
    const mim::FilteredSecondMoment res = mim::filtered_second_moment(ds, v, f_on_v, tau);
    csv = mim::matrix_to_csv(res.matrix);
    Eigen::SelfAdjointEigenSolver<mim::MatrixXd> es(res.matrix);
    const Eigen::Index dd = res.matrix.rows();
    result["tau"] = tau;
    result["active_fraction"] = res.active_fraction;
    result["frobenius"] = res.matrix.norm();
    result["null_frobenius_se"] = res.null_frobenius_se;
    result["top_eigenvalue"] = es.eigenvalues()[dd - 1];
    result["top_eigenvector"] =
        std::vector<double>(es.eigenvectors().col(dd - 1).data(),
                            es.eigenvectors().col(dd - 1).data() + dd);
    if (instance) {
      double best = 0.0, best_se = 0.0;
      for (Eigen::Index c = 0; c < instance->hidden.basis.cols(); ++c) {
        const auto [val, se] =
            mim::filtered_quadratic_form(ds, v, f_on_v, tau, instance->hidden.basis.col(c));
        if (c == 0 || val > best) {
          best = val;
          best_se = se;
        }
      }
      result["max_quadratic_form_over_w"] = best;
      result["max_quadratic_form_se"] = best_se;
    }
    result["warnings"] = json::array();
    std::cout << "frobenius " << fmt(res.matrix.norm()) << "\n";
  } else {
    throw mim::ConfigError(
        "diagnose: mode must be generative_exponent, moment_defect, or filtered_moment");
  }

  {
    std::ofstream os(csv_path, std::ios::trunc);
    if (!os) throw mim::IoError(csv_path + ": cannot open for writing");
    os << csv;
  }
  mim::write_json_file(json_path, result);
  std::cout << "csv " << csv_path << "\n" << "json " << json_path << "\n";
}

// ----------------------------------------------------------------- selftest

struct SelftestFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& what) {
  if (!ok) throw SelftestFailure(what);
}

int run_selftest() {
  using namespace mim;
  int failures = 0;
  auto check = [&](const char* name, const std::function<void()>& body) {
    try {
      body();
      std::cout << "ok " << name << "\n";
    } catch (const std::exception& e) {
      ++failures;
      std::cout << "FAILED " << name << ": " << e.what() << "\n";
    }
  };

  check("hermite quadrature orthonormality", [] {
    // Golub-Welsch on the Jacobi matrix of the Gaussian-weight recurrence
    const int q = 40;
    MatrixXd jac = MatrixXd::Zero(q, q);
    for (int i = 1; i < q; ++i)
      jac(i, i - 1) = jac(i - 1, i) = std::sqrt(static_cast<double>(i));
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(jac);
    const VectorXd nodes = es.eigenvalues();
    VectorXd weights(q);
    for (int i = 0; i < q; ++i)
      weights[i] = es.eigenvectors()(0, i) * es.eigenvectors()(0, i);
    std::vector<double> h(static_cast<size_t>(7));
    MatrixXd gram = MatrixXd::Zero(7, 7);
    for (int i = 0; i < q; ++i) {
      hermite_univariate_all(6, nodes[i], h.data());
      for (int r = 0; r < 7; ++r)
        for (int c = 0; c < 7; ++c) gram(r, c) += weights[i] * h[r] * h[c];
    }
    expect((gram - MatrixXd::Identity(7, 7)).cwiseAbs().maxCoeff() < 1e-10,
           "quadrature Gram matrix deviates from identity");
  });

  check("expansion gradient matches finite differences", [] {
    HermiteExpansion p(2);
    p.set({2, 0}, 0.5);
    p.set({1, 1}, -1.2);
    p.set({0, 3}, 0.3);
    VectorXd x(2);
    x << 0.7, -1.3;
    const std::vector<HermiteExpansion> grad = gradient_expansion(p);
    const double step = 1e-6;
    for (int j = 0; j < 2; ++j) {
      VectorXd hi = x, lo = x;
      hi[j] += step;
      lo[j] -= step;
      const double fd = (eval_expansion(p, hi) - eval_expansion(p, lo)) / (2.0 * step);
      expect(std::abs(eval_expansion(grad[static_cast<size_t>(j)], x) - fd) < 1e-6,
             "gradient component disagrees");
    }
  });

  check("influence matrix invariants", [] {
    Rng rng(1234);
    HermiteExpansion p(3);
    for (const auto& idx : enumerate_multi_indices(3, 3))
      p.set(idx, rng.gauss() * 0.3);
    const MatrixXd infl = influence_matrix(p);
    expect((infl - infl.transpose()).norm() < 1e-12, "influence not symmetric");
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(infl);
    expect(es.eigenvalues().minCoeff() > -1e-12, "influence not PSD");
    double trace_expect = 0.0;
    for (const auto& [idx, c] : p.coeffs) trace_expect += total_degree(idx) * c * c;
    expect(std::abs(infl.trace() - trace_expect) < 1e-10, "trace formula violated");
  });

  check("discretization counts and tie rules", [] {
    const Discretization disc = build_discretization(2, 0.25, 0.1, 100.0);
    expect(disc.interval.max_bounded == 999, "bounded interval count");
    expect(disc.interval.total_count() == 2001, "total interval count");
    expect(locate_interval(disc.interval, 0.05) == 0, "interval tie should go down");
    expect(locate_interval(disc.interval, 150.0) == disc.interval.right_tail_index(),
           "right tail");
    const CubePartition cube{1, 0.5, 0.0, 1.0, 4};
    const double at_threshold = -0.5;
    const auto cell = locate_cube(cube, &at_threshold);
    expect(cell.has_value() && (*cell)[0] == 0, "cube tie should go down");
  });

  check("orthonormalize and potential identity", [] {
    Rng rng(77);
    DirectionList raw;
    for (int i = 0; i < 5; ++i) raw.push_back(rng.gauss_vector(7));
    const DirectionList on = orthonormalize(raw);
    for (size_t i = 0; i < on.size(); ++i) {
      expect(std::abs(on[i].norm() - 1.0) < 1e-10, "not unit");
      for (size_t j = i + 1; j < on.size(); ++j)
        expect(std::abs(on[i].dot(on[j])) < 1e-10, "not orthogonal");
    }
    DirectionList wraw{rng.gauss_vector(7), rng.gauss_vector(7)};
    const Subspace w = subspace_from_directions(7, orthonormalize(wraw));
    const Subspace v0 = Subspace::zero(7);
    const DirectionList grown = orthonormalize({rng.gauss_vector(7)}, v0, 1e-10);
    const Subspace v1 = extended(v0, grown);
    const double drop = potential(w, v0) - potential(w, v1);
    const double expected = project_onto(grown[0], w).squaredNorm();
    expect(std::abs(drop - expected) < 1e-10, "potential decrement identity");
  });

  check("rng determinism and stream separation", [] {
    Rng a(7), b(7);
    for (int i = 0; i < 5; ++i) expect(a.gauss() == b.gauss(), "same-seed streams differ");
    Rng c1 = Rng(7).child(1), c2 = Rng(7).child(2);
    expect(c1.gauss() != c2.gauss(), "child streams collide");
  });

  check("single-neuron recovery end to end", [] {
    const MimInstance inst = make_relu_network(5, 1, {1}, 91);
    const LabeledDataset train = sample_dataset(inst, NoiseModel::realizable(), 12000, 911);
    LearnerConfig config;
    config.k_target = 1;
    config.T = 3;
    const LearnResult first = learn(train, config, &inst);
    const LearnResult second = learn(train, config, &inst);
    expect(first.v.dim() == 1, "subspace dimension");
    const VectorXd angles = recovery_angles(first.v, inst.hidden);
    expect(angles.maxCoeff() < 0.35, "recovery angle too large");
    const LabeledDataset test = sample_dataset(inst, NoiseModel::realizable(), 8000, 912);
    expect(evaluate(first.hypothesis, test).mse < 0.2, "test error too large");
    expect(first.hypothesis.cell_values == second.hypothesis.cell_values,
           "learn is not deterministic");
  });

  if (failures == 0) {
    std::cout << "selftest passed\n";
    return 0;
  }
  std::cout << "selftest failed (" << failures << ")\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-index model learning harness"};
  app.set_version_flag("--version", mim::kVersion);
  app.require_subcommand(1);
  int exit_code = 0;

  auto* gen = app.add_subcommand("generate", "sample a synthetic instance into dataset files");
  auto gen_args = std::make_shared<GenerateArgs>();
  gen->add_option("--family", gen_args->family, "relu, homog, or poly")
      ->check(CLI::IsMember({"relu", "homog", "poly"}));
  gen->add_option("--d", gen_args->d, "ambient dimension");
  gen->add_option("--k", gen_args->k, "hidden dimension");
  gen->add_option("--widths", gen_args->widths, "hidden layer widths")->delimiter(',');
  gen->add_option("--poly-m", gen_args->poly_m, "polynomial degree");
  gen->add_option("--poly-alpha", gen_args->poly_alpha, "polynomial conditioning target");
  gen->add_option("--noise", gen_args->noise, "realizable, additive, or adversarial")
      ->check(CLI::IsMember({"realizable", "additive", "adversarial"}));
  gen->add_option("--sigma", gen_args->sigma, "additive noise scale");
  gen->add_option("--rho", gen_args->rho, "adversarial corruption budget");
  gen->add_option("--n-train", gen_args->n_train, "training samples");
  gen->add_option("--n-eval", gen_args->n_eval, "evaluation samples");
  gen->add_option("--instance-seed", gen_args->instance_seed, "instance seed");
  gen->add_option("--data-seed", gen_args->data_seed, "data seed");
  gen->add_option("--out", gen_args->out, "output directory (default: MIMLEARN_OUT_DIR or .)");
  gen->add_option("--tag", gen_args->tag, "output file prefix");
  gen->add_option("--config", gen_args->config_path, "JSON config file (CLI flags win)");
  gen->callback([gen, gen_args] { run_generate(*gen, *gen_args); });

  auto* lrn = app.add_subcommand("learn", "run the subspace learner over dataset files");
  auto lrn_args = std::make_shared<LearnArgs>();
  lrn->add_option("--train", lrn_args->trains, "training dataset (repeat for repetitions)");
  lrn->add_option("--eval", lrn_args->evals, "evaluation dataset (0, 1, or per-train)");
  lrn->add_option("--manifest", lrn_args->manifests, "manifest with ground truth (0, 1, or per-train)");
  lrn->add_option("--out", lrn_args->out, "output directory (default: MIMLEARN_OUT_DIR or .)");
  lrn->add_option("--tag", lrn_args->tag, "output file prefix");
  lrn->add_option("--workers", lrn_args->workers, "worker threads");
  lrn->add_flag("--trace-hypotheses,!--no-trace-hypotheses", lrn_args->trace_hypotheses,
                "refit a hypothesis after each iteration for the error trace");
  lrn->add_option("--config", lrn_args->config_path, "JSON config file (CLI flags win)");
  lrn_args->opts.add(lrn);
  lrn->callback([lrn, lrn_args] { run_learn(*lrn, *lrn_args); });

  auto* evl = app.add_subcommand("eval", "evaluate a hypothesis file against a dataset");
  auto evl_args = std::make_shared<EvalArgs>();
  evl->add_option("--model", evl_args->model, "hypothesis container");
  evl->add_option("--data", evl_args->data, "evaluation dataset");
  evl->add_option("--manifest", evl_args->manifest, "manifest with ground truth");
  evl->add_option("--out", evl_args->out, "output directory (default: MIMLEARN_OUT_DIR or .)");
  evl->add_option("--tag", evl_args->tag, "output file prefix");
  evl->add_flag("--force", evl_args->force, "evaluate despite a spec hash mismatch");
  evl->add_option("--config", evl_args->config_path, "JSON config file (CLI flags win)");
  evl->callback([evl, evl_args] { run_eval(*evl, *evl_args); });

  auto* dia = app.add_subcommand("diagnose", "estimate hardness quantities");
  auto dia_args = std::make_shared<DiagnoseArgs>();
  dia->add_option("--mode", dia_args->mode,
                  "generative_exponent, moment_defect, or filtered_moment")
      ->required();
  dia->add_option("--data", dia_args->data, "dataset container");
  dia->add_option("--manifest", dia_args->manifest, "manifest with ground truth");
  dia->add_option("--link", dia_args->link,
                  "named link for generative_exponent (identity, square, abs, relu, sign, cube, noise)");
  dia->add_option("--v", dia_args->v, "conditioning subspace: none or manifest");
  dia->add_option("--frame", dia_args->frame, "complement working frame: default or manifest");
  dia->add_option("--n", dia_args->n, "sample count for link sampling");
  dia->add_option("--seed", dia_args->seed, "sampling seed");
  dia->add_option("--m-max", dia_args->m_max, "largest degree probed");
  dia->add_option("--m", dia_args->m, "moment degree for moment_defect");
  dia->add_option("--max-working-dim", dia_args->max_working_dim, "complement truncation");
  dia->add_option("--workers", dia_args->workers, "worker threads");
  dia->add_option("--y-bin-width", dia_args->y_bin_width, "label bin width (0: default)");
  dia->add_option("--cube-width", dia_args->cube_width, "conditioning cell width over V");
  dia->add_option("--threshold", dia_args->threshold, "detection threshold");
  dia->add_option("--tau", dia_args->tau, "residual filter level (0: from manifest)");
  dia->add_option("--out", dia_args->out, "output directory (default: MIMLEARN_OUT_DIR or .)");
  dia->add_option("--tag", dia_args->tag, "output file prefix");
  dia->add_option("--config", dia_args->config_path, "JSON config file (CLI flags win)");
  dia->callback([dia, dia_args] { run_diagnose(*dia, *dia_args); });

  auto* self = app.add_subcommand("selftest", "run the built-in invariant checks");
  self->callback([&exit_code] { exit_code = run_selftest(); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const mim::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const mim::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const mim::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return exit_code;
}
