#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "mimlearn/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("mimlearn_cli_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

int run(const std::string& args, const std::string& log = "/dev/null") {
  const std::string cmd = std::string(MIMLEARN_CLI_PATH) + " " + args + " >" + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

bool same_bytes(const std::string& a, const std::string& b) { return slurp(a) == slurp(b); }

// Small end-to-end fixture: one instance, train/eval/manifest under dir.
void generate_small(const TempDir& dir, const std::string& tag, int d = 5,
                    uint64_t instance_seed = 5, uint64_t data_seed = 9) {
  const int code = run("generate --family relu --d " + std::to_string(d) +
                       " --k 1 --noise realizable --n-train 12000 --n-eval 4000"
                       " --instance-seed " + std::to_string(instance_seed) + " --data-seed " +
                       std::to_string(data_seed) + " --out " + dir.path.string() + " --tag " +
                       tag);
  REQUIRE(code == 0);
}

}  // namespace

TEST_CASE("generate writes stamped datasets deterministically") {
  TempDir dir;
  generate_small(dir, "a");
  generate_small(dir, "b");
  CHECK(same_bytes(dir.file("a_train.mlds"), dir.file("b_train.mlds")));
  CHECK(same_bytes(dir.file("a_eval.mlds"), dir.file("b_eval.mlds")));

  const json manifest = mim::read_json_file(dir.file("a_manifest.json"));
  REQUIRE(manifest.contains("spec_hash"));
  const std::string hash = manifest.at("spec_hash").get<std::string>();
  CHECK(hash.size() == 16);
  CHECK(mim::spec_hash_of_file(dir.file("a_train.mlds")) == hash);
  CHECK(mim::spec_hash_of_file(dir.file("a_eval.mlds")) == hash);
  CHECK(manifest.at("measured").at("noise_mse").get<double>() == 0.0);
  CHECK(manifest.at("measured").at("mean_sq_clean").get<double>() > 0.1);

  SECTION("train and eval differ from each other") {
    CHECK_FALSE(same_bytes(dir.file("a_train.mlds"), dir.file("a_eval.mlds")));
  }
  SECTION("different data seed changes the payload and the hash") {
    generate_small(dir, "c", 5, 5, 10);
    CHECK_FALSE(same_bytes(dir.file("a_train.mlds"), dir.file("c_train.mlds")));
    CHECK(mim::spec_hash_of_file(dir.file("c_train.mlds")) != hash);
  }
}

TEST_CASE("generate rejects empty sample counts") {
  TempDir dir;
  const int code = run("generate --n-train 0 --out " + dir.path.string() + " --tag zero");
  CHECK(code == 1);
  CHECK_FALSE(fs::exists(dir.file("zero_train.mlds")));
}

TEST_CASE("learn emits a complete record, trace, and model") {
  TempDir dir;
  generate_small(dir, "exp");
  const int code =
      run("learn --train " + dir.file("exp_train.mlds") + " --eval " + dir.file("exp_eval.mlds") +
          " --manifest " + dir.file("exp_manifest.json") +
          " --k-target 1 --T 3 --out " + dir.path.string() + " --tag fit");
  REQUIRE(code == 0);

  const json record = mim::read_json_file(dir.file("fit_record.json"));
  CHECK(record.at("spec_hash").get<std::string>().size() == 16);
  CHECK(record.at("data_hashes")[0] == mim::spec_hash_of_file(dir.file("exp_train.mlds")));
  CHECK(record.at("config").at("T") == 3);
  CHECK(record.at("config").at("resolved").contains("lambda-floor"));
  REQUIRE(record.at("repetitions").size() == 1);
  const json& metrics = record.at("repetitions")[0].at("metrics");
  CHECK(metrics.at("mse_dataset") == "eval");
  CHECK(metrics.at("mse").get<double>() < 0.2);
  CHECK(metrics.at("subspace_dim") == 1);
  CHECK(metrics.contains("largest_principal_angle_deg"));
  CHECK(metrics.contains("phi"));
  const json& iters = record.at("repetitions")[0].at("iterations");
  REQUIRE(iters.size() >= 1);
  CHECK(iters[0].at("dim_v") == 1);

  // wall-clock lives only in the timing side file, keeping records reproducible
  CHECK(record.dump().find("wall") == std::string::npos);
  const json timing = mim::read_json_file(dir.file("fit_record.timing.json"));
  CHECK(timing.at("total_ms").get<double>() > 0.0);

  const std::string trace = slurp(dir.file("fit_trace.csv"));
  CHECK(trace.rfind("rep,t,dim_v,n_directions,lambda_max,lambda_used,", 0) == 0);
  CHECK(std::count(trace.begin(), trace.end(), '\n') ==
        1 + static_cast<long>(iters.size()));

  const json header = mim::read_container_header(dir.file("fit_model.mlhy"));
  CHECK(header.at("data_hash") == record.at("data_hashes")[0]);
  CHECK(header.at("spec_hash") == record.at("spec_hash"));
}

TEST_CASE("eval reproduces the record metric exactly and enforces hashes") {
  TempDir dir;
  generate_small(dir, "exp");
  REQUIRE(run("learn --train " + dir.file("exp_train.mlds") + " --eval " +
              dir.file("exp_eval.mlds") + " --k-target 1 --T 3 --out " + dir.path.string() +
              " --tag fit") == 0);
  const json record = mim::read_json_file(dir.file("fit_record.json"));

  REQUIRE(run("eval --model " + dir.file("fit_model.mlhy") + " --data " +
              dir.file("exp_eval.mlds") + " --out " + dir.path.string() + " --tag check") == 0);
  const std::string csv = slurp(dir.file("check_metrics.csv"));
  double mse_csv = -1.0;
  std::istringstream lines(csv);
  for (std::string line; std::getline(lines, line);)
    if (line.rfind("mse,", 0) == 0) mse_csv = std::stod(line.substr(4));
  CHECK(mse_csv == record.at("repetitions")[0].at("metrics").at("mse").get<double>());

  SECTION("a dataset from another spec is refused without --force") {
    generate_small(dir, "other", 5, 6, 77);
    const std::string log = dir.file("mismatch.log");
    CHECK(run("eval --model " + dir.file("fit_model.mlhy") + " --data " +
              dir.file("other_eval.mlds") + " --out " + dir.path.string() + " --tag bad",
              log) == 1);
    CHECK(slurp(log).find("hash mismatch") != std::string::npos);
    CHECK(run("eval --model " + dir.file("fit_model.mlhy") + " --data " +
              dir.file("other_eval.mlds") + " --force --out " + dir.path.string() +
              " --tag forced") == 0);
  }
  SECTION("dimension mismatch names both dimensions") {
    generate_small(dir, "slim", 4);
    const std::string log = dir.file("dim.log");
    CHECK(run("eval --model " + dir.file("fit_model.mlhy") + " --data " +
              dir.file("slim_eval.mlds") + " --out " + dir.path.string() + " --tag dim",
              log) == 1);
    const std::string msg = slurp(log);
    CHECK(msg.find("5") != std::string::npos);
    CHECK(msg.find("4") != std::string::npos);
  }
}

TEST_CASE("learn runs repetitions over repeated train files") {
  TempDir dir;
  generate_small(dir, "r0");
  generate_small(dir, "r1", 5, 5, 10);
  REQUIRE(run("learn --train " + dir.file("r0_train.mlds") + " --train " +
              dir.file("r1_train.mlds") + " --eval " + dir.file("r0_eval.mlds") +
              " --k-target 1 --T 2 --workers 2 --out " + dir.path.string() + " --tag multi") ==
          0);
  const json record = mim::read_json_file(dir.file("multi_record.json"));
  REQUIRE(record.at("repetitions").size() == 2);
  CHECK(fs::exists(dir.file("multi_rep0_model.mlhy")));
  CHECK(fs::exists(dir.file("multi_rep1_model.mlhy")));
  CHECK(record.at("aggregate").at("mse_min").get<double>() <=
        record.at("aggregate").at("mse_max").get<double>());
  CHECK(record.at("data_hashes")[0] != record.at("data_hashes")[1]);

  SECTION("mismatched eval count is rejected") {
    CHECK(run("learn --train " + dir.file("r0_train.mlds") + " --train " +
              dir.file("r1_train.mlds") + " --eval " + dir.file("r0_eval.mlds") + " --eval " +
              dir.file("r1_eval.mlds") + " --eval " + dir.file("r0_eval.mlds") +
              " --k-target 1 --T 2 --out " + dir.path.string() + " --tag bad") == 1);
  }
}

TEST_CASE("records and models are byte-identical across worker counts") {
  TempDir dir;
  generate_small(dir, "exp");
  const std::string common = "learn --train " + dir.file("exp_train.mlds") + " --eval " +
                             dir.file("exp_eval.mlds") + " --k-target 1 --T 2 --out " +
                             dir.path.string() + " --tag det --workers ";
  REQUIRE(run(common + "1") == 0);
  fs::copy_file(dir.file("det_record.json"), dir.file("det_record.w1.json"));
  fs::copy_file(dir.file("det_model.mlhy"), dir.file("det_model.w1.mlhy"));
  fs::copy_file(dir.file("det_trace.csv"), dir.file("det_trace.w1.csv"));
  REQUIRE(run(common + "3") == 0);
  CHECK(same_bytes(dir.file("det_record.json"), dir.file("det_record.w1.json")));
  CHECK(same_bytes(dir.file("det_model.mlhy"), dir.file("det_model.w1.mlhy")));
  CHECK(same_bytes(dir.file("det_trace.csv"), dir.file("det_trace.w1.csv")));
}

TEST_CASE("diagnose estimates the generative exponent of a named link") {
  TempDir dir;
  REQUIRE(run("diagnose --mode generative_exponent --link square --n 100000 --seed 3 --out " +
              dir.path.string() + " --tag ge") == 0);
  const json out = mim::read_json_file(dir.file("ge_diagnose.json"));
  CHECK(out.at("m_star") == 2);
  const std::string csv = slurp(dir.file("ge_diagnose.csv"));
  CHECK(csv.rfind("degree,value,se\n", 0) == 0);

  SECTION("independent noise labels report no exponent") {
    REQUIRE(run("diagnose --mode generative_exponent --link noise --n 50000 --seed 4 --out " +
                dir.path.string() + " --tag noise") == 0);
    CHECK(mim::read_json_file(dir.file("noise_diagnose.json")).at("m_star").is_null());
  }
  SECTION("a mode without its inputs is a usage error") {
    CHECK(run("diagnose --mode generative_exponent --out " + dir.path.string() + " --tag z") ==
          1);
    CHECK(run("diagnose --mode moment_defect --out " + dir.path.string() + " --tag z") == 1);
  }
}

TEST_CASE("diagnose measures moment defects and filtered moments from files") {
  TempDir dir;
  generate_small(dir, "exp", 6);
  REQUIRE(run("diagnose --mode moment_defect --data " + dir.file("exp_train.mlds") +
              " --v manifest --manifest " + dir.file("exp_manifest.json") + " --out " +
              dir.path.string() + " --tag md") == 0);
  const json md = mim::read_json_file(dir.file("md_diagnose.json"));
  // labels are measurable with respect to the hidden subspace, so the
  // detector's own rule (value above threshold + 3 se) must not fire
  CHECK(md.at("nu_hat").get<double>() <= 0.02 + 3.0 * md.at("se").get<double>());
  CHECK(md.at("included_mass").get<double>() > 0.9);

  REQUIRE(run("diagnose --mode filtered_moment --data " + dir.file("exp_train.mlds") +
              " --manifest " + dir.file("exp_manifest.json") + " --out " + dir.path.string() +
              " --tag fm") == 0);
  const json fm = mim::read_json_file(dir.file("fm_diagnose.json"));
  CHECK(fm.at("tau").get<double>() > 0.0);
  CHECK(fm.at("top_eigenvector").size() == 6);
  const std::string csv = slurp(dir.file("fm_diagnose.csv"));
  CHECK(csv.rfind("c0,c1,c2,c3,c4,c5\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
}

TEST_CASE("selftest passes and the usual exit codes hold") {
  TempDir dir;
  CHECK(run("selftest", dir.file("selftest.log")) == 0);
  CHECK(slurp(dir.file("selftest.log")).find("selftest passed") != std::string::npos);
  CHECK(run("--help") == 0);
  CHECK(run("--version") == 0);
  CHECK(run("") == 1);                       // missing subcommand
  CHECK(run("learn --no-such-flag") == 1);   // unknown option
  CHECK(run("eval --model /nonexistent.mlhy --data /nonexistent.mlds") == 1);
}

TEST_CASE("config files fill in flags without overriding the command line") {
  TempDir dir;
  {
    std::ofstream os(dir.file("gen.json"));
    os << R"({"d": 4, "n-train": 2000, "n-eval": 500, "tag": "cfg"})" << "\n";
  }
  REQUIRE(run("generate --config " + dir.file("gen.json") + " --d 6 --out " +
              dir.path.string()) == 0);
  const json manifest = mim::read_json_file(dir.file("cfg_manifest.json"));
  CHECK(manifest.at("spec").at("d") == 6);
  CHECK(manifest.at("spec").at("n-train") == 2000);
  CHECK(manifest.at("spec").at("n-eval") == 500);

  SECTION("learner flags come from config files too") {
    generate_small(dir, "exp", 4);
    {
      std::ofstream os(dir.file("learn.json"));
      os << R"({"T": 2, "k-target": 1, "eps1": 0.5})" << "\n";
    }
    REQUIRE(run("learn --config " + dir.file("learn.json") + " --train " +
                dir.file("exp_train.mlds") + " --eps1 0.4 --out " + dir.path.string() +
                " --tag cfgl") == 0);
    const json record = mim::read_json_file(dir.file("cfgl_record.json"));
    CHECK(record.at("config").at("T") == 2);
    CHECK(record.at("config").at("eps1") == 0.4);
  }
}
