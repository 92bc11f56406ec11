#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "charflow/metrics.hpp"
#include "charflow/oracle.hpp"
#include "charflow/rng.hpp"
#include "charflow/velocity.hpp"

using namespace charflow;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"([run]
seed = 5

[target]
kind = swiss_roll
n_data = 256
n_holdout = 128

[velocity]
hidden = 8, 8
iterations = 30
batch_size = 32

[trajectories]
steps = 5
particles = 32

[cg]
hidden = 8, 8
iterations = 20
batch_size = 8
pairs_per_particle = 2

[sample]
particles = 128
pieces = 1, 3
euler_steps = 5
)";

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int run_cli(const std::string& command, const fs::path& config, const fs::path& out) {
  const std::string line = std::string(CHARFLOW_CLI_PATH) + " " + command + " --config " + config.string() +
                           " --out " + out.string() + " > " + (out.parent_path() / (command + ".log")).string() +
                           " 2>&1";
  return std::system(line.c_str());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("identical configs give bit-identical pipeline outputs") {
  const fs::path root = CHARFLOW_TEST_WORKDIR;
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = root / "tiny.ini";
  std::ofstream(config) << kTinyConfig;

  const std::vector<std::string> commands = {"gen-data", "train-velocity", "train-cg", "sample", "eval"};
  for (const char* name : {"a", "b"})
    for (const std::string& command : commands) REQUIRE(run_cli(command, config, root / name) == 0);

  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(root / "a")) files.push_back(entry.path().filename().string());
  std::sort(files.begin(), files.end());
  for (const char* expected : {"data.csv", "holdout.csv", "velocity.ckpt", "trajectories.bin", "cg.ckpt",
                               "samples_cg_1.csv", "samples_cg_3.csv", "samples_euler.csv", "nfe.txt", "metrics.txt"})
    CHECK(std::find(files.begin(), files.end(), expected) != files.end());
  for (const std::string& f : files) {
    if (f == "config.effective.ini") continue;
    INFO(f);
    CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
    CHECK(slurp(root / "a" / f).rfind("# charflow ", 0) == 0);
  }

  std::ifstream nfe(root / "a" / "nfe.txt");
  bool seen = false;
  for (const MetricReport& r : read_reports(nfe))
    if (r.metric == "nfe_cg_3") {
      CHECK(r.value == 3.0);
      seen = true;
    }
  CHECK(seen);

  std::ifstream metrics(root / "a" / "metrics.txt");
  const auto reports = read_reports(metrics);
  CHECK(reports.size() == 3);
  for (const MetricReport& r : reports) CHECK(std::isfinite(r.value));

  CHECK(run_cli("sample", config, root / "empty") != 0);
}

TEST_CASE("denoiser training converted to a velocity matches direct velocity training") {
  const TargetSpec spec = make_mixture(PointSet(2, 1, {-1.0, 1.0}), {0.5, 0.5}, 0.25);
  const OracleContext ctx(spec, Schedule(ScheduleKind::Linear));
  std::vector<double> velocity_errors, denoiser_errors;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const PointSet data = sample_target(spec, 4096, derive_seed(seed, 100));
    TrainConfig config;
    config.iterations = 2000;
    config.batch_size = 256;
    config.lr = 3e-3;
    config.ema_rate = 0.999;
    config.time_features = TimeFeatures::parse("fourier:8");
    config.seed = seed;
    config.loss = LossKind::Velocity;
    velocity_errors.push_back(velocity_oracle_error(train(config, data).field, ctx, 0.9, 5000, seed));
    config.loss = LossKind::Denoiser;
    denoiser_errors.push_back(velocity_oracle_error(train(config, data).field, ctx, 0.9, 5000, seed));
  }
  const double v = median(velocity_errors), d = median(denoiser_errors);
  MESSAGE("median oracle error: velocity loss " << v << ", denoiser loss " << d);
  CHECK(d <= 2.0 * v);
}
