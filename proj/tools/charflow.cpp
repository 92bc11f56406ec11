#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "charflow/cgen.hpp"
#include "charflow/config.hpp"
#include "charflow/errors.hpp"
#include "charflow/io.hpp"
#include "charflow/metrics.hpp"
#include "charflow/oracle.hpp"
#include "charflow/sampler.hpp"
#include "charflow/verify.hpp"

namespace fs = std::filesystem;
using namespace charflow;

namespace {

struct Context {
  RunConfig config;
  fs::path out;
  std::string provenance;

  std::string path(const std::string& name) const { return (out / name).string(); }
};

Context prepare(const std::string& config_path, const std::optional<std::string>& out_dir,
                const std::optional<std::uint64_t>& seed) {
  Context ctx{load_config(config_path), {}, {}};
  if (out_dir) ctx.config.run.out = *out_dir;
  if (seed) ctx.config.run.seed = *seed;
  ctx.out = ctx.config.run.out;
  fs::create_directories(ctx.out);
  const std::string text = serialize(ctx.config);
  // the output directory does not change any result, so it stays out of the hash
  RunConfig located = ctx.config;
  located.run.out.clear();
  ctx.provenance = provenance_line(ctx.config.run.seed, serialize(located));
  std::ofstream echo(ctx.path("config.effective.ini"));
  echo << ctx.provenance << '\n' << text;
  return ctx;
}

void require(const Context& ctx, const std::string& name, const std::string& producer) {
  if (!fs::exists(ctx.out / name))
    throw std::runtime_error("missing " + ctx.path(name) + " (run `charflow " + producer + "` first)");
}

void save_losses(const Context& ctx, const std::string& name, const Vec& losses) {
  Vec iteration(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) iteration[i] = static_cast<double>(i);
  save_columns_csv(ctx.path(name), {"iteration", "loss"}, {iteration, losses}, ctx.provenance);
}

void save_reports(const Context& ctx, const std::string& name, const std::vector<MetricReport>& reports) {
  std::ofstream out(ctx.path(name));
  out << ctx.provenance << '\n';
  write_reports(out, reports);
}

std::optional<OracleContext> oracle_for(const RunConfig& config) {
  if (config.target.kind == TargetKind::SwissRoll) return std::nullopt;
  return OracleContext(config.target_spec(), Schedule(config.schedule.kind));
}

int gen_data(const Context& ctx) {
  const TargetSpec spec = ctx.config.target_spec();
  save_points_csv(ctx.path("data.csv"), sample_target(spec, ctx.config.target.n_data, derive_seed(ctx.config.run.seed, 10)),
                  ctx.provenance);
  save_points_csv(ctx.path("holdout.csv"),
                  sample_target(spec, ctx.config.target.n_holdout, derive_seed(ctx.config.run.seed, 11)), ctx.provenance);
  std::cout << "wrote " << ctx.path("data.csv") << " and " << ctx.path("holdout.csv") << '\n';
  return 0;
}

int train_velocity(const Context& ctx) {
  require(ctx, "data.csv", "gen-data");
  const PointSet data = load_points_csv(ctx.path("data.csv"));
  const TrainResult result = train(ctx.config.velocity_config(), data);
  save_checkpoint(ctx.path("velocity.ckpt"), result.field.to_checkpoint(), ctx.provenance);
  save_losses(ctx, "velocity_loss.csv", result.losses);
  std::vector<MetricReport> reports;
  if (const auto oracle = oracle_for(ctx.config)) {
    const std::uint64_t seed = derive_seed(ctx.config.run.seed, 21);
    const double err = velocity_oracle_error(result.field, *oracle, 0.9, 4096, seed);
    reports.push_back({"velocity_oracle_l2", err, 4096, 0, seed, {{"t_max", 0.9}}});
    std::cout << "velocity L2 error against the oracle over t in [0, 0.9]: " << err << '\n';
  }
  save_reports(ctx, "velocity_report.txt", reports);
  std::cout << "final loss " << (result.losses.empty() ? 0.0 : result.losses.back()) << ", wrote "
            << ctx.path("velocity.ckpt") << '\n';
  return 0;
}

Field sampler_field(const LearnedField& field, SamplerKind kind) {
  if (kind == SamplerKind::Euler) return [&field](double t, const PointSet& x) { return field.velocity(t, x); };
  return [&field](double t, const PointSet& x) { return field.denoiser(t, x); };
}

int train_cg_command(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const CgTrainConfig cg = c.cg_config();
  std::optional<LearnedField> teacher;
  std::optional<TrajectoryBatch> corpus;
  std::optional<PointSet> data;
  CgInputs inputs;
  if (cg.mode != CgMode::SelfDistill) {
    require(ctx, "velocity.ckpt", "train-velocity");
    teacher = LearnedField::from_checkpoint(load_checkpoint(ctx.path("velocity.ckpt")));
  }
  if (cg.mode == CgMode::Regression) {
    const TimeGrid grid(c.schedule.stop_time, c.trajectories.steps);
    corpus = push_samples(c.trajectories.sampler, sampler_field(*teacher, c.trajectories.sampler), teacher->schedule(),
                          c.trajectories.particles, teacher->dim(), grid, derive_seed(c.run.seed, 40));
    save_trajectories(ctx.path("trajectories.bin"), *corpus, ctx.provenance);
    inputs.corpus = &*corpus;
  } else {
    require(ctx, "data.csv", "gen-data");
    data = load_points_csv(ctx.path("data.csv"));
    inputs.data = &*data;
    if (cg.mode == CgMode::Practical) inputs.teacher = &*teacher;
  }
  const CgResult result = train_cg(cg, inputs);
  save_checkpoint(ctx.path("cg.ckpt"), result.student.to_checkpoint(), ctx.provenance);
  save_losses(ctx, "cg_loss.csv", result.losses);
  std::cout << "final loss " << (result.losses.empty() ? 0.0 : result.losses.back()) << ", wrote "
            << ctx.path("cg.ckpt") << '\n';
  return 0;
}

int sample(const Context& ctx) {
  const RunConfig& c = ctx.config;
  require(ctx, "cg.ckpt", "train-cg");
  const StudentNet student = StudentNet::from_checkpoint(load_checkpoint(ctx.path("cg.ckpt")));
  const std::uint64_t seed = derive_seed(c.run.seed, 50);
  std::vector<MetricReport> nfe;
  for (const std::size_t pieces : c.sample.pieces) {
    student.reset_evaluations();
    const PointSet points = multi_step(student, uniform_nodes(student.stop_time(), pieces), c.sample.particles, seed);
    save_points_csv(ctx.path("samples_cg_" + std::to_string(pieces) + ".csv"), points, ctx.provenance);
    nfe.push_back({"nfe_cg_" + std::to_string(pieces), static_cast<double>(student.evaluations()), c.sample.particles,
                   0, seed, {}});
    if (c.sample.count_nfe)
      std::cout << "characteristic generator with " << pieces << " piece(s): " << student.evaluations()
                << " evaluation(s)\n";
  }
  if (fs::exists(ctx.out / "velocity.ckpt")) {
    const LearnedField field = LearnedField::from_checkpoint(load_checkpoint(ctx.path("velocity.ckpt")));
    const TimeGrid grid(c.schedule.stop_time, c.sample.euler_steps);
    const TrajectoryBatch batch =
        push_samples(SamplerKind::Euler, sampler_field(field, SamplerKind::Euler), field.schedule(), c.sample.particles,
                     field.dim(), grid, seed);
    save_points_csv(ctx.path("samples_euler.csv"), batch.endpoints(), ctx.provenance);
    nfe.push_back({"nfe_euler", static_cast<double>(c.sample.euler_steps), c.sample.particles, 0, seed, {}});
    if (c.sample.count_nfe) std::cout << "euler baseline: " << c.sample.euler_steps << " evaluation(s)\n";
  }
  save_reports(ctx, "nfe.txt", nfe);
  return 0;
}

int eval(const Context& ctx) {
  const RunConfig& c = ctx.config;
  require(ctx, "holdout.csv", "gen-data");
  const PointSet holdout = load_points_csv(ctx.path("holdout.csv"));
  std::vector<MetricReport> reports;
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(ctx.out)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("samples_", 0) == 0 && entry.path().extension() == ".csv") names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw std::runtime_error("no samples_*.csv in " + ctx.out.string() + " (run `charflow sample`)");
  const std::uint64_t seed = derive_seed(c.run.seed, 60);
  for (const std::string& name : names) {
    const PointSet samples = load_points_csv(ctx.path(name));
    const std::string label = name.substr(8, name.size() - 12);
    const bool exact = c.eval.exact && samples.size() == holdout.size() && samples.size() <= kW2ExactMaxSize;
    const double w2 = exact ? w2_exact(samples, holdout) : sliced_w2(samples, holdout, c.eval.projections, seed);
    reports.push_back({std::string(exact ? "w2_exact_" : "sliced_w2_") + label, w2, samples.size(), holdout.size(),
                       exact ? 0 : seed, {}});
    std::cout << reports.back().to_line() << '\n';
  }
  save_reports(ctx, "metrics.txt", reports);
  return 0;
}

int verify(const Context& ctx) {
  const std::vector<CheckResult> results = run_verify_suite(ctx.config.run.seed);
  print_check_table(std::cout, results);
  std::ofstream table(ctx.path("verify.txt"));
  table << ctx.provenance << '\n';
  print_check_table(table, results);
  for (const CheckResult& r : results)
    if (!r.passed) return 1;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"charflow: flow matching, exponential-integrator sampling and characteristic generators"};
  app.set_version_flag("--version", std::string(version()));
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  const auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "run configuration (INI)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory (overrides run.out)");
    sub->add_option("--seed", seed, "base seed (overrides run.seed)");
    return sub;
  };
  add("gen-data", "sample training and holdout sets from the target");
  add("train-velocity", "fit the velocity or denoiser network");
  add("train-cg", "train the characteristic generator");
  add("sample", "one-step and multi-step sampling, plus the Euler baseline");
  add("eval", "W2 of every samples_*.csv against the holdout set");
  add("verify", "run the oracle and property suite");

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const Context ctx = prepare(config_path, out_dir, seed);
    if (command == "gen-data") return gen_data(ctx);
    if (command == "train-velocity") return train_velocity(ctx);
    if (command == "train-cg") return train_cg_command(ctx);
    if (command == "sample") return sample(ctx);
    if (command == "eval") return eval(ctx);
    return verify(ctx);
  } catch (const std::exception& e) {
    std::cerr << "charflow " << command << ": " << e.what() << '\n';
    return 2;
  }
}
