#include "mscada/cli.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "mscada/gradcheck.hpp"
#include "mscada/train.hpp"

namespace mscada {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::string data;
  std::string out;
  std::string scenario;
  std::string ablation;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iters;
};

void add_train_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON training config");
  cmd->add_option("--data", f.data, "dataset root written by gen-data");
  cmd->add_option("--scenario", f.scenario, "scenario preset when no --data is given");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--iters", f.iters, "training iterations");
  cmd->add_option("--ablation", f.ablation, "full|no-mixing|no-hgcn|combined-source|best-expert|summation");
}

TrainConfig resolve_config(const CommonFlags& f) {
  TrainConfig c = f.config.empty() ? TrainConfig{} : load_train_config(f.config);
  if (!f.data.empty()) c.data = f.data;
  if (!f.scenario.empty()) c.scenario = f.scenario;
  if (f.seed) c.seed = *f.seed;
  if (f.iters) c.iterations = *f.iters;
  if (!f.ablation.empty()) apply_ablation(c, f.ablation);
  c.validate();
  return c;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

int cmd_gen_data(const std::string& scenario, const std::string& out, std::uint64_t seed, std::size_t size,
                 std::ostream& os) {
  const ScenarioData data = generate_scenario(scenario_preset(scenario, size, size), DataSizes{}, seed);
  write_scenario(out, data);
  os << "wrote " << scenario << " to " << out << " (" << data.sources.size() << " sources)\n";
  return 0;
}

int cmd_train(const CommonFlags& f, std::ostream& os) {
  const TrainConfig config = resolve_config(f);
  const ScenarioData data = load_or_generate(config);
  RunOptions options;
  options.out = f.out;
  options.on_row = [&os](std::size_t it, const LossBreakdown& l, const MetricsReport* r) {
    os << "iter " << it << "  sup " << fixed(l.sup) << "  ssl " << fixed(l.ssl) << "  sslM " << fixed(l.ssl_m);
    if (r) os << "  mIoU " << fixed(r->miou) << "  mF1 " << fixed(r->mf1);
    os << std::endl;
  };
  run_training(config, data, options);
  return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& data_root, const std::string& checkpoint,
             const std::string& dump_dir, std::ostream& os) {
  TrainConfig config = load_train_config(fs::path(run_dir) / "config.json");
  if (!data_root.empty()) config.data = data_root;
  const ScenarioData data = load_or_generate(config);
  const fs::path ckpt = checkpoint.empty() ? fs::path(run_dir) / "model.msct" : fs::path(checkpoint);
  const MultiBranchModel model = load_student(config, data.scenario, ckpt);
  const ClassRegistry registry(data.scenario.num_union, data.scenario.target_classes);
  const MetricsReport report = evaluate(model, data.target_test, registry);
  os << format_report(report, registry);
  if (!dump_dir.empty()) {
    fs::create_directories(dump_dir);
    Tensor x = data.target_test.at(0).image;
    x.reshape_inplace({1, x.dim(0), x.dim(1), x.dim(2)});
    const auto graphs = model.head_hypergraphs(Var::leaf(x));
    write_incidence_coo(fs::path(dump_dir) / "spatial.coo", graphs.at(0));
    write_incidence_coo(fs::path(dump_dir) / "feature.coo", graphs.at(1));
    os << "incidence matrices written to " << dump_dir << "\n";
  }
  return 0;
}

int cmd_gradcheck(std::size_t seeds, std::ostream& os) {
  std::map<std::string, double> worst;
  for (const auto& r : run_gradcheck_suite(seeds)) worst[r.name] = std::max(worst[r.name], r.max_rel_error);
  bool ok = true;
  for (const auto& [name, err] : worst) {
    const bool pass = err < kGradCheckTolerance;
    ok = ok && pass;
    os << (pass ? "ok   " : "FAIL ") << std::left << std::setw(32) << name << std::scientific
       << std::setprecision(2) << err << "\n";
  }
  os << (ok ? "all gradient checks passed\n" : "gradient checks FAILED\n");
  return ok ? 0 : 1;
}

int cmd_sweep(const CommonFlags& f, const std::string& grid, std::ostream& os) {
  const TrainConfig base = resolve_config(f);
  const ScenarioData data = load_or_generate(base);
  std::vector<std::pair<double, double>> points;
  std::string header;
  if (grid == "mix") {
    header = "class_ratio,region_ratio,mIoU,mF1";
    for (double c : {0.25, 0.5, 0.75}) {
      for (double r : {0.2, 0.4, 0.6}) points.emplace_back(c, r);
    }
  } else if (grid == "loss") {
    header = "alpha,beta,mIoU,mF1";
    points = {{1.0, 1.0}, {0.5, 1.0}, {1.0, 0.5}, {2.0, 1.0}, {1.0, 2.0}};
  } else {
    throw std::invalid_argument("unknown sweep grid '" + grid + "' (expected mix or loss)");
  }
  std::ofstream csv;
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    csv.open(fs::path(f.out) / "sweep.csv");
    csv << header << "\n";
  }
  os << header << "\n";
  for (const auto& [a, b] : points) {
    TrainConfig c = base;
    if (grid == "mix") {
      c.class_ratio = a;
      c.region_ratio = b;
    } else {
      c.alpha = a;
      c.beta = b;
    }
    const RunResult run = run_training(c, data);
    std::ostringstream row;
    row << a << ',' << b << ',' << std::setprecision(10) << run.final_report.miou << ',' << run.final_report.mf1;
    os << row.str() << std::endl;
    if (csv.is_open()) csv << row.str() << "\n" << std::flush;
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-source class-asymmetric domain adaptation for segmentation"};
  app.name("mscada");
  app.require_subcommand(1);

  std::string gen_scenario = "equality2", gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_size = 32;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic scenario dataset");
  gen->add_option("--scenario", gen_scenario, "equality2|equality3|inclusion2");
  gen->add_option("--out", gen_out, "dataset root")->required();
  gen->add_option("--seed", gen_seed, "random seed");
  gen->add_option("--image-size", gen_size, "image height and width");

  CommonFlags train_flags;
  auto* train = app.add_subcommand("train", "run training");
  add_train_flags(train, train_flags);
  train->add_option("--out", train_flags.out, "run directory")->required();

  std::string eval_run, eval_data, eval_ckpt, eval_dump;
  auto* eval = app.add_subcommand("eval", "evaluate a trained run on the target test split");
  eval->add_option("--out", eval_run, "run directory holding config.json and model.msct")->required();
  eval->add_option("--data", eval_data, "dataset root (default: the run's config)");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file (default: <run>/model.msct)");
  eval->add_option("--dump-incidence", eval_dump, "write the head's incidence matrices for the first test image");

  std::size_t grad_seeds = 20;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable op");
  grad->add_option("--seeds", grad_seeds, "number of random seeds per check");

  CommonFlags sweep_flags;
  std::string sweep_grid = "mix";
  auto* sweep = app.add_subcommand("sweep", "grid search over mixing ratios or loss weights");
  add_train_flags(sweep, sweep_flags);
  sweep->add_option("--out", sweep_flags.out, "directory for sweep.csv");
  sweep->add_option("--grid", sweep_grid, "mix|loss");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    configure_threads_from_env();
    if (*gen) return cmd_gen_data(gen_scenario, gen_out, gen_seed, gen_size, out);
    if (*train) return cmd_train(train_flags, out);
    if (*eval) return cmd_eval(eval_run, eval_data, eval_ckpt, eval_dump, out);
    if (*grad) return cmd_gradcheck(grad_seeds, out);
    if (*sweep) return cmd_sweep(sweep_flags, sweep_grid, out);
  } catch (const ConfigError& e) {
    err << "config error at line " << e.line() << ", column " << e.column() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace mscada
