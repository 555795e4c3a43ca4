// e2t: train, verify-psg, compare, finetune-split.

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "e2t/errors.hpp"
#include "e2t/harness.hpp"
#include "e2t/psg_verify.hpp"

namespace fs = std::filesystem;
using namespace e2t;

namespace {

struct CommonOpts {
  std::string config;
  std::string scenario = "smb";
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> sets;
  std::string out = "runs";
  int jobs = 1;
};

void add_common(CLI::App* app, CommonOpts& o) {
  app->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
  app->add_option("--scenario", o.scenario, "preset: smb, smd, slu, psg, e2train")
      ->check(CLI::IsMember({"smb", "smd", "slu", "psg", "e2train"}));
  app->add_option("--seed", o.seeds, "run seed; repeat for a sweep");
  app->add_option("--set", o.sets, "override, key=value (repeatable)");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--jobs", o.jobs, "parallel processes for sweeps")->check(CLI::PositiveNumber);
}

RunConfig build_config(const CommonOpts& o, std::optional<std::uint64_t> seed) {
  std::vector<std::string> sets = o.sets;
  if (seed) sets.push_back("run.seed=" + std::to_string(*seed));
  return load_config(o.scenario, o.config, sets);
}

void print_run(const std::string& dir, const RunResult& r) {
  std::cout << dir << ": accuracy " << r.final_accuracy << ", processed " << r.processed_steps << "/"
            << r.scheduled_steps << " steps, flops " << r.ledger.flops() << ", energy " << r.energy
            << ", kept " << r.converged_kept_ratio();
  if (!r.predicted_fraction.empty()) std::cout << ", predicted " << r.mean_predicted_fraction();
  std::cout << "\n";
}

int cmd_train(const CommonOpts& o) {
  if (o.seeds.size() <= 1) {
    const RunConfig cfg = build_config(o, o.seeds.empty() ? std::nullopt : std::optional(o.seeds.front()));
    print_run(o.out, run(cfg, o.out));
    return 0;
  }
  // validate every config before launching anything
  std::vector<RunConfig> cfgs;
  for (auto s : o.seeds) cfgs.push_back(build_config(o, s));
  std::size_t next = 0, running = 0;
  int failures = 0;
  auto reap = [&] {
    int status = 0;
    if (wait(&status) > 0) {
      --running;
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failures;
    }
  };
  while (next < cfgs.size()) {
    if (running == static_cast<std::size_t>(o.jobs)) reap();
    const RunConfig& cfg = cfgs[next];
    const std::string dir = (fs::path(o.out) / (cfg.scenario + "-seed" + std::to_string(cfg.seed))).string();
    std::cout.flush();
    const pid_t pid = fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
      try {
        print_run(dir, run(cfg, dir));
        std::cout.flush();
        _exit(0);
      } catch (const std::exception& e) {
        std::cerr << dir << ": " << e.what() << "\n";
        _exit(1);
      }
    }
    ++running;
    ++next;
  }
  while (running > 0) reap();
  return failures == 0 ? 0 : 1;
}

struct VerifyOpts {
  std::vector<int> bits{2, 4, 6, 8};
  int grad_offset = 6;
  double beta = 0.05;
  double tau = 0.0;
  std::uint64_t samples = 100000;
  std::string sampler = "gaussian";
  std::string snapshots;
  std::size_t rows = 16, cols = 16, length = 64;
  std::uint64_t seed = 1;
  std::string csv;
};

int cmd_verify(const VerifyOpts& v) {
  std::unique_ptr<DrawSampler> sampler;
  std::vector<Snapshot> snaps;
  if (v.sampler == "snapshot") {
    if (v.snapshots.empty()) throw ConfigError("--sampler snapshot needs --snapshots FILE");
    snaps = read_snapshots(v.snapshots);
  }
  std::ofstream file;
  if (!v.csv.empty()) file.open(v.csv);
  std::ostream& out = v.csv.empty() ? std::cout : file;
  write_bound_csv_header(out);
  for (int b : v.bits) {
    if (v.sampler == "gaussian") sampler = std::make_unique<GaussianSampler>(v.cols, v.rows, v.length);
    else if (v.sampler == "sparse") sampler = std::make_unique<SparseSampler>(v.cols, v.rows, 3);
    else sampler = std::make_unique<SnapshotSampler>(snaps);
    VerifyConfig c;
    c.act_msb_bits = b;
    c.grad_msb_bits = std::min(b + v.grad_offset, c.grad_bits);
    c.beta = v.beta;
    c.tau = v.tau;
    c.n_samples = v.samples;
    Rng rng = Rng(v.seed).fork(static_cast<std::uint64_t>(b));
    const BoundEstimate est = monte_carlo_failure_rate(*sampler, c, rng);
    if (est.degenerate) std::cerr << "warning: every draw had a zero threshold; bound and rate are trivially 0\n";
    write_bound_csv_row(out, sampler->name(), c, est);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Energy-efficient CNN training engine"};
  app.require_subcommand(1);

  CommonOpts train_opts;
  auto* train = app.add_subcommand("train", "run one scenario (several seeds with --jobs)");
  add_common(train, train_opts);

  VerifyOpts vopts;
  auto* verify = app.add_subcommand("verify-psg", "Monte-Carlo check of the sign-prediction failure bound");
  verify->add_option("--bits", vopts.bits, "activation predictor bits (sweep)");
  verify->add_option("--grad-offset", vopts.grad_offset, "gradient predictor bits minus activation predictor bits");
  verify->add_option("--beta", vopts.beta, "threshold ratio");
  verify->add_option("--tau", vopts.tau, "fixed threshold in normalised units (overrides --beta)");
  verify->add_option("--samples", vopts.samples, "gradient entries per configuration");
  verify->add_option("--sampler", vopts.sampler)->check(CLI::IsMember({"gaussian", "sparse", "snapshot"}));
  verify->add_option("--snapshots", vopts.snapshots, "snapshot file from train --set snapshot.*");
  verify->add_option("--seed", vopts.seed);
  verify->add_option("--csv", vopts.csv, "write CSV here instead of stdout");

  std::vector<std::string> run_dirs;
  std::string baseline = "smb", model_name = "quadratic", compare_out;
  auto* cmp = app.add_subcommand("compare", "savings table of run directories against a baseline");
  cmp->add_option("runs", run_dirs, "run directories")->required()->expected(2, -1);
  cmp->add_option("--baseline", baseline, "scenario name of the baseline run");
  cmp->add_option("--energy-model", model_name)->check(CLI::IsMember({"quadratic", "paper_calibrated"}));
  cmp->add_option("--out", compare_out, "write CSV here instead of stdout");

  CommonOpts ft_opts;
  std::uint64_t ft_iters = 500;
  auto* ft = app.add_subcommand("finetune-split", "pretrain on one half, fine-tune on the other two ways");
  add_common(ft, ft_opts);
  ft->add_option("--finetune-iterations", ft_iters);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(train_opts);
    if (*verify) return cmd_verify(vopts);
    if (*cmp) {
      std::vector<CompareRow> rows;
      for (const auto& d : run_dirs) rows.push_back(load_run(d));
      std::ofstream file;
      if (!compare_out.empty()) file.open(compare_out);
      compare(compare_out.empty() ? std::cout : file, rows, baseline, CostModel::from_name(model_name));
      return 0;
    }
    if (*ft) {
      const RunConfig cfg =
          build_config(ft_opts, ft_opts.seeds.empty() ? std::nullopt : std::optional(ft_opts.seeds.front()));
      const FinetuneReport r = finetune_split(cfg, ft_iters);
      fs::create_directories(ft_opts.out);
      std::ofstream csv(fs::path(ft_opts.out) / "finetune.csv");
      for (std::ostream* o : {static_cast<std::ostream*>(&std::cout), static_cast<std::ostream*>(&csv)}) {
        *o << "option,accuracy,delta_accuracy,flops,energy_savings_vs_head_only\n"
           << "pretrained," << r.pretrained_accuracy << ",0,0,\n"
           << "head_only," << r.head_only_accuracy << ',' << r.head_only_delta() << ','
           << r.head_only_ledger.flops() << ",0\n"
           << "e2train," << r.e2train_accuracy << ',' << r.e2train_delta() << ',' << r.e2train_ledger.flops()
           << ',' << r.e2train_savings << '\n';
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
