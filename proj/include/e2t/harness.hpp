#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "e2t/data.hpp"
#include "e2t/energy.hpp"
#include "e2t/network.hpp"
#include "e2t/optim.hpp"
#include "e2t/psg_verify.hpp"

namespace e2t {

/// Every knob of a run. Text form is one `key = value` per line; `#` starts
/// a comment. Layering: scenario preset, then file, then command-line
/// overrides.
struct RunConfig {
  std::string scenario = "smb";
  std::uint64_t seed = 1;

  std::size_t model_width = 12;
  std::size_t model_blocks = 4;
  std::size_t model_stem_stride = 2;
  std::size_t model_gate_pool_stride = 4;

  std::string data_source = "synthetic";  // synthetic | cifar10
  std::string data_path;                   // directory holding data_batch_*.bin / test_batch.bin
  std::size_t data_subset_per_class = 500;
  std::size_t data_train_size = 5000;
  std::size_t data_eval_size = 1000;
  std::size_t data_classes = 10;
  std::size_t data_image_size = 16;
  double data_difficulty = 5.0;
  bool data_augment = false;

  std::uint64_t train_iterations = 4000;  // processed mini-batches of the SMB baseline
  std::size_t train_batch = 32;
  std::vector<double> train_decay = {0.5, 0.75};  // fractions of the scheduled steps
  std::uint64_t train_eval_every = 200;
  std::uint64_t train_ledger_every = 50;
  std::size_t train_bn_recal_batches = 20;
  bool train_head_only = false;  // update the classifier only; the body runs in inference mode

  OptimKind optim_kind = OptimKind::sgd;
  double optim_lr = 0.03;
  double optim_momentum = 0.9;
  double optim_wd = 1e-4;
  double optim_beta = 0.05;
  std::string optim_swa = "auto";  // auto (sign rules only) | on | off
  std::int64_t optim_swa_start = -1;  // scheduled step; -1: final decay point
  std::uint64_t optim_swa_every = 50;

  bool quant_enabled = false;
  int quant_act_bits = 8;
  int quant_grad_bits = 16;
  int quant_act_msb_bits = 4;
  int quant_grad_msb_bits = 10;

  bool slu_enabled = false;
  double slu_alpha = 0.0;
  double slu_eval_threshold = 0.5;
  double slu_gate_lr = 0.1;
  double slu_gate_bias = 2.0;

  bool smd_enabled = false;
  double smd_p = 0.5;
  double smd_energy_ratio = 0.67;

  std::string energy_model = "quadratic";

  std::vector<std::string> snapshot_layers;
  std::uint64_t snapshot_every = 0;

  /// Defaults overlaid with one of smb, smd, slu, psg, e2train.
  static RunConfig preset(const std::string& scenario);

  /// Sets one key from text; ConfigError naming the key on unknown keys or
  /// unparsable values.
  void set(const std::string& key, const std::string& value);
  void apply_text(const std::string& text, const std::string& source = "config");
  void apply_file(const std::string& path);

  /// Cross-field checks; ConfigError describing the first violation.
  void validate() const;

  /// Every key in sorted order; apply_text(to_text()) reproduces the config.
  std::string to_text() const;
  std::vector<std::string> keys() const;
  std::string get(const std::string& key) const;

  bool uses_swa() const;
  std::uint64_t scheduled_iterations() const;
  std::vector<std::uint64_t> decay_points() const;
  NetworkSpec network_spec() const;
  PrecisionConfig precision() const;
};

/// Scenario preset and file, then `key=value` overrides, validated.
RunConfig load_config(const std::string& scenario, const std::string& file,
                      const std::vector<std::string>& overrides);

struct DataSplit {
  Dataset train;
  Dataset eval;
};

/// Training and evaluation sets named by the config.
DataSplit load_data(const RunConfig& cfg);

/// Line-flushed JSONL writer; every record is one complete line.
class MetricsSink {
 public:
  MetricsSink() = default;
  explicit MetricsSink(const std::string& path);
  bool enabled() const { return static_cast<bool>(out_); }
  void write(const std::string& json_line);

 private:
  std::shared_ptr<std::ostream> out_;
};

struct RunResult {
  std::uint64_t scheduled_steps = 0;
  std::uint64_t processed_steps = 0;
  double final_accuracy = 0.0;
  double final_loss = 0.0;  // mean training loss over the last 10% of processed steps
  std::vector<double> eval_history;  // accuracy at every eval point
  EnergyLedger ledger;
  double energy = 0.0;
  std::vector<double> kept_ratio;          // per processed step
  std::vector<double> predicted_fraction;  // per processed step, PSG only
  std::vector<Snapshot> snapshots;

  /// Mean kept ratio over the last quarter of processed steps.
  double converged_kept_ratio() const;
  double mean_predicted_fraction() const;
};

/// Trains `net` in place on `data.train` as configured and evaluates on
/// `data.eval`. Pure function of (cfg, net, data).
RunResult train_network(const RunConfig& cfg, Network& net, const DataSplit& data, MetricsSink* sink = nullptr);

/// Accuracy with blocks gated deterministically at `threshold`; every block
/// runs when the net is ungated or `all_blocks` is set.
double evaluate(Network& net, const Dataset& d, double threshold = 0.5, bool all_blocks = false,
                std::size_t batch = 250);

/// Validates, builds data and model, trains, and writes metrics.jsonl,
/// summary.csv, ledger.csv and effective_config into out_dir when it is
/// non-empty.
RunResult run(const RunConfig& cfg, const std::string& out_dir = "");

/// Training run with a snapshot recorder on cfg.snapshot_layers every
/// cfg.snapshot_every processed steps.
std::vector<Snapshot> capture_snapshots(RunConfig cfg);

void write_ledger_csv(std::ostream& out, const EnergyLedger& ledger);
EnergyLedger read_ledger_csv(const std::string& path);

struct CompareRow {
  std::string method;
  EnergyLedger ledger;
  double accuracy = 0.0;
};

/// CSV: method, Computational Savings (FLOPs), Energy Savings, Accuracy;
/// one row per run against `baseline`. ConfigError when no run is named
/// `baseline`.
void compare(std::ostream& out, const std::vector<CompareRow>& runs, const std::string& baseline,
             const CostModel& model);

/// Loads a run directory's summary.csv and ledger.csv.
CompareRow load_run(const std::string& dir);

struct FinetuneReport {
  double pretrained_accuracy = 0.0;
  double head_only_accuracy = 0.0;  // option 1: last layer, standard training
  double e2train_accuracy = 0.0;    // option 2: all layers, E2-Train
  EnergyLedger head_only_ledger;
  EnergyLedger e2train_ledger;
  double e2train_savings = 0.0;  // energy savings of option 2 over option 1

  double head_only_delta() const { return head_only_accuracy - pretrained_accuracy; }
  double e2train_delta() const { return e2train_accuracy - pretrained_accuracy; }
};

/// Pretrains on half A and fine-tunes on half B two ways. `pretrain` and
/// `finetune` give the respective iteration budgets and technique settings;
/// option 1 reuses `finetune` with every technique disabled.
FinetuneReport finetune_compare(const RunConfig& pretrain, const RunConfig& finetune, const Dataset& half_a,
                                const Dataset& half_b, const Dataset& eval);

/// Stratified halves of the configured training set, then finetune_compare
/// with `cfg` for pretraining and its e2train variant for option 2.
FinetuneReport finetune_split(const RunConfig& cfg, std::uint64_t finetune_iterations);

}  // namespace e2t
