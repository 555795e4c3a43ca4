#include "e2t/harness.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "e2t/errors.hpp"
#include "json.hpp"

namespace e2t {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

MetricsSink::MetricsSink(const std::string& path) {
  auto f = std::make_shared<std::ofstream>(path, std::ios::trunc);
  if (!*f) throw FormatError("cannot open metrics file " + path);
  out_ = std::move(f);
}

void MetricsSink::write(const std::string& json_line) {
  if (!out_) return;
  *out_ << json_line << '\n';
  out_->flush();
}

double RunResult::converged_kept_ratio() const {
  if (kept_ratio.empty()) return 1.0;
  const std::size_t from = kept_ratio.size() - std::max<std::size_t>(1, kept_ratio.size() / 4);
  return std::accumulate(kept_ratio.begin() + static_cast<std::ptrdiff_t>(from), kept_ratio.end(), 0.0) /
         static_cast<double>(kept_ratio.size() - from);
}

double RunResult::mean_predicted_fraction() const {
  if (predicted_fraction.empty()) return 0.0;
  return std::accumulate(predicted_fraction.begin(), predicted_fraction.end(), 0.0) /
         static_cast<double>(predicted_fraction.size());
}

DataSplit load_data(const RunConfig& cfg) {
  if (cfg.data_source == "cifar10") {
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i) train_files.push_back(cfg.data_path + "/data_batch_" + std::to_string(i) + ".bin");
    ChannelStats stats;
    DataSplit s;
    s.train = load_cifar10(train_files, cfg.data_subset_per_class, nullptr, &stats);
    const std::size_t eval_per_class = (cfg.data_eval_size + 9) / 10;
    s.eval = load_cifar10({cfg.data_path + "/test_batch.bin"}, eval_per_class, &stats);
    return s;
  }
  const Rng root = Rng(cfg.seed).fork("data");
  const SyntheticTask task(root.fork("task").seed(), cfg.data_classes, cfg.data_image_size);
  Rng train_rng = root.fork("train"), eval_rng = root.fork("eval");
  DataSplit s{task.sample(cfg.data_train_size, cfg.data_difficulty, train_rng),
              task.sample(cfg.data_eval_size, cfg.data_difficulty, eval_rng)};
  const ChannelStats stats = channel_stats(s.train.images);
  normalize(s.train.images, stats);
  normalize(s.eval.images, stats);
  return s;
}

double evaluate(Network& net, const Dataset& d, double threshold, bool all_blocks, std::size_t batch) {
  StepContext ctx;
  ctx.mode = Mode::eval;
  ctx.gate_mode = GateMode::deterministic;
  ctx.gate_threshold = threshold;
  if (all_blocks || !net.has_gate()) ctx.forced_mask = std::vector<bool>(net.spec().blocks, true);
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < d.size(); lo += batch) {
    std::vector<std::size_t> idx(std::min(batch, d.size() - lo));
    std::iota(idx.begin(), idx.end(), lo);
    const auto out = net.forward(d.gather(idx), ctx);
    correct += softmax_cross_entropy(out.logits, d.gather_labels(idx)).correct;
  }
  return d.size() ? static_cast<double>(correct) / static_cast<double>(d.size()) : 0.0;
}

namespace {

std::string mask_bits(const std::vector<bool>& mask) {
  std::string s;
  for (bool b : mask) s += b ? '1' : '0';
  return s;
}

Tensor batch_images(const Dataset& d, const std::vector<std::size_t>& idx, bool augment_images, Rng& rng) {
  Tensor x = d.gather(idx);
  if (!augment_images) return x;
  const std::size_t per = x.size() / x.dim(0);
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const Tensor a = augment(d.image(idx[n]), rng);
    std::copy(a.data().begin(), a.data().end(), x.data().begin() + static_cast<std::ptrdiff_t>(n * per));
  }
  return x;
}

}  // namespace

RunResult train_network(const RunConfig& cfg, Network& net, const DataSplit& data, MetricsSink* sink) {
  RunResult res;
  const Rng root(cfg.seed);
  EpochSampler batches(data.train.size(), cfg.train_batch, root.fork("batches"));
  Rng aug_rng = root.fork("augment");
  Rng gate_rng = root.fork("gate-sample");
  const std::uint64_t total = cfg.scheduled_iterations();
  const BatchSchedule schedule = smd_schedule(total, cfg.smd_enabled ? cfg.smd_p : 0.0, cfg.seed);
  const auto decay = total > 0 ? cfg.decay_points() : std::vector<std::uint64_t>{};
  const LrSchedule lr(cfg.optim_lr, decay);
  // Gates decay with the network: a constant gate rate keeps the complexity
  // term pushing after the task gradient has vanished.
  const LrSchedule gate_lr(cfg.slu_gate_lr, decay);
  Optimizer opt({cfg.optim_kind, cfg.optim_lr, cfg.optim_momentum, cfg.optim_wd});
  Optimizer gate_opt({OptimKind::sgd, cfg.slu_gate_lr, 0.9, 0.0});
  const CostModel model = CostModel::from_name(cfg.energy_model);

  ExactWeightGrad exact;
  PsgWeightGrad psg(cfg.optim_beta);
  WeightGradEngine* engine = cfg.optim_kind == OptimKind::psg ? static_cast<WeightGradEngine*>(&psg) : &exact;
  std::optional<SnapshotRecorder> recorder;
  std::optional<ObservedWeightGrad> observed;
  if (cfg.snapshot_every > 0 && !cfg.snapshot_layers.empty()) {
    recorder.emplace(cfg.snapshot_layers, cfg.snapshot_every);
    observed.emplace(*engine, recorder->observer());
    engine = &*observed;
  }

  const bool gated = cfg.slu_enabled && net.has_gate();
  StepContext ctx;
  ctx.ledger = &res.ledger;
  ctx.precision = cfg.precision();
  ctx.weight_grad = engine;
  ctx.gate_mode = GateMode::sample;
  ctx.gate_rng = &gate_rng;
  ctx.alpha = cfg.slu_alpha;
  ctx.head_only = cfg.train_head_only;
  if (!gated && net.has_gate()) ctx.forced_mask = std::vector<bool>(net.spec().blocks, true);

  const std::uint64_t swa_start =
      cfg.optim_swa_start >= 0 ? static_cast<std::uint64_t>(cfg.optim_swa_start) : (decay.empty() ? 0 : decay.back());
  SwaAverager swa;
  std::vector<Param*> trainable = cfg.train_head_only ? net.head_parameters() : net.parameters();
  std::vector<double> losses;

  auto log_eval = [&](std::uint64_t s) {
    const double acc = evaluate(net, data.eval, cfg.slu_eval_threshold, !gated);
    res.eval_history.push_back(acc);
    if (sink) {
      sink->write(Json{{"type", "eval"}, {"scheduled_step", s}, {"step", res.processed_steps}, {"accuracy", acc}}
                      .dump());
    }
  };

  for (std::uint64_t s = 0; s < total; ++s) {
    const auto idx = batches.next();
    if (schedule.keep[s]) {
      if (recorder) recorder->set_step(res.processed_steps);
      const Tensor x = batch_images(data.train, idx, cfg.data_augment, aug_rng);
      const auto labels = data.train.gather_labels(idx);
      net.zero_grad();
      psg.reset_step();
      const auto out = net.forward(x, ctx);
      const auto loss = softmax_cross_entropy(out.logits, labels, ctx.meter(Phase::forward, 32, 32));
      net.backward(loss.g_logits, ctx);
      const double step_lr = lr.at(s);
      opt.step(trainable, step_lr, &res.ledger);
      if (gated) gate_opt.step(net.gate_parameters(), gate_lr.at(s), &res.ledger);
      ++res.processed_steps;
      losses.push_back(loss.loss);

      const double kept = static_cast<double>(std::count(out.mask.begin(), out.mask.end(), true)) /
                          static_cast<double>(out.mask.size());
      res.kept_ratio.push_back(kept);
      Json rec{{"type", "step"},   {"step", res.processed_steps}, {"scheduled_step", s},
               {"loss", loss.loss}, {"lr", step_lr},              {"mask", mask_bits(out.mask)}};
      if (cfg.optim_kind == OptimKind::psg) {
        const double pf = psg.step_stats().predicted_fraction();
        res.predicted_fraction.push_back(pf);
        rec["predicted_fraction"] = pf;
      }
      if (sink) sink->write(rec.dump());
      if (cfg.uses_swa() && s >= swa_start && res.processed_steps % cfg.optim_swa_every == 0) swa.update(trainable);
    }
    if ((s + 1) % cfg.train_ledger_every == 0 && sink) {
      sink->write(Json{{"type", "ledger"},
                       {"scheduled_step", s + 1},
                       {"flops", res.ledger.flops()},
                       {"energy", model.energy(res.ledger)}}
                      .dump());
    }
    if ((s + 1) % cfg.train_eval_every == 0) log_eval(s + 1);
  }

  if (swa.count() > 0) {
    swa.apply(trainable);
    // re-estimate batch statistics for the averaged weights
    if (!cfg.train_head_only) {
      net.reset_bn();
      StepContext recal = ctx;
      recal.bn_recalibrate = true;
      recal.gate_mode = GateMode::deterministic;
      recal.gate_threshold = cfg.slu_eval_threshold;
      EpochSampler recal_batches(data.train.size(), cfg.train_batch, root.fork("recalibration"));
      for (std::size_t k = 0; k < cfg.train_bn_recal_batches; ++k) {
        net.forward(data.train.gather(recal_batches.next()), recal);
      }
    }
  }

  res.scheduled_steps = total;
  res.final_accuracy = evaluate(net, data.eval, cfg.slu_eval_threshold, !gated);
  const std::size_t tail = std::max<std::size_t>(1, losses.size() / 10);
  if (!losses.empty()) {
    res.final_loss = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(tail), losses.end(), 0.0) /
                     static_cast<double>(tail);
  }
  res.energy = model.energy(res.ledger);
  if (recorder) res.snapshots = recorder->take();
  return res;
}

void write_ledger_csv(std::ostream& out, const EnergyLedger& ledger) {
  out << "phase,op,bits,count\n";
  ledger.for_each_nonzero([&](Phase p, OpClass c, int bits, std::uint64_t n) {
    out << to_string(p) << ',' << to_string(c) << ',' << bits << ',' << n << '\n';
  });
}

EnergyLedger read_ledger_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path + ": cannot open");
  EnergyLedger ledger;
  std::string line;
  std::getline(in, line);
  if (line != "phase,op,bits,count") throw FormatError(path + ": unexpected header '" + line + "'");
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string phase, op, bits, count;
    if (!std::getline(ss, phase, ',') || !std::getline(ss, op, ',') || !std::getline(ss, bits, ',') ||
        !std::getline(ss, count)) {
      throw FormatError(path + ": row " + std::to_string(row) + " has too few fields");
    }
    try {
      ledger.record(op_class_from_string(op), std::stoll(count), std::stoi(bits), phase_from_string(phase));
    } catch (const std::exception& e) {
      throw FormatError(path + ": row " + std::to_string(row) + ": " + e.what());
    }
  }
  return ledger;
}

RunResult run(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const DataSplit data = load_data(cfg);
  NetworkSpec spec = cfg.network_spec();
  spec.in_channels = data.train.images.dim(1);
  spec.image_size = data.train.images.dim(2);
  Rng model_rng = Rng(cfg.seed).fork("model");
  Network net(spec, model_rng);

  MetricsSink sink;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(fs::path(out_dir) / "effective_config") << cfg.to_text();
    sink = MetricsSink((fs::path(out_dir) / "metrics.jsonl").string());
  }
  RunResult res = train_network(cfg, net, data, out_dir.empty() ? nullptr : &sink);
  if (!out_dir.empty()) {
    sink.write(Json{{"type", "final"},
                    {"scenario", cfg.scenario},
                    {"seed", cfg.seed},
                    {"accuracy", res.final_accuracy},
                    {"loss", res.final_loss},
                    {"scheduled_steps", res.scheduled_steps},
                    {"processed_steps", res.processed_steps},
                    {"flops", res.ledger.flops()},
                    {"energy", res.energy},
                    {"kept_ratio", res.converged_kept_ratio()},
                    {"predicted_fraction", res.mean_predicted_fraction()}}
                   .dump());
    std::ofstream summary(fs::path(out_dir) / "summary.csv");
    summary.precision(17);
    summary << "scenario,seed,accuracy,loss,scheduled_steps,processed_steps,flops,energy,kept_ratio,"
               "predicted_fraction,energy_model\n"
            << cfg.scenario << ',' << cfg.seed << ',' << res.final_accuracy << ',' << res.final_loss << ','
            << res.scheduled_steps << ',' << res.processed_steps << ',' << res.ledger.flops() << ',' << res.energy
            << ',' << res.converged_kept_ratio() << ',' << res.mean_predicted_fraction() << ','
            << cfg.energy_model << '\n';
    std::ofstream ledger(fs::path(out_dir) / "ledger.csv");
    write_ledger_csv(ledger, res.ledger);
    if (!res.snapshots.empty()) write_snapshots((fs::path(out_dir) / "snapshots.bin").string(), res.snapshots);
  }
  return res;
}

std::vector<Snapshot> capture_snapshots(RunConfig cfg) {
  if (cfg.snapshot_layers.empty() || cfg.snapshot_every == 0) return {};
  return run(cfg).snapshots;
}

void compare(std::ostream& out, const std::vector<CompareRow>& runs, const std::string& baseline,
             const CostModel& model) {
  const auto base = std::find_if(runs.begin(), runs.end(), [&](const CompareRow& r) { return r.method == baseline; });
  if (base == runs.end()) throw ConfigError("compare: no run named baseline '" + baseline + "'");
  out << "method,Computational Savings (FLOPs),Energy Savings,Accuracy\n";
  out.precision(6);
  out << std::fixed;
  for (const auto& r : runs) {
    const SavingsReport s = savings_report(r.ledger, base->ledger, model);
    out << r.method << ',' << 100.0 * s.computational_savings << "%," << 100.0 * s.energy_savings << "%,"
        << 100.0 * r.accuracy << "%\n";
  }
}

CompareRow load_run(const std::string& dir) {
  const auto summary_path = (fs::path(dir) / "summary.csv").string();
  std::ifstream in(summary_path);
  if (!in) throw FormatError(summary_path + ": cannot open");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  std::stringstream hs(header), rs(row);
  std::map<std::string, std::string> kv;
  for (std::string k, v; std::getline(hs, k, ',') && std::getline(rs, v, ',');) kv[k] = v;
  if (!kv.count("scenario") || !kv.count("accuracy")) throw FormatError(summary_path + ": missing columns");
  CompareRow r;
  r.method = kv["scenario"];
  r.accuracy = std::stod(kv["accuracy"]);
  r.ledger = read_ledger_csv((fs::path(dir) / "ledger.csv").string());
  return r;
}

FinetuneReport finetune_compare(const RunConfig& pretrain, const RunConfig& finetune, const Dataset& half_a,
                                const Dataset& half_b, const Dataset& eval) {
  pretrain.validate();
  finetune.validate();
  NetworkSpec spec = finetune.network_spec();
  spec.gated = true;
  spec.in_channels = half_a.images.dim(1);
  spec.image_size = half_a.images.dim(2);
  Rng model_rng = Rng(pretrain.seed).fork("model");
  Network net(spec, model_rng);

  RunConfig pre = pretrain;
  pre.slu_enabled = false;
  train_network(pre, net, {half_a, eval});

  FinetuneReport rep;
  rep.pretrained_accuracy = evaluate(net, eval, 0.5, true);

  RunConfig standard = finetune;
  standard.scenario = "head-only";
  standard.smd_enabled = false;
  standard.slu_enabled = false;
  standard.quant_enabled = false;
  standard.optim_kind = OptimKind::sgd;
  standard.optim_lr = pretrain.optim_lr;
  standard.optim_wd = pretrain.optim_wd;
  standard.optim_swa = "off";
  standard.train_head_only = true;
  Network head_net = net;
  const RunResult r1 = train_network(standard, head_net, {half_b, eval});
  rep.head_only_accuracy = r1.final_accuracy;
  rep.head_only_ledger = r1.ledger;

  Network full_net = net;
  const RunResult r2 = train_network(finetune, full_net, {half_b, eval});
  rep.e2train_accuracy = r2.final_accuracy;
  rep.e2train_ledger = r2.ledger;
  if (r1.ledger.flops() > 0) {
    rep.e2train_savings =
        savings_report(r2.ledger, r1.ledger, CostModel::from_name(finetune.energy_model)).energy_savings;
  }
  return rep;
}

FinetuneReport finetune_split(const RunConfig& cfg, std::uint64_t finetune_iterations) {
  cfg.validate();
  const DataSplit data = load_data(cfg);
  Rng split_rng = Rng(cfg.seed).fork("split");
  auto [a, b] = stratified_halves(data.train, split_rng);
  RunConfig ft = RunConfig::preset("e2train");
  for (const auto& key : {"run.seed", "model.width", "model.blocks", "model.stem_stride", "model.gate_pool_stride",
                          "data.source", "data.path", "data.classes", "data.image_size", "energy.model",
                          "train.batch", "quant.act_bits", "quant.grad_bits", "quant.act_msb_bits",
                          "quant.grad_msb_bits"}) {
    ft.set(key, cfg.get(key));
  }
  ft.train_iterations = finetune_iterations;
  return finetune_compare(cfg, ft, a, b, data.eval);
}

}  // namespace e2t
