#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "e2t/errors.hpp"
#include "e2t/harness.hpp"

namespace e2t {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("config key " + key + ": '" + value + "' is not " + what);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T v{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "a valid number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  bad_value(key, value, "a boolean");
}

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
std::string fmt_int(T v) {
  return std::to_string(v);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
};

template <typename T>
Field unsigned_field(T RunConfig::*m) {
  return {[m](const RunConfig& c) { return fmt_int(c.*m); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_number<T>(k, v); }};
}

template <typename T>
Field int_field(T RunConfig::*m) {
  return unsigned_field(m);
}

Field real_field(double RunConfig::*m) {
  return {[m](const RunConfig& c) { return fmt(c.*m); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_number<double>(k, v); }};
}

Field bool_field(bool RunConfig::*m) {
  return {[m](const RunConfig& c) { return fmt_bool(c.*m); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_bool(k, v); }};
}

Field string_field(std::string RunConfig::*m) {
  return {[m](const RunConfig& c) { return c.*m; },
          [m](RunConfig& c, const std::string&, const std::string& v) { c.*m = v; }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"run.scenario", string_field(&RunConfig::scenario)},
      {"run.seed", unsigned_field(&RunConfig::seed)},
      {"model.width", unsigned_field(&RunConfig::model_width)},
      {"model.blocks", unsigned_field(&RunConfig::model_blocks)},
      {"model.stem_stride", unsigned_field(&RunConfig::model_stem_stride)},
      {"model.gate_pool_stride", unsigned_field(&RunConfig::model_gate_pool_stride)},
      {"data.source", string_field(&RunConfig::data_source)},
      {"data.path", string_field(&RunConfig::data_path)},
      {"data.subset_per_class", unsigned_field(&RunConfig::data_subset_per_class)},
      {"data.train_size", unsigned_field(&RunConfig::data_train_size)},
      {"data.eval_size", unsigned_field(&RunConfig::data_eval_size)},
      {"data.classes", unsigned_field(&RunConfig::data_classes)},
      {"data.image_size", unsigned_field(&RunConfig::data_image_size)},
      {"data.difficulty", real_field(&RunConfig::data_difficulty)},
      {"data.augment", bool_field(&RunConfig::data_augment)},
      {"train.iterations", unsigned_field(&RunConfig::train_iterations)},
      {"train.batch", unsigned_field(&RunConfig::train_batch)},
      {"train.decay",
       {[](const RunConfig& c) {
          std::vector<std::string> parts;
          for (double d : c.train_decay) parts.push_back(fmt(d));
          return join(parts);
        },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.train_decay.clear();
          for (const auto& item : split_list(v)) c.train_decay.push_back(parse_number<double>(k, item));
        }}},
      {"train.eval_every", unsigned_field(&RunConfig::train_eval_every)},
      {"train.ledger_every", unsigned_field(&RunConfig::train_ledger_every)},
      {"train.bn_recal_batches", unsigned_field(&RunConfig::train_bn_recal_batches)},
      {"train.head_only", bool_field(&RunConfig::train_head_only)},
      {"optim.kind",
       {[](const RunConfig& c) { return to_string(c.optim_kind); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.optim_kind = optim_kind_from_string(v);
          } catch (const ConfigError&) {
            bad_value(k, v, "one of sgd, signsgd, psg");
          }
        }}},
      {"optim.lr", real_field(&RunConfig::optim_lr)},
      {"optim.momentum", real_field(&RunConfig::optim_momentum)},
      {"optim.wd", real_field(&RunConfig::optim_wd)},
      {"optim.beta", real_field(&RunConfig::optim_beta)},
      {"optim.swa", string_field(&RunConfig::optim_swa)},
      {"optim.swa_start", int_field(&RunConfig::optim_swa_start)},
      {"optim.swa_every", unsigned_field(&RunConfig::optim_swa_every)},
      {"quant.enabled", bool_field(&RunConfig::quant_enabled)},
      {"quant.act_bits", int_field(&RunConfig::quant_act_bits)},
      {"quant.grad_bits", int_field(&RunConfig::quant_grad_bits)},
      {"quant.act_msb_bits", int_field(&RunConfig::quant_act_msb_bits)},
      {"quant.grad_msb_bits", int_field(&RunConfig::quant_grad_msb_bits)},
      {"slu.enabled", bool_field(&RunConfig::slu_enabled)},
      {"slu.alpha", real_field(&RunConfig::slu_alpha)},
      {"slu.eval_threshold", real_field(&RunConfig::slu_eval_threshold)},
      {"slu.gate_lr", real_field(&RunConfig::slu_gate_lr)},
      {"slu.gate_bias", real_field(&RunConfig::slu_gate_bias)},
      {"smd.enabled", bool_field(&RunConfig::smd_enabled)},
      {"smd.p", real_field(&RunConfig::smd_p)},
      {"smd.energy_ratio", real_field(&RunConfig::smd_energy_ratio)},
      {"energy.model", string_field(&RunConfig::energy_model)},
      {"snapshot.layers",
       {[](const RunConfig& c) { return join(c.snapshot_layers); },
        [](RunConfig& c, const std::string&, const std::string& v) { c.snapshot_layers = split_list(v); }}},
      {"snapshot.every", unsigned_field(&RunConfig::snapshot_every)},
  };
  return table;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid config: " + what);
}

}  // namespace

RunConfig RunConfig::preset(const std::string& scenario) {
  RunConfig c;
  c.scenario = scenario;
  const bool smd = scenario == "smd" || scenario == "e2train";
  const bool slu = scenario == "slu" || scenario == "e2train";
  const bool psg = scenario == "psg" || scenario == "e2train";
  if (!smd && !slu && !psg && scenario != "smb") {
    throw ConfigError("unknown scenario '" + scenario + "' (expected smb, smd, slu, psg or e2train)");
  }
  c.smd_enabled = smd;
  if (slu) {
    c.slu_enabled = true;
    c.slu_alpha = 0.06;
  }
  if (psg) {
    c.optim_kind = OptimKind::psg;
    c.optim_lr = 0.003;
    c.optim_wd = 5e-4;
    c.quant_enabled = true;
  }
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, trim(value));
}

void RunConfig::apply_text(const std::string& text, const std::string& source) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str(), path);
}

std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, f] : fields()) out.push_back(k);
  return out;
}

std::string RunConfig::get(const std::string& key) const {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(*this);
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

bool RunConfig::uses_swa() const {
  if (optim_swa == "on") return true;
  if (optim_swa == "off") return false;
  return optim_kind != OptimKind::sgd;
}

std::uint64_t RunConfig::scheduled_iterations() const {
  return smd_enabled ? smd_scheduled_iterations(train_iterations, smd_energy_ratio, smd_p) : train_iterations;
}

std::vector<std::uint64_t> RunConfig::decay_points() const {
  const double s = static_cast<double>(scheduled_iterations());
  std::vector<std::uint64_t> out;
  for (double f : train_decay) out.push_back(static_cast<std::uint64_t>(std::llround(f * s)));
  return out;
}

NetworkSpec RunConfig::network_spec() const {
  NetworkSpec s;
  s.width = model_width;
  s.blocks = model_blocks;
  s.classes = data_classes;
  s.image_size = data_source == "cifar10" ? 32 : data_image_size;
  s.stem_stride = model_stem_stride;
  s.gated = slu_enabled;
  s.gate_head_bias = slu_gate_bias;
  s.gate_pool_stride = model_gate_pool_stride;
  return s;
}

PrecisionConfig RunConfig::precision() const {
  PrecisionConfig p;
  p.quantized = quant_enabled;
  p.act_bits = quant_act_bits;
  p.grad_bits = quant_grad_bits;
  p.act_msb_bits = quant_act_msb_bits;
  p.grad_msb_bits = quant_grad_msb_bits;
  return p;
}

void RunConfig::validate() const {
  require(!scenario.empty(), "run.scenario is empty");
  require(model_width > 0 && model_blocks > 0, "model.width and model.blocks must be positive");
  require(model_stem_stride > 0 && model_gate_pool_stride > 0, "model strides must be positive");
  require(data_source == "synthetic" || data_source == "cifar10", "data.source must be synthetic or cifar10");
  require(data_source != "cifar10" || !data_path.empty(), "data.path is required for cifar10");
  require(data_classes >= 2, "data.classes must be at least 2");
  require(data_source != "cifar10" || data_classes == 10, "cifar10 has 10 classes");
  require(data_train_size >= data_classes, "data.train_size must cover every class");
  require(data_eval_size > 0, "data.eval_size must be positive");
  require(data_image_size >= 4, "data.image_size must be at least 4");
  require(data_difficulty >= 0.0, "data.difficulty must be >= 0");
  require(train_batch > 0, "train.batch must be positive");
  require(train_eval_every > 0 && train_ledger_every > 0, "metric intervals must be positive");
  for (std::size_t i = 0; i < train_decay.size(); ++i) {
    require(train_decay[i] > 0.0 && train_decay[i] < 1.0, "train.decay fractions must lie in (0, 1)");
    require(i == 0 || train_decay[i] > train_decay[i - 1], "train.decay must be strictly increasing");
  }
  require(optim_lr > 0.0, "optim.lr must be positive");
  require(optim_momentum >= 0.0 && optim_momentum < 1.0, "optim.momentum must lie in [0, 1)");
  require(optim_wd >= 0.0, "optim.wd must be >= 0");
  require(optim_beta > 0.0 && optim_beta < 1.0, "optim.beta must lie in (0, 1)");
  require(optim_swa == "auto" || optim_swa == "on" || optim_swa == "off", "optim.swa must be auto, on or off");
  require(optim_swa_start >= -1, "optim.swa_start must be -1 or a scheduled step");
  require(optim_swa_every > 0, "optim.swa_every must be positive");
  auto bits_ok = [](int b) { return b >= 1 && b <= 32; };
  require(bits_ok(quant_act_bits) && bits_ok(quant_grad_bits) && bits_ok(quant_act_msb_bits) &&
              bits_ok(quant_grad_msb_bits),
          "quant bit widths must lie in [1, 32]");
  require(quant_act_msb_bits < quant_act_bits && quant_grad_msb_bits < quant_grad_bits,
          "predictor widths must be below the full widths");
  require(slu_alpha >= 0.0, "slu.alpha must be >= 0");
  require(slu_eval_threshold > 0.0 && slu_eval_threshold < 1.0, "slu.eval_threshold must lie in (0, 1)");
  require(slu_gate_lr > 0.0, "slu.gate_lr must be positive");
  require(smd_p >= 0.0 && smd_p < 1.0, "smd.p must lie in [0, 1)");
  require(smd_energy_ratio > 0.0, "smd.energy_ratio must be positive");
  require(energy_model == "quadratic" || energy_model == "paper_calibrated",
          "energy.model must be quadratic or paper_calibrated");
  require(!train_head_only || !slu_enabled, "train.head_only cannot be combined with slu");
  const auto points = decay_points();
  const auto total = scheduled_iterations();
  for (std::size_t i = 0; i < points.size() && total > 0; ++i) {
    require(points[i] < total && (i == 0 || points[i] > points[i - 1]),
            "decay points must be strictly increasing and below the scheduled iterations");
  }
}

RunConfig load_config(const std::string& scenario, const std::string& file,
                      const std::vector<std::string>& overrides) {
  RunConfig cfg = RunConfig::preset(scenario);
  if (!file.empty()) cfg.apply_file(file);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    cfg.set(trim(o.substr(0, eq)), o.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

}  // namespace e2t
