// Copyright 2026 The dpmld Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end. Exit codes: 0 success, 2 configuration or flag
// error, 3 data error, 4 audit violation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "dpmld/audit.hpp"
#include "dpmld/data.hpp"
#include "dpmld/errors.hpp"
#include "dpmld/privacy.hpp"
#include "dpmld/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace dpmld;

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt9(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::uint64_t default_seed() {
  if (const char* env = std::getenv("DPMLD_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end != env && *end == '\0') return static_cast<std::uint64_t>(v);
    throw ConfigError(std::string("DPMLD_SEED is not an integer: ") + env);
  }
  return 42;
}

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << content;
  if (!out) throw DataError("short write to " + path);
}

// Applies key=value lines from a run's config snapshot to options the command
// line left untouched, so a snapshot reruns exactly and flags still override.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto fail = [&](const std::string& msg) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + msg);
    };
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    const std::string body = line.substr(first, last - first + 1);
    if (body[0] == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos || eq == 0) fail("expected key=value");
    const std::string key = body.substr(0, eq);
    const std::string value = body.substr(eq + 1);
    if (key == "config") fail("config files do not nest");
    CLI::Option* op = cmd->get_option_no_throw("--" + key);
    if (op == nullptr) fail("unknown key '" + key + "'");
    if (op->count() > 0) continue;  // command line wins
    if (op->get_expected_min() == 0) {
      op->add_result(op->get_flag_value("--" + key, value));
    } else {
      op->add_result(value);
    }
    op->run_callback();
  }
}

const char* block_name(std::size_t feature_index, std::size_t d_feat) {
  static const std::array<const char*, 3> names{"eeg", "om", "cross"};
  return names[std::min<std::size_t>(feature_index / d_feat, 2)];
}

std::vector<double> default_w_grid() {
  std::vector<double> w;
  for (int i = 1; i <= 9; ++i) w.push_back(static_cast<double>(i) / 10.0);
  return w;
}

std::vector<std::pair<double, double>> grid_pairs(double step) {
  if (!(step > 0.0 && step <= 1.0)) {
    throw ConfigError("pair grid step must lie in (0, 1]");
  }
  const int n = static_cast<int>(std::lround(1.0 / step));
  if (std::fabs(step * n - 1.0) > 1e-9) {
    throw ConfigError("pair grid step must divide 1 evenly");
  }
  std::vector<std::pair<double, double>> pairs;
  for (int i = 0; i <= n; ++i) {
    for (int j = 0; j <= n; ++j) {
      pairs.emplace_back(static_cast<double>(i) / n,
                         static_cast<double>(j) / n);
    }
  }
  return pairs;
}

std::vector<std::pair<double, double>> pairs_from_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read pair file " + path);
  std::vector<std::pair<double, double>> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    double f1 = 0.0, f2 = 0.0;
    char sep = 0;
    std::istringstream row(line);
    if (!(row >> f1 >> sep >> f2) || sep != ',') {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": expected 'f1,f2'");
    }
    pairs.emplace_back(f1, f2);
  }
  if (pairs.empty()) throw DataError("pair file " + path + " is empty");
  return pairs;
}

// ---- train ----

struct TrainFlags {
  std::string data;
  std::string out;
  std::string data_checksum;  // informational; verified with a warning
  double epsilon = 1.0;
  bool non_private = false;
  bool freeze_rates = false;
  double init_rate = 0.5;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr_p = 1e-2;
  double lr_w = 1e-3;
  double momentum = 0.9;
  std::size_t model_steps = 1;
  std::size_t rate_steps = 1;
  double tau_start = 1.0;
  double tau_decay = 0.95;
  double tau_floor = 0.1;
  double train_frac = 0.7;
  std::uint64_t seed = 42;
  int threads = 1;
  std::size_t d_model = 32;
  std::size_t d_feat = 16;
  std::size_t d_ff = 32;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 3;
  std::size_t bins = 32;
  std::size_t patch = 4;
  std::size_t image_hw = 8;
  std::size_t cls_hidden = 32;
};

void add_model_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--d-model", f.d_model, "Token embedding width")
      ->capture_default_str();
  cmd->add_option("--d-feat", f.d_feat, "Per-block feature width")
      ->capture_default_str();
  cmd->add_option("--d-ff", f.d_ff, "Feed-forward hidden width")
      ->capture_default_str();
  cmd->add_option("--enc-layers", f.enc_layers, "EEG encoder blocks")
      ->capture_default_str();
  cmd->add_option("--dec-layers", f.dec_layers, "Cross-attention blocks")
      ->capture_default_str();
  cmd->add_option("--bins", f.bins, "Amplitude bins per EEG channel")
      ->capture_default_str();
  cmd->add_option("--patch", f.patch, "OM image patch side")
      ->capture_default_str();
  cmd->add_option("--image-hw", f.image_hw, "OM image side length")
      ->capture_default_str();
  cmd->add_option("--cls-hidden", f.cls_hidden, "Classifier hidden width")
      ->capture_default_str();
}

void add_train_hyper_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--epochs", f.epochs, "Training epochs")
      ->capture_default_str();
  cmd->add_option("--batch-size", f.batch_size, "Mini-batch size")
      ->capture_default_str();
  cmd->add_option("--lr-p", f.lr_p, "Model learning rate")
      ->capture_default_str();
  cmd->add_option("--lr-w", f.lr_w, "Rate-logit learning rate")
      ->capture_default_str();
  cmd->add_option("--momentum", f.momentum, "SGD momentum for both phases")
      ->capture_default_str();
  cmd->add_option("--model-steps", f.model_steps,
                  "Model updates per mini-batch")
      ->capture_default_str();
  cmd->add_option("--rate-steps", f.rate_steps,
                  "Rate updates per mini-batch")
      ->capture_default_str();
  cmd->add_option("--tau-start", f.tau_start, "Initial Gumbel temperature")
      ->capture_default_str();
  cmd->add_option("--tau-decay", f.tau_decay,
                  "Per-epoch temperature decay factor")
      ->capture_default_str();
  cmd->add_option("--tau-floor", f.tau_floor, "Temperature floor")
      ->capture_default_str();
  cmd->add_option("--train-frac", f.train_frac, "Train split fraction")
      ->capture_default_str();
  cmd->add_option("--threads", f.threads,
                  "Kernel threads (1 = serial reference)")
      ->capture_default_str();
}

trainer::TrainConfig to_train_config(const TrainFlags& f) {
  trainer::TrainConfig cfg;
  cfg.epsilon = privacy::PrivacyBudget{f.epsilon};
  cfg.non_private = f.non_private;
  cfg.init_rate = f.init_rate;
  cfg.freeze_rates = f.freeze_rates;
  cfg.epochs = f.epochs;
  cfg.batch_size = f.batch_size;
  cfg.lr_p = f.lr_p;
  cfg.lr_w = f.lr_w;
  cfg.momentum = f.momentum;
  cfg.model_steps_per_batch = f.model_steps;
  cfg.rate_steps_per_batch = f.rate_steps;
  cfg.gumbel.tau_start = f.tau_start;
  cfg.gumbel.decay_per_epoch = f.tau_decay;
  cfg.gumbel.tau_floor = f.tau_floor;
  cfg.train_frac = f.train_frac;
  cfg.seed = f.seed;
  cfg.model.d_model = f.d_model;
  cfg.model.d_k = f.d_model;
  cfg.model.d_feat = f.d_feat;
  cfg.model.d_ff = f.d_ff;
  cfg.model.encoder_layers = f.enc_layers;
  cfg.model.decoder_layers = f.dec_layers;
  cfg.model.vocab_bins = f.bins;
  cfg.model.patch = f.patch;
  cfg.model.image_hw = f.image_hw;
  cfg.model.cls_hidden = f.cls_hidden;
  cfg.policy = ExecPolicy{f.threads};
  return cfg;
}

std::string config_snapshot(const TrainFlags& f, std::uint64_t checksum) {
  std::map<std::string, std::string> kv;
  kv["data"] = f.data;
  kv["out"] = f.out;
  kv["data-checksum"] = std::to_string(checksum);
  kv["epsilon"] = fmt17(f.epsilon);
  kv["non-private"] = f.non_private ? "true" : "false";
  kv["freeze-rates"] = f.freeze_rates ? "true" : "false";
  kv["init-rate"] = fmt17(f.init_rate);
  kv["epochs"] = std::to_string(f.epochs);
  kv["batch-size"] = std::to_string(f.batch_size);
  kv["lr-p"] = fmt17(f.lr_p);
  kv["lr-w"] = fmt17(f.lr_w);
  kv["momentum"] = fmt17(f.momentum);
  kv["model-steps"] = std::to_string(f.model_steps);
  kv["rate-steps"] = std::to_string(f.rate_steps);
  kv["tau-start"] = fmt17(f.tau_start);
  kv["tau-decay"] = fmt17(f.tau_decay);
  kv["tau-floor"] = fmt17(f.tau_floor);
  kv["train-frac"] = fmt17(f.train_frac);
  kv["seed"] = std::to_string(f.seed);
  kv["threads"] = std::to_string(f.threads);
  kv["d-model"] = std::to_string(f.d_model);
  kv["d-feat"] = std::to_string(f.d_feat);
  kv["d-ff"] = std::to_string(f.d_ff);
  kv["enc-layers"] = std::to_string(f.enc_layers);
  kv["dec-layers"] = std::to_string(f.dec_layers);
  kv["bins"] = std::to_string(f.bins);
  kv["patch"] = std::to_string(f.patch);
  kv["image-hw"] = std::to_string(f.image_hw);
  kv["cls-hidden"] = std::to_string(f.cls_hidden);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string metrics_records(const std::vector<trainer::EpochMetrics>& ms) {
  std::string out;
  char buf[512];
  for (const auto& m : ms) {
    std::snprintf(buf, sizeof buf,
                  "{\"schema\":1,\"epoch\":%zu,\"train_acc\":%.17g,"
                  "\"test_acc\":%.17g,\"train_loss\":%.17g,"
                  "\"test_loss\":%.17g,\"macro_f1\":%.17g}\n",
                  m.epoch, m.train_acc, m.test_acc, m.train_loss, m.test_loss,
                  m.macro_f1);
    out += buf;
  }
  return out;
}

ordered_json mc_to_json(const audit::McResult& mc) {
  return ordered_json{{"estimate", mc.estimate},
                      {"width", mc.width},
                      {"raw", mc.raw},
                      {"usable_bins", mc.usable_bins}};
}

ordered_json report_to_json(const audit::AuditReport& rep, double threshold,
                            std::size_t violations, const char* mode) {
  ordered_json j;
  j["schema"] = 1;
  j["mode"] = mode;
  j["eps_claimed"] = rep.eps_claimed;
  j["threshold"] = threshold;
  j["max_sup"] = rep.max_sup;
  if (!rep.entries.empty()) {
    const audit::AuditEntry& w = rep.entries[rep.worst_index];
    j["worst"] = ordered_json{
        {"f1", w.f1}, {"f2", w.f2}, {"w", w.w}, {"location", w.location}};
  }
  j["margin"] = threshold - rep.max_sup;
  j["violations"] = violations;
  j["extended_range"] = rep.extended_range;
  j["pass"] = rep.extended_range || violations == 0;
  if (rep.mc_run) {
    j["mc"] = mc_to_json(rep.mc);
  } else {
    j["mc"] = nullptr;
  }
  ordered_json entries = ordered_json::array();
  for (const auto& e : rep.entries) {
    entries.push_back(ordered_json{{"f1", e.f1},
                                   {"f2", e.f2},
                                   {"w", e.w},
                                   {"sup", e.sup},
                                   {"location", e.location},
                                   {"violation", e.sup > threshold + 1e-6}});
  }
  j["entries"] = std::move(entries);
  return j;
}

void write_allocation_files(const std::string& dir,
                            const trainer::AllocationReport& rep) {
  std::string alloc = "index,block,w,b,mean_abs_f\n";
  for (std::size_t i = 0; i < rep.w.size(); ++i) {
    alloc += std::to_string(i);
    alloc += ',';
    alloc += block_name(i, rep.d_feat);
    alloc += ',';
    alloc += fmt17(rep.w[i]) + "," + fmt17(rep.b[i]) + "," +
             fmt17(rep.mean_abs_f[i]) + "\n";
  }
  write_file(dir + "/allocation.csv", alloc);

  static const std::array<const char*, 3> names{"eeg", "om", "cross"};
  std::string blocks = "block,mean_w,mean_b,mean_abs_f\n";
  for (std::size_t b = 0; b < 3; ++b) {
    blocks += std::string(names[b]) + "," + fmt17(rep.block_w[b]) + "," +
              fmt17(rep.block_b[b]) + "," + fmt17(rep.block_f[b]) + "\n";
  }
  write_file(dir + "/block_means.csv", blocks);
}

void run_train(const TrainFlags& f) {
  fs::create_directories(f.out);
  const auto dataset = data::load_external(f.data, "auto");
  const std::uint64_t checksum = fnv1a_file(f.data);
  if (!f.data_checksum.empty() &&
      f.data_checksum != std::to_string(checksum)) {
    std::cerr << "warning: dataset checksum " << checksum
              << " differs from the recorded " << f.data_checksum
              << "; this run is not a bit-exact reproduction\n";
  }

  const trainer::TrainConfig cfg = to_train_config(f);
  const trainer::TrainResult result = trainer::train(dataset, cfg);

  write_file(f.out + "/config.txt", config_snapshot(f, checksum));
  write_file(f.out + "/metrics.jsonl", metrics_records(result.metrics));

  const privacy::PerFeatureBudget budget =
      privacy::allocate_budget(result.rates, cfg.epsilon);
  std::string rates = "index,w,eps_prime,b\n";
  const std::vector<double> w = result.rates.rates();
  for (std::size_t i = 0; i < w.size(); ++i) {
    rates += std::to_string(i) + "," + fmt17(w[i]) + "," +
             fmt17(budget.eps_prime[i]) + "," + fmt17(budget.scales[i]) + "\n";
  }
  write_file(f.out + "/rates.csv", rates);

  write_allocation_files(
      f.out, trainer::allocation_report(result.model, result.rates,
                                        cfg.epsilon, dataset, cfg.policy));

  if (f.non_private) {
    write_file(f.out + "/audit.json",
               ordered_json{{"schema", 1},
                            {"mode", "non-private"},
                            {"skipped", true}}
                       .dump(2) +
                   "\n");
  } else {
    // Audit the mechanism at the learned rates over the canonical pair grid.
    audit::AuditConfig acfg;
    acfg.policy = cfg.policy;
    const audit::AuditReport rep = audit::audit_mechanism(
        cfg.epsilon, w, grid_pairs(0.25), acfg);
    write_file(f.out + "/audit.json",
               report_to_json(rep, f.epsilon, rep.violations, "element-wise")
                       .dump(2) +
                   "\n");
  }

  for (const auto& m : result.metrics) {
    std::cout << "epoch " << m.epoch << ": train_loss "
              << fmt9(m.train_loss) << " train_acc " << fmt9(m.train_acc)
              << " test_acc " << fmt9(m.test_acc) << " macro_f1 "
              << fmt9(m.macro_f1) << "\n";
  }
  std::cout << "run artifact written to " << f.out << "\n";
}

// ---- gen-data ----

struct GenFlags {
  std::string out = "dataset.jsonl";
  std::string format = "jsonl";
  std::size_t n = 3000;
  std::size_t channels = 8;
  std::size_t om_dims = 4;
  std::size_t timesteps = 128;
  double balance = 0.5;
  double noise_sd = 0.25;
  std::uint64_t seed = 42;
};

void run_gen_data(const GenFlags& f) {
  data::GeneratorConfig g;
  g.n_samples = f.n;
  g.eeg_channels = f.channels;
  g.om_dims = f.om_dims;
  g.timesteps = f.timesteps;
  g.class_balance = f.balance;
  g.noise_sd = f.noise_sd;
  g.seed = f.seed;
  const auto dataset = data::generate(g);
  std::size_t ones = 0;
  for (const auto& s : dataset) ones += s.label == 1 ? 1 : 0;

  std::string manifest_path;
  if (f.format == "jsonl") {
    data::save_jsonl(dataset, f.out);
    manifest_path = f.out + ".manifest.json";
  } else {
    data::save_csv(dataset, f.out);
    manifest_path = f.out + "/generator.json";
  }
  ordered_json manifest{
      {"schema", 1},
      {"format", f.format},
      {"n_samples", f.n},
      {"class_counts", {dataset.size() - ones, ones}},
      {"generator",
       ordered_json{{"eeg_channels", f.channels},
                    {"om_dims", f.om_dims},
                    {"timesteps", f.timesteps},
                    {"class_balance", f.balance},
                    {"noise_sd", f.noise_sd},
                    {"seed", f.seed}}}};
  if (f.format == "jsonl") {
    // Lets the manifest itself be passed to --data.
    manifest["file"] = fs::path(f.out).filename().string();
  }
  write_file(manifest_path, manifest.dump(2) + "\n");
  std::cout << "wrote " << dataset.size() << " samples ("
            << dataset.size() - ones << " class 0, " << ones
            << " class 1) to " << f.out << "\n";
}

// ---- allocate ----

void run_allocate(double epsilon, const std::vector<double>& w) {
  const privacy::PrivacyBudget eps{epsilon};
  const privacy::PerFeatureBudget budget = privacy::allocate_budget(w, eps);
  std::cout << "w,eps_prime,b,identity\n";
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double identity =
        w[i] + (1.0 - w[i]) * std::exp(budget.eps_prime[i]);
    std::cout << fmt9(w[i]) << "," << fmt9(budget.eps_prime[i]) << ","
              << fmt9(budget.scales[i]) << "," << fmt9(identity) << "\n";
  }
  std::cout << "# identity column must equal e^epsilon = "
            << fmt9(std::exp(epsilon)) << "\n";
}

// ---- audit ----

struct AuditFlags {
  double epsilon = 1.0;
  std::vector<double> w_grid;
  double pairs_step = 0.25;
  std::string pairs_file;
  std::size_t mc_draws = 0;
  std::size_t mc_bins = 2000;
  std::uint64_t mc_seed = 42;
  bool extended_range = false;
  double assert_epsilon = std::numeric_limits<double>::quiet_NaN();
  double uniform_mu = std::numeric_limits<double>::quiet_NaN();
  double uniform_eps_prime = std::numeric_limits<double>::quiet_NaN();
  std::string out = "audit.json";
  int threads = 1;
};

int run_audit(const AuditFlags& f) {
  const std::vector<double> w_grid =
      f.w_grid.empty() ? default_w_grid() : f.w_grid;
  const auto pairs = f.pairs_file.empty() ? grid_pairs(f.pairs_step)
                                          : pairs_from_file(f.pairs_file);
  const double threshold =
      std::isnan(f.assert_epsilon) ? f.epsilon : f.assert_epsilon;

  const bool has_mu = !std::isnan(f.uniform_mu);
  const bool has_ep = !std::isnan(f.uniform_eps_prime);
  if (has_mu != has_ep) {
    throw ConfigError(
        "--uniform-mu and --uniform-eps-prime must be given together");
  }

  audit::AuditReport rep;
  const char* mode = "element-wise";
  if (has_mu) {
    // Uniform-rate scheme: every coordinate noised at b = 1/eps' and dropped
    // with probability mu, regardless of the claimed budget.
    mode = "uniform";
    if (!(f.uniform_eps_prime > 0.0)) {
      throw ConfigError("--uniform-eps-prime must be positive");
    }
    rep.eps_claimed = f.epsilon;
    rep.extended_range = f.extended_range;
    const double b = 1.0 / f.uniform_eps_prime;
    for (const auto& [f1, f2] : pairs) {
      if (!f.extended_range &&
          (f1 < 0.0 || f1 > 1.0 || f2 < 0.0 || f2 > 1.0)) {
        throw ConfigError("pair values must lie in [0, 1]");
      }
      const audit::SupResult s =
          audit::sup_log_ratio_scaled(f1, f2, f.uniform_mu, b);
      rep.entries.push_back(audit::AuditEntry{f1, f2, f.uniform_mu, s.value,
                                              s.location, false});
    }
    for (std::size_t i = 0; i < rep.entries.size(); ++i) {
      if (rep.entries[i].sup > rep.max_sup) {
        rep.max_sup = rep.entries[i].sup;
        rep.worst_index = i;
      }
    }
  } else {
    audit::AuditConfig cfg;
    cfg.mc_draws = f.mc_draws;
    cfg.mc_bins = f.mc_bins;
    cfg.mc_seed = f.mc_seed;
    cfg.extended_range = f.extended_range;
    cfg.policy = ExecPolicy{f.threads};
    rep = audit::audit_mechanism(privacy::PrivacyBudget{f.epsilon}, w_grid,
                                 pairs, cfg);
  }

  std::size_t violations = 0;
  for (const auto& e : rep.entries) {
    violations += e.sup > threshold + 1e-6 ? 1 : 0;
  }
  write_file(f.out, report_to_json(rep, threshold, violations, mode).dump(2) +
                        "\n");

  const audit::AuditEntry& worst = rep.entries[rep.worst_index];
  std::cout << mode << " audit over " << rep.entries.size()
            << " cases: max sup " << fmt9(rep.max_sup) << " at pair ("
            << fmt9(worst.f1) << "," << fmt9(worst.f2) << ") w "
            << fmt9(worst.w) << " [" << worst.location << "], threshold "
            << fmt9(threshold) << ", margin "
            << fmt9(threshold - rep.max_sup) << ", violations "
            << violations << "\n";
  if (rep.mc_run) {
    std::cout << "monte carlo at worst pair: estimate "
              << fmt9(rep.mc.estimate) << " +- " << fmt9(rep.mc.width)
              << " (plug-in max " << fmt9(rep.mc.raw) << ", "
              << rep.mc.usable_bins << " usable bins)\n";
  }
  std::cout << "report written to " << f.out << "\n";
  if (rep.extended_range) {
    std::cout << "extended range: descriptive only, no verdict\n";
    return 0;
  }
  return violations > 0 ? 4 : 0;
}

// ---- benchmark ----

struct BenchFlags {
  TrainFlags train;  // shared hyperparameters; data/epsilon/seed reused
  std::vector<double> epsilons{0.01, 0.1, 1.0};
  std::size_t seeds = 5;
  std::string out = "benchmark.csv";
};

struct CellStats {
  double acc_mean = 0.0, acc_sd = 0.0, f1_mean = 0.0, f1_sd = 0.0;
};

std::pair<double, double> best_epoch(const trainer::TrainResult& r) {
  double best_acc = 0.0, f1_at = 0.0;
  for (const auto& m : r.metrics) {
    if (m.test_acc > best_acc) {
      best_acc = m.test_acc;
      f1_at = m.macro_f1;
    }
  }
  return {best_acc, f1_at};
}

CellStats run_cell(const std::vector<data::ModalitySample>& dataset,
                   trainer::TrainConfig cfg, std::uint64_t base_seed,
                   std::size_t seeds) {
  std::vector<double> accs, f1s;
  for (std::size_t i = 0; i < seeds; ++i) {
    cfg.seed = base_seed + i;
    const auto [acc, f1] = best_epoch(trainer::train(dataset, cfg));
    accs.push_back(acc);
    f1s.push_back(f1);
  }
  const auto mean_sd = [](const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    const double sd = xs.size() > 1
                          ? std::sqrt(v / static_cast<double>(xs.size() - 1))
                          : 0.0;
    return std::make_pair(m, sd);
  };
  CellStats out;
  std::tie(out.acc_mean, out.acc_sd) = mean_sd(accs);
  std::tie(out.f1_mean, out.f1_sd) = mean_sd(f1s);
  return out;
}

void run_benchmark(const BenchFlags& f) {
  if (f.seeds == 0) throw ConfigError("--seeds must be positive");
  const auto dataset = data::load_external(f.train.data, "auto");
  const trainer::TrainConfig base = to_train_config(f.train);

  std::string csv = "scheme,epsilon,mu,acc_mean,acc_sd,f1_mean,f1_sd,seeds\n";
  const auto add_row = [&](const std::string& scheme, const std::string& eps,
                           const std::string& mu, const CellStats& c) {
    csv += scheme + "," + eps + "," + mu + "," + fmt9(c.acc_mean) + "," +
           fmt9(c.acc_sd) + "," + fmt9(c.f1_mean) + "," + fmt9(c.f1_sd) +
           "," + std::to_string(f.seeds) + "\n";
  };

  std::vector<CellStats> private_cells;
  for (const double eps : f.epsilons) {
    trainer::TrainConfig cfg = base;
    cfg.epsilon = privacy::PrivacyBudget{eps};
    cfg.non_private = false;
    const CellStats cell = run_cell(dataset, cfg, f.train.seed, f.seeds);
    private_cells.push_back(cell);
    add_row("element-wise", fmt9(eps), "-", cell);

    // Uniform baseline: sweep the shared rate and keep the best cell.
    CellStats best;
    double best_mu = 0.0;
    for (int m = 1; m <= 9; ++m) {
      const double mu = static_cast<double>(m) / 10.0;
      trainer::TrainConfig ucfg = cfg;
      ucfg.freeze_rates = true;
      ucfg.init_rate = mu;
      const CellStats cell_u = run_cell(dataset, ucfg, f.train.seed, f.seeds);
      if (cell_u.acc_mean > best.acc_mean) {
        best = cell_u;
        best_mu = mu;
      }
    }
    private_cells.push_back(best);
    add_row("uniform", fmt9(eps), fmt9(best_mu), best);
  }

  trainer::TrainConfig np = base;
  np.non_private = true;
  const CellStats np_cell = run_cell(dataset, np, f.train.seed, f.seeds);
  add_row("non-private", "-", "-", np_cell);

  for (const CellStats& c : private_cells) {
    if (np_cell.acc_mean < c.acc_mean - np_cell.acc_sd) {
      std::cout << "warning: non-private mean accuracy "
                << fmt9(np_cell.acc_mean)
                << " trails a private cell's " << fmt9(c.acc_mean)
                << " by more than one standard deviation\n";
    }
  }

  write_file(f.out, csv);
  std::cout << csv;
  std::cout << "table written to " << f.out << "\n";
}

// ---- report ----

void run_report(const std::string& run_dir) {
  const std::string path = run_dir + "/allocation.csv";
  std::ifstream in(path);
  if (!in) throw DataError("run artifact missing " + path);
  std::string line;
  if (!std::getline(in, line) || line != "index,block,w,b,mean_abs_f") {
    throw DataError(path + ": unexpected header");
  }
  std::map<std::string, std::vector<std::array<double, 3>>> blocks;
  std::vector<std::string> order;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string idx, block, ws, bs, fs_;
    if (!std::getline(row, idx, ',') || !std::getline(row, block, ',') ||
        !std::getline(row, ws, ',') || !std::getline(row, bs, ',') ||
        !std::getline(row, fs_)) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": expected 5 columns");
    }
    try {
      blocks[block].push_back(
          {std::stod(ws), std::stod(bs), std::stod(fs_)});
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": non-numeric value");
    }
    if (blocks[block].size() == 1) order.push_back(block);
  }
  if (blocks.empty()) throw DataError(path + ": no allocation rows");
  const std::size_t per = blocks.begin()->second.size();
  for (const auto& [name, rows] : blocks) {
    if (rows.size() != per) {
      throw DataError(path + ": block " + name + " holds " +
                      std::to_string(rows.size()) + " rows, expected " +
                      std::to_string(per));
    }
  }

  std::string out_csv = "block,mean_w,mean_b,mean_abs_f\n";
  std::cout << "block,mean_w,mean_b,mean_abs_f\n";
  for (const std::string& name : order) {
    std::array<double, 3> acc{0.0, 0.0, 0.0};
    for (const auto& row : blocks[name]) {
      for (int i = 0; i < 3; ++i) acc[i] += row[i];
    }
    for (double& x : acc) x /= static_cast<double>(per);
    const std::string row_txt = name + "," + fmt17(acc[0]) + "," +
                                fmt17(acc[1]) + "," + fmt17(acc[2]) + "\n";
    out_csv += row_txt;
    std::cout << name << "," << fmt9(acc[0]) << "," << fmt9(acc[1]) << ","
              << fmt9(acc[2]) << "\n";
  }
  write_file(run_dir + "/block_means.csv", out_csv);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Element-wise Laplacian dropout: private two-modality feature release "
      "with learned per-feature drop rates"};
  app.require_subcommand(1);
  // Repeating a scalar flag keeps the last value, so callers can append
  // overrides to a saved flag line.
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  int rc = 0;

  GenFlags gen;
  auto* cmd_gen = app.add_subcommand(
      "gen-data", "Generate the synthetic two-modality dataset");
  cmd_gen->add_option("--out", gen.out,
                      "Output file (jsonl) or directory (csv)")
      ->capture_default_str();
  cmd_gen->add_option("--format", gen.format, "Dataset format")
      ->check(CLI::IsMember({"jsonl", "csv"}))
      ->capture_default_str();
  cmd_gen->add_option("--n", gen.n, "Sample count")->capture_default_str();
  cmd_gen->add_option("--channels", gen.channels, "EEG channels")
      ->capture_default_str();
  cmd_gen->add_option("--om-dims", gen.om_dims, "Other-modality dimensions")
      ->capture_default_str();
  cmd_gen->add_option("--timesteps", gen.timesteps, "Timesteps per sample")
      ->capture_default_str();
  cmd_gen->add_option("--balance", gen.balance, "P(label = 1)")
      ->capture_default_str();
  cmd_gen->add_option("--noise-sd", gen.noise_sd, "Additive noise level")
      ->capture_default_str();
  auto* gen_seed = cmd_gen->add_option("--seed", gen.seed, "Generator seed");
  cmd_gen->callback([&] {
    if (gen_seed->count() == 0) gen.seed = default_seed();
    run_gen_data(gen);
  });

  TrainFlags tf;
  std::string train_config_path;
  auto* cmd_train =
      app.add_subcommand("train", "Run the two-step alternating trainer");
  cmd_train->add_option("--config", train_config_path,
                        "Key=value config snapshot; flags override");
  cmd_train->add_option("--data", tf.data,
                        "Dataset path (jsonl or manifest)");
  cmd_train->add_option("--out", tf.out, "Run artifact directory");
  cmd_train->add_option("--epsilon", tf.epsilon, "Total privacy budget")
      ->capture_default_str();
  cmd_train->add_flag("--non-private", tf.non_private,
                      "Identity release: no mask, no noise, no rate steps");
  cmd_train->add_flag("--freeze-rates", tf.freeze_rates,
                      "Keep rates at --init-rate (uniform baseline)");
  cmd_train->add_option("--init-rate", tf.init_rate, "Initial drop rate")
      ->capture_default_str();
  cmd_train->add_option("--data-checksum", tf.data_checksum,
                        "Expected dataset checksum (from a config snapshot)");
  auto* train_seed = cmd_train->add_option("--seed", tf.seed, "Run seed");
  add_train_hyper_flags(cmd_train, tf);
  add_model_flags(cmd_train, tf);
  cmd_train->callback([&] {
    if (!train_config_path.empty()) {
      apply_config_file(cmd_train, train_config_path);
    }
    if (train_seed->count() == 0) tf.seed = default_seed();
    if (tf.data.empty() || tf.out.empty()) {
      throw ConfigError("train needs --data and --out (flag or config key)");
    }
    run_train(tf);
  });

  double alloc_eps = 1.0;
  std::vector<double> alloc_w;
  auto* cmd_alloc = app.add_subcommand(
      "allocate", "Print per-feature budgets for given drop rates");
  cmd_alloc->add_option("--epsilon", alloc_eps, "Total privacy budget")
      ->capture_default_str();
  cmd_alloc->add_option("--w", alloc_w, "Comma-separated drop rates")
      ->delimiter(',')
      ->required();
  cmd_alloc->callback([&] { run_allocate(alloc_eps, alloc_w); });

  AuditFlags af;
  auto* cmd_audit = app.add_subcommand(
      "audit", "Verify the claimed budget against the analytic sup");
  cmd_audit->add_option("--epsilon", af.epsilon, "Claimed privacy budget")
      ->capture_default_str();
  cmd_audit->add_option("--w-grid", af.w_grid,
                        "Comma-separated drop rates (default 0.1..0.9)")
      ->delimiter(',');
  cmd_audit->add_option("--pairs-step", af.pairs_step,
                        "Pair grid step over [0,1]^2")
      ->capture_default_str();
  cmd_audit->add_option("--pairs-file", af.pairs_file,
                        "File of 'f1,f2' lines (overrides the grid)");
  cmd_audit->add_option("--mc-draws", af.mc_draws,
                        "Monte Carlo draws per side (0 = off)")
      ->capture_default_str();
  cmd_audit->add_option("--mc-bins", af.mc_bins, "Monte Carlo histogram bins")
      ->capture_default_str();
  auto* mc_seed =
      cmd_audit->add_option("--mc-seed", af.mc_seed, "Monte Carlo seed");
  cmd_audit->add_flag("--extended-range", af.extended_range,
                      "Allow pairs outside [0,1]; descriptive, no verdict");
  cmd_audit->add_option("--assert-epsilon", af.assert_epsilon,
                        "Verdict threshold (defaults to --epsilon)");
  cmd_audit->add_option("--uniform-mu", af.uniform_mu,
                        "Audit the uniform scheme at this drop rate");
  cmd_audit->add_option("--uniform-eps-prime", af.uniform_eps_prime,
                        "Uniform scheme per-feature budget");
  cmd_audit->add_option("--out", af.out, "Report path")
      ->capture_default_str();
  cmd_audit->add_option("--threads", af.threads, "Audit threads")
      ->capture_default_str();
  cmd_audit->callback([&] {
    if (mc_seed->count() == 0) af.mc_seed = default_seed();
    rc = run_audit(af);
  });

  BenchFlags bf;
  auto* cmd_bench = app.add_subcommand(
      "benchmark",
      "Compare element-wise, uniform-baseline, and non-private training "
      "(expensive at defaults: epsilons x (1 + 9 uniform rates) x seeds runs)");
  cmd_bench->add_option("--data", bf.train.data, "Dataset path")->required();
  cmd_bench->add_option("--epsilons", bf.epsilons,
                        "Comma-separated budgets to sweep")
      ->delimiter(',')
      ->capture_default_str();
  cmd_bench->add_option("--seeds", bf.seeds, "Seeds per cell")
      ->capture_default_str();
  auto* bench_seed =
      cmd_bench->add_option("--seed", bf.train.seed, "Base seed");
  cmd_bench->add_option("--out", bf.out, "Output table path")
      ->capture_default_str();
  add_train_hyper_flags(cmd_bench, bf.train);
  add_model_flags(cmd_bench, bf.train);
  cmd_bench->callback([&] {
    if (bench_seed->count() == 0) bf.train.seed = default_seed();
    run_benchmark(bf);
  });

  std::string report_run;
  auto* cmd_report = app.add_subcommand(
      "report", "Summarize a run's budget allocation per feature block");
  cmd_report->add_option("--run", report_run, "Run artifact directory")
      ->required();
  cmd_report->callback([&] { run_report(report_run); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
