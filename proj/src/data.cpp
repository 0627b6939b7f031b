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

#include "dpmld/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dpmld/errors.hpp"
#include "dpmld/random.hpp"
#include "dpmld/util.hpp"

namespace dpmld::data {

namespace {

using nlohmann::json;

double normal(RandomStream& rng) {
  const double u1 = rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

void check_cfg(const GeneratorConfig& cfg) {
  if (cfg.n_samples == 0 || cfg.eeg_channels == 0 || cfg.om_dims == 0 ||
      cfg.timesteps < 2) {
    throw ConfigError("generator: counts must be positive (timesteps >= 2)");
  }
  if (!(cfg.class_balance > 0.0 && cfg.class_balance < 1.0)) {
    throw ConfigError("generator: class_balance must be in (0,1)");
  }
  if (!(cfg.noise_sd >= 0.0) || !std::isfinite(cfg.noise_sd)) {
    throw ConfigError("generator: noise_sd must be finite and >= 0");
  }
}

[[noreturn]] void fail_at(const std::string& path, std::size_t line,
                          const std::string& msg) {
  throw DataError(path + ":" + std::to_string(line) + ": " + msg);
}

void append_number_array(std::string& out, const std::vector<double>& v) {
  out += '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_sig(v[i], 9);
  }
  out += ']';
}

std::vector<double> read_number_array(const json& j, const char* key,
                                      const std::string& path,
                                      std::size_t line) {
  if (!j.contains(key) || !j[key].is_array()) {
    fail_at(path, line, std::string("missing numeric array '") + key + "'");
  }
  std::vector<double> out;
  out.reserve(j[key].size());
  for (const auto& e : j[key]) {
    if (!e.is_number()) {
      fail_at(path, line, std::string("non-numeric entry in '") + key + "'");
    }
    const double v = e.get<double>();
    if (!std::isfinite(v)) {
      fail_at(path, line, std::string("non-finite entry in '") + key + "'");
    }
    out.push_back(v);
  }
  return out;
}

std::pair<std::size_t, std::size_t> read_shape(const json& j, const char* key,
                                               const std::string& path,
                                               std::size_t line) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != 2 ||
      !j[key][0].is_number_integer() || !j[key][1].is_number_integer()) {
    fail_at(path, line, std::string("'") + key + "' must be [rows, cols]");
  }
  const long long r = j[key][0].get<long long>();
  const long long c = j[key][1].get<long long>();
  if (r <= 0 || c <= 0) {
    fail_at(path, line, std::string("'") + key + "' must be positive");
  }
  return {static_cast<std::size_t>(r), static_cast<std::size_t>(c)};
}

std::vector<double> parse_csv_row(const std::string& line,
                                  std::size_t expected,
                                  const std::string& path, std::size_t lineno) {
  std::vector<double> out;
  out.reserve(expected);
  const char* p = line.c_str();
  while (true) {
    char* end = nullptr;
    const double v = std::strtod(p, &end);
    if (end == p) fail_at(path, lineno, "expected a number");
    if (!std::isfinite(v)) fail_at(path, lineno, "non-finite value");
    out.push_back(v);
    p = end;
    while (*p == ' ') ++p;
    if (*p == ',') {
      ++p;
      continue;
    }
    if (*p == '\0' || *p == '\r') break;
    fail_at(path, lineno, "unexpected character in row");
  }
  if (out.size() != expected) {
    fail_at(path, lineno, "expected " + std::to_string(expected) +
                              " values, got " + std::to_string(out.size()));
  }
  return out;
}

std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

json parse_json_file(const std::string& path) {
  std::ifstream in = open_or_throw(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace

std::vector<ModalitySample> generate(const GeneratorConfig& cfg) {
  check_cfg(cfg);
  RandomStream master(cfg.seed);
  const std::size_t t_n = cfg.timesteps;
  const std::size_t burst_len = t_n / 2;
  std::vector<ModalitySample> out;
  out.reserve(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    RandomStream rng = master.fork(i);
    ModalitySample s;
    s.eeg_channels = cfg.eeg_channels;
    s.om_dims = cfg.om_dims;
    s.timesteps = t_n;
    s.label = rng.uniform() < cfg.class_balance ? 1 : 0;
    const double amp = 0.8 + 0.4 * rng.uniform();

    s.eeg.assign(cfg.eeg_channels * t_n, 0.0);
    for (std::size_t c = 0; c < cfg.eeg_channels; ++c) {
      double x = 0.0;
      for (std::size_t t = 0; t < t_n; ++t) {
        x = 0.9 * x + cfg.noise_sd * normal(rng);
        s.eeg[c * t_n + t] = x;
      }
    }
    if (s.label == 1) {
      std::vector<char> in_subset(cfg.eeg_channels, 0);
      bool any = false;
      for (std::size_t c = 0; c < cfg.eeg_channels; ++c) {
        in_subset[c] = rng.uniform() < 0.5 ? 1 : 0;
        any = any || in_subset[c];
      }
      if (!any) in_subset[0] = 1;
      const double cycles = 4.0 + std::floor(4.0 * rng.uniform());
      const double phase = 2.0 * M_PI * rng.uniform();
      std::size_t start = static_cast<std::size_t>(
          rng.uniform() * static_cast<double>(t_n - burst_len + 1));
      start = std::min(start, t_n - burst_len);
      for (std::size_t c = 0; c < cfg.eeg_channels; ++c) {
        if (!in_subset[c]) continue;
        for (std::size_t t = start; t < start + burst_len; ++t) {
          const double u =
              static_cast<double>(t - start) / static_cast<double>(burst_len);
          s.eeg[c * t_n + t] += amp * std::sin(2.0 * M_PI * cycles * u + phase);
        }
      }
    }

    s.om.assign(cfg.om_dims * t_n, 0.0);
    for (std::size_t d = 0; d < cfg.om_dims; ++d) {
      double y = 0.0;
      for (std::size_t t = 0; t < t_n; ++t) {
        double innov = 0.2 * cfg.noise_sd * normal(rng);
        if (s.label == 1 && t >= t_n / 2) innov += 0.3 * amp * normal(rng);
        y += innov;
        s.om[d * t_n + t] = y;
      }
    }

    for (double& v : s.eeg) v = quantize_sig9(v);
    for (double& v : s.om) v = quantize_sig9(v);
    out.push_back(std::move(s));
  }
  return out;
}

std::pair<std::vector<ModalitySample>, std::vector<ModalitySample>> split(
    const std::vector<ModalitySample>& dataset, double train_frac,
    std::uint64_t seed) {
  if (dataset.empty()) throw DataError("split: empty dataset");
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw ConfigError("split: train_frac must be in (0,1)");
  }
  const std::size_t n = dataset.size();
  const std::size_t k = static_cast<std::size_t>(
      std::llround(train_frac * static_cast<double>(n)));
  if (k == 0 || k >= n) {
    throw DataError("split: fraction leaves one side empty");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  RandomStream rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    std::size_t j = static_cast<std::size_t>(rng.uniform() *
                                             static_cast<double>(i + 1));
    j = std::min(j, i);
    std::swap(idx[i], idx[j]);
  }
  std::pair<std::vector<ModalitySample>, std::vector<ModalitySample>> out;
  out.first.reserve(k);
  out.second.reserve(n - k);
  for (std::size_t i = 0; i < n; ++i) {
    (i < k ? out.first : out.second).push_back(dataset[idx[i]]);
  }
  for (const auto* side : {&out.first, &out.second}) {
    bool has0 = false, has1 = false;
    for (const auto& s : *side) {
      has0 = has0 || s.label == 0;
      has1 = has1 || s.label == 1;
    }
    if (!has0 || !has1) {
      throw DataError("split: a class is missing from one side");
    }
  }
  return out;
}

void save_jsonl(const std::vector<ModalitySample>& dataset,
                const std::string& path) {
  std::ofstream outf(path);
  if (!outf) throw DataError("cannot write " + path);
  std::string line;
  for (const auto& s : dataset) {
    line.clear();
    line += "{\"eeg_shape\":[";
    line += std::to_string(s.eeg_channels);
    line += ',';
    line += std::to_string(s.timesteps);
    line += "],\"eeg\":";
    append_number_array(line, s.eeg);
    line += ",\"om_shape\":[";
    line += std::to_string(s.om_dims);
    line += ',';
    line += std::to_string(s.timesteps);
    line += "],\"om\":";
    append_number_array(line, s.om);
    line += ",\"label\":";
    line += std::to_string(s.label);
    line += "}\n";
    outf << line;
  }
  if (!outf) throw DataError("write failed: " + path);
}

std::vector<ModalitySample> load_jsonl(const std::string& path) {
  std::ifstream in = open_or_throw(path);
  std::vector<ModalitySample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail_at(path, lineno, e.what());
    }
    ModalitySample s;
    const auto [ec, et] = read_shape(j, "eeg_shape", path, lineno);
    const auto [oc, ot] = read_shape(j, "om_shape", path, lineno);
    if (et != ot) fail_at(path, lineno, "eeg and om timestep counts differ");
    s.eeg_channels = ec;
    s.om_dims = oc;
    s.timesteps = et;
    s.eeg = read_number_array(j, "eeg", path, lineno);
    s.om = read_number_array(j, "om", path, lineno);
    if (s.eeg.size() != ec * et) {
      fail_at(path, lineno, "eeg length does not match eeg_shape");
    }
    if (s.om.size() != oc * ot) {
      fail_at(path, lineno, "om length does not match om_shape");
    }
    if (!j.contains("label") || !j["label"].is_number_integer()) {
      fail_at(path, lineno, "missing integer 'label'");
    }
    const long long y = j["label"].get<long long>();
    if (y != 0 && y != 1) {
      fail_at(path, lineno, "label " + std::to_string(y) + " outside {0,1}");
    }
    s.label = static_cast<int>(y);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw DataError(path + ": no records");
  return out;
}

void save_csv(const std::vector<ModalitySample>& dataset,
              const std::string& dir) {
  if (dataset.empty()) throw DataError("save_csv: empty dataset");
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto& first = dataset.front();
  auto write_matrix = [&](const std::string& name, bool eeg) {
    std::ofstream f(fs::path(dir) / name);
    if (!f) throw DataError("cannot write " + name + " in " + dir);
    std::string line;
    for (const auto& s : dataset) {
      const auto& v = eeg ? s.eeg : s.om;
      line.clear();
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) line += ',';
        line += format_sig(v[i], 9);
      }
      line += '\n';
      f << line;
    }
  };
  write_matrix("eeg.csv", true);
  write_matrix("om.csv", false);
  {
    std::ofstream f(fs::path(dir) / "labels.csv");
    if (!f) throw DataError("cannot write labels.csv in " + dir);
    for (const auto& s : dataset) f << s.label << '\n';
  }
  json manifest;
  manifest["format"] = "csv";
  manifest["n_samples"] = dataset.size();
  manifest["eeg_channels"] = first.eeg_channels;
  manifest["om_dims"] = first.om_dims;
  manifest["timesteps"] = first.timesteps;
  manifest["eeg_file"] = "eeg.csv";
  manifest["om_file"] = "om.csv";
  manifest["labels_file"] = "labels.csv";
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) throw DataError("cannot write manifest.json in " + dir);
  f << manifest.dump(2) << '\n';
}

std::vector<ModalitySample> load_csv_manifest(
    const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const json m = parse_json_file(manifest_path);
  for (const char* key : {"n_samples", "eeg_channels", "om_dims", "timesteps",
                          "eeg_file", "om_file", "labels_file"}) {
    if (!m.contains(key)) {
      throw DataError(manifest_path + ": missing key '" + key + "'");
    }
  }
  const std::size_t n = m["n_samples"].get<std::size_t>();
  const std::size_t ec = m["eeg_channels"].get<std::size_t>();
  const std::size_t od = m["om_dims"].get<std::size_t>();
  const std::size_t ts = m["timesteps"].get<std::size_t>();
  if (n == 0 || ec == 0 || od == 0 || ts == 0) {
    throw DataError(manifest_path + ": counts must be positive");
  }
  const fs::path dir = fs::path(manifest_path).parent_path();
  std::vector<ModalitySample> out(n);
  for (auto& s : out) {
    s.eeg_channels = ec;
    s.om_dims = od;
    s.timesteps = ts;
  }
  auto read_matrix = [&](const std::string& name, bool eeg,
                         std::size_t expected) {
    const std::string path = (dir / name).string();
    std::ifstream f = open_or_throw(path);
    std::string line;
    std::size_t lineno = 0, si = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      if (si >= n) fail_at(path, lineno, "more rows than n_samples");
      auto row = parse_csv_row(line, expected, path, lineno);
      (eeg ? out[si].eeg : out[si].om) = std::move(row);
      ++si;
    }
    if (si != n) {
      throw DataError(path + ": expected " + std::to_string(n) +
                      " rows, got " + std::to_string(si));
    }
  };
  read_matrix(m["eeg_file"].get<std::string>(), true, ec * ts);
  read_matrix(m["om_file"].get<std::string>(), false, od * ts);
  {
    const std::string path = (dir / m["labels_file"].get<std::string>()).string();
    std::ifstream f = open_or_throw(path);
    std::string line;
    std::size_t lineno = 0, si = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      if (si >= n) fail_at(path, lineno, "more labels than n_samples");
      char* end = nullptr;
      const long long y = std::strtoll(line.c_str(), &end, 10);
      if (end == line.c_str() || (y != 0 && y != 1)) {
        fail_at(path, lineno, "label must be 0 or 1");
      }
      out[si].label = static_cast<int>(y);
      ++si;
    }
    if (si != n) {
      throw DataError(path + ": expected " + std::to_string(n) + " labels");
    }
  }
  return out;
}

std::vector<ModalitySample> load_external(const std::string& path,
                                          const std::string& format) {
  if (format == "jsonl") return load_jsonl(path);
  if (format == "csv") return load_csv_manifest(path);
  if (format != "auto") {
    throw ConfigError("unknown dataset format '" + format + "'");
  }
  if (path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl") {
    return load_jsonl(path);
  }
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
    const json m = parse_json_file(path);
    const std::string fmt =
        m.contains("format") ? m["format"].get<std::string>() : "";
    if (fmt == "csv") return load_csv_manifest(path);
    if (fmt == "jsonl" && m.contains("file")) {
      namespace fs = std::filesystem;
      return load_jsonl(
          (fs::path(path).parent_path() / m["file"].get<std::string>())
              .string());
    }
    throw DataError(path + ": manifest does not name a known format");
  }
  throw DataError("cannot infer dataset format from " + path);
}

}  // namespace dpmld::data
