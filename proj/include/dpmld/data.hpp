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

// Synthetic two-modality dataset: an EEG-like multichannel signal and a
// lower-dimensional other-modality (OM) signal, with a class-conditional
// burst/variance-shift pattern whose strength is shared between the two
// modalities. Also: deterministic splitting and file ingestion.

#ifndef DPMLD_DATA_HPP_
#define DPMLD_DATA_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace dpmld::data {

struct ModalitySample {
  std::size_t eeg_channels = 0;
  std::size_t om_dims = 0;
  std::size_t timesteps = 0;
  std::vector<double> eeg;  // row-major [eeg_channels x timesteps]
  std::vector<double> om;   // row-major [om_dims x timesteps]
  int label = 0;            // binary task: 0 or 1
};

struct GeneratorConfig {
  std::size_t n_samples = 3000;
  std::size_t eeg_channels = 8;
  std::size_t om_dims = 4;
  std::size_t timesteps = 128;
  double class_balance = 0.5;  // P(label = 1)
  double noise_sd = 0.25;
  std::uint64_t seed = 42;
};

// Pure function of cfg. Values are quantized to 9 significant digits at
// generation time so that text serialization round-trips bit-exactly.
std::vector<ModalitySample> generate(const GeneratorConfig& cfg);

// Deterministic shuffled split; throws DataError if either side ends up
// missing a class.
std::pair<std::vector<ModalitySample>, std::vector<ModalitySample>> split(
    const std::vector<ModalitySample>& dataset, double train_frac,
    std::uint64_t seed);

// One JSON object per line with fields eeg_shape, eeg, om_shape, om, label.
// Numbers are written with 9 significant digits.
void save_jsonl(const std::vector<ModalitySample>& dataset,
                const std::string& path);
std::vector<ModalitySample> load_jsonl(const std::string& path);

// Comma-separated matrices (one sample per row) plus manifest.json naming
// shapes and file names; written into directory `dir`.
void save_csv(const std::vector<ModalitySample>& dataset,
              const std::string& dir);
std::vector<ModalitySample> load_csv_manifest(const std::string& manifest_path);

// format: "jsonl", "csv" (path = manifest), or "auto" (by file name/content).
std::vector<ModalitySample> load_external(const std::string& path,
                                          const std::string& format = "auto");

}  // namespace dpmld::data

#endif  // DPMLD_DATA_HPP_
