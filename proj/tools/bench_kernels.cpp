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

// Times every dense kernel and the audit sweep serially and with the OpenMP
// policy, and fails if the two paths are not bit-identical. The serial loop
// is the reference implementation; the parallel one must match it exactly.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "dpmld/audit.hpp"
#include "dpmld/kernels.hpp"
#include "dpmld/parallel.hpp"
#include "dpmld/random.hpp"

using namespace dpmld;

namespace {

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  RandomStream rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = 2.0 * rng.uniform() - 1.0;
  return v;
}

double time_best_ms(int reps, const std::function<void()>& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0)
                              .count());
  }
  return best;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

struct Row {
  std::string name;
  double macs = 0.0;
  double serial_ms = 0.0;
  double parallel_ms = 0.0;
  bool equal = false;
};

void print_row(const Row& r, int threads) {
  const double gf_s = r.macs * 2.0 / (r.serial_ms * 1e6);
  const double gf_p = r.macs * 2.0 / (r.parallel_ms * 1e6);
  std::printf("%-10s %10.3f ms %6.2f GF/s | %dT %10.3f ms %6.2f GF/s | "
              "x%-5.2f %s\n",
              r.name.c_str(), r.serial_ms, gf_s, threads, r.parallel_ms, gf_p,
              r.serial_ms / r.parallel_ms, r.equal ? "bit-equal" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel benchmark: serial reference vs OpenMP policy"};
  bool quick = false;
  int threads =
#ifdef _OPENMP
      omp_get_max_threads();
#else
      2;
#endif
  int reps = 5;
  app.add_flag("--quick", quick, "Small sizes for a smoke run");
  app.add_option("--threads", threads, "Parallel thread count")
      ->capture_default_str();
  app.add_option("--reps", reps, "Timing repetitions (best is kept)")
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const std::size_t mm = quick ? 128 : 384;      // square matmul side
  const std::size_t g = quick ? 16 : 64;         // attention groups
  const std::size_t gp = quick ? 32 : 64;        // rows/cols per group
  const std::size_t gd = quick ? 32 : 64;        // head width
  const ExecPolicy serial{1};
  const ExecPolicy par{threads};

  const auto a = random_buffer(mm * mm, 1);
  const auto b = random_buffer(mm * mm, 2);
  const auto x = random_buffer(g * gp * gp, 3);
  const auto y = random_buffer(g * gp * gd, 4);

  bool all_equal = true;
  const auto bench = [&](const std::string& name, std::size_t out_size,
                         double macs, auto&& kernel) {
    std::vector<double> ref(out_size, 0.0), par_out(out_size, 0.0);
    Row row;
    row.name = name;
    row.macs = macs;
    row.serial_ms = time_best_ms(reps, [&] {
      std::fill(ref.begin(), ref.end(), 0.0);
      kernel(ref.data(), serial);
    });
    row.parallel_ms = time_best_ms(reps, [&] {
      std::fill(par_out.begin(), par_out.end(), 0.0);
      kernel(par_out.data(), par);
    });
    row.equal = bit_equal(ref, par_out);
    all_equal = all_equal && row.equal;
    print_row(row, threads);
  };

  const double mm_macs = static_cast<double>(mm) * mm * mm;
  bench("mm_nn", mm * mm, mm_macs, [&](double* c, const ExecPolicy& p) {
    ad::mm_nn(a.data(), b.data(), c, mm, mm, mm, p);
  });
  bench("mm_nt", mm * mm, mm_macs, [&](double* c, const ExecPolicy& p) {
    ad::mm_nt(a.data(), b.data(), c, mm, mm, mm, p);
  });
  bench("mm_tn", mm * mm, mm_macs, [&](double* c, const ExecPolicy& p) {
    ad::mm_tn(a.data(), b.data(), c, mm, mm, mm, p);
  });

  const double g_macs = static_cast<double>(g) * gp * gp * gd;
  bench("gmm_nt", g * gp * gp, g_macs, [&](double* s, const ExecPolicy& p) {
    ad::gmm_nt(y.data(), y.data(), s, g, gp, gp, gd, p);
  });
  bench("gmm_nn", g * gp * gd, g_macs, [&](double* o, const ExecPolicy& p) {
    ad::gmm_nn(x.data(), y.data(), o, g, gp, gp, gd, p);
  });
  bench("gmm_tn", g * gp * gd, g_macs, [&](double* o, const ExecPolicy& p) {
    ad::gmm_tn(x.data(), y.data(), o, g, gp, gp, gd, p);
  });

  // The audit sweep parallelizes over (pair, rate) combinations.
  {
    const double step = quick ? 0.25 : 0.05;
    std::vector<std::pair<double, double>> pairs;
    const int n = static_cast<int>(1.0 / step + 0.5);
    for (int i = 0; i <= n; ++i) {
      for (int j = 0; j <= n; ++j) {
        pairs.emplace_back(i / static_cast<double>(n),
                           j / static_cast<double>(n));
      }
    }
    std::vector<double> w_grid;
    for (int i = 1; i <= 99; ++i) w_grid.push_back(i / 100.0);

    audit::AuditConfig scfg, pcfg;
    scfg.policy = serial;
    pcfg.policy = par;
    const privacy::PrivacyBudget eps{1.0};
    audit::AuditReport rs, rp;
    Row row;
    row.name = "audit";
    row.macs = static_cast<double>(pairs.size()) * w_grid.size();
    row.serial_ms = time_best_ms(
        reps, [&] { rs = audit::audit_mechanism(eps, w_grid, pairs, scfg); });
    row.parallel_ms = time_best_ms(
        reps, [&] { rp = audit::audit_mechanism(eps, w_grid, pairs, pcfg); });
    row.equal = rs.max_sup == rp.max_sup && rs.worst_index == rp.worst_index;
    all_equal = all_equal && row.equal;
    std::printf("%-10s %10.3f ms (%zu sups)   | %dT %10.3f ms %*s | x%-5.2f "
                "%s\n",
                row.name.c_str(), row.serial_ms,
                pairs.size() * w_grid.size(), threads, row.parallel_ms, 11, "",
                row.serial_ms / row.parallel_ms,
                row.equal ? "bit-equal" : "MISMATCH");
  }

  if (!all_equal) {
    std::fprintf(stderr, "parallel output diverged from the serial reference\n");
    return 1;
  }
  return 0;
}
