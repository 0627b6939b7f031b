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

#include "dpmld/audit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dpmld/errors.hpp"

namespace dpmld::audit {

namespace {

constexpr double kViolationSlack = 1e-6;
constexpr std::size_t kMinBinCount = 30;
constexpr std::size_t kBootstrapReps = 100;

void check_weight(double w) {
  if (!std::isfinite(w) || w < 0.0 || w > 1.0) {
    throw ConfigError("mixture weight must lie in [0, 1], got " +
                      std::to_string(w));
  }
}

// log of the unnormalized mixture w e^{-|s|/b} + (1-w) e^{-|s-f|/b}.
double log_unnorm(double s, double f, double w, double b) {
  const double t1 = -std::fabs(s) / b;
  const double t2 = -std::fabs(s - f) / b;
  if (w <= 0.0) return t2;
  if (w >= 1.0) return t1;
  const double a1 = std::log(w) + t1;
  const double a2 = std::log1p(-w) + t2;
  const double m = std::max(a1, a2);
  return m + std::log(std::exp(a1 - m) + std::exp(a2 - m));
}

// log(w + (1-w) e^x), stable for large |x|.
double log_tail(double w, double x) {
  if (w <= 0.0) return x;
  if (w >= 1.0) return 0.0;
  if (x > 0.0) return x + std::log1p(w * std::expm1(-x));
  return std::log1p((1.0 - w) * std::expm1(x));
}

double laplace_cdf(double s, double m, double b) {
  const double z = (s - m) / b;
  return z < 0.0 ? 0.5 * std::exp(z) : 1.0 - 0.5 * std::exp(-z);
}

double mixture_cdf(double s, double f, double w, double b) {
  return w * laplace_cdf(s, 0.0, b) + (1.0 - w) * laplace_cdf(s, f, b);
}

double pair_scale(const AdjacentPair& pair) {
  check_weight(pair.w);
  if (pair.w >= 1.0) {
    throw ConfigError("drop rate 1 releases no signal; audit undefined");
  }
  const auto budget =
      privacy::allocate_budget(std::vector<double>{pair.w}, pair.eps_claimed);
  return budget.scales[0];
}

void check_pair_domain(const AdjacentPair& pair) {
  if (!std::isfinite(pair.f1) || !std::isfinite(pair.f2)) {
    throw ConfigError("pair values must be finite");
  }
  if (pair.f1 < 0.0 || pair.f1 > 1.0 || pair.f2 < 0.0 || pair.f2 > 1.0) {
    throw ConfigError("pair values must lie in [0, 1]");
  }
  if (std::fabs(pair.f1 - pair.f2) > 1.0) {
    throw ConfigError("adjacent values may differ by at most 1");
  }
}

struct HistDraws {
  std::vector<int> idx;            // bin per draw, -1 when off the grid
  std::vector<std::size_t> count;  // per-bin totals
};

HistDraws sample_histogram(double f, double w, double b, std::size_t n,
                           std::size_t bins, double lo, double width,
                           RandomStream& rng) {
  HistDraws h;
  h.idx.resize(n);
  h.count.assign(bins, 0);
  for (std::size_t j = 0; j < n; ++j) {
    const bool drop = rng.uniform() < w;
    const double s =
        (drop ? 0.0 : f) + b * privacy::laplace_from_uniform(rng.uniform());
    const double pos = (s - lo) / width;
    int ix = -1;
    if (pos >= 0.0 && pos < static_cast<double>(bins)) {
      ix = static_cast<int>(pos);
    }
    h.idx[j] = ix;
    if (ix >= 0) ++h.count[static_cast<std::size_t>(ix)];
  }
  return h;
}

double max_binned_ratio(const std::vector<std::size_t>& c1,
                        const std::vector<std::size_t>& c2,
                        std::size_t* usable) {
  double best = -1.0;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < c1.size(); ++i) {
    if (c1[i] < kMinBinCount || c2[i] < kMinBinCount) continue;
    ++seen;
    const double r = std::fabs(std::log(static_cast<double>(c1[i])) -
                               std::log(static_cast<double>(c2[i])));
    if (r > best) best = r;
  }
  if (usable != nullptr) *usable = seen;
  return best;
}

}  // namespace

double output_density(double s, double f, double w, double b) {
  if (!(b > 0.0) || !std::isfinite(b)) {
    throw ConfigError("noise scale must be positive");
  }
  check_weight(w);
  if (!std::isfinite(s) || !std::isfinite(f)) {
    throw ConfigError("density arguments must be finite");
  }
  return std::exp(log_unnorm(s, f, w, b)) / (2.0 * b);
}

SupResult sup_log_ratio_scaled(double f1, double f2, double w, double b) {
  if (!(b > 0.0) || !std::isfinite(b)) {
    throw ConfigError("noise scale must be positive");
  }
  check_weight(w);
  if (!std::isfinite(f1) || !std::isfinite(f2)) {
    throw ConfigError("pair values must be finite");
  }
  struct Candidate {
    double value;
    const char* where;
  };
  const Candidate cands[] = {
      {log_tail(w, f1 / b) - log_tail(w, f2 / b), "tail:+inf"},
      {log_tail(w, -f1 / b) - log_tail(w, -f2 / b), "tail:-inf"},
      {log_unnorm(0.0, f1, w, b) - log_unnorm(0.0, f2, w, b), "kink:0"},
      {log_unnorm(f1, f1, w, b) - log_unnorm(f1, f2, w, b), "kink:f1"},
      {log_unnorm(f2, f1, w, b) - log_unnorm(f2, f2, w, b), "kink:f2"},
  };
  SupResult best{-1.0, ""};
  for (const auto& c : cands) {
    const double v = std::fabs(c.value);
    if (v > best.value) best = {v, c.where};
  }
  return best;
}

SupResult sup_log_ratio(const AdjacentPair& pair) {
  check_pair_domain(pair);
  return sup_log_ratio_scaled(pair.f1, pair.f2, pair.w, pair_scale(pair));
}

McResult monte_carlo_ratio(const AdjacentPair& pair, std::size_t n,
                           std::size_t bins, std::uint64_t seed) {
  check_pair_domain(pair);
  if (n < 100000) {
    throw ConfigError("Monte Carlo audit needs at least 1e5 draws");
  }
  if (bins < 10) throw ConfigError("histogram needs at least 10 bins");
  const double b = pair_scale(pair);
  const double lo = -10.0 * b;
  const double hi = 1.0 + 10.0 * b;
  const double width = (hi - lo) / static_cast<double>(bins);

  RandomStream master(seed);
  RandomStream r1 = master.fork(1);
  RandomStream r2 = master.fork(2);
  RandomStream rboot = master.fork(3);
  const HistDraws h1 =
      sample_histogram(pair.f1, pair.w, b, n, bins, lo, width, r1);
  const HistDraws h2 =
      sample_histogram(pair.f2, pair.w, b, n, bins, lo, width, r2);

  McResult out;
  const double raw = max_binned_ratio(h1.count, h2.count, &out.usable_bins);
  if (raw < 0.0) {
    throw DataError("degenerate histogram: no bin holds " +
                    std::to_string(kMinBinCount) + " draws from both sides");
  }
  out.raw = raw;

  // The plug-in max in `raw` is upward-biased: when many bins tie near the
  // sup, the max rides on top of their sampling noise. Cross-fit instead:
  // pick the bin on the even-indexed half of the draws (by a lower confidence
  // bound, so poorly measured bins do not win on noise), then estimate that
  // fixed bin's ratio on the odd-indexed half. The result is unbiased for the
  // selected bin and can only sit below the binned sup.
  std::vector<std::size_t> a1(bins, 0), a2(bins, 0);
  std::vector<std::size_t> e1(bins, 0), e2(bins, 0);
  for (std::size_t j = 0; j < n; ++j) {
    auto& c1 = (j % 2 == 0) ? a1 : e1;
    auto& c2 = (j % 2 == 0) ? a2 : e2;
    if (h1.idx[j] >= 0) ++c1[static_cast<std::size_t>(h1.idx[j])];
    if (h2.idx[j] >= 0) ++c2[static_cast<std::size_t>(h2.idx[j])];
  }
  const auto reg_ratio = [](std::size_t c1, std::size_t c2) {
    return std::log((static_cast<double>(c1) + 0.5) /
                    (static_cast<double>(c2) + 0.5));
  };
  std::size_t pick = bins;
  double best_lcb = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < bins; ++i) {
    if (h1.count[i] < kMinBinCount || h2.count[i] < kMinBinCount) continue;
    const double sd =
        std::sqrt(1.0 / (static_cast<double>(a1[i]) + 0.5) +
                  1.0 / (static_cast<double>(a2[i]) + 0.5));
    // The stiff penalty keeps sparsely hit bins from winning on noise alone.
    const double lcb = std::fabs(reg_ratio(a1[i], a2[i])) - 4.0 * sd;
    if (lcb > best_lcb) {
      best_lcb = lcb;
      pick = i;
    }
  }
  const std::size_t n_eval = n / 2;
  const double p1 = static_cast<double>(e1[pick]) / static_cast<double>(n_eval);
  const double p2 = static_cast<double>(e2[pick]) / static_cast<double>(n_eval);
  const double point = std::fabs(reg_ratio(e1[pick], e2[pick]));

  // Bootstrap the evaluation half. Resampling a multinomial and reading one
  // cell is a binomial draw, so count uniforms under the cell frequency.
  std::vector<double> boot(kBootstrapReps);
  for (std::size_t rep = 0; rep < kBootstrapReps; ++rep) {
    std::size_t c1 = 0, c2 = 0;
    for (std::size_t j = 0; j < n_eval; ++j) {
      if (rboot.uniform() < p1) ++c1;
      if (rboot.uniform() < p2) ++c2;
    }
    boot[rep] = std::fabs(reg_ratio(c1, c2));
  }
  double mean = 0.0;
  for (double v : boot) mean += v;
  mean /= static_cast<double>(boot.size());
  double var = 0.0;
  for (double v : boot) var += (v - mean) * (v - mean);
  var /= static_cast<double>(boot.size() - 1);
  out.estimate = 2.0 * point - mean;
  out.width = 1.96 * std::sqrt(var);
  return out;
}

double binned_analytic_ratio(const AdjacentPair& pair, std::size_t n,
                             std::size_t bins) {
  check_pair_domain(pair);
  if (bins < 10) throw ConfigError("histogram needs at least 10 bins");
  const double b = pair_scale(pair);
  const double lo = -10.0 * b;
  const double hi = 1.0 + 10.0 * b;
  const double width = (hi - lo) / static_cast<double>(bins);
  const double thresh =
      static_cast<double>(kMinBinCount) / static_cast<double>(n);
  double best = -1.0;
  for (std::size_t i = 0; i < bins; ++i) {
    const double e0 = lo + width * static_cast<double>(i);
    const double e1 = e0 + width;
    const double p1 = mixture_cdf(e1, pair.f1, pair.w, b) -
                      mixture_cdf(e0, pair.f1, pair.w, b);
    const double p2 = mixture_cdf(e1, pair.f2, pair.w, b) -
                      mixture_cdf(e0, pair.f2, pair.w, b);
    if (p1 < thresh || p2 < thresh) continue;
    best = std::max(best, std::fabs(std::log(p1) - std::log(p2)));
  }
  if (best < 0.0) {
    throw DataError("degenerate histogram: no bin clears the count floor");
  }
  return best;
}

AuditReport audit_mechanism(const privacy::PrivacyBudget& eps,
                            const std::vector<double>& w_grid,
                            const std::vector<std::pair<double, double>>& pairs,
                            const AuditConfig& cfg) {
  if (pairs.empty()) throw ConfigError("audit needs at least one pair");
  if (w_grid.empty()) throw ConfigError("audit needs at least one drop rate");

  AuditReport rep;
  rep.eps_claimed = eps.epsilon();
  rep.extended_range = cfg.extended_range;
  const std::size_t combos = pairs.size() * w_grid.size();
  rep.entries.resize(combos);

  // Validate every combination up front so the parallel sweep cannot throw.
  std::vector<double> scales(w_grid.size());
  for (std::size_t wi = 0; wi < w_grid.size(); ++wi) {
    check_weight(w_grid[wi]);
    if (w_grid[wi] >= 1.0) {
      throw ConfigError("drop rate 1 releases no signal; audit undefined");
    }
    scales[wi] =
        privacy::allocate_budget(std::vector<double>{w_grid[wi]}, eps)
            .scales[0];
  }
  for (const auto& p : pairs) {
    AdjacentPair ap{p.first, p.second, w_grid[0], eps};
    if (cfg.extended_range) {
      if (!std::isfinite(ap.f1) || !std::isfinite(ap.f2)) {
        throw ConfigError("pair values must be finite");
      }
    } else {
      check_pair_domain(ap);
    }
  }

  parallel_for(combos, cfg.policy, [&](std::size_t idx) {
    const auto& p = pairs[idx / w_grid.size()];
    const std::size_t wi = idx % w_grid.size();
    SupResult sr =
        sup_log_ratio_scaled(p.first, p.second, w_grid[wi], scales[wi]);
    AuditEntry& e = rep.entries[idx];
    e.f1 = p.first;
    e.f2 = p.second;
    e.w = w_grid[wi];
    e.sup = sr.value;
    e.location = std::move(sr.location);
    e.violation = sr.value > eps.epsilon() + kViolationSlack;
  });

  rep.max_sup = -1.0;
  for (std::size_t i = 0; i < combos; ++i) {
    if (rep.entries[i].violation) ++rep.violations;
    if (rep.entries[i].sup > rep.max_sup) {
      rep.max_sup = rep.entries[i].sup;
      rep.worst_index = i;
    }
  }
  rep.margin = eps.epsilon() - rep.max_sup;
  rep.pass = cfg.extended_range || rep.violations == 0;

  if (cfg.mc_draws > 0) {
    const AuditEntry& worst = rep.entries[rep.worst_index];
    AdjacentPair wp{worst.f1, worst.f2, worst.w, eps};
    if (!cfg.extended_range) {
      rep.mc = monte_carlo_ratio(wp, cfg.mc_draws, cfg.mc_bins, cfg.mc_seed);
      rep.mc_run = true;
    }
  }
  return rep;
}

}  // namespace dpmld::audit
