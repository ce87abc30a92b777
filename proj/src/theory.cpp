// Copyright 2026 The zosparse Authors.
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

#include "zosparse/theory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <thread>

#include "zosparse/errors.hpp"
#include "zosparse/param_store.hpp"
#include "zosparse/rng.hpp"
#include "zosparse/sensitivity.hpp"
#include "zosparse/zo.hpp"

namespace zosparse {

namespace {

constexpr std::size_t kMcChunks = 16;

ParamStore single_layer(const Eigen::VectorXd& w) {
  ParamStore p;
  Tensor t({std::size_t(w.size())});
  t.flat() = w;
  p.add("w", std::move(t));
  return p;
}

SparseMask single_layer_mask(std::size_t d, std::vector<std::size_t> idx) {
  SparseMask m;
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  for (auto i : idx) {
    if (i >= d) throw UsageError("mask index out of range");
  }
  m.layers["w"] = std::move(idx);
  m.layer_dims["w"] = d;
  return m;
}

// Runs `body(chunk, n_in_chunk, partial)` over fixed chunks on worker threads
// and sums partials in chunk order, so results do not depend on scheduling.
Eigen::MatrixXd chunked_sum(
    std::size_t n, Eigen::Index rows, Eigen::Index cols,
    const std::function<void(std::size_t, std::size_t, Eigen::MatrixXd&)>&
        body) {
  std::vector<Eigen::MatrixXd> partial(kMcChunks,
                                       Eigen::MatrixXd::Zero(rows, cols));
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t c = first; c < kMcChunks; c += stride) {
      const std::size_t lo = n * c / kMcChunks, hi = n * (c + 1) / kMcChunks;
      body(c, hi - lo, partial[c]);
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(
      std::thread::hardware_concurrency(), 1, kMcChunks);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work, w, workers);
  work(0, workers);
  for (auto& t : pool) t.join();
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(rows, cols);
  for (const auto& p : partial) total += p;
  return total;
}

Eigen::VectorXd masked(const Eigen::VectorXd& g,
                       const std::vector<std::size_t>& mask) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(g.size());
  for (auto i : mask) out[Eigen::Index(i)] = g[Eigen::Index(i)];
  return out;
}

// Masked SPSA estimates of the loss g^T w at w = 0, fed one by one to sink.
template <typename Sink>
void spsa_samples(const Eigen::VectorXd& g, const SparseMask& mask,
                  std::uint64_t seed, std::size_t chunk, std::size_t count,
                  Sink&& sink) {
  ParamStore params = single_layer(Eigen::VectorXd::Zero(g.size()));
  const Objective linear = [&g](const ParamStore& p) {
    return p.at("w").flat().dot(g);
  };
  RngStream stream(seed, chunk);
  for (std::size_t s = 0; s < count; ++s) {
    const auto est = masked_spsa(params, linear, stream, mask, kDefaultEps);
    const auto& z = std::get<ParamStore>(est.direction).at("w").flat();
    sink(Eigen::VectorXd(est.scale * z));
  }
}

}  // namespace

SyntheticObjective SyntheticObjective::linspace(double lo, double hi,
                                                std::size_t d,
                                                double noise_std) {
  SyntheticObjective o;
  o.curvatures = Eigen::VectorXd::LinSpaced(Eigen::Index(d), lo, hi);
  o.noise_std = noise_std;
  char buf[64];
  std::snprintf(buf, sizeof buf, "linspace_%g_%g_d%zu", lo, hi, d);
  o.label = buf;
  return o;
}

SyntheticObjective SyntheticObjective::heavy_tailed(std::size_t d,
                                                    double exponent,
                                                    double noise_std) {
  SyntheticObjective o;
  o.curvatures.resize(Eigen::Index(d));
  for (std::size_t i = 0; i < d; ++i) {
    o.curvatures[Eigen::Index(i)] = std::pow(double(i + 1), -exponent);
  }
  o.noise_std = noise_std;
  char buf[64];
  std::snprintf(buf, sizeof buf, "heavy_tailed_d%zu_p%g", d, exponent);
  o.label = buf;
  return o;
}

double eval_bound_smooth(double L, double sigma_sq, std::size_t k, double c,
                         std::size_t T, double gap) {
  if (!(c > 0.0) || c > 1.0) throw UsageError("coverage c must lie in (0, 1]");
  if (k < 1 || T < 1) throw UsageError("k and T must be >= 1");
  return 2.0 * L * double(k + 2) / c / double(T) * gap + 3.0 * sigma_sq;
}

double pl_noise_floor(double L, double sigma_sq, std::size_t k, double c) {
  return 3.0 * sigma_sq * c / (2.0 * L * double(k + 2));
}

double pl_stationary_floor(double mu, double sigma_sq) {
  if (!(mu > 0.0)) throw UsageError("mu must be > 0");
  return 1.5 * sigma_sq / mu;
}

double eval_bound_pl(double L, double mu, double sigma_sq, std::size_t k,
                     double c, std::size_t T, double gap) {
  if (!(c > 0.0) || c > 1.0) throw UsageError("coverage c must lie in (0, 1]");
  if (k < 1) throw UsageError("k must be >= 1");
  const double rate = c * mu / (L * double(k + 2));
  if (!(rate > 0.0) || !(rate < 1.0)) {
    throw UsageError("PL contraction factor 1 - c mu / (L (k + 2)) must lie "
                     "in [0, 1)");
  }
  return std::pow(1.0 - rate, double(T)) * gap +
         pl_noise_floor(L, sigma_sq, k, c);
}

double eval_bound_smooth(const SyntheticObjective& obj, std::size_t k,
                         double c, std::size_t T, double gap) {
  return eval_bound_smooth(obj.smoothness(), obj.sigma_sq(), k, c, T, gap);
}

double eval_bound_pl(const SyntheticObjective& obj, std::size_t k, double c,
                     std::size_t T, double gap) {
  return eval_bound_pl(obj.smoothness(), obj.pl_constant(), obj.sigma_sq(), k,
                       c, T, gap);
}

nlohmann::json to_json(const BoundReport& r) {
  return {{"trial", r.trial},       {"form", r.form},
          {"T", r.T},               {"k", r.k},
          {"d", r.d},               {"c", r.c},
          {"L", r.L},               {"mu", r.mu},
          {"sigma_sq", r.sigma_sq}, {"gap", r.gap},
          {"measured_lhs", r.measured_lhs},
          {"bound_rhs", r.bound_rhs},
          {"slack", r.slack},       {"satisfied", r.satisfied}};
}

TrialResult run_theory_trial(const SyntheticObjective& objective,
                             TrialMask mask_mode, double fraction,
                             const TrialOptions& options) {
  if (options.lr_multiplier != 1.0) {
    throw UsageError("step size must be exactly 1 / (L (k + 2)); a multiplier "
                     "of " + std::to_string(options.lr_multiplier) +
                     " is outside the convergence bound's contract");
  }
  if (options.T < 1 || options.seeds < 1) {
    throw UsageError("T and seeds must be >= 1");
  }
  const std::size_t d = objective.dim();
  const std::size_t k =
      mask_mode == TrialMask::kFull ? d : count_for_fraction(fraction, d);
  const double L = objective.smoothness();
  ZoConfig cfg;
  cfg.eps = options.eps;
  cfg.lr = 1.0 / (L * double(k + 2));

  const Eigen::VectorXd w0 = options.w0.size() == 0
                                 ? Eigen::VectorXd::Ones(Eigen::Index(d))
                                 : options.w0;
  if (std::size_t(w0.size()) != d) {
    throw StructuralError("starting point dimension mismatch");
  }
  const double gap = objective.value(w0);
  const double frac = double(k) / double(d);

  TrialResult result;
  result.gap_curve.assign(options.T + 1, 0.0);
  double c_min = 1.0, c_sum = 0.0, grad_sq_sum = 0.0;
  for (std::size_t s = 0; s < options.seeds; ++s) {
    const std::uint64_t seed = options.base_seed + s;
    RngStream perturb(seed, 0);
    RngStream noise(seed, 1);
    ParamStore params = single_layer(w0);
    Eigen::VectorXd xi = Eigen::VectorXd::Zero(Eigen::Index(d));
    const Objective step_loss = [&](const ParamStore& p) {
      const auto w = p.at("w").flat();
      return 0.5 * w.dot(objective.curvatures.cwiseProduct(w)) + xi.dot(w);
    };
    result.gap_curve[0] += gap;
    for (std::size_t t = 0; t < options.T; ++t) {
      const Eigen::VectorXd w = params.at("w").flat();
      const Eigen::VectorXd true_grad = objective.gradient(w);
      grad_sq_sum += true_grad.squaredNorm();
      if (objective.noise_std > 0.0) {
        for (auto& v : xi) v = noise.gaussian();
        xi *= objective.noise_std / xi.norm();
      }
      const Eigen::VectorXd g = true_grad + xi;
      ParamStore scores = single_layer(g.cwiseAbs2());
      const SparseMask mask = mask_mode == TrialMask::kFull
                                  ? SparseMask::full(scores)
                                  : select_topk(scores, frac);
      const double total = g.squaredNorm();
      const double c = total > 0.0 ? coverage_fraction(scores, mask) : 1.0;
      c_min = std::min(c_min, c);
      c_sum += c;
      sensitive_zo_sgd_step(params, step_loss, perturb, mask, cfg);
      result.gap_curve[t + 1] += objective.value(params.at("w").flat());
    }
  }
  for (auto& v : result.gap_curve) v /= double(options.seeds);
  result.c_min = c_min;
  result.c_mean = c_sum / double(options.seeds * options.T);

  auto base = [&](const char* form) {
    BoundReport r;
    r.trial = objective.label + "/k=" + std::to_string(k);
    r.form = form;
    r.T = options.T;
    r.k = k;
    r.d = d;
    r.c = c_min;
    r.L = L;
    r.mu = objective.pl_constant();
    r.sigma_sq = objective.sigma_sq();
    r.gap = gap;
    return r;
  };
  result.smooth = base("smooth");
  result.smooth.measured_lhs =
      grad_sq_sum / double(options.seeds * options.T);
  result.smooth.bound_rhs = eval_bound_smooth(objective, k, c_min, options.T,
                                              gap);
  result.smooth.satisfied =
      result.smooth.measured_lhs <= result.smooth.bound_rhs * result.smooth.slack;

  result.pl = base("pl");
  result.pl.measured_lhs = result.gap_curve.back();
  result.pl.bound_rhs = eval_bound_pl(objective, k, c_min, options.T, gap);
  result.pl.satisfied =
      result.pl.measured_lhs <= result.pl.bound_rhs * result.pl.slack;
  return result;
}

McResult mc_check_covariance(const Eigen::VectorXd& g,
                             const std::vector<std::size_t>& mask_indices,
                             std::size_t n_samples, std::uint64_t seed) {
  if (n_samples == 0) throw UsageError("n_samples must be positive");
  const auto d = g.size();
  const SparseMask mask = single_layer_mask(std::size_t(d), mask_indices);
  const Eigen::VectorXd mg = masked(g, mask.indices("w"));
  Eigen::MatrixXd eye_m = Eigen::MatrixXd::Zero(d, d);
  for (auto i : mask.indices("w")) eye_m(Eigen::Index(i), Eigen::Index(i)) = 1;

  McResult r;
  r.closed_form = 2.0 * mg * mg.transpose() + mg.squaredNorm() * eye_m;
  r.estimate = chunked_sum(
                   n_samples, d, d,
                   [&](std::size_t chunk, std::size_t count,
                       Eigen::MatrixXd& acc) {
                     spsa_samples(g, mask, seed, chunk, count,
                                  [&](const Eigen::VectorXd& est) {
                                    acc.noalias() += est * est.transpose();
                                  });
                   }) /
               double(n_samples);
  const double ref = r.closed_form.norm();
  r.deviation = ref > 0.0 ? (r.estimate - r.closed_form).norm() / ref
                          : r.estimate.norm();
  return r;
}

McResult mc_check_norm(const Eigen::VectorXd& g,
                       const std::vector<std::size_t>& mask_indices,
                       std::size_t n_samples, std::uint64_t seed) {
  if (n_samples == 0) throw UsageError("n_samples must be positive");
  const SparseMask mask = single_layer_mask(std::size_t(g.size()), mask_indices);
  const Eigen::VectorXd mg = masked(g, mask.indices("w"));
  const double expected = double(2 + mask.k()) * mg.squaredNorm();
  if (!(expected > 0.0)) {
    throw NumericError("norm ratio undefined: masked gradient is zero");
  }
  McResult r;
  r.closed_form = Eigen::MatrixXd::Constant(1, 1, expected);
  r.estimate = chunked_sum(n_samples, 1, 1,
                           [&](std::size_t chunk, std::size_t count,
                               Eigen::MatrixXd& acc) {
                             spsa_samples(g, mask, seed, chunk, count,
                                          [&](const Eigen::VectorXd& est) {
                                            acc(0, 0) += est.squaredNorm();
                                          });
                           }) /
               double(n_samples);
  r.deviation = std::abs(r.estimate(0, 0) - expected) / expected;
  return r;
}

namespace {

struct LemmaCase {
  std::string name;
  Eigen::VectorXd g;
  std::vector<std::size_t> mask;
};

std::vector<LemmaCase> covariance_cases() {
  Eigen::VectorXd e0 = Eigen::VectorXd::Zero(2);
  e0[0] = 1;
  Eigen::VectorXd g8(8);
  g8 << 3, -1, 2, 0.5, 0, 1.5, -2, 0.25;
  return {{"cov/e0_full_d2", e0, {0, 1}},
          {"cov/ones_full_d2", Eigen::VectorXd::Ones(2), {0, 1}},
          {"cov/d8_k3", g8, {0, 2, 6}}};
}

std::vector<LemmaCase> norm_cases() {
  Eigen::VectorXd g34(2);
  g34 << 3, 4;
  Eigen::VectorXd g8(8);
  g8 << 3, -1, 2, 0.5, 0, 1.5, -2, 0.25;
  return {{"norm/g34_full", g34, {0, 1}},
          {"norm/g34_k1", g34, {1}},
          {"norm/g34x10_full", 10.0 * g34, {0, 1}},
          {"norm/d8_k3", g8, {0, 2, 6}},
          {"norm/d8_full", g8, {0, 1, 2, 3, 4, 5, 6, 7}}};
}

std::vector<std::pair<SyntheticObjective, double>> bound_configs() {
  std::vector<std::pair<SyntheticObjective, double>> out;
  for (const auto& obj : {SyntheticObjective::linspace(0.1, 1.0, 100),
                          SyntheticObjective::heavy_tailed(100, 1.5)}) {
    for (double f : {0.01, 0.1, 1.0}) out.emplace_back(obj, f);
  }
  return out;
}

}  // namespace

std::size_t default_suite_size() {
  return 2 * bound_configs().size() + covariance_cases().size() +
         norm_cases().size();
}

std::vector<BoundReport> run_default_suite(const TheorySuiteConfig& config) {
  TrialOptions opts;
  opts.T = config.T;
  opts.seeds = config.seeds;
  opts.lr_multiplier = config.lr_multiplier;
  opts.base_seed = config.seed;
  std::vector<BoundReport> rows;
  for (const auto& [obj, frac] : bound_configs()) {
    const auto mode = frac >= 1.0 ? TrialMask::kFull : TrialMask::kDynamicTopK;
    auto res = run_theory_trial(obj, mode, frac, opts);
    rows.push_back(res.smooth);
    rows.push_back(res.pl);
  }
  auto lemma_row = [](const LemmaCase& c, const McResult& mc, double tol) {
    BoundReport r;
    r.trial = c.name;
    r.form = "lemma";
    r.k = c.mask.size();
    r.d = std::size_t(c.g.size());
    const Eigen::VectorXd mg = masked(c.g, c.mask);
    r.c = c.g.squaredNorm() > 0 ? mg.squaredNorm() / c.g.squaredNorm() : 0.0;
    r.measured_lhs = mc.deviation;
    r.bound_rhs = tol;
    r.satisfied = mc.deviation <= tol;
    return r;
  };
  for (const auto& c : covariance_cases()) {
    rows.push_back(lemma_row(
        c, mc_check_covariance(c.g, c.mask, config.mc_samples, config.seed),
        kCovarianceTolerance));
  }
  for (const auto& c : norm_cases()) {
    rows.push_back(lemma_row(
        c, mc_check_norm(c.g, c.mask, config.mc_samples, config.seed),
        kNormTolerance));
  }
  return rows;
}

void write_suite_csv(const std::filesystem::path& path,
                     const std::vector<BoundReport>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw UsageError("cannot open '" + path.string() + "'");
  os << "trial,k,c,L,mu,sigma_sq,T,lhs,rhs,satisfied\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s/%s,%zu,%.17g,%.17g,%.17g,%.17g,%zu,"
                  "%.17g,%.17g,%s\n",
                  r.trial.c_str(), r.form.c_str(), r.k, r.c, r.L, r.mu,
                  r.sigma_sq, r.T, r.measured_lhs, r.bound_rhs,
                  r.satisfied ? "true" : "false");
    os << buf;
  }
}

}  // namespace zosparse
