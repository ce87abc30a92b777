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

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

namespace zosparse {

// f(w) = 1/2 w^T D w with diagonal D > 0. L = max D, mu = min D, F* = 0.
// With noise_std = sigma > 0 each step's loss gains a linear term xi^T w
// where xi is uniform on the sphere of radius sigma, so every stochastic
// gradient is within sigma of the true one.
struct SyntheticObjective {
  Eigen::VectorXd curvatures;
  double noise_std = 0.0;
  std::string label;

  static SyntheticObjective linspace(double lo, double hi, std::size_t d,
                                     double noise_std = 0.0);
  // D_i = i^(-exponent), i = 1..d. A few stiff coordinates dominate the
  // gradient, so small masks already cover most of its squared norm.
  static SyntheticObjective heavy_tailed(std::size_t d, double exponent,
                                         double noise_std = 0.0);

  std::size_t dim() const { return std::size_t(curvatures.size()); }
  double smoothness() const { return curvatures.maxCoeff(); }
  double pl_constant() const { return curvatures.minCoeff(); }
  double sigma_sq() const { return noise_std * noise_std; }

  double value(const Eigen::VectorXd& w) const {
    return 0.5 * w.dot(curvatures.cwiseProduct(w));
  }
  Eigen::VectorXd gradient(const Eigen::VectorXd& w) const {
    return curvatures.cwiseProduct(w);
  }
};

// 2 L (k + 2) / c * gap / T + 3 sigma^2
double eval_bound_smooth(double L, double sigma_sq, std::size_t k, double c,
                         std::size_t T, double gap);
// (1 - c mu / (L (k + 2)))^T * gap + 3 sigma^2 c / (2 L (k + 2))
double eval_bound_pl(double L, double mu, double sigma_sq, std::size_t k,
                     double c, std::size_t T, double gap);
double pl_noise_floor(double L, double sigma_sq, std::size_t k, double c);
// Limit of the same one-step recursion when the per-step noise term
// (1.5 c sigma^2 eta at eta = 1/(L(k+2))) is summed against the contraction
// c mu eta: 3 sigma^2 / (2 mu). Noisy runs settle below this level, not below
// pl_noise_floor.
double pl_stationary_floor(double mu, double sigma_sq);

double eval_bound_smooth(const SyntheticObjective& obj, std::size_t k,
                         double c, std::size_t T, double gap);
double eval_bound_pl(const SyntheticObjective& obj, std::size_t k, double c,
                     std::size_t T, double gap);

struct BoundReport {
  std::string trial;
  std::string form;  // "smooth" or "pl"
  std::size_t T = 0;
  std::size_t k = 0;
  std::size_t d = 0;
  double c = 0.0;
  double L = 0.0;
  double mu = 0.0;
  double sigma_sq = 0.0;
  double gap = 0.0;
  double measured_lhs = 0.0;
  double bound_rhs = 0.0;
  double slack = 1.0;
  bool satisfied = false;
};

nlohmann::json to_json(const BoundReport& r);

enum class TrialMask { kDynamicTopK, kFull };

struct TrialOptions {
  std::size_t T = 2000;
  std::size_t seeds = 20;
  double eps = 1e-3;
  // The step size is 1 / (L (k + 2)) times this; anything but 1 is outside
  // the convergence bound's contract and is refused.
  double lr_multiplier = 1.0;
  std::uint64_t base_seed = 0;
  // Starting point; empty means all ones.
  Eigen::VectorXd w0;
};

struct TrialResult {
  BoundReport smooth;
  BoundReport pl;
  double c_min = 1.0;
  double c_mean = 1.0;
  // Seed-averaged F(w_t) - F* for t = 0..T.
  std::vector<double> gap_curve;
};

// Sensitive sparse ZO-SGD on the objective with the step size the bounds assume.
// Each step selects the top-k mask of the squared stochastic gradient and
// records its coverage c_t. Both bounds are evaluated with the minimum c_t
// seen across all steps and seeds.
TrialResult run_theory_trial(const SyntheticObjective& objective,
                             TrialMask mask_mode, double fraction,
                             const TrialOptions& options);

struct McResult {
  double deviation = 0.0;
  Eigen::MatrixXd estimate;     // covariance, or 1x1 mean squared norm
  Eigen::MatrixXd closed_form;
};

// Monte Carlo E[g_hat g_hat^T] over masked SPSA estimates of the linear loss
// g^T w, against 2 (m.g)(m.g)^T + |m.g|^2 I_m. Frobenius-relative deviation;
// when the closed form vanishes, the Frobenius norm of the estimate.
McResult mc_check_covariance(const Eigen::VectorXd& g,
                             const std::vector<std::size_t>& mask,
                             std::size_t n_samples, std::uint64_t seed = 0);

// Monte Carlo E|g_hat|^2 against (2 + k) |m.g|^2. Throws NumericError when
// m.g = 0.
McResult mc_check_norm(const Eigen::VectorXd& g,
                       const std::vector<std::size_t>& mask,
                       std::size_t n_samples, std::uint64_t seed = 0);

inline constexpr double kCovarianceTolerance = 0.03;
inline constexpr double kNormTolerance = 0.02;

struct TheorySuiteConfig {
  std::size_t T = 2000;
  std::size_t seeds = 20;
  double lr_multiplier = 1.0;
  std::size_t mc_samples = 1'000'000;
  std::uint64_t seed = 0;

  friend bool operator==(const TheorySuiteConfig&,
                         const TheorySuiteConfig&) = default;
};

// One row per bound check (smooth and PL for every synthetic configuration)
// and per lemma check.
std::vector<BoundReport> run_default_suite(const TheorySuiteConfig& config);
std::size_t default_suite_size();

void write_suite_csv(const std::filesystem::path& path,
                     const std::vector<BoundReport>& rows);

}  // namespace zosparse
