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

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <new>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "zosparse/sensitivity.hpp"
#include "zosparse/zo.hpp"

// Counts heap bytes requested through global operator new.
namespace {
std::atomic<std::size_t> g_alloc_bytes{0};
}

void* operator new(std::size_t n) {
  g_alloc_bytes += n;
  if (void* p = std::malloc(n ? n : 1)) return p;
  throw std::bad_alloc();
}
void operator delete(void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }

namespace zosparse {
namespace {

ParamStore vec(std::vector<double> v) {
  const std::size_t n = v.size();
  ParamStore p;
  p.add("w", Tensor({n}, std::move(v)));
  return p;
}

double half_sq_norm(const ParamStore& p) {
  double s = 0.0;
  for (const auto& [name, t] : p) {
    for (double x : t.data()) s += 0.5 * x * x;
  }
  return s;
}

SparseMask mask_of(const ParamStore& like, std::vector<std::size_t> idx) {
  SparseMask m = SparseMask::full(like);
  m.layers.begin()->second = std::move(idx);
  return m;
}

TEST(Spsa, LinearLossIsExact) {
  const Objective f = [](const ParamStore& p) {
    return p.at("w")[0] + 2.0 * p.at("w")[1];
  };
  for (double eps : {1e-3, 0.125, 1.0}) {
    ParamStore w = vec({0, 0});
    const SpsaEstimate e = spsa_estimate(w, f, vec({1, 0}), eps);
    EXPECT_EQ(e.scale, 1.0);
    EXPECT_EQ(e.materialize(w), vec({1, 0}));
    EXPECT_EQ(w, vec({0, 0}));
  }
}

TEST(Spsa, QuadraticScaleIsDirectionalDerivative) {
  ParamStore w = vec({3, 4});
  const SpsaEstimate e = spsa_estimate(w, half_sq_norm, vec({0, 1}), 1e-3);
  // Even terms cancel analytically; in floating point the squares round.
  EXPECT_NEAR(e.scale, 4.0, 4.0 * 1e-12);
  const ParamStore g = e.materialize(w);
  EXPECT_EQ(g.at("w")[0], 0.0);
  EXPECT_EQ(g.at("w")[1], 1.0);
}

TEST(Spsa, RestoresBitwiseOnDyadicValues) {
  ParamStore w = vec({3, 4, -0.5, 0.25});
  const ParamStore orig = w;
  spsa_estimate(w, half_sq_norm, vec({1, -0.5, 2, 0}), 1.0 / 1024.0);
  EXPECT_TRUE(w.bitwise_equal(orig));
}

TEST(Spsa, RestoresToRoundingOnGeneralValues) {
  RngStream s(1, 0);
  ParamStore w;
  w.add("w", sample_standard_gaussian(s, 1000));
  const ParamStore orig = w;
  masked_spsa(w, half_sq_norm, s, SparseMask::full(w), 1e-3);
  const Eigen::VectorXd a = w.flatten(), b = orig.flatten();
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    EXPECT_LE(std::abs(a[i] - b[i]), 4.0 * std::numeric_limits<double>::epsilon() *
                                         std::max(1.0, std::abs(b[i])));
  }
}

TEST(Spsa, NonFiniteLossCarriesBothValues) {
  ParamStore w = vec({1, 1});
  const Objective f = [](const ParamStore& p) {
    return p.at("w")[0] > 1.0 ? std::numeric_limits<double>::infinity() : 2.5;
  };
  try {
    spsa_estimate(w, f, vec({1, 0}), 0.5);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("inf"), std::string::npos);
    EXPECT_NE(msg.find("2.5"), std::string::npos);
  }
  EXPECT_EQ(w, vec({1, 1}));
}

TEST(Spsa, RejectsBadInputs) {
  ParamStore w = vec({1, 1});
  EXPECT_THROW(spsa_estimate(w, half_sq_norm, vec({1, 0}), 0.0), UsageError);
  EXPECT_THROW(spsa_estimate(w, half_sq_norm, vec({1, 0, 0}), 1e-3),
               StructuralError);
}

TEST(Spsa, MeanMatchesGradientWithinCovarianceBand) {
  const std::size_t n = 100'000;
  RngStream s(2, 0);
  ParamStore w = vec({3, 4});
  Eigen::Vector2d sum = Eigen::Vector2d::Zero();
  const SparseMask full = SparseMask::full(w);
  for (std::size_t i = 0; i < n; ++i) {
    const SpsaEstimate e = masked_spsa(w, half_sq_norm, s, full, 1e-3);
    sum += e.scale * e.materialize(w).flatten();
  }
  const Eigen::Vector2d mean = sum / double(n);
  // Var(g_i) = 2 g_i^2 + |g|^2 - g_i^2.
  const Eigen::Vector2d g(3, 4);
  for (int i = 0; i < 2; ++i) {
    const double sigma = std::sqrt((g[i] * g[i] + g.squaredNorm()) / double(n));
    EXPECT_NEAR(mean[i], g[i], 3.0 * sigma) << "component " << i;
  }
}

TEST(MaskedSpsa, FullMaskMatchesUnmasked) {
  RngStream a(3, 0), b(3, 0);
  ParamStore w1, w2;
  RngStream init(4, 0);
  w1.add("a", sample_standard_gaussian(init, 5));
  w1.add("b", sample_standard_gaussian(init, 3));
  w2 = w1;
  const SpsaEstimate x = masked_spsa(w1, half_sq_norm, a, SparseMask::full(w1),
                                     1e-3);
  ParamStore z = zeros_like(w2);
  for (auto& [name, t] : z) {
    for (auto& v : t.data()) v = b.gaussian();
  }
  const SpsaEstimate y = spsa_estimate(w2, half_sq_norm, z, 1e-3);
  EXPECT_EQ(x.scale, y.scale);
  EXPECT_TRUE(x.materialize(w1).bitwise_equal(y.materialize(w2)));
  EXPECT_EQ(a, b);
}

TEST(MaskedSpsa, SingleCoordinateMask) {
  const std::size_t n = 100'000;
  RngStream s(5, 0);
  ParamStore w = vec({3, 4});
  const SparseMask m = mask_of(w, {0});
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const SpsaEstimate e = masked_spsa(w, half_sq_norm, s, m, 1e-3);
    const ParamStore g = e.materialize(w);
    ASSERT_EQ(g.at("w")[1], 0.0);
    sum += e.scale * g.at("w")[0];
  }
  // g0 = 3 z^2 has variance 18.
  EXPECT_NEAR(sum / double(n), 3.0, 3.0 * std::sqrt(18.0 / double(n)));
}

TEST(MaskedSpsa, UnbiasedOnMaskedQuadratic) {
  // f = 1/2 w'Dw, gradient D w; estimates average to m . grad.
  const std::size_t n = 100'000;
  const Eigen::VectorXd diag = Eigen::VectorXd::LinSpaced(6, 1.0, 6.0);
  const Objective f = [&](const ParamStore& p) {
    const auto v = p.at("w").flat();
    return 0.5 * v.dot(diag.cwiseProduct(v));
  };
  ParamStore w = vec({1, -1, 0.5, 2, -0.5, 1});
  const SparseMask m = mask_of(w, {1, 3, 4});
  const Eigen::VectorXd g = diag.cwiseProduct(w.flatten());
  Eigen::VectorXd mg = Eigen::VectorXd::Zero(6);
  for (auto i : m.indices("w")) mg[Eigen::Index(i)] = g[Eigen::Index(i)];
  RngStream s(6, 0);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(6);
  for (std::size_t i = 0; i < n; ++i) {
    const SpsaEstimate e = masked_spsa(w, f, s, m, 1e-3);
    sum += e.scale * e.materialize(w).flatten();
  }
  const Eigen::VectorXd mean = sum / double(n);
  for (Eigen::Index i = 0; i < 6; ++i) {
    const double var = mg[i] * mg[i] + mg.squaredNorm();
    if (mg[i] == 0.0) {
      EXPECT_EQ(mean[i], 0.0);
    } else {
      EXPECT_NEAR(mean[i], mg[i], 4.0 * std::sqrt(var / double(n)));
    }
  }
}

TEST(ZoSgdStep, HandValues) {
  ParamStore w = vec({0, 0});
  SpsaEstimate e{4.0, 0, 0, vec({0, 1})};
  zo_sgd_step(w, e, 0.5);
  EXPECT_EQ(w, vec({0, -2}));
  ParamStore u = vec({1.5, -0.0});
  SpsaEstimate zero{0.0, 0, 0, vec({1, 1})};
  zo_sgd_step(u, zero, 0.1);
  EXPECT_TRUE(u.bitwise_equal(vec({1.5, -0.0})));
  EXPECT_THROW(zo_sgd_step(u, zero, 0.0), UsageError);
}

TEST(ZoSgdStep, EqualsStoreAxpyAndInverts) {
  RngStream s(7, 0);
  ParamStore w;
  w.add("w", sample_standard_gaussian(s, 100));
  const ParamStore orig = w;
  const ParamStore z = [&] {
    ParamStore d;
    d.add("w", sample_standard_gaussian(s, 100));
    return d;
  }();
  const SpsaEstimate e{0.37, 0, 0, z};
  ParamStore via_axpy = w;
  store_axpy(via_axpy, -0.01 * 0.37, z);
  zo_sgd_step(w, e, 0.01);
  EXPECT_TRUE(w.bitwise_equal(via_axpy));
  const SpsaEstimate neg{-0.37, 0, 0, z};
  zo_sgd_step(w, neg, 0.01);
  EXPECT_LT((w.flatten() - orig.flatten()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SensitiveStep, FullMaskIsPlainZoSgd) {
  RngStream init(8, 0);
  ParamStore w;
  w.add("a", sample_standard_gaussian(init, 4));
  w.add("b", sample_standard_gaussian(init, 4));
  ParamStore plain = w;
  RngStream s1(9, 0), s2(9, 0);
  const ZoConfig cfg{.eps = 1e-3, .lr = 0.05};
  for (int t = 0; t < 20; ++t) {
    sensitive_zo_sgd_step(w, half_sq_norm, s1, SparseMask::full(w), cfg);
    ParamStore z = zeros_like(plain);
    for (auto& [n, tz] : z) {
      for (auto& v : tz.data()) v = s2.gaussian();
    }
    const SpsaEstimate e = spsa_estimate(plain, half_sq_norm, z, cfg.eps);
    zo_sgd_step(plain, e, cfg.lr);
  }
  EXPECT_TRUE(w.bitwise_equal(plain));
}

TEST(SensitiveStep, UnmaskedCoordinatesNeverChange) {
  RngStream s(10, 0);
  const MlpSpec spec{{2, 8, 2}};
  const MlpModel m = MlpModel::initialize(spec, s);
  const TaskPair t = make_tasks(10, 64);
  ParamStore w = m.params();
  const ParamStore orig = w;
  const SparseMask mask = random_mask(w, 0.1, s);
  const ZoConfig cfg{.eps = 1e-3, .lr = 1e-2};
  for (int step = 0; step < 1000; ++step) {
    const Batch b = sample_batch(t.task_b, 16, s);
    sensitive_zo_sgd_step(
        w, mlp_objective(spec, b, LossKind::kSoftmaxCrossEntropy), s, mask,
        cfg);
  }
  std::size_t moved = 0;
  for (const auto& [name, tw] : w) {
    const auto& idx = mask.indices(name);
    for (std::size_t i = 0; i < tw.size(); ++i) {
      const bool masked = std::binary_search(idx.begin(), idx.end(), i);
      const double a = tw[i], b = orig.at(name)[i];
      if (!masked) {
        EXPECT_EQ(std::memcmp(&a, &b, sizeof a), 0) << name << "[" << i << "]";
      } else if (a != b) {
        ++moved;
      }
    }
  }
  EXPECT_EQ(moved, mask.k());
}

TEST(SensitiveStep, DiagonalQuadraticDecreasesInExpectation) {
  // D = diag(1..10), L = 10, k = 3, lr = 1/(L(k+2)); mask is the top-k of the
  // squared gradient, refreshed each step.
  const Eigen::VectorXd diag = Eigen::VectorXd::LinSpaced(10, 1.0, 10.0);
  const Objective f = [&](const ParamStore& p) {
    const auto v = p.at("w").flat();
    return 0.5 * v.dot(diag.cwiseProduct(v));
  };
  const ZoConfig cfg{.eps = 1e-3, .lr = 1.0 / (10.0 * 5.0)};
  const std::size_t steps = 400, every = 20, seeds = 20;
  std::vector<double> mean_loss(steps / every + 1, 0.0);
  for (std::size_t seed = 0; seed < seeds; ++seed) {
    ParamStore w = vec(std::vector<double>(10, 1.0));
    RngStream s(seed, 0);
    for (std::size_t t = 0; t <= steps; ++t) {
      if (t % every == 0) mean_loss[t / every] += f(w) / double(seeds);
      if (t == steps) break;
      ParamStore g = w;
      g.at("w").flat() = diag.cwiseProduct(w.at("w").flat()).array().square();
      sensitive_zo_sgd_step(w, f, s, select_topk(g, 0.3), cfg);
    }
  }
  for (std::size_t i = 1; i < mean_loss.size(); ++i) {
    EXPECT_LT(mean_loss[i], mean_loss[i - 1]) << "checkpoint " << i;
  }
  EXPECT_LT(mean_loss.back(), 0.1 * mean_loss.front());
}

struct MlpFixture {
  MlpSpec spec{{3, 10, 4}, Activation::kTanh};
  ParamStore params;
  Dataset data;

  explicit MlpFixture(std::uint64_t seed) {
    RngStream s(seed, 0);
    params = MlpModel::initialize(spec, s).params();
    data.inputs = testing::gaussian_tensor(s, {64, 3});
    for (std::size_t i = 0; i < 64; ++i) data.labels.push_back(s.below(4));
  }
  Objective objective(std::size_t step) const {
    return mlp_objective(spec, data.slice((step * 8) % 64, (step * 8) % 64 + 8),
                         LossKind::kSoftmaxCrossEntropy);
  }
};

TEST(PackedStep, MatchesSensitiveStepBitwise) {
  const MlpFixture fx(11);
  RngStream ms(12, 0);
  const SparseMask mask = random_mask(fx.params, 0.2, ms);
  const ZoConfig cfg{.eps = 1e-3, .lr = 0.05};

  ParamStore sparse_path = fx.params;
  RngStream s1(13, 0);

  PackedParams packed = PackedParams::extract(fx.params, mask);
  ParamStore dense = fx.params;
  for (auto& [name, t] : dense) {
    for (auto i : mask.indices(name)) t[i] = 0.0;
  }
  PackedModel model(dense, mask);
  model.load(packed.values);
  ASSERT_TRUE(model.working().bitwise_equal(fx.params));
  RngStream s2(13, 0);

  for (std::size_t t = 0; t < 100; ++t) {
    const StepResult a =
        sensitive_zo_sgd_step(sparse_path, fx.objective(t), s1, mask, cfg);
    const StepResult b = packed_step(packed, model, fx.objective(t), s2, cfg);
    ASSERT_EQ(a.scale, b.scale) << "step " << t;
  }
  EXPECT_TRUE(model.working().bitwise_equal(sparse_path));
  EXPECT_TRUE(model.dense().bitwise_equal(dense));
  EXPECT_EQ(s1, s2);
  const double rel = testing::max_rel_error(model.working().flatten(),
                                            sparse_path.flatten());
  EXPECT_LE(rel, 1e-12);
}

TEST(PackedStep, RefusesEmptyOrInconsistentLayouts) {
  const MlpFixture fx(14);
  SparseMask empty = SparseMask::full(fx.params);
  for (auto& [n, idx] : empty.layers) idx.clear();
  EXPECT_THROW(PackedParams::extract(fx.params, empty), UsageError);
  EXPECT_THROW(PackedModel(fx.params, empty), UsageError);

  RngStream s(15, 0);
  const SparseMask mask = random_mask(fx.params, 0.2, s);
  // Dense weights must be zero under the mask.
  EXPECT_THROW(PackedModel(fx.params, mask), StructuralError);

  ParamStore dense = fx.params;
  for (auto& [name, t] : dense) {
    for (auto i : mask.indices(name)) t[i] = 0.0;
  }
  PackedModel model(dense, mask);
  PackedParams other = PackedParams::extract(fx.params,
                                             random_mask(fx.params, 0.2, s));
  EXPECT_THROW(packed_step(other, model, fx.objective(0), s, {}),
               StructuralError);
  EXPECT_THROW(model.load(Tensor({1})), StructuralError);
}

TEST(PackedParams, ScatterStaysOnLayout) {
  const MlpFixture fx(16);
  RngStream s(17, 0);
  const SparseMask mask = random_mask(fx.params, 0.3, s);
  const PackedParams p = PackedParams::extract(fx.params, mask);
  EXPECT_EQ(p.values.size(), mask.k());
  ParamStore z = zeros_like(fx.params);
  p.scatter_into(z);
  for (const auto& [name, t] : z) {
    const auto& idx = mask.indices(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const bool masked = std::binary_search(idx.begin(), idx.end(), i);
      EXPECT_EQ(t[i], masked ? fx.params.at(name)[i] : 0.0);
    }
  }
}

TEST(SeedTrick, MatchesMaterializedPathBitwise) {
  const MlpFixture fx(18);
  for (double fraction : {1.0, 0.25}) {
    RngStream ms(19, 0);
    const SparseMask mask = random_mask(fx.params, fraction, ms);
    const ZoConfig cfg{.eps = 1e-3, .lr = 0.05};
    ParamStore a = fx.params, b = fx.params;
    RngStream s1(20, 0), s2(20, 0);
    for (std::size_t t = 0; t < 100; ++t) {
      const StepResult x = sensitive_zo_sgd_step(a, fx.objective(t), s1, mask,
                                                 cfg);
      const StepResult y = seed_trick_step(b, fx.objective(t), s2, mask, cfg);
      ASSERT_EQ(x.scale, y.scale) << "step " << t;
      ASSERT_EQ(s1, s2);
    }
    EXPECT_TRUE(a.bitwise_equal(b)) << "fraction " << fraction;
  }
}

TEST(SeedTrick, CycleWithoutUpdateMatchesMaterializedRestore) {
  // A constant objective gives scale 0, so only the perturbation cycle runs.
  RngStream init(21, 0);
  ParamStore w;
  w.add("w", sample_standard_gaussian(init, 500));
  const Objective flat = [](const ParamStore&) { return 1.0; };
  ParamStore a = w, b = w;
  RngStream s1(22, 0), s2(22, 0);
  const SparseMask full = SparseMask::full(w);
  seed_trick_step(a, flat, s1, full, {});
  masked_spsa(b, flat, s2, full, kDefaultEps);
  EXPECT_TRUE(a.bitwise_equal(b));
  EXPECT_LE((a.flatten() - w.flatten()).cwiseAbs().maxCoeff(),
            8.0 * std::numeric_limits<double>::epsilon());
}

TEST(SeedTrick, AllocatesNoDirectionStore) {
  // Allocation-free objective so only the step's own allocations count.
  RngStream init(23, 0);
  ParamStore w;
  for (int l = 0; l < 4; ++l) {
    w.add("layer" + std::to_string(l), sample_standard_gaussian(init, 4096));
  }
  const SparseMask full = SparseMask::full(w);
  const ZoConfig cfg{.eps = 1e-3, .lr = 1e-3};
  RngStream s(24, 0);
  const std::size_t bytes_params = w.total_dim() * sizeof(double);

  const std::size_t before_trick = g_alloc_bytes.load();
  for (int t = 0; t < 5; ++t) seed_trick_step(w, half_sq_norm, s, full, cfg);
  const std::size_t trick = g_alloc_bytes.load() - before_trick;

  const std::size_t before_mat = g_alloc_bytes.load();
  sensitive_zo_sgd_step(w, half_sq_norm, s, full, cfg);
  const std::size_t mat = g_alloc_bytes.load() - before_mat;

  RecordProperty("seed_trick_bytes", std::to_string(trick));
  RecordProperty("materialized_bytes", std::to_string(mat));
  EXPECT_LT(trick, 4096u);
  EXPECT_GE(mat, bytes_params);
}

TEST(ZoConfig, Validation) {
  EXPECT_NO_THROW(ZoConfig{}.validate());
  EXPECT_THROW((ZoConfig{.eps = 0.0}).validate(), UsageError);
  EXPECT_THROW((ZoConfig{.lr = -1.0}).validate(), UsageError);
  EXPECT_THROW((ZoConfig{.steps = 0}).validate(), UsageError);
  EXPECT_EQ(parse_mask_mode("dynamic-mask"), MaskMode::kDynamicMask);
  EXPECT_THROW(parse_mask_mode("sparse"), UsageError);
}

}  // namespace
}  // namespace zosparse
