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

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "zosparse/model.hpp"

namespace zosparse {
namespace {

using testing::gaussian_tensor;

MlpModel identity_model() {
  ParamStore p;
  p.add(weight_name(0), Tensor({2, 2}, {1, 0, 0, 1}));
  p.add(bias_name(0), Tensor({2}));
  return MlpModel({{2, 2}, Activation::kIdentity}, p);
}

Batch regression(std::vector<double> x, std::vector<double> y) {
  Batch b;
  b.inputs = Tensor({1, x.size()}, x);
  b.targets = Tensor({1, y.size()}, y);
  return b;
}

// Random model and batch; classification when `classes` > 0.
struct Instance {
  MlpSpec spec;
  ParamStore params;
  Batch batch;
  LossKind loss;
};

Instance random_instance(RngStream& s) {
  Instance in;
  const std::size_t depth = 1 + s.below(3);
  in.spec.widths.push_back(1 + s.below(5));
  for (std::size_t i = 0; i < depth; ++i) in.spec.widths.push_back(1 + s.below(6));
  const Activation acts[] = {Activation::kIdentity, Activation::kRelu,
                             Activation::kTanh};
  in.spec.activation = acts[s.below(3)];
  in.params = MlpModel::initialize(in.spec, s).params();
  // Nonzero biases so every parameter has a generic gradient.
  for (auto& [name, t] : in.params) {
    if (name.ends_with(".bias")) t = gaussian_tensor(s, t.shape());
  }
  const std::size_t n = 1 + s.below(8);
  const std::size_t dout = in.spec.widths.back();
  in.batch.inputs = gaussian_tensor(s, {n, in.spec.widths.front()});
  if (dout >= 2 && s.below(2) == 1) {
    in.loss = LossKind::kSoftmaxCrossEntropy;
    for (std::size_t i = 0; i < n; ++i) in.batch.labels.push_back(s.below(dout));
  } else {
    in.loss = LossKind::kMse;
    in.batch.targets = gaussian_tensor(s, {n, dout});
  }
  return in;
}

TEST(ForwardLoss, IdentityModelHitsTarget) {
  EXPECT_EQ(forward_loss(identity_model(), regression({1, 2}, {1, 2}),
                         LossKind::kMse),
            0.0);
}

TEST(ForwardLoss, MseAveragesOverOutputsAndBatch) {
  EXPECT_EQ(forward_loss(identity_model(), regression({1, 2}, {0, 0}),
                         LossKind::kMse),
            2.5);
  Batch two;
  two.inputs = Tensor({2, 2}, {1, 2, 0, 0});
  two.targets = Tensor({2, 2});
  EXPECT_EQ(forward_loss(identity_model(), two, LossKind::kMse), 1.25);
}

TEST(ForwardLoss, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 3u, 10u}) {
    ParamStore p;
    p.add(weight_name(0), Tensor({c, 3}));
    p.add(bias_name(0), Tensor({c}));
    Batch b;
    b.inputs = Tensor({4, 3}, {1, 2, 3, -1, 0, 5, 2, 2, 2, 0, 0, 1});
    b.labels = {0, c - 1, 1, 0};
    EXPECT_NEAR(forward_loss({{3, c}}, p, b, LossKind::kSoftmaxCrossEntropy),
                std::log(double(c)), 1e-15);
  }
}

TEST(ForwardLoss, CrossEntropyStableForHugeLogits) {
  ParamStore p;
  p.add(weight_name(0), Tensor({2, 1}, {1000, -1000}));
  p.add(bias_name(0), Tensor({2}));
  Batch b;
  b.inputs = Tensor({1, 1}, {1.0});
  b.labels = {1};
  const double l = forward_loss({{1, 2}}, p, b, LossKind::kSoftmaxCrossEntropy);
  EXPECT_NEAR(l, 2000.0, 1e-9);
  b.labels = {0};
  EXPECT_EQ(forward_loss({{1, 2}}, p, b, LossKind::kSoftmaxCrossEntropy), 0.0);
}

TEST(ForwardLoss, RejectsShapeMismatch) {
  EXPECT_THROW(forward_loss(identity_model(), regression({1, 2, 3}, {0, 0}),
                            LossKind::kMse),
               StructuralError);
  EXPECT_THROW(forward_loss(identity_model(), regression({1, 2}, {0}),
                            LossKind::kMse),
               StructuralError);
  Batch b = regression({1, 2}, {0, 0});
  b.targets = Tensor();
  b.labels = {2};
  EXPECT_THROW(forward_loss(identity_model(), b, LossKind::kSoftmaxCrossEntropy),
               StructuralError);
}

TEST(ForwardLoss, PermutationInvariantAndNonNegative) {
  RngStream s(21, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const Instance in = random_instance(s);
    const double base = forward_loss(in.spec, in.params, in.batch, in.loss);
    EXPECT_GE(base, 0.0);
    std::vector<std::size_t> perm(in.batch.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = perm.size() - 1 - i;
    const double permuted =
        forward_loss(in.spec, in.params, in.batch.subset(perm), in.loss);
    EXPECT_NEAR(permuted, base, 1e-12 * std::max(1.0, base));
  }
}

TEST(Backprop, LinearMseClosedForm) {
  ParamStore p;
  p.add(weight_name(0), Tensor({3, 2}, {0.5, -1, 2, 0.25, -0.75, 1.5}));
  p.add(bias_name(0), Tensor::vector({0.1, -0.2, 0.3}));
  const MlpModel m({{2, 3}, Activation::kIdentity}, p);
  const Batch b = regression({2, -1}, {1, 0, -1});
  const ParamStore g = backprop_grads(m, b, LossKind::kMse);
  const Eigen::Vector2d x(2, -1);
  const Eigen::Vector3d y(1, 0, -1);
  const Eigen::MatrixXd w = p.at(weight_name(0)).matrix();
  const Eigen::Vector3d r = w * x + p.at(bias_name(0)).flat() - y;
  const Eigen::MatrixXd gw = (2.0 / 3.0) * r * x.transpose();
  EXPECT_LT((g.at(weight_name(0)).matrix() - gw).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((g.at(bias_name(0)).flat() - (2.0 / 3.0) * r).cwiseAbs().maxCoeff(),
            1e-15);
}

TEST(Backprop, ZeroInputsZeroTargetsGiveZeroGradient) {
  RngStream s(2, 0);
  const MlpSpec spec{{3, 4, 2}, Activation::kTanh};
  MlpModel m = MlpModel::initialize(spec, s);
  Batch b;
  b.inputs = Tensor({5, 3});
  b.targets = Tensor({5, 2});
  const ParamStore g = backprop_grads(m, b, LossKind::kMse);
  for (const auto& [name, t] : g) {
    EXPECT_EQ(t.flat().cwiseAbs().maxCoeff(), 0.0) << name;
  }
}

TEST(Backprop, MatchesFiniteDifferencesOnRandomInstances) {
  RngStream s(77, 0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Instance in = random_instance(s);
    ASSERT_LE(in.params.total_dim(), 200u);
    const ParamStore g = backprop_grads(in.spec, in.params, in.batch, in.loss);
    const ParamStore fd = testing::finite_difference_grads(
        mlp_objective(in.spec, in.batch, in.loss), in.params);
    // ReLU kinks make finite differences unreliable only at measure-zero
    // points; Gaussian inputs avoid them almost surely.
    const double err = testing::max_rel_error(g.flatten(), fd.flatten());
    worst = std::max(worst, err);
    EXPECT_LT(err, 1e-5) << "trial " << trial;
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Backprop, SameStructureAsParams) {
  RngStream s(3, 0);
  const Instance in = random_instance(s);
  const ParamStore g = backprop_grads(in.spec, in.params, in.batch, in.loss);
  EXPECT_TRUE(g.same_structure(in.params));
}

TEST(MlpModel, RejectsBrokenChain) {
  ParamStore p;
  p.add(weight_name(0), Tensor({3, 2}));
  p.add(bias_name(0), Tensor({3}));
  p.add(weight_name(1), Tensor({1, 4}));
  p.add(bias_name(1), Tensor({1}));
  EXPECT_THROW(MlpModel({{2, 3, 1}}, p), StructuralError);
  ParamStore missing;
  missing.add(weight_name(0), Tensor({3, 2}));
  EXPECT_THROW(MlpModel({{2, 3}}, missing), StructuralError);
}

TEST(MlpModel, InitializationIsDeterministicWithFanInVariance) {
  RngStream a(5, 0), b(5, 0);
  const MlpSpec spec{{400, 300, 2}};
  const MlpModel ma = MlpModel::initialize(spec, a);
  const MlpModel mb = MlpModel::initialize(spec, b);
  EXPECT_TRUE(ma.params().bitwise_equal(mb.params()));
  const auto w = ma.params().at(weight_name(0)).flat();
  EXPECT_NEAR(w.squaredNorm() / double(w.size()), 1.0 / 400.0, 0.05 / 400.0);
  EXPECT_EQ(ma.params().at(bias_name(0)).flat().cwiseAbs().maxCoeff(), 0.0);
}

TEST(MakeTasks, DeterministicFromSeed) {
  const TaskPair a = make_tasks(12), b = make_tasks(12), c = make_tasks(13);
  EXPECT_TRUE(a.task_a.bitwise_equal(b.task_a));
  EXPECT_TRUE(a.task_b.bitwise_equal(b.task_b));
  EXPECT_FALSE(a.task_a.bitwise_equal(c.task_a));
  EXPECT_GE(a.task_a.size(), 512u);
  EXPECT_GE(a.task_b.size(), 512u);
}

TEST(MakeTasks, TasksShareInputMarginal) {
  const TaskPair t = make_tasks(0, 512);
  const Eigen::VectorXd ma = t.task_a.inputs.matrix().colwise().mean();
  const Eigen::VectorXd mb = t.task_b.inputs.matrix().colwise().mean();
  EXPECT_LT((ma - mb).cwiseAbs().maxCoeff(), 0.05);
}

TEST(MakeTasks, LabelRulesDiffer) {
  const TaskPair t = make_tasks(1);
  std::size_t differ = 0;
  for (std::size_t i = 0; i < t.task_b.size(); ++i) {
    EXPECT_LT(t.task_b.labels[i], 2u);
  }
  // Task B relabels part of the second moon, so on task A's inputs the rule
  // still depends on the label.
  const std::size_t n = t.task_a.size();
  std::size_t ones_a = 0, ones_b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ones_a += t.task_a.labels[i];
    ones_b += t.task_b.labels[i];
  }
  differ = ones_a - ones_b;
  EXPECT_GT(ones_a, ones_b);
  EXPECT_GT(differ, n / 16);
}

TEST(MakeTasks, FirstOrderFitBeatsChance) {
  const TaskPair t = make_tasks(4);
  RngStream s(4, 0);
  MlpModel m = MlpModel::initialize({{2, 16, 2}, Activation::kTanh}, s);
  const double before =
      forward_loss(m, t.task_a, LossKind::kSoftmaxCrossEntropy);
  const double after = train_first_order(m, t.task_a,
                                         LossKind::kSoftmaxCrossEntropy, 2000,
                                         0.1, 32, s);
  EXPECT_LT(after, std::log(2.0) * 0.8);
  EXPECT_LT(after, before);
  EXPECT_GT(accuracy(m.spec(), m.params(), t.task_a), 0.8);
}

TEST(SampleBatch, DeterministicAndInRange) {
  const TaskPair t = make_tasks(0, 64);
  RngStream a(1, 0), b(1, 0);
  const Batch x = sample_batch(t.task_a, 16, a);
  const Batch y = sample_batch(t.task_a, 16, b);
  EXPECT_TRUE(x.bitwise_equal(y));
  EXPECT_EQ(x.size(), 16u);
  Dataset empty;
  EXPECT_THROW(sample_batch(empty, 4, a), UsageError);
}

TEST(DatasetJsonl, RoundTripsBothKinds) {
  const auto dir = std::filesystem::temp_directory_path();
  const TaskPair t = make_tasks(2, 32);
  write_dataset_jsonl(dir / "cls.jsonl", t.task_a);
  EXPECT_TRUE(read_dataset_jsonl(dir / "cls.jsonl").bitwise_equal(t.task_a));
  Dataset reg;
  reg.inputs = Tensor({2, 2}, {0.1, 1e-300, -3, 4});
  reg.targets = Tensor({2, 1}, {1.0 / 3.0, -2});
  write_dataset_jsonl(dir / "reg.jsonl", reg);
  EXPECT_TRUE(read_dataset_jsonl(dir / "reg.jsonl").bitwise_equal(reg));
}

TEST(DatasetJsonl, RejectsMalformedFiles) {
  const auto path = std::filesystem::temp_directory_path() / "bad.jsonl";
  auto write = [&](const std::string& text) {
    std::ofstream(path) << text;
  };
  write("{\"x\": [1], \"y\": 0}\n{\"x\": [1], \"y\": [0.5]}\n");
  EXPECT_THROW(read_dataset_jsonl(path), UsageError);
  write("{\"x\": [1, 2], \"y\": 0}\n{\"x\": [1], \"y\": 1}\n");
  EXPECT_THROW(read_dataset_jsonl(path), StructuralError);
  write("not json\n");
  EXPECT_THROW(read_dataset_jsonl(path), UsageError);
  write("");
  EXPECT_THROW(read_dataset_jsonl(path), UsageError);
  EXPECT_THROW(read_dataset_jsonl(path.string() + ".missing"), UsageError);
}

TEST(ParseEnums, AcceptsKnownNamesOnly) {
  EXPECT_EQ(parse_loss_kind("mse"), LossKind::kMse);
  EXPECT_EQ(parse_loss_kind("softmax-cross-entropy"),
            LossKind::kSoftmaxCrossEntropy);
  EXPECT_EQ(parse_activation("relu"), Activation::kRelu);
  EXPECT_THROW(parse_activation("gelu"), UsageError);
  EXPECT_THROW(parse_loss_kind("hinge"), UsageError);
}

}  // namespace
}  // namespace zosparse
