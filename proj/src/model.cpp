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

#include "zosparse/model.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace zosparse {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::MatrixXd activate(const Eigen::MatrixXd& z, Activation a) {
  switch (a) {
    case Activation::kIdentity:
      return z;
    case Activation::kRelu:
      return z.cwiseMax(0.0);
    case Activation::kTanh:
      return z.array().tanh().matrix();
  }
  return z;
}

// Derivative of the activation expressed through pre-activation z and
// post-activation h.
Eigen::MatrixXd activation_grad(const Eigen::MatrixXd& z,
                                const Eigen::MatrixXd& h, Activation a) {
  switch (a) {
    case Activation::kIdentity:
      return Eigen::MatrixXd::Ones(z.rows(), z.cols());
    case Activation::kRelu:
      return (z.array() > 0.0).cast<double>().matrix();
    case Activation::kTanh:
      return (1.0 - h.array().square()).matrix();
  }
  return Eigen::MatrixXd::Ones(z.rows(), z.cols());
}

void check_batch(const MlpSpec& spec, const Batch& batch, LossKind loss) {
  if (batch.size() == 0) throw UsageError("batch must not be empty");
  if (batch.input_dim() != spec.widths.front()) {
    throw StructuralError("batch input dim " +
                          std::to_string(batch.input_dim()) +
                          " does not match model input dim " +
                          std::to_string(spec.widths.front()));
  }
  const std::size_t out = spec.widths.back();
  if (loss == LossKind::kMse) {
    if (batch.targets.rows() != batch.size() || batch.targets.cols() != out) {
      throw StructuralError("mse targets must be " +
                            std::to_string(batch.size()) + "x" +
                            std::to_string(out));
    }
  } else {
    if (batch.labels.size() != batch.size()) {
      throw StructuralError("cross-entropy needs one class index per example");
    }
    for (auto y : batch.labels) {
      if (y >= out) {
        throw StructuralError("class index " + std::to_string(y) +
                              " out of range for " + std::to_string(out) +
                              " outputs");
      }
    }
  }
}

struct ForwardTrace {
  std::vector<Eigen::MatrixXd> pre;   // z_i
  std::vector<Eigen::MatrixXd> post;  // h_i, post[0] is the input
};

ForwardTrace trace_forward(const MlpSpec& spec, const ParamStore& params,
                           const Tensor& inputs) {
  ForwardTrace tr;
  tr.post.emplace_back(inputs.matrix());
  const std::size_t nl = spec.num_layers();
  for (std::size_t i = 0; i < nl; ++i) {
    const auto w = params.at(weight_name(i)).matrix();
    const auto b = params.at(bias_name(i)).flat();
    Eigen::MatrixXd z = tr.post.back() * w.transpose();
    z.rowwise() += b.transpose();
    tr.post.push_back(i + 1 < nl ? activate(z, spec.activation) : z);
    tr.pre.push_back(std::move(z));
  }
  return tr;
}

// Loss value and its gradient with respect to the network outputs.
double loss_and_output_grad(const Eigen::MatrixXd& out, const Batch& batch,
                            LossKind loss, Eigen::MatrixXd* grad) {
  const double n = double(out.rows());
  if (loss == LossKind::kMse) {
    const Eigen::MatrixXd diff = out - batch.targets.matrix();
    const double denom = n * double(out.cols());
    if (grad) *grad = diff * (2.0 / denom);
    return diff.squaredNorm() / denom;
  }
  double total = 0.0;
  if (grad) grad->resize(out.rows(), out.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (out.row(r).array() - m).exp().matrix();
    const double s = e.sum();
    const auto y = Eigen::Index(batch.labels[std::size_t(r)]);
    total += std::log(s) + m - out(r, y);
    if (grad) {
      grad->row(r) = e / (s * n);
      (*grad)(r, y) -= 1.0 / n;
    }
  }
  return total / n;
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kIdentity:
      return "identity";
    case Activation::kRelu:
      return "relu";
    case Activation::kTanh:
      return "tanh";
  }
  return "?";
}

std::string to_string(LossKind l) {
  return l == LossKind::kMse ? "mse" : "cross_entropy";
}

Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::kIdentity;
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw UsageError("unknown activation '" + s + "'");
}

LossKind parse_loss_kind(const std::string& s) {
  if (s == "mse") return LossKind::kMse;
  if (s == "cross_entropy" || s == "softmax-cross-entropy") {
    return LossKind::kSoftmaxCrossEntropy;
  }
  throw UsageError("unknown loss '" + s + "'");
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  const std::size_t din = input_dim();
  out.inputs = Tensor({indices.size(), din});
  if (!targets.empty()) out.targets = Tensor({indices.size(), targets.cols()});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t src = indices[r];
    if (src >= size()) throw UsageError("example index out of range");
    out.inputs.matrix().row(Eigen::Index(r)) =
        inputs.matrix().row(Eigen::Index(src));
    if (!targets.empty()) {
      out.targets.matrix().row(Eigen::Index(r)) =
          targets.matrix().row(Eigen::Index(src));
    }
    if (!labels.empty()) out.labels.push_back(labels[src]);
  }
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return subset(idx);
}

bool Dataset::bitwise_equal(const Dataset& other) const {
  return inputs.bitwise_equal(other.inputs) &&
         targets.bitwise_equal(other.targets) && labels == other.labels;
}

std::string weight_name(std::size_t layer) {
  return "layer" + std::to_string(layer) + ".weight";
}

std::string bias_name(std::size_t layer) {
  return "layer" + std::to_string(layer) + ".bias";
}

void check_mlp_params(const MlpSpec& spec, const ParamStore& params) {
  if (spec.widths.size() < 2) {
    throw StructuralError("an MLP needs at least input and output widths");
  }
  ParamStore expected;
  for (std::size_t i = 0; i < spec.num_layers(); ++i) {
    if (spec.widths[i] == 0 || spec.widths[i + 1] == 0) {
      throw StructuralError("layer widths must be positive");
    }
    expected.add(weight_name(i), Tensor({spec.widths[i + 1], spec.widths[i]}));
    expected.add(bias_name(i), Tensor({spec.widths[i + 1]}));
  }
  expected.require_same_structure(params);
}

MlpModel::MlpModel(MlpSpec spec, ParamStore params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  check_mlp_params(spec_, params_);
}

MlpModel MlpModel::initialize(const MlpSpec& spec, RngStream& stream) {
  ParamStore params;
  for (std::size_t i = 0; i < spec.num_layers(); ++i) {
    const std::size_t in = spec.widths[i];
    const std::size_t out = spec.widths[i + 1];
    Tensor w = sample_standard_gaussian(stream, in * out);
    w.flat() *= 1.0 / std::sqrt(double(in));
    params.add(weight_name(i),
               Tensor({out, in}, std::vector<double>(w.data().begin(),
                                                     w.data().end())));
    params.add(bias_name(i), Tensor({out}));
  }
  return MlpModel(spec, std::move(params));
}

Eigen::MatrixXd mlp_forward(const MlpSpec& spec, const ParamStore& params,
                            const Tensor& inputs) {
  return trace_forward(spec, params, inputs).post.back();
}

double forward_loss(const MlpSpec& spec, const ParamStore& params,
                    const Batch& batch, LossKind loss) {
  check_batch(spec, batch, loss);
  return loss_and_output_grad(mlp_forward(spec, params, batch.inputs), batch,
                              loss, nullptr);
}

double forward_loss(const MlpModel& model, const Batch& batch, LossKind loss) {
  return forward_loss(model.spec(), model.params(), batch, loss);
}

ParamStore backprop_grads(const MlpSpec& spec, const ParamStore& params,
                          const Batch& batch, LossKind loss) {
  check_batch(spec, batch, loss);
  const auto tr = trace_forward(spec, params, batch.inputs);
  Eigen::MatrixXd delta;
  loss_and_output_grad(tr.post.back(), batch, loss, &delta);

  ParamStore grads = zeros_like(params);
  for (std::size_t i = spec.num_layers(); i-- > 0;) {
    grads.at(weight_name(i)).matrix() = delta.transpose() * tr.post[i];
    grads.at(bias_name(i)).flat() = delta.colwise().sum().transpose();
    if (i == 0) break;
    const auto w = params.at(weight_name(i)).matrix();
    const Eigen::MatrixXd dh = delta * w;
    delta = dh.cwiseProduct(
        activation_grad(tr.pre[i - 1], tr.post[i], spec.activation));
  }
  return grads;
}

ParamStore backprop_grads(const MlpModel& model, const Batch& batch,
                          LossKind loss) {
  return backprop_grads(model.spec(), model.params(), batch, loss);
}

double accuracy(const MlpSpec& spec, const ParamStore& params,
                const Dataset& data) {
  if (!data.is_classification()) {
    throw UsageError("accuracy requires a classification dataset");
  }
  const Eigen::MatrixXd out = mlp_forward(spec, params, data.inputs);
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    Eigen::Index arg = 0;
    out.row(r).maxCoeff(&arg);
    if (std::size_t(arg) == data.labels[std::size_t(r)]) ++correct;
  }
  return double(correct) / double(data.size());
}

Batch sample_batch(const Dataset& data, std::size_t batch_size,
                   RngStream& stream) {
  if (data.size() == 0) throw UsageError("cannot sample from empty dataset");
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = std::size_t(stream.below(data.size()));
  return data.subset(idx);
}

double train_first_order(MlpModel& model, const Dataset& data, LossKind loss,
                         std::size_t steps, double lr, std::size_t batch_size,
                         RngStream& stream) {
  for (std::size_t t = 0; t < steps; ++t) {
    const Batch batch = sample_batch(data, batch_size, stream);
    store_axpy(model.params(), -lr, backprop_grads(model, batch, loss));
  }
  return forward_loss(model, data, loss);
}

TaskPair make_tasks(std::uint64_t seed, std::size_t n) {
  // Draws for the two tasks come from distinct substreams, so the inputs are
  // independent samples of one distribution.
  auto generate = [&](std::uint64_t stream_id, bool flip_outer) {
    RngStream rng(seed, stream_id);
    Dataset d;
    d.inputs = Tensor({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      const bool second = rng.uniform() < 0.5;
      const double t = std::numbers::pi * rng.uniform();
      double x0 = second ? 1.0 - std::cos(t) : std::cos(t);
      double x1 = second ? 0.5 - std::sin(t) : std::sin(t);
      x0 += kMoonNoise * rng.gaussian();
      x1 += kMoonNoise * rng.gaussian();
      d.inputs[2 * i] = x0;
      d.inputs[2 * i + 1] = x1;
      std::size_t label = second ? 1 : 0;
      if (flip_outer && second && x0 > 1.0) label = 0;
      d.labels.push_back(label);
    }
    return d;
  };
  return {generate(0, false), generate(1, true)};
}

Dataset read_dataset_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open dataset '" + path.string() + "'");
  std::vector<std::vector<double>> xs, ys;
  std::vector<std::size_t> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
      xs.push_back(rec.at("x").get<std::vector<double>>());
      const auto& y = rec.at("y");
      if (y.is_number_integer()) {
        if (y.get<long long>() < 0) throw UsageError("negative class index");
        labels.push_back(y.get<std::size_t>());
      } else {
        ys.push_back(y.get<std::vector<double>>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": " +
                       e.what());
    }
  }
  if (xs.empty()) throw UsageError("dataset '" + path.string() + "' is empty");
  if (!labels.empty() && !ys.empty()) {
    throw UsageError("dataset mixes class labels and regression targets");
  }
  Dataset d;
  const std::size_t din = xs.front().size();
  d.inputs = Tensor({xs.size(), din});
  for (std::size_t r = 0; r < xs.size(); ++r) {
    if (xs[r].size() != din) throw StructuralError("ragged inputs in dataset");
    std::copy(xs[r].begin(), xs[r].end(), d.inputs.data().begin() + r * din);
  }
  if (!ys.empty()) {
    const std::size_t dout = ys.front().size();
    d.targets = Tensor({ys.size(), dout});
    for (std::size_t r = 0; r < ys.size(); ++r) {
      if (ys[r].size() != dout) {
        throw StructuralError("ragged targets in dataset");
      }
      std::copy(ys[r].begin(), ys[r].end(),
                d.targets.data().begin() + r * dout);
    }
  }
  d.labels = std::move(labels);
  return d;
}

void write_dataset_jsonl(const std::filesystem::path& path,
                         const Dataset& data) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw UsageError("cannot open '" + path.string() + "'");
  for (std::size_t r = 0; r < data.size(); ++r) {
    nlohmann::json rec;
    auto row = data.inputs.data().subspan(r * data.input_dim(),
                                          data.input_dim());
    rec["x"] = std::vector<double>(row.begin(), row.end());
    if (data.is_classification()) {
      rec["y"] = data.labels[r];
    } else {
      auto t = data.targets.data().subspan(r * data.targets.cols(),
                                           data.targets.cols());
      rec["y"] = std::vector<double>(t.begin(), t.end());
    }
    os << rec.dump() << '\n';
  }
}

}  // namespace zosparse
