#pragma once

// Point predictors for planar positions: the extreme learning machine used as
// the base model being calibrated, and the three-hidden-layer network used to
// produce pseudo-labels. Both standardize their targets with statistics of
// their own training split; nothing is fit on calibration data.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <random>
#include <string>
#include <vector>

#include "riskcal/core.hpp"
#include "riskcal/error.hpp"
#include "riskcal/rng.hpp"

namespace riskcal {

class Regressor {
 public:
  virtual ~Regressor() = default;
  // rows x m features -> rows x 2 positions.
  virtual Matrix predict(const Matrix& features) const = 0;
  virtual std::size_t input_dim() const = 0;
};

using RegressorPtr = std::shared_ptr<const Regressor>;

// Fits a predictor on a labeled training set; the seed drives every random
// choice the trainer makes.
using RegressorTrainer = std::function<RegressorPtr(const LabeledDataset& train, std::uint64_t seed)>;

namespace detail {

// Applies a row-wise map in blocks so hidden activations for very large
// inputs (oracle draws) never materialize at once.
template <class F>
Matrix map_row_blocks(const Matrix& features, F&& block_fn, Eigen::Index block = 8192) {
  if (features.rows() <= block) return block_fn(features);
  Matrix out(features.rows(), 2);
  for (Eigen::Index start = 0; start < features.rows(); start += block) {
    const Eigen::Index rows = std::min(block, features.rows() - start);
    out.middleRows(start, rows) = block_fn(features.middleRows(start, rows));
  }
  return out;
}

}  // namespace detail

inline Point2 predict_one(const Regressor& model, const Vector& x) {
  detail::require(static_cast<std::size_t>(x.size()) == model.input_dim(), "predict: input dimension mismatch");
  return model.predict(x.transpose()).row(0).transpose();
}

// Mean over samples of ||g(x) - y||^2.
inline double validation_mse(const Regressor& model, const LabeledDataset& validation) {
  const Matrix residual = model.predict(validation.features()) - validation.labels();
  return residual.rowwise().squaredNorm().mean();
}

struct TargetScaler {
  Point2 mean = Point2::Zero();
  Point2 scale = Point2::Ones();

  static TargetScaler fit(const Matrix& labels) {
    TargetScaler s;
    s.mean = labels.colwise().mean().transpose();
    for (int c = 0; c < 2; ++c) {
      const double var = (labels.col(c).array() - s.mean(c)).square().mean();
      s.scale(c) = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  Matrix transform(const Matrix& labels) const {
    return (labels.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }

  Matrix inverse(const Matrix& standardized) const {
    return (standardized.array().rowwise() * scale.transpose().array()).matrix().rowwise() + mean.transpose();
  }
};

class ConstantRegressor final : public Regressor {
 public:
  ConstantRegressor(Point2 value, std::size_t input_dim) : value_(std::move(value)), dim_(input_dim) {}

  Matrix predict(const Matrix& features) const override {
    detail::require(static_cast<std::size_t>(features.cols()) == dim_, "constant predictor: dimension mismatch");
    return value_.transpose().replicate(features.rows(), 1);
  }
  std::size_t input_dim() const override { return dim_; }
  const Point2& value() const noexcept { return value_; }

 private:
  Point2 value_;
  std::size_t dim_;
};

// Wraps a row-wise callable; handy for known ground-truth maps in tests and
// synthetic experiments.
class FunctionRegressor final : public Regressor {
 public:
  FunctionRegressor(std::function<Point2(const Vector&)> fn, std::size_t input_dim)
      : fn_(std::move(fn)), dim_(input_dim) {}

  Matrix predict(const Matrix& features) const override {
    detail::require(static_cast<std::size_t>(features.cols()) == dim_, "function predictor: dimension mismatch");
    Matrix out(features.rows(), 2);
    for (Eigen::Index i = 0; i < features.rows(); ++i) out.row(i) = fn_(features.row(i).transpose()).transpose();
    return out;
  }
  std::size_t input_dim() const override { return dim_; }

 private:
  std::function<Point2(const Vector&)> fn_;
  std::size_t dim_;
};

// ---------------------------------------------------------------------------
// Extreme learning machine

struct ElmOptions {
  std::size_t hidden = 512;
  double ridge = 1e-2;
};

class ElmModel final : public Regressor {
 public:
  ElmModel(Matrix hidden_weights, Vector hidden_bias, Matrix output_weights, double ridge, TargetScaler scaler)
      : hidden_weights_(std::move(hidden_weights)),
        hidden_bias_(std::move(hidden_bias)),
        output_weights_(std::move(output_weights)),
        ridge_(ridge),
        scaler_(std::move(scaler)) {
    detail::require(hidden_weights_.cols() >= 1, "ELM needs at least one hidden unit");
    detail::require(hidden_bias_.size() == hidden_weights_.cols(), "ELM hidden bias size mismatch");
    detail::require(output_weights_.rows() == hidden_weights_.cols() && output_weights_.cols() == 2,
                    "ELM output weight shape mismatch");
    if (!hidden_weights_.allFinite() || !hidden_bias_.allFinite() || !output_weights_.allFinite()) {
      throw NumericalError("ELM parameters are not finite");
    }
  }

  // tanh(X W + b), the random feature map.
  Matrix hidden_activations(const Matrix& features) const {
    detail::require(features.cols() == hidden_weights_.rows(), "ELM: input dimension mismatch");
    return ((features * hidden_weights_).rowwise() + hidden_bias_.transpose()).array().tanh().matrix();
  }

  Matrix predict(const Matrix& features) const override {
    return detail::map_row_blocks(
        features, [this](const Matrix& x) { return Matrix(scaler_.inverse(hidden_activations(x) * output_weights_)); });
  }

  std::size_t input_dim() const override { return static_cast<std::size_t>(hidden_weights_.rows()); }
  std::size_t hidden() const noexcept { return static_cast<std::size_t>(hidden_weights_.cols()); }
  const Matrix& hidden_weights() const noexcept { return hidden_weights_; }
  const Vector& hidden_bias() const noexcept { return hidden_bias_; }
  const Matrix& output_weights() const noexcept { return output_weights_; }
  double ridge() const noexcept { return ridge_; }
  const TargetScaler& target_scaler() const noexcept { return scaler_; }

 private:
  Matrix hidden_weights_;
  Vector hidden_bias_;
  Matrix output_weights_;
  double ridge_;
  TargetScaler scaler_;
};

// Random standard-normal hidden layer; output layer from the ridge normal
// equations (Phi^T Phi + ridge I) W = Phi^T Y on standardized targets.
inline ElmModel elm_fit(const LabeledDataset& train, const ElmOptions& options, std::uint64_t seed) {
  detail::require(options.hidden >= 1, "elm_fit: need at least one hidden unit");
  detail::require(options.ridge > 0.0 && std::isfinite(options.ridge), "elm_fit: ridge must be positive");
  const auto m = static_cast<Eigen::Index>(train.dim());
  const auto h = static_cast<Eigen::Index>(options.hidden);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix weights(m, h);
  for (Eigen::Index c = 0; c < h; ++c) {
    for (Eigen::Index r = 0; r < m; ++r) weights(r, c) = normal(rng);
  }
  Vector bias(h);
  for (Eigen::Index c = 0; c < h; ++c) bias(c) = normal(rng);

  const TargetScaler scaler = TargetScaler::fit(train.labels());
  const Matrix targets = scaler.transform(train.labels());
  const Matrix phi = ((train.features() * weights).rowwise() + bias.transpose()).array().tanh().matrix();
  Matrix gram = phi.transpose() * phi;
  gram.diagonal().array() += options.ridge;
  const Eigen::LDLT<Matrix> solver(gram);
  if (solver.info() != Eigen::Success) throw NumericalError("elm_fit: ridge system factorization failed");
  Matrix output = solver.solve(phi.transpose() * targets);
  if (!output.allFinite()) throw NumericalError("elm_fit: ridge system is numerically singular");
  return ElmModel(std::move(weights), std::move(bias), std::move(output), options.ridge, scaler);
}

inline Point2 elm_predict(const ElmModel& model, const Vector& x) { return predict_one(model, x); }

// ---------------------------------------------------------------------------
// Fully-connected network with three hidden ReLU layers

struct MlpOptions {
  std::vector<std::size_t> hidden = {256, 128, 64};
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  // Train on at most this many samples (seeded subsample); 0 = use all.
  std::size_t max_training_samples = 0;

  void validate() const {
    detail::require(hidden.size() == 3, "MLP must have exactly three hidden layers");
    for (std::size_t w : hidden) detail::require(w >= 1, "MLP hidden widths must be positive");
    detail::require(learning_rate > 0.0 && std::isfinite(learning_rate), "MLP learning rate must be positive");
    detail::require(momentum >= 0.0 && momentum < 1.0, "MLP momentum must lie in [0, 1)");
    detail::require(epochs >= 1 && batch_size >= 1, "MLP epochs and batch size must be positive");
  }
};

struct DenseLayer {
  Matrix weights;  // fan_in x fan_out
  Vector bias;     // fan_out
};

struct MlpGradient {
  double loss = 0.0;
  std::vector<DenseLayer> layers;
};

class MlpModel final : public Regressor {
 public:
  MlpModel(std::vector<DenseLayer> layers, TargetScaler scaler, MlpOptions options)
      : layers_(std::move(layers)), scaler_(std::move(scaler)), options_(std::move(options)) {
    detail::require(layers_.size() == 4, "MLP must have three hidden layers and one output layer");
    detail::require(layers_.back().weights.cols() == 2, "MLP output layer must be 2-D");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      detail::require(layers_[l].bias.size() == layers_[l].weights.cols(), "MLP bias size mismatch");
      detail::require(l == 0 || layers_[l].weights.rows() == layers_[l - 1].weights.cols(), "MLP layer shape mismatch");
      if (!layers_[l].weights.allFinite() || !layers_[l].bias.allFinite()) {
        throw NumericalError("MLP parameters are not finite");
      }
    }
  }

  // Output in standardized target units.
  Matrix forward_standardized(const Matrix& features) const {
    detail::require(features.cols() == layers_.front().weights.rows(), "MLP: input dimension mismatch");
    Matrix a = features;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Matrix z = (a * layers_[l].weights).rowwise() + layers_[l].bias.transpose();
      a = l + 1 < layers_.size() ? Matrix(z.cwiseMax(0.0)) : std::move(z);
    }
    return a;
  }

  Matrix predict(const Matrix& features) const override {
    return detail::map_row_blocks(
        features, [this](const Matrix& x) { return Matrix(scaler_.inverse(forward_standardized(x))); });
  }

  std::size_t input_dim() const override { return static_cast<std::size_t>(layers_.front().weights.rows()); }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& mutable_layers() noexcept { return layers_; }
  const TargetScaler& target_scaler() const noexcept { return scaler_; }
  const MlpOptions& options() const noexcept { return options_; }

 private:
  std::vector<DenseLayer> layers_;
  TargetScaler scaler_;
  MlpOptions options_;
};

// He-normal weights, zero biases.
inline MlpModel mlp_init(std::size_t input_dim, const MlpOptions& options, const TargetScaler& scaler, Rng& rng) {
  options.validate();
  std::vector<std::size_t> widths{input_dim};
  widths.insert(widths.end(), options.hidden.begin(), options.hidden.end());
  widths.push_back(2);
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto fan_in = static_cast<Eigen::Index>(widths[l]);
    const auto fan_out = static_cast<Eigen::Index>(widths[l + 1]);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    DenseLayer layer{Matrix(fan_in, fan_out), Vector::Zero(fan_out)};
    for (Eigen::Index c = 0; c < fan_out; ++c) {
      for (Eigen::Index r = 0; r < fan_in; ++r) layer.weights(r, c) = normal(rng);
    }
    layers.push_back(std::move(layer));
  }
  return MlpModel(std::move(layers), scaler, options);
}

// Mean over rows of ||net(x) - y||^2 (targets already standardized) and its
// gradient by backpropagation.
inline MlpGradient mlp_loss_gradient(const MlpModel& model, const Matrix& features, const Matrix& targets) {
  const auto& layers = model.layers();
  const std::size_t depth = layers.size();
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activations
  inputs.reserve(depth);
  pre.reserve(depth);
  Matrix a = features;
  for (std::size_t l = 0; l < depth; ++l) {
    inputs.push_back(a);
    pre.push_back((a * layers[l].weights).rowwise() + layers[l].bias.transpose());
    a = l + 1 < depth ? Matrix(pre.back().cwiseMax(0.0)) : pre.back();
  }
  const double rows = static_cast<double>(features.rows());
  const Matrix residual = a - targets;
  MlpGradient grad;
  grad.loss = residual.rowwise().squaredNorm().sum() / rows;
  grad.layers.resize(depth);
  Matrix upstream = 2.0 * residual / rows;
  for (std::size_t l = depth; l-- > 0;) {
    if (l + 1 < depth) upstream = upstream.cwiseProduct((pre[l].array() > 0.0).cast<double>().matrix());
    grad.layers[l].weights = inputs[l].transpose() * upstream;
    grad.layers[l].bias = upstream.colwise().sum().transpose();
    if (l > 0) upstream = upstream * layers[l].weights.transpose();
  }
  return grad;
}

// Mini-batch gradient descent with heavy-ball momentum on the mean squared
// error of standardized targets. The epoch order is reshuffled from the seed.
inline MlpModel mlp_fit(const LabeledDataset& train_full, const MlpOptions& options, std::uint64_t seed) {
  options.validate();
  Rng rng(seed);
  const LabeledDataset train = [&] {
    if (options.max_training_samples == 0 || options.max_training_samples >= train_full.size()) return train_full;
    auto order = random_permutation(train_full.size(), derive_seed(seed, 0x5eed));
    order.resize(options.max_training_samples);
    return train_full.subset(order);
  }();

  const TargetScaler scaler = TargetScaler::fit(train.labels());
  const Matrix targets = scaler.transform(train.labels());
  MlpModel model = mlp_init(train.dim(), options, scaler, rng);
  std::vector<DenseLayer> velocity;
  for (const auto& layer : model.layers()) {
    velocity.push_back({Matrix::Zero(layer.weights.rows(), layer.weights.cols()), Vector::Zero(layer.bias.size())});
  }

  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += options.batch_size) {
      const std::size_t stop = std::min(n, start + options.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, stop - start);
      const MlpGradient grad =
          mlp_loss_gradient(model, detail::gather_rows(train.features(), batch), detail::gather_rows(targets, batch));
      if (!std::isfinite(grad.loss)) {
        throw TrainingDiverged("mlp_fit: non-finite loss at epoch " + std::to_string(epoch) +
                               "; reduce the learning rate");
      }
      auto& layers = model.mutable_layers();
      for (std::size_t l = 0; l < layers.size(); ++l) {
        velocity[l].weights = options.momentum * velocity[l].weights - options.learning_rate * grad.layers[l].weights;
        velocity[l].bias = options.momentum * velocity[l].bias - options.learning_rate * grad.layers[l].bias;
        layers[l].weights += velocity[l].weights;
        layers[l].bias += velocity[l].bias;
      }
    }
  }
  for (const auto& layer : model.layers()) {
    if (!layer.weights.allFinite() || !layer.bias.allFinite()) throw TrainingDiverged("mlp_fit: parameters diverged");
  }
  return model;
}

inline RegressorTrainer mlp_trainer(MlpOptions options) {
  options.validate();
  return [options](const LabeledDataset& train, std::uint64_t seed) -> RegressorPtr {
    return std::make_shared<MlpModel>(mlp_fit(train, options, seed));
  };
}

inline RegressorTrainer elm_trainer(ElmOptions options) {
  return [options](const LabeledDataset& train, std::uint64_t seed) -> RegressorPtr {
    return std::make_shared<ElmModel>(elm_fit(train, options, seed));
  };
}

// Ignores the data: predicts a fixed position everywhere.
inline RegressorTrainer constant_trainer(Point2 value) {
  return [value](const LabeledDataset& train, std::uint64_t) -> RegressorPtr {
    return std::make_shared<ConstantRegressor>(value, train.dim());
  };
}

// Uninformative predictor: the training-label mean, whatever the input.
inline RegressorTrainer mean_trainer() {
  return [](const LabeledDataset& train, std::uint64_t) -> RegressorPtr {
    return std::make_shared<ConstantRegressor>(train.labels().colwise().mean().transpose(), train.dim());
  };
}

// ---------------------------------------------------------------------------
// Parameter dump
//
// {"format": "riskcal-model", "version": 1, "kind": "elm" | "mlp", ...}
// Matrices are {"rows": r, "cols": c, "data": [row-major values]}.

inline constexpr int kModelFormatVersion = 1;

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw SchemaError("model file: matrix size mismatch");
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)].get<double>();
  }
  return m;
}

inline nlohmann::json scaler_to_json(const TargetScaler& s) {
  return {{"mean", {s.mean(0), s.mean(1)}}, {"scale", {s.scale(0), s.scale(1)}}};
}

inline TargetScaler scaler_from_json(const nlohmann::json& j) {
  TargetScaler s;
  s.mean = Point2(j.at("mean")[0].get<double>(), j.at("mean")[1].get<double>());
  s.scale = Point2(j.at("scale")[0].get<double>(), j.at("scale")[1].get<double>());
  return s;
}

}  // namespace detail

inline nlohmann::json model_to_json(const Regressor& model) {
  nlohmann::json j{{"format", "riskcal-model"}, {"version", kModelFormatVersion}};
  if (const auto* elm = dynamic_cast<const ElmModel*>(&model)) {
    j["kind"] = "elm";
    j["ridge"] = elm->ridge();
    j["hidden_weights"] = detail::matrix_to_json(elm->hidden_weights());
    j["hidden_bias"] = detail::matrix_to_json(elm->hidden_bias());
    j["output_weights"] = detail::matrix_to_json(elm->output_weights());
    j["target_scaler"] = detail::scaler_to_json(elm->target_scaler());
  } else if (const auto* mlp = dynamic_cast<const MlpModel*>(&model)) {
    const auto& o = mlp->options();
    j["kind"] = "mlp";
    j["options"] = {{"hidden", o.hidden},         {"learning_rate", o.learning_rate},
                    {"momentum", o.momentum},     {"epochs", o.epochs},
                    {"batch_size", o.batch_size}, {"max_training_samples", o.max_training_samples}};
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : mlp->layers()) {
      layers.push_back({{"weights", detail::matrix_to_json(layer.weights)},
                        {"bias", detail::matrix_to_json(layer.bias)}});
    }
    j["layers"] = std::move(layers);
    j["target_scaler"] = detail::scaler_to_json(mlp->target_scaler());
  } else if (const auto* constant = dynamic_cast<const ConstantRegressor*>(&model)) {
    j["kind"] = "constant";
    j["value"] = {constant->value()(0), constant->value()(1)};
    j["input_dim"] = constant->input_dim();
  } else {
    throw InvalidInput("model_to_json: unsupported model type");
  }
  return j;
}

inline RegressorPtr model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "riskcal-model") throw SchemaError("model file: unknown format tag");
    if (j.at("version").get<int>() != kModelFormatVersion) throw SchemaError("model file: unsupported version");
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "elm") {
      return std::make_shared<ElmModel>(detail::matrix_from_json(j.at("hidden_weights")),
                                        Vector(detail::matrix_from_json(j.at("hidden_bias"))),
                                        detail::matrix_from_json(j.at("output_weights")), j.at("ridge").get<double>(),
                                        detail::scaler_from_json(j.at("target_scaler")));
    }
    if (kind == "mlp") {
      const auto& o = j.at("options");
      MlpOptions options;
      options.hidden = o.at("hidden").get<std::vector<std::size_t>>();
      options.learning_rate = o.at("learning_rate").get<double>();
      options.momentum = o.at("momentum").get<double>();
      options.epochs = o.at("epochs").get<std::size_t>();
      options.batch_size = o.at("batch_size").get<std::size_t>();
      options.max_training_samples = o.at("max_training_samples").get<std::size_t>();
      std::vector<DenseLayer> layers;
      for (const auto& layer : j.at("layers")) {
        layers.push_back({detail::matrix_from_json(layer.at("weights")), Vector(detail::matrix_from_json(layer.at("bias")))});
      }
      return std::make_shared<MlpModel>(std::move(layers), detail::scaler_from_json(j.at("target_scaler")), options);
    }
    if (kind == "constant") {
      return std::make_shared<ConstantRegressor>(Point2(j.at("value")[0].get<double>(), j.at("value")[1].get<double>()),
                                                 j.at("input_dim").get<std::size_t>());
    }
    throw SchemaError("model file: unknown model kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("model file: ") + e.what());
  }
}

inline void save_model(const std::string& path, const Regressor& model) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << model_to_json(model).dump();
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline RegressorPtr load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("model file '" + path + "': " + e.what());
  }
  return model_from_json(j);
}

}  // namespace riskcal
