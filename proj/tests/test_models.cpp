#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "riskcal/data.hpp"
#include "riskcal/models.hpp"

using namespace riskcal;

namespace {

LabeledDataset linear_task(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix x(static_cast<Eigen::Index>(n), 5);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < 5; ++j) x(i, j) = u(rng);
  }
  Matrix a(5, 2);
  a << 1, -2, 0.5, 3, -1, 1, 2, 0, 0.25, -0.5;
  return LabeledDataset(x, x * a);
}

MlpOptions small_mlp() {
  MlpOptions o;
  o.hidden = {32, 16, 8};
  o.epochs = 100;
  return o;
}

}  // namespace

TEST(Elm, SinglePointIsReproduced) {
  Matrix x(1, 3);
  x << 0.2, 0.5, 0.9;
  Matrix y(1, 2);
  y << 4.0, -1.5;
  const ElmModel m = elm_fit(LabeledDataset(x, y), ElmOptions{64, 1e-10}, 1);
  EXPECT_NEAR((elm_predict(m, x.row(0).transpose()) - Point2(4.0, -1.5)).norm(), 0.0, 1e-6);
}

TEST(Elm, BeatsConstantOnLinearTarget) {
  const auto train = linear_task(100, 1);
  const auto valid = linear_task(500, 2);
  const ElmModel m = elm_fit(train, ElmOptions{}, 3);
  const ConstantRegressor mean(train.labels().colwise().mean().transpose(), train.dim());
  EXPECT_LT(validation_mse(m, valid), validation_mse(mean, valid));
}

TEST(Elm, DeterministicForSeed) {
  const auto train = linear_task(50, 4);
  EXPECT_EQ(elm_fit(train, ElmOptions{}, 9).output_weights(), elm_fit(train, ElmOptions{}, 9).output_weights());
  EXPECT_NE(elm_fit(train, ElmOptions{}, 9).output_weights(), elm_fit(train, ElmOptions{}, 10).output_weights());
}

TEST(Elm, ZeroOutputWeightsPredictZero) {
  const ElmModel m(Matrix::Ones(3, 4), Vector::Zero(4), Matrix::Zero(4, 2), 1e-2, TargetScaler{});
  EXPECT_EQ(elm_predict(m, Vector::Zero(3)), Point2(0, 0));
}

TEST(Elm, BatchEqualsRowwiseAndChecksDimension) {
  const auto train = linear_task(40, 5);
  const ElmModel m = elm_fit(train, ElmOptions{128, 1e-2}, 6);
  const Matrix batch = m.predict(train.features());
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    // gemm vs gemv: equal up to rounding
    EXPECT_LE((Point2(batch.row(i).transpose()) - elm_predict(m, train.features().row(i).transpose())).norm(), 1e-12);
  }
  EXPECT_THROW(elm_predict(m, Vector::Zero(4)), InvalidInput);
}

TEST(Elm, NormalEquationsResidual) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto train = linear_task(100, seed);
    const ElmModel m = elm_fit(train, ElmOptions{}, seed + 10);
    const Matrix phi = m.hidden_activations(train.features());
    const Matrix y = m.target_scaler().transform(train.labels());
    Matrix gram = phi.transpose() * phi;
    gram.diagonal().array() += m.ridge();
    const Matrix rhs = phi.transpose() * y;
    EXPECT_LE((gram * m.output_weights() - rhs).norm(), 1e-8 * rhs.norm());
  }
}

TEST(Mlp, ConstantLabels) {
  Matrix x = linear_task(64, 7).features();
  Matrix y(64, 2);
  y.col(0).setConstant(3.0);
  y.col(1).setConstant(-7.0);
  const LabeledDataset train(x, y);
  const MlpModel m = mlp_fit(train, small_mlp(), 8);
  EXPECT_LT(validation_mse(m, train), 1e-2);
}

TEST(Mlp, DeterministicForSeed) {
  const auto train = linear_task(50, 9);
  const MlpModel a = mlp_fit(train, small_mlp(), 3);
  const MlpModel b = mlp_fit(train, small_mlp(), 3);
  for (std::size_t l = 0; l < a.layers().size(); ++l) {
    EXPECT_EQ(a.layers()[l].weights, b.layers()[l].weights);
    EXPECT_EQ(a.layers()[l].bias, b.layers()[l].bias);
  }
}

TEST(Mlp, RequiresThreeHiddenLayers) {
  MlpOptions o;
  o.hidden = {8, 8};
  EXPECT_THROW(o.validate(), InvalidInput);
}

TEST(Mlp, DivergenceIsReported) {
  MlpOptions o = small_mlp();
  o.learning_rate = 1e6;
  o.momentum = 0.0;
  EXPECT_THROW(mlp_fit(linear_task(64, 1), o, 1), TrainingDiverged);
}

TEST(Mlp, GradientMatchesFiniteDifferences) {
  MlpOptions o;
  o.hidden = {5, 4, 3};
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    Rng rng(seed);
    MlpModel model = mlp_init(4, o, TargetScaler{}, rng);
    // Nonzero biases so no unit sits exactly at the ReLU kink.
    std::normal_distribution<double> normal(0.0, 0.3);
    for (auto& layer : model.mutable_layers()) {
      for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = normal(rng);
    }
    Matrix x(6, 4), y(6, 2);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng) * 3.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = normal(rng) * 3.0;
    const MlpGradient grad = mlp_loss_gradient(model, x, y);

    const double h = 1e-5;
    double num_sq = 0.0, diff_sq = 0.0;
    for (std::size_t l = 0; l < model.layers().size(); ++l) {
      auto probe = [&](double& param, double analytic) {
        const double saved = param;
        param = saved + h;
        const double up = mlp_loss_gradient(model, x, y).loss;
        param = saved - h;
        const double down = mlp_loss_gradient(model, x, y).loss;
        param = saved;
        const double numeric = (up - down) / (2.0 * h);
        num_sq += numeric * numeric;
        diff_sq += (numeric - analytic) * (numeric - analytic);
      };
      auto& layer = model.mutable_layers()[l];
      for (Eigen::Index i = 0; i < layer.weights.size(); ++i) probe(layer.weights.data()[i], grad.layers[l].weights.data()[i]);
      for (Eigen::Index i = 0; i < layer.bias.size(); ++i) probe(layer.bias.data()[i], grad.layers[l].bias.data()[i]);
    }
    EXPECT_LE(std::sqrt(diff_sq / num_sq), 1e-4) << "seed " << seed;
  }
}

// More data, lower validation error: averaged over 20 seeds at sizes 10, 40, 160.
TEST(Mlp, ValidationErrorFallsWithTrainingSize) {
  const SyntheticTask task;
  const LabeledDataset valid = task.sample(1000, 123);
  const std::size_t sizes[] = {10, 40, 160};
  double mse[3] = {0, 0, 0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (int s = 0; s < 3; ++s) {
      const LabeledDataset train = task.sample(sizes[s], 1000 + seed * 7 + static_cast<std::uint64_t>(s));
      mse[s] += validation_mse(mlp_fit(train, MlpOptions{}, seed), valid) / 20.0;
    }
  }
  EXPECT_GT(mse[0], mse[1]);
  EXPECT_GT(mse[1], mse[2]);
}

TEST(Mlp, TrainingCapSubsamples) {
  const auto train = linear_task(100, 3);
  MlpOptions o = small_mlp();
  o.max_training_samples = 10;
  MlpOptions all = small_mlp();
  EXPECT_NE(mlp_fit(train, o, 1).layers()[0].weights, mlp_fit(train, all, 1).layers()[0].weights);
  o.max_training_samples = 100;  // cap at or above n leaves the data alone
  EXPECT_EQ(mlp_fit(train, o, 1).layers()[0].weights, mlp_fit(train, all, 1).layers()[0].weights);
}

TEST(ValidationMse, Examples) {
  Matrix x = Matrix::Zero(2, 1);
  Matrix y(2, 2);
  y << 3, 4, -3, 4;
  const LabeledDataset d(x, y);
  EXPECT_EQ(validation_mse(ConstantRegressor(Point2(0, 0), 1), d), 25.0);
  EXPECT_EQ(validation_mse(ConstantRegressor(Point2(3, 4), 1), d), (0.0 + 36.0) / 2.0);
  const FunctionRegressor perfect([](const Vector& v) { return Point2(v(0), v(0)); }, 1);
  EXPECT_EQ(validation_mse(perfect, LabeledDataset(x, Matrix::Zero(2, 2))), 0.0);
}

TEST(ModelDump, RoundTripPredictsIdentically) {
  const auto train = linear_task(60, 11);
  const auto dir = std::filesystem::temp_directory_path() / "riskcal_model_test";
  std::filesystem::create_directories(dir);
  const std::vector<RegressorPtr> models = {
      std::make_shared<ElmModel>(elm_fit(train, ElmOptions{32, 1e-2}, 1)),
      std::make_shared<MlpModel>(mlp_fit(train, small_mlp(), 2)),
      std::make_shared<ConstantRegressor>(Point2(1.25, -3.5), 5)};
  for (std::size_t i = 0; i < models.size(); ++i) {
    const std::string path = (dir / ("m" + std::to_string(i) + ".json")).string();
    save_model(path, *models[i]);
    const RegressorPtr back = load_model(path);
    EXPECT_EQ(back->predict(train.features()), models[i]->predict(train.features()));
  }
  auto j = model_to_json(*models[0]);
  j["version"] = 99;
  EXPECT_THROW(model_from_json(j), SchemaError);
  EXPECT_THROW(load_model((dir / "missing.json").string()), IoError);
}
