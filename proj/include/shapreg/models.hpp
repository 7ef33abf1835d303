#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "shapreg/data.hpp"

namespace shapreg {

enum class ModelKind { linear, forest, kernel, network };

std::string kind_tag(ModelKind kind);
ModelKind kind_from_tag(const std::string& tag);

struct LinearParams {
    Eigen::VectorXd beta; // beta(0) intercept, beta(1..n) slopes
};

struct ForestNode {
    int feature = -1; // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0; // leaf mean
};

struct ForestParams {
    std::vector<std::vector<ForestNode>> trees; // node 0 is each tree's root
};

struct KernelParams {
    Eigen::MatrixXd x;     // training rows the dual expansion runs over
    Eigen::VectorXd alpha; // dual coefficients on centered targets
    double gamma = 0.0;
    double y_mean = 0.0; // predictions shrink toward this as lambda grows
};

struct NetworkParams {
    std::vector<Eigen::MatrixXd> w; // layer weights, row-major out x in
    std::vector<Eigen::VectorXd> b;
    Eigen::VectorXd x_mean, x_scale; // training standardization, applied in predict
    double y_mean = 0.0, y_scale = 1.0;
};

// Uniform predict contract over the four reference learners. Parameters are
// opaque to callers; prediction is deterministic once trained.
struct TrainedModel {
    ModelKind kind = ModelKind::linear;
    Eigen::Index feature_count = 0;
    double base_loss = 0.0; // training RMSE
    std::uint64_t seed = 0;
    std::variant<LinearParams, ForestParams, KernelParams, NetworkParams> params;

    // Stable identity used to detect decompositions built on different models.
    std::string id() const;
};

// Hyperparameters for every learner in one bundle so pipeline configs and
// sweeps can carry a single object regardless of kind.
struct ModelHyper {
    int trees = 200;
    int max_depth = 12;
    int min_leaf = 3;
    double feature_frac = 1.0 / 3.0;
    double gamma = 0.5;
    double lambda = 1e-3;
    std::vector<int> hidden = {16, 16};
    int epochs = 200;
    double step = 1e-2;
};

// Ordinary least squares with intercept; requires m > n + 1 and full rank.
TrainedModel fit_linear(const Dataset& ds);

// Bagged CART regression trees: bootstrap samples of size m, per-split
// feature subsampling, variance-reduction splits at midpoints between sorted
// unique values. Prediction is the mean over trees.
TrainedModel fit_forest(const Dataset& ds, int trees, int max_depth, int min_leaf,
                        double feature_frac, std::uint64_t seed);

// RBF kernel ridge: alpha = (K + lambda I)^-1 (y - mean(y)) with
// K_ij = exp(-gamma ||x_i - x_j||^2); predictions add mean(y) back, so the
// large-lambda limit shrinks toward the target mean.
TrainedModel fit_kernel(const Dataset& ds, double gamma, double lambda);

// Feedforward net with tanh hidden layers and a linear head, trained by
// mini-batch Adam (0.9/0.999) on MSE with batch size min(32, m). Inputs and
// targets are standardized internally; deterministic for a fixed seed.
TrainedModel fit_network(const Dataset& ds, const std::vector<int>& hidden, int epochs,
                         double step, std::uint64_t seed);

// Dispatch on kind using the bundled hyperparameters.
TrainedModel fit_model(ModelKind kind, const Dataset& ds, const ModelHyper& hyper,
                       std::uint64_t seed);

Eigen::VectorXd predict(const TrainedModel& model, const Eigen::MatrixXd& rows);

// Out-of-sample RMSE by training size, with the convergence rate fitted on
// the longest strictly decreasing run of averaged losses ending at the
// largest size (log-log least squares; xi = negative slope).
struct LearningCurve {
    std::vector<Eigen::Index> sizes;
    std::vector<double> losses;
    double xi = 0.0;
    int fit_begin = 0; // inclusive index range of the fitted section
    int fit_end = 0;   // inclusive
};

using SampleGenerator = std::function<Dataset(Eigen::Index m, std::uint64_t seed)>;

// Rate fit alone, shared by both sampling modes below.
LearningCurve fit_rate(const std::vector<Eigen::Index>& sizes, const std::vector<double>& losses);

// Dataset mode: per repetition, shuffle with a derived seed, train on the
// first m_q rows and score on a held-out tail of up to test_rows rows.
LearningCurve learning_curve(ModelKind kind, const ModelHyper& hyper, const Dataset& ds,
                             const std::vector<Eigen::Index>& sizes, int reps,
                             std::uint64_t seed, Eigen::Index test_rows = 1000);

// Generator mode: fresh train and test samples drawn per repetition.
LearningCurve learning_curve(ModelKind kind, const ModelHyper& hyper, const SampleGenerator& gen,
                             const std::vector<Eigen::Index>& sizes, int reps,
                             std::uint64_t seed, Eigen::Index test_rows = 1000);

nlohmann::json to_json(const TrainedModel& model);
TrainedModel model_from_json(const nlohmann::json& j);

double rmse(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

} // namespace shapreg
