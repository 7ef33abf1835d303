#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "shapreg/errors.hpp"
#include "shapreg/models.hpp"

using namespace shapreg;

namespace {

Dataset linear_noise_ds(Eigen::Index m, double sigma, std::uint64_t seed) {
    std::mt19937_64 eng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Dataset ds;
    ds.names = {"x1", "x2"};
    ds.features.resize(m, 2);
    ds.target.resize(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        const double x1 = gauss(eng), x2 = gauss(eng);
        ds.features(i, 0) = x1;
        ds.features(i, 1) = x2;
        ds.target(i) = 1.0 + 2.0 * x1 - x2 + (sigma > 0.0 ? sigma * gauss(eng) : 0.0);
    }
    return ds;
}

Dataset permuted(const Dataset& ds, std::uint64_t seed) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(ds.rows()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::mt19937_64 eng(seed);
    std::shuffle(order.begin(), order.end(), eng);
    Dataset out = ds;
    for (Eigen::Index i = 0; i < ds.rows(); ++i) {
        out.features.row(i) = ds.features.row(order[static_cast<std::size_t>(i)]);
        out.target(i) = ds.target(order[static_cast<std::size_t>(i)]);
    }
    return out;
}

} // namespace

TEST_CASE("linear fit recovers an exact line") {
    Dataset ds;
    ds.names = {"x1"};
    ds.features.resize(5, 1);
    ds.features << -2, -1, 0, 1, 2;
    ds.target.resize(5);
    for (Eigen::Index i = 0; i < 5; ++i) ds.target(i) = 2.0 * ds.features(i, 0) + 3.0;
    TrainedModel model = fit_linear(ds);
    const auto& params = std::get<LinearParams>(model.params);
    CHECK(params.beta(0) == doctest::Approx(3.0).epsilon(1e-10));
    CHECK(params.beta(1) == doctest::Approx(2.0).epsilon(1e-10));
    CHECK(model.base_loss < 1e-10);
    CHECK(model.feature_count == 1);
}

TEST_CASE("linear fit on constant target gives zero slope and mean intercept") {
    Dataset ds;
    ds.names = {"x1"};
    ds.features.resize(4, 1);
    ds.features << 1, 2, 3, 4;
    ds.target.resize(4);
    ds.target.setConstant(5.5);
    TrainedModel model = fit_linear(ds);
    const auto& params = std::get<LinearParams>(model.params);
    CHECK(params.beta(0) == doctest::Approx(5.5).epsilon(1e-12));
    CHECK(std::abs(params.beta(1)) < 1e-12);
}

TEST_CASE("linear fit rejects duplicated feature columns") {
    Dataset ds;
    ds.names = {"a", "b"};
    ds.features.resize(6, 2);
    for (Eigen::Index i = 0; i < 6; ++i) {
        ds.features(i, 0) = static_cast<double>(i);
        ds.features(i, 1) = static_cast<double>(i); // same column twice
    }
    ds.target = ds.features.col(0);
    CHECK_THROWS_WITH_AS(fit_linear(ds), doctest::Contains("rank"), Error);
}

TEST_CASE("linear fit rejects too few rows") {
    Dataset ds;
    ds.names = {"a", "b"};
    ds.features.resize(3, 2); // m = n + 1 is not enough
    ds.features << 1, 2, 3, 4, 5, 7;
    ds.target.resize(3);
    ds.target << 1, 2, 3;
    try {
        fit_linear(ds);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.stage() == Stage::training);
    }
}

TEST_CASE("linear residuals are orthogonal to every regressor") {
    Dataset ds = linear_noise_ds(300, 0.7, 5);
    TrainedModel model = fit_linear(ds);
    Eigen::VectorXd residual = ds.target - predict(model, ds.features);
    CHECK(std::abs(residual.mean()) < 1e-8);
    for (Eigen::Index c = 0; c < ds.cols(); ++c)
        CHECK(std::abs(residual.dot(ds.features.col(c))) / static_cast<double>(ds.rows()) < 1e-8);
}

TEST_CASE("linear predictions on training rows are the fitted values") {
    Dataset ds = linear_noise_ds(50, 0.3, 9);
    TrainedModel model = fit_linear(ds);
    const auto& params = std::get<LinearParams>(model.params);
    Eigen::VectorXd manual =
        (ds.features * params.beta.tail(2)).array() + params.beta(0);
    Eigen::VectorXd pred = predict(model, ds.features);
    for (Eigen::Index i = 0; i < ds.rows(); ++i)
        CHECK(pred(i) == doctest::Approx(manual(i)).epsilon(1e-14));
}

TEST_CASE("linear fit is invariant under training-row permutation") {
    Dataset ds = linear_noise_ds(80, 0.4, 11);
    TrainedModel a = fit_linear(ds);
    TrainedModel b = fit_linear(permuted(ds, 99));
    Eigen::MatrixXd query = linear_noise_ds(7, 0.0, 12).features;
    Eigen::VectorXd pa = predict(a, query), pb = predict(b, query);
    for (Eigen::Index i = 0; i < query.rows(); ++i)
        CHECK(pa(i) == doctest::Approx(pb(i)).epsilon(1e-9));
}

TEST_CASE("kernel ridge matches the two-point closed form") {
    Dataset ds;
    ds.names = {"x1"};
    ds.features.resize(2, 1);
    ds.features << 0.0, 1.0;
    ds.target.resize(2);
    ds.target << 0.0, 2.0;
    const double gamma = 0.8, lambda = 0.3;
    TrainedModel model = fit_kernel(ds, gamma, lambda);
    // Centered targets (-1, 1); symmetric 2x2 solve gives
    // alpha = (-1, 1) / (1 + lambda - exp(-gamma)).
    const double k = std::exp(-gamma);
    const double denom = 1.0 + lambda - k;
    const auto& params = std::get<KernelParams>(model.params);
    CHECK(params.alpha(0) == doctest::Approx(-1.0 / denom).epsilon(1e-12));
    CHECK(params.alpha(1) == doctest::Approx(1.0 / denom).epsilon(1e-12));
    Eigen::MatrixXd at_zero(1, 1);
    at_zero << 0.0;
    CHECK(predict(model, at_zero)(0) ==
          doctest::Approx(1.0 + (k - 1.0) / denom).epsilon(1e-12));
}

TEST_CASE("kernel ridge with one training row predicts that row's target") {
    Dataset ds;
    ds.names = {"x1"};
    ds.features.resize(1, 1);
    ds.features << 2.5;
    ds.target.resize(1);
    ds.target << 4.0;
    TrainedModel model = fit_kernel(ds, 1.0, 0.5);
    Eigen::MatrixXd rows(2, 1);
    rows << 2.5, -10.0; // the centered dual part is zero, so everything hits the mean
    Eigen::VectorXd pred = predict(model, rows);
    CHECK(pred(0) == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(pred(1) == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("kernel ridge rejects non-positive hyperparameters") {
    Dataset ds = linear_noise_ds(10, 0.1, 3);
    CHECK_THROWS_AS(fit_kernel(ds, 0.0, 1.0), Error);
    CHECK_THROWS_AS(fit_kernel(ds, -1.0, 1.0), Error);
    CHECK_THROWS_AS(fit_kernel(ds, 1.0, 0.0), Error);
    CHECK_THROWS_AS(fit_kernel(ds, 1.0, -0.5), Error);
}

TEST_CASE("kernel ridge shrinks toward the target mean as the penalty grows") {
    Dataset ds = linear_noise_ds(30, 0.3, 7);
    const double mean = ds.target.mean();
    double previous = std::numeric_limits<double>::infinity();
    for (double lambda : {1e2, 1e4, 1e6}) {
        TrainedModel model = fit_kernel(ds, 0.5, lambda);
        const double dev = (predict(model, ds.features).array() - mean).abs().maxCoeff();
        CHECK(dev < previous);
        previous = dev;
    }
    CHECK(previous < 1e-3); // measured 1.4e-5 at the largest penalty
}

TEST_CASE("kernel fit is invariant under training-row permutation") {
    Dataset ds = linear_noise_ds(60, 0.4, 13);
    TrainedModel a = fit_kernel(ds, 0.7, 0.05);
    TrainedModel b = fit_kernel(permuted(ds, 101), 0.7, 0.05);
    Eigen::MatrixXd query = linear_noise_ds(7, 0.0, 14).features;
    Eigen::VectorXd pa = predict(a, query), pb = predict(b, query);
    for (Eigen::Index i = 0; i < query.rows(); ++i)
        CHECK(pa(i) == doctest::Approx(pb(i)).epsilon(1e-8));
}

TEST_CASE("single stump forest on constant target predicts the constant") {
    Dataset ds = linear_noise_ds(40, 0.0, 17);
    ds.target.setConstant(2.25);
    TrainedModel model = fit_forest(ds, 1, 0, 1, 1.0, 19);
    Eigen::MatrixXd query = linear_noise_ds(6, 0.0, 18).features;
    Eigen::VectorXd pred = predict(model, query);
    for (Eigen::Index i = 0; i < query.rows(); ++i)
        CHECK(pred(i) == doctest::Approx(2.25).epsilon(1e-12));
}

TEST_CASE("depth-zero forest predicts one value everywhere") {
    Dataset ds = linear_noise_ds(40, 0.5, 23);
    TrainedModel model = fit_forest(ds, 3, 0, 1, 1.0, 29);
    const auto& params = std::get<ForestParams>(model.params);
    double root_mean = 0.0;
    for (const auto& tree : params.trees) {
        CHECK(tree.size() == 1); // no splits at depth 0
        root_mean += tree[0].value;
    }
    root_mean /= static_cast<double>(params.trees.size());
    Eigen::MatrixXd query = linear_noise_ds(5, 0.0, 24).features;
    Eigen::VectorXd pred = predict(model, query);
    for (Eigen::Index i = 0; i < query.rows(); ++i)
        CHECK(pred(i) == doctest::Approx(root_mean).epsilon(1e-14));
}

TEST_CASE("deep forest learns a step function to near-zero training error") {
    const Eigen::Index m = 500;
    Dataset ds;
    ds.names = {"x1", "x2"};
    ds.features.resize(m, 2);
    ds.target.resize(m);
    std::mt19937_64 eng(1);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (Eigen::Index i = 0; i < m; ++i) {
        // grid over [-1,-0.1] and [0.1,1] with a gap straddling the jump
        const double u = -1.0 + 1.8 * static_cast<double>(i) / static_cast<double>(m - 1);
        const double x1 = u < -0.1 ? u : u + 0.2;
        ds.features(i, 0) = x1;
        ds.features(i, 1) = gauss(eng);
        ds.target(i) = x1 > 0.0 ? 1.0 : -1.0;
    }
    TrainedModel model = fit_forest(ds, 50, 12, 1, 1.0, 1);
    const double sd = std::sqrt((ds.target.array() - ds.target.mean()).square().mean());
    CHECK(model.base_loss < 0.05 * sd); // measured exactly zero
}

TEST_CASE("forest rejects bad hyperparameters") {
    Dataset ds = linear_noise_ds(20, 0.2, 31);
    CHECK_THROWS_AS(fit_forest(ds, 0, 4, 1, 1.0, 1), Error);
    CHECK_THROWS_AS(fit_forest(ds, 5, -1, 1, 1.0, 1), Error);
    CHECK_THROWS_AS(fit_forest(ds, 5, 4, 0, 1.0, 1), Error);
    CHECK_THROWS_AS(fit_forest(ds, 5, 4, 1, 0.0, 1), Error);
    CHECK_THROWS_AS(fit_forest(ds, 5, 4, 1, 1.5, 1), Error);
}

TEST_CASE("forest training is deterministic for a fixed seed") {
    Dataset ds = linear_noise_ds(120, 0.5, 37);
    TrainedModel a = fit_forest(ds, 20, 6, 2, 0.5, 777);
    TrainedModel b = fit_forest(ds, 20, 6, 2, 0.5, 777);
    Eigen::MatrixXd query = linear_noise_ds(9, 0.0, 38).features;
    Eigen::VectorXd pa = predict(a, query), pb = predict(b, query);
    for (Eigen::Index i = 0; i < query.rows(); ++i) CHECK(pa(i) == pb(i));
    // and twice through the same model is identical too
    Eigen::VectorXd pa2 = predict(a, query);
    for (Eigen::Index i = 0; i < query.rows(); ++i) CHECK(pa(i) == pa2(i));
}

TEST_CASE("network fit tracks OLS on a noisy linear target") {
    Dataset train = linear_noise_ds(1000, 0.5, 14);
    Dataset test = linear_noise_ds(500, 0.5, 1014);
    TrainedModel ols = fit_linear(train);
    TrainedModel net = fit_network(train, {8}, 200, 1e-2, 14);
    const double ols_rmse = rmse(predict(ols, test.features), test.target);
    const double net_rmse = rmse(predict(net, test.features), test.target);
    CHECK(net_rmse <= 1.5 * ols_rmse); // measured ratio 1.02 on this seed
}

TEST_CASE("network fit on constant target converges to the constant") {
    Dataset ds = linear_noise_ds(200, 0.0, 21);
    ds.target.setConstant(3.7);
    TrainedModel net = fit_network(ds, {8}, 200, 1e-2, 21);
    Eigen::VectorXd pred = predict(net, ds.features);
    CHECK((pred.array() - 3.7).abs().maxCoeff() < 1e-2); // measured ~1e-15
}

TEST_CASE("network rejects bad hyperparameters") {
    Dataset ds = linear_noise_ds(20, 0.2, 41);
    CHECK_THROWS_AS(fit_network(ds, {}, 10, 1e-2, 1), Error);
    CHECK_THROWS_AS(fit_network(ds, {0}, 10, 1e-2, 1), Error);
    CHECK_THROWS_AS(fit_network(ds, {8}, 0, 1e-2, 1), Error);
    CHECK_THROWS_AS(fit_network(ds, {8}, 1, 0.0, 1), Error);
    CHECK_THROWS_AS(fit_network(ds, {8}, 1, -1.0, 1), Error);
}

TEST_CASE("network training is deterministic for a fixed seed") {
    Dataset ds = linear_noise_ds(100, 0.5, 43);
    TrainedModel a = fit_network(ds, {6}, 30, 1e-2, 555);
    TrainedModel b = fit_network(ds, {6}, 30, 1e-2, 555);
    Eigen::MatrixXd query = linear_noise_ds(9, 0.0, 44).features;
    Eigen::VectorXd pa = predict(a, query), pb = predict(b, query);
    for (Eigen::Index i = 0; i < query.rows(); ++i) CHECK(pa(i) == pb(i));
}

TEST_CASE("predict rejects rows of the wrong width") {
    Dataset ds = linear_noise_ds(20, 0.2, 47);
    TrainedModel model = fit_linear(ds);
    Eigen::MatrixXd wrong(3, 5);
    wrong.setZero();
    CHECK_THROWS_WITH_AS(predict(model, wrong), doctest::Contains("column"), Error);
}

TEST_CASE("every model kind round-trips through JSON with identical predictions") {
    Dataset ds = linear_noise_ds(60, 0.4, 53);
    Eigen::MatrixXd query = linear_noise_ds(8, 0.0, 54).features;
    ModelHyper hyper;
    hyper.trees = 10;
    hyper.max_depth = 5;
    hyper.epochs = 20;
    for (ModelKind kind :
         {ModelKind::linear, ModelKind::forest, ModelKind::kernel, ModelKind::network}) {
        TrainedModel model = fit_model(kind, ds, hyper, 61);
        TrainedModel copy = model_from_json(nlohmann::json::parse(to_json(model).dump()));
        CHECK(copy.kind == model.kind);
        CHECK(copy.feature_count == model.feature_count);
        CHECK(copy.id() == model.id());
        Eigen::VectorXd pa = predict(model, query), pb = predict(copy, query);
        for (Eigen::Index i = 0; i < query.rows(); ++i) CHECK(pa(i) == pb(i));
    }
}

TEST_CASE("model kind tags round-trip and ids separate the kinds") {
    for (ModelKind kind :
         {ModelKind::linear, ModelKind::forest, ModelKind::kernel, ModelKind::network})
        CHECK(kind_from_tag(kind_tag(kind)) == kind);
    CHECK_THROWS_AS(kind_from_tag("boosted"), Error);
    Dataset ds = linear_noise_ds(30, 0.3, 59);
    ModelHyper hyper;
    hyper.trees = 3;
    hyper.epochs = 5;
    CHECK(fit_model(ModelKind::linear, ds, hyper, 1).id() !=
          fit_model(ModelKind::kernel, ds, hyper, 1).id());
}

TEST_CASE("rate fit recovers an exact power law") {
    std::vector<Eigen::Index> sizes = {100, 200, 400, 800};
    std::vector<double> losses;
    for (Eigen::Index m : sizes) losses.push_back(3.0 * std::pow(static_cast<double>(m), -0.5));
    LearningCurve curve = fit_rate(sizes, losses);
    CHECK(curve.xi == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(curve.fit_begin == 0);
    CHECK(curve.fit_end == 3);
}

TEST_CASE("rate fit rejects flat losses") {
    std::vector<Eigen::Index> sizes = {100, 200, 400};
    std::vector<double> losses = {1.0, 1.0, 1.0};
    CHECK_THROWS_WITH_AS(fit_rate(sizes, losses), doctest::Contains("decreasing"), Error);
}

TEST_CASE("rate fit is invariant under loss rescaling") {
    std::vector<Eigen::Index> sizes = {50, 100, 200, 400, 800};
    std::vector<double> losses = {2.0, 1.1, 0.8, 0.55, 0.4};
    LearningCurve a = fit_rate(sizes, losses);
    for (double& loss : losses) loss *= 7.3;
    LearningCurve b = fit_rate(sizes, losses);
    CHECK(std::abs(a.xi - b.xi) < 1e-12);
}

TEST_CASE("rate fit uses the decreasing run ending at the largest size") {
    std::vector<Eigen::Index> sizes = {100, 200, 400, 800};
    std::vector<double> losses = {1.0, 1.2, 0.9, 0.8};
    LearningCurve curve = fit_rate(sizes, losses);
    CHECK(curve.fit_begin == 1);
    CHECK(curve.fit_end == 3);
    // independent log-log least squares over the last three points
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = 1; i <= 3; ++i) {
        const double lx = std::log(static_cast<double>(sizes[static_cast<std::size_t>(i)]));
        const double ly = std::log(losses[static_cast<std::size_t>(i)]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double slope = (3.0 * sxy - sx * sy) / (3.0 * sxx - sx * sx);
    CHECK(curve.xi == doctest::Approx(-slope).epsilon(1e-12));

    std::vector<double> tail_only = {1.0, 0.9, 1.1, 0.9};
    LearningCurve tail = fit_rate(sizes, tail_only);
    CHECK(tail.fit_begin == 2);
    CHECK(tail.fit_end == 3);
}

TEST_CASE("rate fit validates its inputs") {
    CHECK_THROWS_AS(fit_rate({100}, {1.0}), Error);
    CHECK_THROWS_AS(fit_rate({100, 100}, {1.0, 0.5}), Error);
    CHECK_THROWS_AS(fit_rate({100, 200}, {1.0, 0.0}), Error);
    CHECK_THROWS_AS(fit_rate({100, 200}, {1.0, -0.5}), Error);
    CHECK_THROWS_AS(fit_rate({100, 200, 400}, {1.0, 0.5}), Error);
}

TEST_CASE("learning curve over a fixed dataset improves with training size") {
    Dataset ds = linear_noise_ds(4000, 0.5, 31);
    ModelHyper hyper;
    LearningCurve curve =
        learning_curve(ModelKind::linear, hyper, ds, {20, 60, 2000}, 8, 31, 1000);
    REQUIRE(curve.losses.size() == 3);
    CHECK(curve.losses[0] > curve.losses[1]);
    CHECK(curve.losses[1] > curve.losses[2]);
    CHECK(curve.xi > 0.0);
    CHECK(curve.fit_begin == 0);
    CHECK(curve.fit_end == 2);

    LearningCurve again =
        learning_curve(ModelKind::linear, hyper, ds, {20, 60, 2000}, 8, 31, 1000);
    for (std::size_t i = 0; i < 3; ++i) CHECK(curve.losses[i] == again.losses[i]);
}

TEST_CASE("learning curve over a generator improves with training size") {
    SampleGenerator gen = [](Eigen::Index m, std::uint64_t s) {
        return linear_noise_ds(m, 0.5, s);
    };
    ModelHyper hyper;
    LearningCurve curve =
        learning_curve(ModelKind::linear, hyper, gen, {20, 60, 2000}, 8, 41, 500);
    CHECK(curve.losses[0] > curve.losses[1]);
    CHECK(curve.losses[1] > curve.losses[2]);
    CHECK(curve.xi > 0.0);
}

TEST_CASE("learning curve validates sizes, reps, and held-out rows") {
    Dataset ds = linear_noise_ds(100, 0.5, 67);
    ModelHyper hyper;
    CHECK_THROWS_AS(learning_curve(ModelKind::linear, hyper, ds, {50}, 2, 1, 10), Error);
    CHECK_THROWS_AS(learning_curve(ModelKind::linear, hyper, ds, {50, 40}, 2, 1, 10), Error);
    CHECK_THROWS_AS(learning_curve(ModelKind::linear, hyper, ds, {20, 50}, 0, 1, 10), Error);
    CHECK_THROWS_AS(learning_curve(ModelKind::linear, hyper, ds, {20, 100}, 2, 1, 10), Error);
    SampleGenerator gen = [](Eigen::Index m, std::uint64_t s) {
        return linear_noise_ds(m, 0.5, s);
    };
    CHECK_THROWS_AS(learning_curve(ModelKind::linear, hyper, gen, {20, 50}, 2, 1, 0), Error);
    CHECK_THROWS_AS(
        learning_curve(ModelKind::linear, hyper, SampleGenerator{}, {20, 50}, 2, 1, 10), Error);
}

TEST_CASE("rmse checks vector lengths") {
    Eigen::VectorXd a(3), b(2);
    a.setZero();
    b.setZero();
    CHECK_THROWS_AS(rmse(a, b), Error);
    Eigen::VectorXd c(3);
    c << 1, 2, 3;
    Eigen::VectorXd d(3);
    d << 1, 2, 7;
    CHECK(rmse(c, d) == doctest::Approx(std::sqrt(16.0 / 3.0)).epsilon(1e-14));
}
