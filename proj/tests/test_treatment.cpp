#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "shapreg/data.hpp"
#include "shapreg/errors.hpp"
#include "shapreg/models.hpp"
#include "shapreg/treatment.hpp"

using namespace shapreg;

namespace {

std::vector<Eigen::Index> iota_rows(Eigen::Index m) {
    std::vector<Eigen::Index> ids(static_cast<std::size_t>(m));
    std::iota(ids.begin(), ids.end(), Eigen::Index{0});
    return ids;
}

TrainedModel hand_linear(const std::vector<double>& beta_with_intercept) {
    TrainedModel model;
    model.kind = ModelKind::linear;
    model.feature_count = static_cast<Eigen::Index>(beta_with_intercept.size()) - 1;
    LinearParams params;
    params.beta = Eigen::Map<const Eigen::VectorXd>(beta_with_intercept.data(),
                                                    static_cast<Eigen::Index>(beta_with_intercept.size()));
    model.params = params;
    return model;
}

SimConfig small_cfg(Eigen::Index m, std::uint64_t seed) {
    SimConfig cfg;
    cfg.m = m;
    cfg.seed = seed;
    return cfg;
}

double max_abs(const Eigen::MatrixXd& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

} // namespace

TEST_CASE("simulated experiment is deterministic per seed") {
    const Dataset a = simulate_dgp(small_cfg(200, 42));
    const Dataset b = simulate_dgp(small_cfg(200, 42));
    CHECK((a.features - b.features).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.target - b.target).cwiseAbs().maxCoeff() == 0.0);

    const Dataset c = simulate_dgp(small_cfg(200, 43));
    CHECK((a.target - c.target).cwiseAbs().maxCoeff() > 0.0);

    // The noise variate is drawn even at ratio zero, so covariates are shared
    // across noise levels for a fixed seed.
    SimConfig quiet = small_cfg(200, 42);
    quiet.noise_ratio = 0.0;
    const Dataset d = simulate_dgp(quiet);
    CHECK((a.features - d.features).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.target - d.target).cwiseAbs().maxCoeff() > 0.0);

    CHECK(a.names == std::vector<std::string>{"t", "x1", "x2"});
    REQUIRE(a.treatment_index.has_value());
    CHECK(*a.treatment_index == 0);
    CHECK_NOTHROW(a.validate());
}

TEST_CASE("degenerate noise-free design collapses to the treatment column") {
    SimConfig cfg = small_cfg(64, 9);
    cfg.beta = {1.0, 0.0, 0.0, 0.0};
    cfg.noise_ratio = 0.0;
    const Dataset ds = simulate_dgp(cfg);
    CHECK((ds.target - ds.features.col(0)).cwiseAbs().maxCoeff() == 0.0);

    cfg.beta[3] = 0.5;
    const Dataset shifted = simulate_dgp(cfg);
    CHECK((shifted.target.array() - shifted.features.col(0).array() - 0.5).abs().maxCoeff() == 0.0);
}

TEST_CASE("noise scale follows the analytic signal moments") {
    CHECK(dgp_noise_sd(SimConfig{}) == doctest::Approx(0.1 * std::sqrt(1.75)).epsilon(1e-14));

    SimConfig cfg;
    cfg.beta = {2.0, 1.0, 3.0, 7.0}; // intercept does not move the spread
    cfg.noise_ratio = 0.25;
    CHECK(dgp_noise_sd(cfg) == doctest::Approx(0.25 * std::sqrt(1.0 + 0.5 + 9.0)).epsilon(1e-14));

    cfg.noise_ratio = -0.1;
    CHECK_THROWS_AS(dgp_noise_sd(cfg), Error);
    CHECK_THROWS_AS(simulate_dgp(cfg), Error);
    CHECK_THROWS_WITH_AS(simulate_dgp(small_cfg(0, 1)), doctest::Contains("at least 1"), Error);
}

TEST_CASE("simulated sample moments match the design") {
    const Dataset ds = simulate_dgp(small_cfg(100000, 1));
    const double m = static_cast<double>(ds.rows());

    for (Eigen::Index r = 0; r < ds.rows(); ++r) {
        const double t = ds.features(r, 0);
        CHECK((t == 0.0 || t == 1.0));
    }
    CHECK(std::abs(ds.features.col(0).mean() - 0.5) < 0.006);
    CHECK(std::abs(ds.features.col(1).mean()) < 0.012);
    CHECK(std::abs(ds.features.col(2).mean()) < 0.012);
    CHECK(std::abs(ds.features.col(1).squaredNorm() / m - 1.0) < 0.02);

    // E[y] = b1/2 + b4 and Var[y] = (b1^2/4 + b2^2/2 + b3^2)(1 + ratio^2).
    CHECK(std::abs(ds.target.mean() - 0.5) < 0.016);
    const double var = (ds.target.array() - ds.target.mean()).square().sum() / (m - 1.0);
    CHECK(var > 1.64);
    CHECK(var < 1.90);
}

TEST_CASE("regrouped parts reconstruct predictions for every learner") {
    const Dataset ds = simulate_dgp(small_cfg(120, 3));
    const BackgroundSet bg = untreated_background(ds, iota_rows(ds.rows()));
    const Eigen::MatrixXd rows = ds.features.topRows(25);
    const std::vector<Eigen::Index> ids = iota_rows(25);

    std::vector<TrainedModel> models;
    models.push_back(fit_linear(ds));
    models.push_back(fit_forest(ds, 20, 4, 3, 1.0, 7));
    models.push_back(fit_kernel(ds, 0.5, 1e-3));
    models.push_back(fit_network(ds, {8}, 30, 1e-2, 5));

    for (const auto& model : models) {
        CAPTURE(kind_tag(model.kind));
        const TreatmentFunction tf =
            treatment_function_eval(model, rows, ids, bg, 0, {1, 2});
        REQUIRE(tf.interactions.cols() == 2);
        CHECK(tf.interaction_labels == std::vector<std::string>{"2", "3"});

        const Eigen::VectorXd reconstructed =
            (tf.phi00 + tf.bare_t.array() + tf.interactions.rowwise().sum().array() +
             tf.phi_z.array())
                .matrix();
        const Eigen::VectorXd predicted = predict(model, rows);
        CHECK((reconstructed - predicted).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("untreated rows carry no treatment content against an untreated background") {
    const Dataset ds = simulate_dgp(small_cfg(120, 11));
    const BackgroundSet bg = untreated_background(ds, iota_rows(ds.rows()));
    const Eigen::MatrixXd rows = ds.features.topRows(40);
    const std::vector<Eigen::Index> ids = iota_rows(40);

    for (const auto& model : {fit_forest(ds, 15, 5, 3, 1.0, 2), fit_kernel(ds, 0.5, 1e-3)}) {
        CAPTURE(kind_tag(model.kind));
        const TreatmentFunction tf = treatment_function_eval(model, rows, ids, bg, 0, {1, 2});
        int untreated_seen = 0;
        for (Eigen::Index r = 0; r < rows.rows(); ++r) {
            if (tf.treated[static_cast<std::size_t>(r)]) continue;
            ++untreated_seen;
            CHECK(std::abs(tf.bare_t(r)) < 1e-10);
            CHECK(tf.interactions.row(r).cwiseAbs().maxCoeff() < 1e-10);
        }
        CHECK(untreated_seen > 0);
    }
}

TEST_CASE("additive model has null interactions and bare effect equal to the singleton term") {
    const Dataset ds = simulate_dgp(small_cfg(150, 17));
    const TrainedModel model = fit_linear(ds); // additive in every column
    const BackgroundSet bg = untreated_background(ds, iota_rows(ds.rows()));
    const Eigen::MatrixXd rows = ds.features.topRows(30);
    const std::vector<Eigen::Index> ids = iota_rows(30);
    const CoalitionUniverse universe = full_universe(3);

    const ShapleyDecomposition h1 = shapley_values(model, rows, ids, bg, universe);
    const ShapleyDecomposition h2 = shapley_taylor(model, rows, ids, bg, universe, 2);
    const TreatmentFunction tf = treatment_decompose(h1, h2, 0, treated_mask(rows, 0));

    CHECK(max_abs(tf.interactions) < 1e-10);
    const int t_term = h1.find_term({0});
    REQUIRE(t_term >= 0);
    CHECK((tf.bare_t - h1.values.col(t_term)).cwiseAbs().maxCoeff() < 1e-10);
    // Remainder picks up everything the singleton non-treatment terms carried.
    const Eigen::VectorXd others = h1.values.col(h1.find_term({1})) + h1.values.col(h1.find_term({2}));
    CHECK((tf.phi_z - others).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("misaligned decompositions are rejected") {
    const Dataset ds = simulate_dgp(small_cfg(60, 5));
    const BackgroundSet bg = untreated_background(ds, iota_rows(ds.rows()));
    const Eigen::MatrixXd rows = ds.features.topRows(12);
    const std::vector<Eigen::Index> ids = iota_rows(12);
    const TrainedModel model = fit_linear(ds);
    const CoalitionUniverse universe = full_universe(3);
    const std::vector<bool> mask = treated_mask(rows, 0);

    const ShapleyDecomposition h1 = shapley_values(model, rows, ids, bg, universe);
    const ShapleyDecomposition h2 = shapley_taylor(model, rows, ids, bg, universe, 2);

    CHECK_THROWS_WITH_AS(treatment_decompose(h1, h1, 0, mask),
                         doctest::Contains("order-1 and an order-2"), Error);

    const ShapleyDecomposition h2_rows =
        shapley_taylor(model, ds.features.topRows(10), iota_rows(10), bg, universe, 2);
    CHECK_THROWS_WITH_AS(treatment_decompose(h1, h2_rows, 0, mask),
                         doctest::Contains("different rows"), Error);

    const ShapleyDecomposition h2_bg =
        shapley_taylor(model, rows, ids, train_all_background(ds.features), universe, 2);
    CHECK_THROWS_WITH_AS(treatment_decompose(h1, h2_bg, 0, mask),
                         doctest::Contains("different backgrounds"), Error);

    const ShapleyDecomposition h2_uni =
        shapley_taylor(model, rows, ids, bg, group_others(3, {0, 1}), 2);
    CHECK_THROWS_WITH_AS(treatment_decompose(h1, h2_uni, 0, mask),
                         doctest::Contains("coalition universes"), Error);

    CHECK_THROWS_WITH_AS(treatment_decompose(h1, h2, 0, std::vector<bool>(5, false)),
                         doctest::Contains("treated mask length"), Error);

    // Treatment sharing a player with another feature is not addressable;
    // note a single-member remainder group would still count as standalone.
    const CoalitionUniverse grouped = group_others(3, {1});
    const ShapleyDecomposition g1 = shapley_values(model, rows, ids, bg, grouped);
    const ShapleyDecomposition g2 = shapley_taylor(model, rows, ids, bg, grouped, 2);
    CHECK_THROWS_WITH_AS(treatment_decompose(g1, g2, 0, mask),
                         doctest::Contains("standalone"), Error);

    ShapleyDecomposition drifted = h2;
    drifted.phi0 += 0.5;
    CHECK_THROWS_WITH_AS(treatment_decompose(h1, drifted, 0, mask),
                         doctest::Contains("baseline"), Error);
}

TEST_CASE("average treatment effect means bare plus interactions over treated rows") {
    TreatmentFunction tf;
    tf.phi00 = 0.0;
    tf.bare_t = Eigen::Vector2d(1.0, 2.0);
    tf.interactions = Eigen::MatrixXd(2, 1);
    tf.interactions << 0.5, -0.5;
    tf.interaction_labels = {"2"};
    tf.phi_z = Eigen::Vector2d(3.0, -3.0); // never enters the effect
    tf.row_ids = {0, 1};

    tf.treated = {true, true};
    CHECK(ate(tf) == doctest::Approx(1.5).epsilon(1e-14));

    tf.treated = {true, false};
    CHECK(ate(tf) == doctest::Approx(1.5).epsilon(1e-14));

    tf.treated = {false, true};
    CHECK(ate(tf) == doctest::Approx(1.5).epsilon(1e-14));

    tf.treated = {false, false};
    CHECK_THROWS_WITH_AS(ate(tf), doctest::Contains("treated"), Error);

    tf.treated = {true, true};
    tf.bare_t.setZero();
    tf.interactions.setZero();
    CHECK(ate(tf) == 0.0);
}

TEST_CASE("treated mask reads the treatment column") {
    Eigen::MatrixXd rows(3, 2);
    rows << 1.0, 5.0, 0.0, -2.0, 1.0, 0.0;
    CHECK(treated_mask(rows, 0) == std::vector<bool>{true, false, true});
    CHECK(treated_mask(rows, 1) == std::vector<bool>{true, true, false});
    CHECK_THROWS_AS(treated_mask(rows, 2), Error);
    CHECK_THROWS_AS(treated_mask(rows, -1), Error);
}

TEST_CASE("interaction curve recovers exact polynomials") {
    const Eigen::Index m = 12;
    Eigen::VectorXd cov(m);
    for (Eigen::Index i = 0; i < m; ++i) cov(i) = -1.5 + 0.3 * static_cast<double>(i);
    const std::vector<bool> all(static_cast<std::size_t>(m), true);

    const Eigen::VectorXd flat = Eigen::VectorXd::Constant(m, 0.8);
    const Eigen::VectorXd c0 = interaction_curve(flat, cov, all);
    REQUIRE(c0.size() == 5);
    CHECK(std::abs(c0(0) - 0.8) < 1e-8);
    CHECK(c0.tail(4).cwiseAbs().maxCoeff() < 1e-8);

    const Eigen::VectorXd square = cov.array().square();
    const Eigen::VectorXd c2 = interaction_curve(square, cov, all);
    CHECK(std::abs(c2(2) - 1.0) < 1e-8);
    CHECK(std::abs(c2(0)) < 1e-8);
    CHECK(std::abs(c2(1)) < 1e-8);
    CHECK(std::abs(c2(3)) < 1e-8);
    CHECK(std::abs(c2(4)) < 1e-8);

    // Untreated rows are invisible to the fit.
    Eigen::VectorXd spoiled = square;
    std::vector<bool> mask = all;
    spoiled(3) = 99.0;
    mask[3] = false;
    const Eigen::VectorXd c2m = interaction_curve(spoiled, cov, mask);
    CHECK((c2m - c2).cwiseAbs().maxCoeff() < 1e-8);

    std::vector<bool> sparse(static_cast<std::size_t>(m), false);
    for (std::size_t i = 0; i < 5; ++i) sparse[i] = true; // degree+2 = 6 needed
    CHECK_THROWS_WITH_AS(interaction_curve(square, cov, sparse),
                         doctest::Contains("degree + 2"), Error);
    sparse[5] = true;
    CHECK_NOTHROW(interaction_curve(square, cov, sparse));

    CHECK_THROWS_AS(interaction_curve(square, cov.head(6), all), Error);
    CHECK_THROWS_AS(interaction_curve(square, cov, std::vector<bool>(3, true)), Error);
    CHECK_THROWS_AS(interaction_curve(square, cov, all, -1), Error);

    const Eigen::VectorXd line = interaction_curve(2.0 * cov, cov, all, 1);
    REQUIRE(line.size() == 2);
    CHECK(std::abs(line(0)) < 1e-8);
    CHECK(std::abs(line(1) - 2.0) < 1e-8);
}

TEST_CASE("noise-free linear design recovers the homogeneous effect") {
    SimConfig cfg = small_cfg(300, 7);
    cfg.beta = {1.0, 0.0, 0.0, 0.5};
    cfg.noise_ratio = 0.0;
    const Dataset ds = simulate_dgp(cfg);
    const TrainedModel model = fit_linear(ds);
    const BackgroundSet bg = untreated_background(ds, iota_rows(ds.rows()));

    const TreatmentFunction tf =
        treatment_function_eval(model, ds.features, iota_rows(ds.rows()), bg, 0, {1, 2});
    CHECK(std::abs(ate(tf) - 1.0) < 1e-6);
}

TEST_CASE("constant model yields a null treatment function") {
    const TrainedModel model = hand_linear({4.2, 0.0, 0.0, 0.0});
    Eigen::MatrixXd rows(2, 3);
    rows << 1.0, 0.3, -0.7, 0.0, -1.1, 2.0;
    BackgroundSet bg;
    bg.rows = Eigen::MatrixXd::Zero(2, 3);
    bg.rows(1, 1) = 1.0;
    bg.weights = Eigen::Vector2d(0.5, 0.5);

    const TreatmentFunction tf = treatment_function_eval(model, rows, {0, 1}, bg, 0, {1, 2});
    CHECK(tf.phi00 == doctest::Approx(4.2).epsilon(1e-14));
    CHECK(tf.bare_t.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(max_abs(tf.interactions) < 1e-12);
    CHECK(tf.phi_z.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(ate(tf) == doctest::Approx(0.0));
}

TEST_CASE("keep list absorbs the treatment column automatically") {
    const Dataset ds = simulate_dgp(small_cfg(80, 23));
    const TrainedModel model = fit_forest(ds, 10, 4, 3, 1.0, 1);
    const BackgroundSet bg = untreated_background(ds, iota_rows(ds.rows()));
    const Eigen::MatrixXd rows = ds.features.topRows(8);

    const TreatmentFunction without = treatment_function_eval(model, rows, {}, bg, 0, {1, 2});
    const TreatmentFunction with = treatment_function_eval(model, rows, {}, bg, 0, {0, 1, 2});
    CHECK((without.bare_t - with.bare_t).cwiseAbs().maxCoeff() == 0.0);
    CHECK((without.interactions - with.interactions).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_WITH_AS(treatment_function_eval(model, rows, {}, bg, 0, {}),
                         doctest::Contains("besides the treatment"), Error);
}

TEST_CASE("export layout is stable") {
    TreatmentFunction tf;
    tf.phi00 = 0.25;
    tf.bare_t = Eigen::Vector2d(1.5, 0.0);
    tf.interactions = Eigen::MatrixXd(2, 1);
    tf.interactions << 0.5, 0.0;
    tf.interaction_labels = {"x1"};
    tf.phi_z = Eigen::Vector2d(-0.25, 1.0);
    tf.treated = {true, false};
    tf.row_ids = {3, 8};

    std::ostringstream out;
    write_treatment_csv(tf, out);
    CHECK(out.str() == "row_id,treated,phi00,bare_t,inter_x1,phi_z\n"
                       "3,1,0.25,1.5,0.5,-0.25\n"
                       "8,0,0.25,0,0,1\n");
}
