#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "shapreg/data.hpp"

using namespace shapreg;

namespace {

std::filesystem::path write_temp_csv(const std::string& name, const std::string& body) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path);
    out << body;
    return path;
}

} // namespace

TEST_CASE("csv loads target and flags treatment column") {
    const auto path = write_temp_csv("shapreg_basic.csv",
                                     "t,x1,x2,y\n"
                                     "0,1.5,-2,3\n"
                                     "1,0.5,0,1\n"
                                     "0,2.5,4,-1\n");
    const Dataset ds = load_csv(path.string(), "y", std::string("t"));
    CHECK(ds.rows() == 3);
    CHECK(ds.cols() == 3);
    REQUIRE(ds.treatment_index.has_value());
    CHECK(*ds.treatment_index == 0);
    CHECK(ds.names == std::vector<std::string>{"t", "x1", "x2"});
    CHECK(ds.target(0) == doctest::Approx(3.0));
    CHECK(ds.target(2) == doctest::Approx(-1.0));
    CHECK(ds.features(0, 1) == doctest::Approx(1.5));
    CHECK(ds.features(2, 2) == doctest::Approx(4.0));
}

TEST_CASE("csv error paths carry the ingestion stage") {
    const auto path = write_temp_csv("shapreg_errs.csv",
                                     "t,x1,y\n"
                                     "0,1,2\n"
                                     "2,1,3\n");
    CHECK_THROWS_WITH_AS(load_csv(path.string(), "nope"), doctest::Contains("missing column"),
                         Error);
    CHECK_THROWS_WITH_AS(load_csv(path.string(), "y", std::string("t")),
                         doctest::Contains("not binary"), Error);
    CHECK_THROWS_AS(load_csv("/definitely/not/here.csv", "y"), Error);

    const auto bad = write_temp_csv("shapreg_badcell.csv", "a,y\nfoo,1\n");
    try {
        load_csv(bad.string(), "y");
        FAIL("expected ingestion error");
    } catch (const Error& e) {
        CHECK(e.stage() == Stage::ingestion);
        CHECK(std::string(e.what()).find("non-numeric") != std::string::npos);
    }
}

TEST_CASE("scale_by_mean divides by the full-sample mean") {
    Dataset ds;
    ds.features.resize(3, 2);
    ds.features << 2, 1, 4, 1, 6, 1;
    ds.names = {"a", "b"};
    ds.target = Eigen::VectorXd::Zero(3);

    const Dataset scaled = scale_by_mean(ds, {0});
    CHECK(scaled.features(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(scaled.features(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(scaled.features(2, 0) == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(scaled.features.col(0).mean() == doctest::Approx(1.0).epsilon(1e-12));
    // second application leaves an already-unit-mean column unchanged
    const Dataset twice = scale_by_mean(scaled, {0});
    CHECK((twice.features.col(0) - scaled.features.col(0)).cwiseAbs().maxCoeff() < 1e-12);
    // untouched column stays identical
    CHECK(scaled.features.col(1) == ds.features.col(1));

    Dataset zero_mean = ds;
    zero_mean.features.col(0) << 1, -1, 0;
    CHECK_THROWS_WITH_AS(scale_by_mean(zero_mean, {0}), doctest::Contains("zero-mean"), Error);
}

TEST_CASE("fold plans partition rows with balanced sizes") {
    const FoldPlan even = make_folds(10, 5, 7);
    std::vector<int> counts(6, 0);
    for (int f : even.assignment) {
        ++counts[static_cast<std::size_t>(f)];
    }
    for (int k = 1; k <= 5; ++k) {
        CHECK(counts[static_cast<std::size_t>(k)] == 2);
    }

    const FoldPlan uneven = make_folds(11, 5, 7);
    std::multiset<int> sizes;
    for (int k = 1; k <= 5; ++k) {
        sizes.insert(static_cast<int>(uneven.rows_in_fold(k).size()));
    }
    CHECK(sizes == std::multiset<int>{3, 2, 2, 2, 2});

    // exact partition: in-fold plus out-of-fold rows cover everything once
    for (int k = 1; k <= 5; ++k) {
        CHECK(uneven.rows_in_fold(k).size() + uneven.rows_not_in_fold(k).size() == 11);
    }

    // deterministic per seed, different across seeds
    CHECK(make_folds(100, 7, 42).assignment == make_folds(100, 7, 42).assignment);
    CHECK(make_folds(100, 7, 42).assignment != make_folds(100, 7, 43).assignment);

    CHECK_THROWS_AS(make_folds(4, 5, 0), Error);
    CHECK_THROWS_AS(make_folds(4, 1, 0), Error);
}

TEST_CASE("k-means recovers two well-separated clouds") {
    // Oracle: with clouds this far apart any correct Lloyd run must assign
    // each cloud to one centroid, so the expected centroids are the plain
    // per-cloud means computed here by direct arithmetic.
    Eigen::MatrixXd rows(5, 2);
    rows << 0.0, 0.2, 0.4, -0.2, 0.2, 0.0, // cloud A (3 points)
        10.0, 10.2, 10.4, 9.8;             // cloud B (2 points)
    Eigen::RowVector2d mean_a = (rows.row(0) + rows.row(1) + rows.row(2)) / 3.0;
    Eigen::RowVector2d mean_b = (rows.row(3) + rows.row(4)) / 2.0;

    const BackgroundSet bg = kmeans_background(rows, 2, 123);
    REQUIRE(bg.rows.rows() == 2);
    const bool first_is_a = (bg.rows.row(0) - mean_a).norm() < 1e-12;
    const Eigen::RowVector2d c0 = first_is_a ? mean_a : mean_b;
    const Eigen::RowVector2d c1 = first_is_a ? mean_b : mean_a;
    CHECK((bg.rows.row(0) - c0).norm() < 1e-12);
    CHECK((bg.rows.row(1) - c1).norm() < 1e-12);
    const double w_a = first_is_a ? bg.weights(0) : bg.weights(1);
    CHECK(w_a == doctest::Approx(3.0 / 5.0).epsilon(1e-12));
    CHECK(bg.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bg.provenance == BackgroundProvenance::centroids);

    const BackgroundSet uniform = kmeans_background(rows, 2, 123, 100, true);
    CHECK(uniform.weights(0) == doctest::Approx(0.5));
}

TEST_CASE("k-means degenerate cases") {
    Eigen::MatrixXd rows(4, 2);
    rows << 0, 0, 1, 0, 0, 1, 1, 1;

    SUBCASE("one centroid is the global mean") {
        const BackgroundSet bg = kmeans_background(rows, 1, 5);
        CHECK((bg.rows.row(0) - rows.colwise().mean()).norm() < 1e-12);
        CHECK(bg.weights(0) == doctest::Approx(1.0));
    }
    SUBCASE("as many centroids as rows returns the rows") {
        const BackgroundSet bg = kmeans_background(rows, 4, 5);
        std::multiset<std::pair<double, double>> got, want;
        for (Eigen::Index i = 0; i < 4; ++i) {
            got.insert({bg.rows(i, 0), bg.rows(i, 1)});
            want.insert({rows(i, 0), rows(i, 1)});
        }
        CHECK(got == want);
        for (Eigen::Index i = 0; i < 4; ++i) {
            CHECK(bg.weights(i) == doctest::Approx(0.25));
        }
    }
    SUBCASE("error paths") {
        CHECK_THROWS_AS(kmeans_background(rows, 5, 0), Error);
        CHECK_THROWS_AS(kmeans_background(Eigen::MatrixXd(0, 2), 1, 0), Error);
    }
}

TEST_CASE("untreated background filters by treatment value") {
    Dataset ds;
    ds.features.resize(4, 2);
    ds.features << 0, 10, 1, 20, 0, 30, 1, 40;
    ds.names = {"t", "x"};
    ds.target = Eigen::VectorXd::Zero(4);
    ds.treatment_index = 0;

    const BackgroundSet bg = untreated_background(ds, {0, 1, 2, 3});
    REQUIRE(bg.rows.rows() == 2);
    CHECK(bg.rows(0, 1) == doctest::Approx(10));
    CHECK(bg.rows(1, 1) == doctest::Approx(30));
    CHECK(bg.weights(0) == doctest::Approx(0.5));
    CHECK(bg.provenance == BackgroundProvenance::untreated_train);

    CHECK_THROWS_WITH_AS(untreated_background(ds, {1, 3}), doctest::Contains("no untreated"),
                         Error);
    Dataset no_t = ds;
    no_t.treatment_index.reset();
    CHECK_THROWS_AS(untreated_background(no_t, {0, 1}), Error);
}

TEST_CASE("dataset and fold plan survive a JSON round trip") {
    Dataset ds;
    ds.features.resize(2, 3);
    ds.features << 1, 0, 2.5, 0, 1, -3.25;
    ds.names = {"t", "a", "b"};
    ds.target.resize(2);
    ds.target << 0.5, -1.5;
    ds.treatment_index = 0;

    const nlohmann::json j = to_json(ds);
    CHECK(j.contains("features"));
    CHECK(j.contains("names"));
    CHECK(j.contains("target"));
    CHECK(j.contains("treatment_index"));
    const Dataset back = dataset_from_json(j);
    CHECK(back.features == ds.features);
    CHECK(back.target == ds.target);
    CHECK(back.names == ds.names);
    CHECK(back.treatment_index == ds.treatment_index);

    Dataset no_t = ds;
    no_t.treatment_index.reset();
    CHECK(dataset_from_json(to_json(no_t)).treatment_index == std::nullopt);

    const FoldPlan plan = make_folds(9, 3, 11);
    const nlohmann::json pj = to_json(plan);
    CHECK(pj.at("K") == 3);
    const FoldPlan plan_back = fold_plan_from_json(pj);
    CHECK(plan_back.K == plan.K);
    CHECK(plan_back.assignment == plan.assignment);
    CHECK(plan_back.seed == plan.seed);
}

TEST_CASE("dataset validation rejects malformed inputs") {
    Dataset ds;
    ds.features.resize(2, 2);
    ds.features << 1, 2, 3, 4;
    ds.names = {"a", "a"};
    ds.target = Eigen::VectorXd::Zero(2);
    CHECK_THROWS_WITH_AS(ds.validate(), doctest::Contains("duplicate"), Error);

    ds.names = {"a", "b"};
    ds.features(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(ds.validate(), doctest::Contains("non-finite"), Error);
}
