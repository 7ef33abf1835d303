#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "shapreg/errors.hpp"

namespace shapreg {

// Feature matrix + target + optional binary treatment column. The container
// every downstream stage consumes; immutable by convention after construction.
struct Dataset {
    Eigen::MatrixXd features;                    // m x n
    std::vector<std::string> names;              // n unique labels
    Eigen::VectorXd target;                      // m
    std::optional<Eigen::Index> treatment_index; // 0-based column, values in {0,1}

    Eigen::Index rows() const { return features.rows(); }
    Eigen::Index cols() const { return features.cols(); }

    // Enforces the structural invariants (finiteness, unique names, binary
    // treatment, m >= 1, n >= 1); throws an ingestion error on breach.
    void validate() const;

    Eigen::Index column_index(const std::string& name) const;
};

enum class BackgroundProvenance { train_all, untreated_train, centroids, custom };

std::string provenance_tag(BackgroundProvenance p);
BackgroundProvenance provenance_from_tag(const std::string& tag);

// Reference rows the decomposition integrates over; weights sum to 1.
struct BackgroundSet {
    Eigen::MatrixXd rows;    // p x n
    Eigen::VectorXd weights; // p, nonnegative, sums to 1
    BackgroundProvenance provenance = BackgroundProvenance::custom;

    void validate() const;
    // Stable identity string (provenance + shape + content hash) used to
    // detect mismatched decompositions before regrouping them.
    std::string id() const;
};

// K-fold assignment over m rows; fold ids are 1-based, sizes differ by <= 1.
struct FoldPlan {
    int K = 0;
    std::vector<int> assignment; // length m, values in {1..K}
    std::uint64_t seed = 0;

    std::vector<Eigen::Index> rows_in_fold(int fold) const;
    std::vector<Eigen::Index> rows_not_in_fold(int fold) const;
};

// Strict CSV ingestion: header mandatory, comma separator, decimal point,
// numeric cells only. The target column is extracted; remaining columns stay
// in header order. A named treatment column must be binary.
Dataset load_csv(const std::string& path, const std::string& target_name,
                 const std::optional<std::string>& treatment_name = std::nullopt);

// Divides each selected column by its full-sample mean (resulting mean 1).
Dataset scale_by_mean(const Dataset& ds, const std::vector<Eigen::Index>& columns);

// Seeded shuffle then round-robin assignment; deterministic per seed.
FoldPlan make_folds(Eigen::Index m, int K, std::uint64_t seed);

// Lloyd's algorithm with greedy farthest-point seeding from the seed.
// Assignment ties break toward the lowest cluster index; iteration stops at
// the first assignment fixpoint or after max_iter rounds. Weights are
// proportional to cluster sizes unless uniform_weights is set.
BackgroundSet kmeans_background(const Eigen::MatrixXd& rows, int c, std::uint64_t seed,
                                int max_iter = 100, bool uniform_weights = false);

// All rows of the selection whose treatment value is 0, uniform weights.
BackgroundSet untreated_background(const Dataset& ds,
                                   const std::vector<Eigen::Index>& rows_in_fold);

// Whole-selection background with uniform weights (train-all policy).
BackgroundSet train_all_background(const Eigen::MatrixXd& rows);

// JSON checkpoint format; field names match the type definitions exactly.
nlohmann::json to_json(const Dataset& ds);
Dataset dataset_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FoldPlan& plan);
FoldPlan fold_plan_from_json(const nlohmann::json& j);

} // namespace shapreg
