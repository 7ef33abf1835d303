#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "shapreg/data.hpp"
#include "shapreg/models.hpp"

namespace shapreg {

// Players of the attribution game. Each player expands to one or more
// underlying model features; at most one player is the grouped remainder
// ("others"), always stored last so term orderings are stable.
struct CoalitionUniverse {
    Eigen::Index feature_count = 0;
    std::vector<std::vector<Eigen::Index>> players; // 0-based underlying features per player
    std::vector<std::string> labels;                // "1", "3", ..., "others"
    bool has_others = false;

    int count() const { return static_cast<int>(players.size()); }
    void validate() const;
};

// One player per feature; labels are 1-based feature numbers.
CoalitionUniverse full_universe(Eigen::Index n);

// Kept features stay individual players; the complement collapses into one
// "others" player (absent when keep covers everything).
CoalitionUniverse group_others(Eigen::Index n, const std::vector<Eigen::Index>& keep);

// Weighted background average of predictions on hybrid rows: coordinates in
// `kept` come from `row`, the rest from each background row in turn.
double conditional_value(const TrainedModel& model, const Eigen::VectorXd& row,
                         const std::vector<Eigen::Index>& kept, const BackgroundSet& background);

// Alternating-sign inclusion-exclusion over subsets of S anchored at T.
// S and T are player lists into `universe`; |S|=1 reduces to a first
// difference, S empty to the plain conditional value at T.
double set_derivative(const TrainedModel& model, const Eigen::VectorXd& row,
                      const CoalitionUniverse& universe, const std::vector<int>& s_players,
                      const std::vector<int>& t_players, const BackgroundSet& background);

// Per-row attribution table. Term columns are identical across rows, ordered
// by coalition size then by player indices; the baseline is row-independent.
struct ShapleyDecomposition {
    double phi0 = 0.0;
    int order = 1;
    CoalitionUniverse universe;
    std::vector<std::uint32_t> term_masks; // player bitmasks, one per term column
    std::vector<std::string> term_labels;
    std::vector<Eigen::Index> row_ids;
    Eigen::MatrixXd values; // rows x terms
    std::string background_id;
    BackgroundProvenance background_provenance = BackgroundProvenance::custom;
    Eigen::Index background_rows = 0;
    std::string model_id;

    // Index of the term column for the given player set; -1 if absent.
    int find_term(const std::vector<int>& players) const;
};

inline constexpr int kShapleyCap = 20;      // hard cap on players for order 1
inline constexpr int kShapleyTaylorCap = 12; // hard cap for order >= 2
inline constexpr int kOracleCap = 8;

// Exact enumeration of the weighted-marginal-contribution formula (order 1).
// row_ids empty means 0..rows-1.
ShapleyDecomposition shapley_values(const TrainedModel& model, const Eigen::MatrixXd& rows,
                                    const std::vector<Eigen::Index>& row_ids,
                                    const BackgroundSet& background,
                                    const CoalitionUniverse& universe, int cap = kShapleyCap);

// Exact interaction decomposition up to order h: coalitions below h take
// their set derivative at the empty anchor, coalitions of size h average set
// derivatives over all disjoint anchors with combinatorial weights.
ShapleyDecomposition shapley_taylor(const TrainedModel& model, const Eigen::MatrixXd& rows,
                                    const std::vector<Eigen::Index>& row_ids,
                                    const BackgroundSet& background,
                                    const CoalitionUniverse& universe, int h,
                                    int cap = kShapleyTaylorCap);

// Independent order-1 oracle: average marginal contribution over every
// ordering of the players. Deliberately brute force.
Eigen::VectorXd permutation_oracle(const TrainedModel& model, const Eigen::VectorXd& row,
                                   const BackgroundSet& background,
                                   const CoalitionUniverse& universe, int cap = kOracleCap);

// Long-format export: header row_id,term,value; one line per row and term.
void write_decomposition_csv(const ShapleyDecomposition& dec, std::ostream& out);

// Sidecar header: baseline, order, term coalitions (grouped remainder = 0,
// features 1-based), background provenance, model identity.
nlohmann::json decomposition_meta(const ShapleyDecomposition& dec);

} // namespace shapreg
