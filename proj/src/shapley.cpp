#include "shapreg/shapley.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <ostream>
#include <unordered_set>

#include "shapreg/errors.hpp"
#include "shapreg/text.hpp"

namespace shapreg {

namespace {

// Pascal triangle; exact in doubles far beyond the enumeration caps.
double binomial(int n, int k) {
    static std::vector<std::vector<double>> table;
    if (n < 0 || k < 0 || k > n) return 0.0;
    while (static_cast<int>(table.size()) <= n) {
        const int row = static_cast<int>(table.size());
        std::vector<double> next(static_cast<std::size_t>(row) + 1, 1.0);
        for (int j = 1; j < row; ++j)
            next[static_cast<std::size_t>(j)] = table[static_cast<std::size_t>(row - 1)]
                                                     [static_cast<std::size_t>(j - 1)] +
                                                table[static_cast<std::size_t>(row - 1)]
                                                     [static_cast<std::size_t>(j)];
        table.push_back(std::move(next));
    }
    return table[static_cast<std::size_t>(n)][static_cast<std::size_t>(k)];
}

void check_background(const BackgroundSet& background, Eigen::Index n) {
    background.validate();
    if (background.rows.cols() != n)
        fail(Stage::decomposition, "background feature width does not match the model");
}

// Weighted background means of predictions on hybrid rows for a batch of
// coalitions, sharing one predict call per chunk.
class HybridEvaluator {
 public:
    HybridEvaluator(const TrainedModel& model, const CoalitionUniverse& universe,
                    const BackgroundSet& background)
        : model_(model), universe_(universe), background_(background) {}

    // v over every player mask in [0, 2^count); index = mask.
    std::vector<double> full_table(const Eigen::VectorXd& row) const {
        const std::size_t total = std::size_t{1} << universe_.count();
        std::vector<std::uint32_t> masks(total);
        std::iota(masks.begin(), masks.end(), 0u);
        return evaluate(row, masks);
    }

    std::vector<double> evaluate(const Eigen::VectorXd& row,
                                 const std::vector<std::uint32_t>& masks) const {
        const Eigen::Index p = background_.rows.rows();
        const Eigen::Index n = universe_.feature_count;
        const std::size_t chunk =
            std::max<std::size_t>(1, 8192 / static_cast<std::size_t>(p));
        std::vector<double> values(masks.size());
        Eigen::MatrixXd hybrid(static_cast<Eigen::Index>(chunk) * p, n);
        for (std::size_t base = 0; base < masks.size(); base += chunk) {
            const std::size_t count = std::min(chunk, masks.size() - base);
            for (std::size_t j = 0; j < count; ++j) {
                auto block = hybrid.middleRows(static_cast<Eigen::Index>(j) * p, p);
                block = background_.rows;
                const std::uint32_t mask = masks[base + j];
                for (int pl = 0; pl < universe_.count(); ++pl)
                    if (mask >> pl & 1u)
                        for (Eigen::Index f : universe_.players[static_cast<std::size_t>(pl)])
                            block.col(f).setConstant(row(f));
            }
            Eigen::VectorXd pred =
                predict(model_, hybrid.topRows(static_cast<Eigen::Index>(count) * p));
            for (std::size_t j = 0; j < count; ++j)
                values[base + j] =
                    background_.weights.dot(pred.segment(static_cast<Eigen::Index>(j) * p, p));
        }
        return values;
    }

 private:
    const TrainedModel& model_;
    const CoalitionUniverse& universe_;
    const BackgroundSet& background_;
};

std::uint32_t players_to_mask(const CoalitionUniverse& universe, const std::vector<int>& players,
                              const char* what) {
    std::uint32_t mask = 0;
    for (int pl : players) {
        if (pl < 0 || pl >= universe.count())
            fail(Stage::decomposition, std::string(what) + ": player index out of range");
        if (mask >> pl & 1u) fail(Stage::decomposition, std::string(what) + ": duplicate player");
        mask |= 1u << pl;
    }
    return mask;
}

std::string mask_label(const CoalitionUniverse& universe, std::uint32_t mask) {
    std::vector<std::string> parts;
    for (int pl = 0; pl < universe.count(); ++pl)
        if (mask >> pl & 1u) parts.push_back(universe.labels[static_cast<std::size_t>(pl)]);
    return join(parts, "x");
}

// Alternating-sign sum over submasks of s anchored at t, from a value table.
double delta_from_table(const std::vector<double>& v, std::uint32_t s_mask,
                        std::uint32_t t_mask) {
    const int s = std::popcount(s_mask);
    double acc = 0.0;
    std::uint32_t w = s_mask;
    while (true) {
        const int sign = ((s - std::popcount(w)) & 1) ? -1 : 1;
        acc += sign * v[w | t_mask];
        if (w == 0) break;
        w = (w - 1) & s_mask;
    }
    return acc;
}

void check_rows(const Eigen::MatrixXd& rows, const CoalitionUniverse& universe,
                const TrainedModel& model) {
    if (rows.rows() < 1) fail(Stage::decomposition, "no rows to decompose");
    if (rows.cols() != universe.feature_count)
        fail(Stage::decomposition, "row width does not match the coalition universe");
    if (model.feature_count != universe.feature_count)
        fail(Stage::decomposition, "model feature count does not match the coalition universe");
}

std::vector<Eigen::Index> resolve_row_ids(const std::vector<Eigen::Index>& row_ids,
                                          Eigen::Index count) {
    if (row_ids.empty()) {
        std::vector<Eigen::Index> ids(static_cast<std::size_t>(count));
        std::iota(ids.begin(), ids.end(), Eigen::Index{0});
        return ids;
    }
    if (static_cast<Eigen::Index>(row_ids.size()) != count)
        fail(Stage::decomposition, "row id list does not match the number of rows");
    return row_ids;
}

} // namespace

void CoalitionUniverse::validate() const {
    if (players.empty()) fail(Stage::decomposition, "coalition universe has no players");
    if (players.size() != labels.size())
        fail(Stage::decomposition, "coalition universe labels out of sync");
    if (count() > 25) fail(Stage::decomposition, "coalition universe too large for bitmask math");
    std::unordered_set<Eigen::Index> seen;
    for (const auto& member_set : players) {
        if (member_set.empty())
            fail(Stage::decomposition, "coalition universe has an empty player");
        for (Eigen::Index f : member_set) {
            if (f < 0 || f >= feature_count)
                fail(Stage::decomposition, "coalition universe feature index out of range");
            if (!seen.insert(f).second)
                fail(Stage::decomposition, "coalition universe players overlap");
        }
    }
}

CoalitionUniverse full_universe(Eigen::Index n) {
    if (n < 1) fail(Stage::decomposition, "coalition universe needs at least one feature");
    CoalitionUniverse universe;
    universe.feature_count = n;
    for (Eigen::Index f = 0; f < n; ++f) {
        universe.players.push_back({f});
        universe.labels.push_back(std::to_string(f + 1));
    }
    universe.has_others = false;
    return universe;
}

CoalitionUniverse group_others(Eigen::Index n, const std::vector<Eigen::Index>& keep) {
    if (keep.empty()) fail(Stage::decomposition, "group_others requires a nonempty keep set");
    std::vector<Eigen::Index> sorted = keep;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        fail(Stage::decomposition, "group_others keep set has duplicates");
    if (sorted.front() < 0 || sorted.back() >= n)
        fail(Stage::decomposition, "group_others keep index out of range");

    CoalitionUniverse universe;
    universe.feature_count = n;
    for (Eigen::Index f : sorted) {
        universe.players.push_back({f});
        universe.labels.push_back(std::to_string(f + 1));
    }
    std::vector<Eigen::Index> rest;
    std::size_t cursor = 0;
    for (Eigen::Index f = 0; f < n; ++f) {
        if (cursor < sorted.size() && sorted[cursor] == f) {
            ++cursor;
            continue;
        }
        rest.push_back(f);
    }
    if (!rest.empty()) {
        universe.players.push_back(std::move(rest));
        universe.labels.push_back("others");
        universe.has_others = true;
    }
    return universe;
}

double conditional_value(const TrainedModel& model, const Eigen::VectorXd& row,
                         const std::vector<Eigen::Index>& kept,
                         const BackgroundSet& background) {
    check_background(background, model.feature_count);
    if (row.size() != model.feature_count)
        fail(Stage::decomposition, "row width does not match the model");
    std::unordered_set<Eigen::Index> seen;
    for (Eigen::Index f : kept) {
        if (f < 0 || f >= model.feature_count)
            fail(Stage::decomposition, "kept feature index out of range");
        if (!seen.insert(f).second) fail(Stage::decomposition, "kept feature listed twice");
    }
    Eigen::MatrixXd hybrid = background.rows;
    for (Eigen::Index f : kept) hybrid.col(f).setConstant(row(f));
    return background.weights.dot(predict(model, hybrid));
}

double set_derivative(const TrainedModel& model, const Eigen::VectorXd& row,
                      const CoalitionUniverse& universe, const std::vector<int>& s_players,
                      const std::vector<int>& t_players, const BackgroundSet& background) {
    universe.validate();
    check_background(background, universe.feature_count);
    const std::uint32_t s_mask = players_to_mask(universe, s_players, "set derivative S");
    const std::uint32_t t_mask = players_to_mask(universe, t_players, "set derivative T");
    if ((s_mask & t_mask) != 0)
        fail(Stage::decomposition, "set derivative requires disjoint S and T");

    // Evaluate only the needed coalitions: submasks of S anchored at T.
    std::vector<std::uint32_t> masks;
    std::uint32_t w = s_mask;
    while (true) {
        masks.push_back(w | t_mask);
        if (w == 0) break;
        w = (w - 1) & s_mask;
    }
    HybridEvaluator evaluator(model, universe, background);
    std::vector<double> values = evaluator.evaluate(row, masks);
    const int s = std::popcount(s_mask);
    double acc = 0.0;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const int size_w = std::popcount(masks[i] & s_mask);
        acc += (((s - size_w) & 1) ? -1.0 : 1.0) * values[i];
    }
    return acc;
}

int ShapleyDecomposition::find_term(const std::vector<int>& players) const {
    std::uint32_t mask = 0;
    for (int pl : players) {
        if (pl < 0 || pl >= universe.count()) return -1;
        mask |= 1u << pl;
    }
    for (std::size_t i = 0; i < term_masks.size(); ++i)
        if (term_masks[i] == mask) return static_cast<int>(i);
    return -1;
}

namespace {

// `direct_order1` selects the weighted-marginal-contribution formula; the
// alternative is the anchored-set-derivative route, which must agree at h=1.
ShapleyDecomposition decompose(const TrainedModel& model, const Eigen::MatrixXd& rows,
                               const std::vector<Eigen::Index>& row_ids,
                               const BackgroundSet& background,
                               const CoalitionUniverse& universe, int h, int cap,
                               bool direct_order1) {
    universe.validate();
    check_background(background, universe.feature_count);
    check_rows(rows, universe, model);
    const int np = universe.count();
    if (np > cap)
        fail(Stage::decomposition, "coalition universe has " + std::to_string(np) +
                                       " players, above the enumeration cap of " +
                                       std::to_string(cap) + "; group features or raise the cap");
    if (h < 1 || h > np) fail(Stage::decomposition, "interaction order out of range");

    ShapleyDecomposition dec;
    dec.order = h;
    dec.universe = universe;
    dec.background_id = background.id();
    dec.background_provenance = background.provenance;
    dec.background_rows = background.rows.rows();
    dec.model_id = model.id();
    dec.row_ids = resolve_row_ids(row_ids, rows.rows());

    const std::uint32_t full = (np == 32) ? 0xffffffffu : ((1u << np) - 1u);
    for (int size = 1; size <= h; ++size)
        for (std::uint32_t mask = 1; mask <= full; ++mask)
            if (std::popcount(mask) == size) {
                dec.term_masks.push_back(mask);
                dec.term_labels.push_back(mask_label(universe, mask));
            }

    HybridEvaluator evaluator(model, universe, background);
    dec.values.resize(rows.rows(), static_cast<Eigen::Index>(dec.term_masks.size()));

    const double np_d = static_cast<double>(np);
    std::vector<double> order1_weight(static_cast<std::size_t>(np), 0.0);
    for (int s = 0; s < np; ++s)
        order1_weight[static_cast<std::size_t>(s)] = 1.0 / (np_d * binomial(np - 1, s));

    bool phi0_set = false;
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
        const std::vector<double> v = evaluator.full_table(rows.row(r).transpose());
        if (!phi0_set) {
            dec.phi0 = v[0]; // row-independent: the empty coalition ignores the row
            phi0_set = true;
        }
        for (std::size_t term = 0; term < dec.term_masks.size(); ++term) {
            const std::uint32_t s_mask = dec.term_masks[term];
            const int s = std::popcount(s_mask);
            double value = 0.0;
            if (h == 1 && direct_order1) {
                // weighted marginal contributions over coalitions without the player
                for (std::uint32_t mask = 0; mask <= full; ++mask) {
                    if (mask & s_mask) continue;
                    value += order1_weight[static_cast<std::size_t>(std::popcount(mask))] *
                             (v[mask | s_mask] - v[mask]);
                    if (mask == full) break;
                }
            } else if (s < h) {
                value = delta_from_table(v, s_mask, 0);
            } else {
                const std::uint32_t comp = full & ~s_mask;
                double acc = 0.0;
                std::uint32_t t = comp;
                while (true) {
                    acc += delta_from_table(v, s_mask, t) /
                           binomial(np - 1, std::popcount(t));
                    if (t == 0) break;
                    t = (t - 1) & comp;
                }
                value = static_cast<double>(h) / np_d * acc;
            }
            dec.values(r, static_cast<Eigen::Index>(term)) = value;
        }
    }
    return dec;
}

} // namespace

ShapleyDecomposition shapley_values(const TrainedModel& model, const Eigen::MatrixXd& rows,
                                    const std::vector<Eigen::Index>& row_ids,
                                    const BackgroundSet& background,
                                    const CoalitionUniverse& universe, int cap) {
    return decompose(model, rows, row_ids, background, universe, 1, cap, true);
}

ShapleyDecomposition shapley_taylor(const TrainedModel& model, const Eigen::MatrixXd& rows,
                                    const std::vector<Eigen::Index>& row_ids,
                                    const BackgroundSet& background,
                                    const CoalitionUniverse& universe, int h, int cap) {
    return decompose(model, rows, row_ids, background, universe, h, cap, false);
}

Eigen::VectorXd permutation_oracle(const TrainedModel& model, const Eigen::VectorXd& row,
                                   const BackgroundSet& background,
                                   const CoalitionUniverse& universe, int cap) {
    universe.validate();
    check_background(background, universe.feature_count);
    if (row.size() != universe.feature_count)
        fail(Stage::decomposition, "row width does not match the coalition universe");
    if (model.feature_count != universe.feature_count)
        fail(Stage::decomposition, "model feature count does not match the coalition universe");
    const int np = universe.count();
    if (np > cap)
        fail(Stage::decomposition,
             "permutation oracle limited to " + std::to_string(cap) + " players");

    HybridEvaluator evaluator(model, universe, background);
    const std::vector<double> v = evaluator.full_table(row);

    std::vector<int> order(static_cast<std::size_t>(np));
    std::iota(order.begin(), order.end(), 0);
    Eigen::VectorXd phi = Eigen::VectorXd::Zero(np);
    double permutations = 0.0;
    do {
        std::uint32_t mask = 0;
        for (int pl : order) {
            phi(pl) += v[mask | (1u << pl)] - v[mask];
            mask |= 1u << pl;
        }
        permutations += 1.0;
    } while (std::next_permutation(order.begin(), order.end()));
    return phi / permutations;
}

void write_decomposition_csv(const ShapleyDecomposition& dec, std::ostream& out) {
    out << "row_id,term,value\n";
    for (Eigen::Index r = 0; r < dec.values.rows(); ++r)
        for (std::size_t term = 0; term < dec.term_labels.size(); ++term)
            out << dec.row_ids[static_cast<std::size_t>(r)] << ',' << dec.term_labels[term]
                << ',' << format_number(dec.values(r, static_cast<Eigen::Index>(term))) << '\n';
}

nlohmann::json decomposition_meta(const ShapleyDecomposition& dec) {
    nlohmann::json terms = nlohmann::json::array();
    for (std::size_t term = 0; term < dec.term_masks.size(); ++term) {
        nlohmann::json coalition = nlohmann::json::array();
        std::vector<Eigen::Index> codes;
        for (int pl = 0; pl < dec.universe.count(); ++pl)
            if (dec.term_masks[term] >> pl & 1u) {
                const bool is_others =
                    dec.universe.has_others && pl == dec.universe.count() - 1;
                codes.push_back(is_others
                                    ? 0
                                    : dec.universe.players[static_cast<std::size_t>(pl)][0] + 1);
            }
        std::sort(codes.begin(), codes.end());
        for (Eigen::Index code : codes) coalition.push_back(code);
        terms.push_back({{"label", dec.term_labels[term]}, {"coalition", coalition}});
    }
    return {{"phi0", dec.phi0},
            {"order", dec.order},
            {"model", dec.model_id},
            {"background",
             {{"provenance", provenance_tag(dec.background_provenance)},
              {"id", dec.background_id},
              {"rows", dec.background_rows}}},
            {"terms", terms}};
}

} // namespace shapreg
