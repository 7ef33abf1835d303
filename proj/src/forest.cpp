#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "shapreg/errors.hpp"
#include "shapreg/models.hpp"
#include "model_detail.hpp"

namespace shapreg {

namespace {

// Grows one CART regression tree over a bootstrap sample, partitioning the
// index buffer in place. Randomness consumption order per tree: m bootstrap
// draws first, then one feature shuffle per split attempt in depth-first
// order (left subtree before right).
struct TreeGrower {
    const Dataset& ds;
    int max_depth;
    std::size_t min_leaf;
    int candidates; // features examined per split
    std::mt19937_64& engine;
    std::vector<Eigen::Index>& rows;
    std::vector<ForestNode>& nodes;
    std::vector<int> feature_buffer;
    std::vector<std::pair<double, double>> sorted; // (x, y) per node and feature

    TreeGrower(const Dataset& ds_, int max_depth_, std::size_t min_leaf_, int candidates_,
               std::mt19937_64& engine_, std::vector<Eigen::Index>& rows_,
               std::vector<ForestNode>& nodes_)
        : ds(ds_), max_depth(max_depth_), min_leaf(min_leaf_), candidates(candidates_),
          engine(engine_), rows(rows_), nodes(nodes_) {
        feature_buffer.resize(static_cast<std::size_t>(ds.cols()));
    }

    int grow(std::size_t lo, std::size_t hi, int depth) {
        const std::size_t size = hi - lo;
        double sum = 0.0, sumsq = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            const double y = ds.target(rows[i]);
            sum += y;
            sumsq += y * y;
        }
        const double mean = sum / static_cast<double>(size);
        const double sse = std::max(0.0, sumsq - sum * sum / static_cast<double>(size));

        const int index = static_cast<int>(nodes.size());
        nodes.emplace_back();
        nodes[static_cast<std::size_t>(index)].value = mean;

        const bool splittable = depth < max_depth && size >= 2 * min_leaf &&
                                sse > 1e-12 * (std::abs(sumsq) + 1.0);
        if (!splittable) return index;

        int best_feature = -1;
        double best_threshold = 0.0;
        double best_cost = std::numeric_limits<double>::infinity();

        std::iota(feature_buffer.begin(), feature_buffer.end(), 0);
        std::shuffle(feature_buffer.begin(), feature_buffer.end(), engine);
        std::sort(feature_buffer.begin(), feature_buffer.begin() + candidates);

        for (int ci = 0; ci < candidates; ++ci) {
            const int f = feature_buffer[static_cast<std::size_t>(ci)];
            sorted.clear();
            sorted.reserve(size);
            for (std::size_t i = lo; i < hi; ++i)
                sorted.emplace_back(ds.features(rows[i], f), ds.target(rows[i]));
            std::sort(sorted.begin(), sorted.end());

            double left_sum = 0.0, left_sumsq = 0.0;
            for (std::size_t k = 1; k < size; ++k) {
                left_sum += sorted[k - 1].second;
                left_sumsq += sorted[k - 1].second * sorted[k - 1].second;
                if (sorted[k].first == sorted[k - 1].first) continue;
                if (k < min_leaf || size - k < min_leaf) continue;
                const double right_sum = sum - left_sum;
                const double right_sumsq = sumsq - left_sumsq;
                const double cost =
                    (left_sumsq - left_sum * left_sum / static_cast<double>(k)) +
                    (right_sumsq - right_sum * right_sum / static_cast<double>(size - k));
                if (cost < best_cost) {
                    best_cost = cost;
                    best_feature = f;
                    best_threshold = (sorted[k - 1].first + sorted[k].first) / 2.0;
                }
            }
        }
        if (best_feature < 0) return index; // all candidates constant within node

        const auto mid_it =
            std::partition(rows.begin() + static_cast<std::ptrdiff_t>(lo),
                           rows.begin() + static_cast<std::ptrdiff_t>(hi),
                           [&](Eigen::Index r) { return ds.features(r, best_feature) <= best_threshold; });
        const std::size_t mid = static_cast<std::size_t>(mid_it - rows.begin());

        nodes[static_cast<std::size_t>(index)].feature = best_feature;
        nodes[static_cast<std::size_t>(index)].threshold = best_threshold;
        const int left = grow(lo, mid, depth + 1);
        const int right = grow(mid, hi, depth + 1);
        nodes[static_cast<std::size_t>(index)].left = left;
        nodes[static_cast<std::size_t>(index)].right = right;
        return index;
    }
};

} // namespace

TrainedModel fit_forest(const Dataset& ds, int trees, int max_depth, int min_leaf,
                        double feature_frac, std::uint64_t seed) {
    ds.validate();
    if (trees < 1) fail(Stage::training, "fit_forest requires trees >= 1");
    if (max_depth < 0) fail(Stage::training, "fit_forest requires max_depth >= 0");
    if (min_leaf < 1) fail(Stage::training, "fit_forest requires min_leaf >= 1");
    if (!(feature_frac > 0.0) || feature_frac > 1.0)
        fail(Stage::training, "fit_forest requires feature_frac in (0, 1]");

    const Eigen::Index m = ds.rows();
    const Eigen::Index n = ds.cols();
    const int candidates = static_cast<int>(std::clamp<Eigen::Index>(
        static_cast<Eigen::Index>(std::lround(feature_frac * static_cast<double>(n))), 1, n));

    ForestParams params;
    params.trees.reserve(static_cast<std::size_t>(trees));
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(m));
    for (int t = 0; t < trees; ++t) {
        std::mt19937_64 engine(detail::mix_seed(seed, static_cast<std::uint64_t>(t)));
        std::uniform_int_distribution<Eigen::Index> pick(0, m - 1);
        for (auto& r : rows) r = pick(engine);
        std::vector<ForestNode> nodes;
        TreeGrower grower(ds, max_depth, static_cast<std::size_t>(min_leaf), candidates, engine,
                          rows, nodes);
        grower.grow(0, rows.size(), 0);
        params.trees.push_back(std::move(nodes));
    }

    TrainedModel model;
    model.kind = ModelKind::forest;
    model.feature_count = n;
    model.seed = seed;
    model.params = std::move(params);
    model.base_loss = rmse(predict(model, ds.features), ds.target);
    return model;
}

namespace detail {

Eigen::VectorXd predict_forest(const ForestParams& params, const Eigen::MatrixXd& rows) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(rows.rows());
    for (const auto& tree : params.trees) {
        for (Eigen::Index r = 0; r < rows.rows(); ++r) {
            std::size_t node = 0;
            while (tree[node].feature >= 0)
                node = static_cast<std::size_t>(rows(r, tree[node].feature) <= tree[node].threshold
                                                    ? tree[node].left
                                                    : tree[node].right);
            out(r) += tree[node].value;
        }
    }
    return out / static_cast<double>(params.trees.size());
}

} // namespace detail

} // namespace shapreg
