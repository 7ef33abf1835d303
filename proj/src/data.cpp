#include "shapreg/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace shapreg {

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

std::string trim(const std::string& s) {
    auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) {
        return {};
    }
    auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

double parse_cell(const std::string& raw, std::size_t line_no, const std::string& column) {
    const std::string cell = trim(raw);
    double value = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last || cell.empty()) {
        fail(Stage::ingestion, "non-numeric cell '" + cell + "' in column '" + column +
                                   "' at line " + std::to_string(line_no));
    }
    return value;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace

void Dataset::validate() const {
    if (rows() < 1 || cols() < 1) {
        fail(Stage::ingestion, "dataset must have at least one row and one column");
    }
    if (static_cast<Eigen::Index>(names.size()) != cols()) {
        fail(Stage::ingestion, "feature name count does not match column count");
    }
    if (target.size() != rows()) {
        fail(Stage::ingestion, "target length does not match row count");
    }
    if (!features.allFinite() || !target.allFinite()) {
        fail(Stage::ingestion, "non-finite entry in features or target");
    }
    std::unordered_set<std::string> seen;
    for (const auto& name : names) {
        if (!seen.insert(name).second) {
            fail(Stage::ingestion, "duplicate feature name '" + name + "'");
        }
    }
    if (treatment_index) {
        if (*treatment_index < 0 || *treatment_index >= cols()) {
            fail(Stage::ingestion, "treatment index out of range");
        }
        for (Eigen::Index i = 0; i < rows(); ++i) {
            const double v = features(i, *treatment_index);
            if (v != 0.0 && v != 1.0) {
                fail(Stage::ingestion, "treatment column not binary at row " + std::to_string(i));
            }
        }
    }
}

Eigen::Index Dataset::column_index(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
        fail(Stage::ingestion, "missing column '" + name + "'");
    }
    return static_cast<Eigen::Index>(it - names.begin());
}

std::string provenance_tag(BackgroundProvenance p) {
    switch (p) {
    case BackgroundProvenance::train_all: return "train-all";
    case BackgroundProvenance::untreated_train: return "untreated-train";
    case BackgroundProvenance::centroids: return "centroids";
    case BackgroundProvenance::custom: return "custom";
    }
    return "custom";
}

BackgroundProvenance provenance_from_tag(const std::string& tag) {
    if (tag == "train-all") return BackgroundProvenance::train_all;
    if (tag == "untreated-train") return BackgroundProvenance::untreated_train;
    if (tag == "centroids") return BackgroundProvenance::centroids;
    if (tag == "custom") return BackgroundProvenance::custom;
    fail(Stage::config, "unknown background provenance '" + tag + "'");
}

void BackgroundSet::validate() const {
    if (rows.rows() < 1) {
        fail(Stage::decomposition, "background set is empty");
    }
    if (weights.size() != rows.rows()) {
        fail(Stage::decomposition, "background weight count does not match row count");
    }
    if (weights.minCoeff() < 0.0) {
        fail(Stage::decomposition, "negative background weight");
    }
    if (std::abs(weights.sum() - 1.0) > 1e-12) {
        fail(Stage::decomposition, "background weights do not sum to 1");
    }
}

std::string BackgroundSet::id() const {
    std::uint64_t h = fnv1a(rows.data(), sizeof(double) * static_cast<std::size_t>(rows.size()));
    h = fnv1a(weights.data(), sizeof(double) * static_cast<std::size_t>(weights.size()), h);
    return provenance_tag(provenance) + ":p=" + std::to_string(rows.rows()) + ":h=" +
           std::to_string(h);
}

std::vector<Eigen::Index> FoldPlan::rows_in_fold(int fold) const {
    std::vector<Eigen::Index> out;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        if (assignment[i] == fold) {
            out.push_back(static_cast<Eigen::Index>(i));
        }
    }
    return out;
}

std::vector<Eigen::Index> FoldPlan::rows_not_in_fold(int fold) const {
    std::vector<Eigen::Index> out;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        if (assignment[i] != fold) {
            out.push_back(static_cast<Eigen::Index>(i));
        }
    }
    return out;
}

Dataset load_csv(const std::string& path, const std::string& target_name,
                 const std::optional<std::string>& treatment_name) {
    std::ifstream in(path);
    if (!in) {
        fail(Stage::ingestion, "cannot open file '" + path + "'");
    }
    std::string line;
    if (!std::getline(in, line)) {
        fail(Stage::ingestion, "empty file '" + path + "'");
    }
    std::vector<std::string> header = split_line(line);
    for (auto& h : header) {
        h = trim(h);
    }
    const auto target_it = std::find(header.begin(), header.end(), target_name);
    if (target_it == header.end()) {
        fail(Stage::ingestion, "missing column '" + target_name + "'");
    }
    const std::size_t target_col = static_cast<std::size_t>(target_it - header.begin());

    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        std::vector<std::string> cells = split_line(line);
        if (cells.size() != header.size()) {
            fail(Stage::ingestion, "line " + std::to_string(line_no) + " has " +
                                       std::to_string(cells.size()) + " cells, expected " +
                                       std::to_string(header.size()));
        }
        std::vector<double> row(cells.size());
        for (std::size_t c = 0; c < cells.size(); ++c) {
            row[c] = parse_cell(cells[c], line_no, header[c]);
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) {
        fail(Stage::ingestion, "no data rows in '" + path + "'");
    }

    Dataset ds;
    const Eigen::Index m = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index n = static_cast<Eigen::Index>(header.size()) - 1;
    ds.features.resize(m, n);
    ds.target.resize(m);
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (c != target_col) {
            ds.names.push_back(header[c]);
        }
    }
    for (Eigen::Index i = 0; i < m; ++i) {
        Eigen::Index fc = 0;
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (c == target_col) {
                ds.target(i) = rows[static_cast<std::size_t>(i)][c];
            } else {
                ds.features(i, fc++) = rows[static_cast<std::size_t>(i)][c];
            }
        }
    }
    if (treatment_name) {
        ds.treatment_index = ds.column_index(*treatment_name);
    }
    ds.validate();
    return ds;
}

Dataset scale_by_mean(const Dataset& ds, const std::vector<Eigen::Index>& columns) {
    Dataset out = ds;
    for (Eigen::Index c : columns) {
        if (c < 0 || c >= ds.cols()) {
            fail(Stage::ingestion, "scale column index out of range");
        }
        const double mean = ds.features.col(c).mean();
        if (mean == 0.0) {
            fail(Stage::ingestion, "zero-mean column '" + ds.names[static_cast<std::size_t>(c)] +
                                       "' cannot be scaled by its mean");
        }
        out.features.col(c) /= mean;
    }
    out.validate();
    return out;
}

FoldPlan make_folds(Eigen::Index m, int K, std::uint64_t seed) {
    if (K < 2) {
        fail(Stage::config, "fold count must be at least 2");
    }
    if (static_cast<Eigen::Index>(K) > m) {
        fail(Stage::config, "fold count " + std::to_string(K) + " exceeds row count " +
                                std::to_string(m));
    }
    std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::mt19937_64 engine(seed);
    std::shuffle(order.begin(), order.end(), engine);

    FoldPlan plan;
    plan.K = K;
    plan.seed = seed;
    plan.assignment.assign(static_cast<std::size_t>(m), 0);
    for (std::size_t i = 0; i < order.size(); ++i) {
        plan.assignment[static_cast<std::size_t>(order[i])] = static_cast<int>(i % K) + 1;
    }
    return plan;
}

BackgroundSet kmeans_background(const Eigen::MatrixXd& rows, int c, std::uint64_t seed,
                                int max_iter, bool uniform_weights) {
    const Eigen::Index p = rows.rows();
    if (p < 1) {
        fail(Stage::decomposition, "k-means on empty input");
    }
    if (c < 1 || static_cast<Eigen::Index>(c) > p) {
        fail(Stage::decomposition, "centroid count must be in [1, rows]");
    }
    if (max_iter < 1) {
        fail(Stage::decomposition, "max_iter must be at least 1");
    }

    // Greedy farthest-point seeding: random first pick, then the point with
    // the largest distance to its nearest chosen centroid (lowest index wins
    // ties), which is deterministic after the first draw.
    std::mt19937_64 engine(seed);
    std::vector<Eigen::Index> chosen;
    chosen.push_back(static_cast<Eigen::Index>(
        std::uniform_int_distribution<std::uint64_t>(0, static_cast<std::uint64_t>(p - 1))(engine)));
    Eigen::VectorXd nearest = (rows.rowwise() - rows.row(chosen[0])).rowwise().squaredNorm();
    while (static_cast<int>(chosen.size()) < c) {
        Eigen::Index best = 0;
        double best_dist = -1.0;
        for (Eigen::Index i = 0; i < p; ++i) {
            if (nearest(i) > best_dist) {
                best_dist = nearest(i);
                best = i;
            }
        }
        chosen.push_back(best);
        nearest = nearest.cwiseMin(
            (rows.rowwise() - rows.row(best)).rowwise().squaredNorm().eval());
    }

    Eigen::MatrixXd centroids(c, rows.cols());
    for (int k = 0; k < c; ++k) {
        centroids.row(k) = rows.row(chosen[static_cast<std::size_t>(k)]);
    }

    std::vector<int> assign(static_cast<std::size_t>(p), -1);
    for (int iter = 0; iter < max_iter; ++iter) {
        bool changed = false;
        for (Eigen::Index i = 0; i < p; ++i) {
            int best_k = 0;
            double best_dist = (rows.row(i) - centroids.row(0)).squaredNorm();
            for (int k = 1; k < c; ++k) {
                const double d = (rows.row(i) - centroids.row(k)).squaredNorm();
                if (d < best_dist) { // strict: ties keep the lowest cluster index
                    best_dist = d;
                    best_k = k;
                }
            }
            if (assign[static_cast<std::size_t>(i)] != best_k) {
                assign[static_cast<std::size_t>(i)] = best_k;
                changed = true;
            }
        }
        if (!changed) {
            break;
        }
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(c, rows.cols());
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(c);
        for (Eigen::Index i = 0; i < p; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += rows.row(i);
            counts(assign[static_cast<std::size_t>(i)]) += 1.0;
        }
        for (int k = 0; k < c; ++k) {
            if (counts(k) > 0.0) { // empty clusters keep their previous centroid
                centroids.row(k) = sums.row(k) / counts(k);
            }
        }
    }

    Eigen::VectorXd counts = Eigen::VectorXd::Zero(c);
    for (Eigen::Index i = 0; i < p; ++i) {
        counts(assign[static_cast<std::size_t>(i)]) += 1.0;
    }

    BackgroundSet bg;
    bg.rows = centroids;
    bg.provenance = BackgroundProvenance::centroids;
    bg.weights = uniform_weights ? Eigen::VectorXd::Constant(c, 1.0 / c).eval()
                                 : (counts / static_cast<double>(p)).eval();
    bg.validate();
    return bg;
}

BackgroundSet untreated_background(const Dataset& ds,
                                   const std::vector<Eigen::Index>& rows_in_fold) {
    if (!ds.treatment_index) {
        fail(Stage::decomposition, "dataset has no treatment column");
    }
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i : rows_in_fold) {
        if (ds.features(i, *ds.treatment_index) == 0.0) {
            keep.push_back(i);
        }
    }
    if (keep.empty()) {
        fail(Stage::decomposition, "no untreated rows in the selection");
    }
    BackgroundSet bg;
    bg.rows.resize(static_cast<Eigen::Index>(keep.size()), ds.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) {
        bg.rows.row(static_cast<Eigen::Index>(i)) = ds.features.row(keep[i]);
    }
    bg.weights = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(keep.size()),
                                           1.0 / static_cast<double>(keep.size()));
    bg.provenance = BackgroundProvenance::untreated_train;
    bg.validate();
    return bg;
}

BackgroundSet train_all_background(const Eigen::MatrixXd& rows) {
    if (rows.rows() < 1) {
        fail(Stage::decomposition, "background selection is empty");
    }
    BackgroundSet bg;
    bg.rows = rows;
    bg.weights = Eigen::VectorXd::Constant(rows.rows(), 1.0 / static_cast<double>(rows.rows()));
    bg.provenance = BackgroundProvenance::train_all;
    bg.validate();
    return bg;
}

nlohmann::json to_json(const Dataset& ds) {
    nlohmann::json j;
    j["names"] = ds.names;
    j["target"] = std::vector<double>(ds.target.data(), ds.target.data() + ds.target.size());
    j["treatment_index"] =
        ds.treatment_index ? nlohmann::json(*ds.treatment_index) : nlohmann::json(nullptr);
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < ds.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < ds.cols(); ++c) {
            row.push_back(ds.features(i, c));
        }
        rows.push_back(std::move(row));
    }
    j["features"] = std::move(rows);
    return j;
}

Dataset dataset_from_json(const nlohmann::json& j) {
    Dataset ds;
    ds.names = j.at("names").get<std::vector<std::string>>();
    const auto target = j.at("target").get<std::vector<double>>();
    ds.target = Eigen::Map<const Eigen::VectorXd>(target.data(),
                                                  static_cast<Eigen::Index>(target.size()));
    const auto& rows = j.at("features");
    const Eigen::Index m = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index n = static_cast<Eigen::Index>(ds.names.size());
    ds.features.resize(m, n);
    for (Eigen::Index i = 0; i < m; ++i) {
        const auto& row = rows.at(static_cast<std::size_t>(i));
        if (static_cast<Eigen::Index>(row.size()) != n) {
            fail(Stage::ingestion, "feature row width mismatch in JSON dataset");
        }
        for (Eigen::Index c = 0; c < n; ++c) {
            ds.features(i, c) = row.at(static_cast<std::size_t>(c)).get<double>();
        }
    }
    if (!j.at("treatment_index").is_null()) {
        ds.treatment_index = j.at("treatment_index").get<Eigen::Index>();
    }
    ds.validate();
    return ds;
}

nlohmann::json to_json(const FoldPlan& plan) {
    return nlohmann::json{
        {"K", plan.K}, {"assignment", plan.assignment}, {"seed", plan.seed}};
}

FoldPlan fold_plan_from_json(const nlohmann::json& j) {
    FoldPlan plan;
    plan.K = j.at("K").get<int>();
    plan.assignment = j.at("assignment").get<std::vector<int>>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    return plan;
}

} // namespace shapreg
