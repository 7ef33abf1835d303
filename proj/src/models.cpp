#include "shapreg/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "shapreg/errors.hpp"
#include "model_detail.hpp"

namespace shapreg {

namespace {

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j[static_cast<std::size_t>(i)].get<double>();
    return v;
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
    nlohmann::json j = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
    return j;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = rows == 0 ? 0 : static_cast<Eigen::Index>(j[0].size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = j[static_cast<std::size_t>(r)];
        if (static_cast<Eigen::Index>(row.size()) != cols)
            fail(Stage::ingestion, "ragged matrix in model JSON");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json j = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        j.push_back(std::move(row));
    }
    return j;
}

// Pairwise squared distances via the norm expansion; clamped at 0 against
// cancellation so exp(-gamma d) never sees a negative distance.
Eigen::MatrixXd cross_sqdist(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::VectorXd an = a.rowwise().squaredNorm();
    Eigen::VectorXd bn = b.rowwise().squaredNorm();
    Eigen::MatrixXd d = (-2.0 * a * b.transpose());
    d.colwise() += an;
    d.rowwise() += bn.transpose();
    return d.cwiseMax(0.0);
}

std::uint64_t double_bits(double x) {
    std::uint64_t u = 0;
    std::memcpy(&u, &x, sizeof(u));
    return u;
}

} // namespace

std::string kind_tag(ModelKind kind) {
    switch (kind) {
    case ModelKind::linear: return "linear";
    case ModelKind::forest: return "forest";
    case ModelKind::kernel: return "kernel";
    case ModelKind::network: return "network";
    }
    fail(Stage::config, "unknown model kind");
}

ModelKind kind_from_tag(const std::string& tag) {
    if (tag == "linear") return ModelKind::linear;
    if (tag == "forest") return ModelKind::forest;
    if (tag == "kernel") return ModelKind::kernel;
    if (tag == "network") return ModelKind::network;
    fail(Stage::config, "unknown model kind '" + tag + "'");
}

std::string TrainedModel::id() const {
    std::ostringstream out;
    out << kind_tag(kind) << ":n=" << feature_count << ":seed=" << seed << ":loss=" << std::hex
        << double_bits(base_loss);
    return out.str();
}

double rmse(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) fail(Stage::training, "rmse on vectors of different length");
    if (a.size() == 0) fail(Stage::training, "rmse on empty vectors");
    return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

TrainedModel fit_linear(const Dataset& ds) {
    ds.validate();
    const Eigen::Index m = ds.rows();
    const Eigen::Index n = ds.cols();
    if (m <= n + 1)
        fail(Stage::training, "fit_linear needs more rows than coefficients (m > n + 1), got m=" +
                                  std::to_string(m) + " n=" + std::to_string(n));
    Eigen::MatrixXd design(m, n + 1);
    design.col(0).setOnes();
    design.rightCols(n) = ds.features;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < n + 1) fail(Stage::training, "rank-deficient design matrix in fit_linear");
    LinearParams params;
    params.beta = qr.solve(ds.target);
    TrainedModel model;
    model.kind = ModelKind::linear;
    model.feature_count = n;
    model.seed = 0;
    model.params = std::move(params);
    model.base_loss = rmse(predict(model, ds.features), ds.target);
    return model;
}

TrainedModel fit_kernel(const Dataset& ds, double gamma, double lambda) {
    ds.validate();
    if (!(gamma > 0.0)) fail(Stage::training, "fit_kernel requires gamma > 0");
    if (!(lambda > 0.0)) fail(Stage::training, "fit_kernel requires lambda > 0");
    KernelParams params;
    params.x = ds.features;
    params.gamma = gamma;
    params.y_mean = ds.target.mean();
    Eigen::MatrixXd gram = (-gamma * cross_sqdist(ds.features, ds.features).array()).exp();
    gram.diagonal().array() += lambda;
    Eigen::VectorXd centered = ds.target.array() - params.y_mean;
    Eigen::LLT<Eigen::MatrixXd> llt(gram);
    if (llt.info() == Eigen::Success) {
        params.alpha = llt.solve(centered);
    } else {
        Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
        if (ldlt.info() != Eigen::Success)
            fail(Stage::training, "linear solve failure in fit_kernel");
        params.alpha = ldlt.solve(centered);
    }
    if (!params.alpha.allFinite()) fail(Stage::training, "linear solve failure in fit_kernel");
    TrainedModel model;
    model.kind = ModelKind::kernel;
    model.feature_count = ds.cols();
    model.seed = 0;
    model.params = std::move(params);
    model.base_loss = rmse(predict(model, ds.features), ds.target);
    return model;
}

TrainedModel fit_model(ModelKind kind, const Dataset& ds, const ModelHyper& hyper,
                       std::uint64_t seed) {
    switch (kind) {
    case ModelKind::linear: return fit_linear(ds);
    case ModelKind::forest:
        return fit_forest(ds, hyper.trees, hyper.max_depth, hyper.min_leaf, hyper.feature_frac,
                          seed);
    case ModelKind::kernel: return fit_kernel(ds, hyper.gamma, hyper.lambda);
    case ModelKind::network:
        return fit_network(ds, hyper.hidden, hyper.epochs, hyper.step, seed);
    }
    fail(Stage::config, "unknown model kind");
}

Eigen::VectorXd predict(const TrainedModel& model, const Eigen::MatrixXd& rows) {
    if (rows.cols() != model.feature_count)
        fail(Stage::decomposition, "predict column mismatch: model expects " +
                                       std::to_string(model.feature_count) + ", rows have " +
                                       std::to_string(rows.cols()));
    Eigen::VectorXd out;
    if (const auto* lin = std::get_if<LinearParams>(&model.params)) {
        out = (rows * lin->beta.tail(model.feature_count)).array() + lin->beta(0);
    } else if (const auto* forest = std::get_if<ForestParams>(&model.params)) {
        out = detail::predict_forest(*forest, rows);
    } else if (const auto* kernel = std::get_if<KernelParams>(&model.params)) {
        Eigen::MatrixXd k =
            (-kernel->gamma * cross_sqdist(rows, kernel->x).array()).exp();
        out = (k * kernel->alpha).array() + kernel->y_mean;
    } else if (const auto* net = std::get_if<NetworkParams>(&model.params)) {
        out = detail::predict_network(*net, rows);
    } else {
        fail(Stage::decomposition, "model has no parameters");
    }
    if (!out.allFinite()) fail(Stage::decomposition, "non-finite prediction");
    return out;
}

LearningCurve fit_rate(const std::vector<Eigen::Index>& sizes, const std::vector<double>& losses) {
    if (sizes.size() != losses.size())
        fail(Stage::training, "learning curve sizes and losses differ in length");
    if (sizes.size() < 2) fail(Stage::training, "learning curve needs at least 2 sizes");
    for (std::size_t i = 1; i < sizes.size(); ++i)
        if (sizes[i] <= sizes[i - 1])
            fail(Stage::training, "learning curve sizes must be strictly increasing");
    for (double loss : losses)
        if (!(loss > 0.0) || !std::isfinite(loss))
            fail(Stage::training, "learning curve losses must be positive and finite");

    // Longest strictly decreasing run ending at the largest size.
    int last = static_cast<int>(sizes.size()) - 1;
    int begin = last;
    while (begin > 0 && losses[static_cast<std::size_t>(begin - 1)] >
                            losses[static_cast<std::size_t>(begin)])
        --begin;
    if (last - begin + 1 < 2)
        fail(Stage::training, "no decreasing section in learning curve; rate undefined");

    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double count = static_cast<double>(last - begin + 1);
    for (int i = begin; i <= last; ++i) {
        const double lx = std::log(static_cast<double>(sizes[static_cast<std::size_t>(i)]));
        const double ly = std::log(losses[static_cast<std::size_t>(i)]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double slope = (sxy - sx * sy / count) / (sxx - sx * sx / count);

    LearningCurve curve;
    curve.sizes = sizes;
    curve.losses = losses;
    curve.xi = -slope;
    curve.fit_begin = begin;
    curve.fit_end = last;
    return curve;
}

namespace {

void check_curve_args(const std::vector<Eigen::Index>& sizes, int reps) {
    if (sizes.size() < 2) fail(Stage::training, "learning curve needs at least 2 sizes");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] < 1) fail(Stage::training, "learning curve sizes must be positive");
        if (i > 0 && sizes[i] <= sizes[i - 1])
            fail(Stage::training, "learning curve sizes must be strictly increasing");
    }
    if (reps < 1) fail(Stage::training, "learning curve needs reps >= 1");
}

} // namespace

LearningCurve learning_curve(ModelKind kind, const ModelHyper& hyper, const Dataset& ds,
                             const std::vector<Eigen::Index>& sizes, int reps,
                             std::uint64_t seed, Eigen::Index test_rows) {
    ds.validate();
    check_curve_args(sizes, reps);
    const Eigen::Index m = ds.rows();
    if (sizes.back() >= m)
        fail(Stage::training, "largest curve size leaves no held-out rows");
    const Eigen::Index held = std::min(test_rows, m - sizes.back());
    if (held < 1) fail(Stage::training, "no held-out rows for learning curve");

    std::vector<double> losses(sizes.size(), 0.0);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
    for (int rep = 0; rep < reps; ++rep) {
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        std::mt19937_64 engine(detail::mix_seed(seed, static_cast<std::uint64_t>(rep)));
        std::shuffle(order.begin(), order.end(), engine);
        Eigen::MatrixXd test_x(held, ds.cols());
        Eigen::VectorXd test_y(held);
        for (Eigen::Index i = 0; i < held; ++i) {
            const Eigen::Index src = order[static_cast<std::size_t>(m - held + i)];
            test_x.row(i) = ds.features.row(src);
            test_y(i) = ds.target(src);
        }
        for (std::size_t q = 0; q < sizes.size(); ++q) {
            const Eigen::Index mq = sizes[q];
            Dataset train;
            train.names = ds.names;
            train.treatment_index = ds.treatment_index;
            train.features.resize(mq, ds.cols());
            train.target.resize(mq);
            for (Eigen::Index i = 0; i < mq; ++i) {
                const Eigen::Index src = order[static_cast<std::size_t>(i)];
                train.features.row(i) = ds.features.row(src);
                train.target(i) = ds.target(src);
            }
            const std::uint64_t fit_seed =
                detail::mix_seed(detail::mix_seed(seed, static_cast<std::uint64_t>(rep)),
                                 static_cast<std::uint64_t>(q) + 1);
            TrainedModel model = fit_model(kind, train, hyper, fit_seed);
            losses[q] += rmse(predict(model, test_x), test_y);
        }
    }
    for (double& loss : losses) loss /= static_cast<double>(reps);
    return fit_rate(sizes, losses);
}

LearningCurve learning_curve(ModelKind kind, const ModelHyper& hyper, const SampleGenerator& gen,
                             const std::vector<Eigen::Index>& sizes, int reps,
                             std::uint64_t seed, Eigen::Index test_rows) {
    check_curve_args(sizes, reps);
    if (!gen) fail(Stage::training, "learning curve needs a sample generator");
    if (test_rows < 1) fail(Stage::training, "learning curve needs test_rows >= 1");

    std::vector<double> losses(sizes.size(), 0.0);
    for (int rep = 0; rep < reps; ++rep) {
        const std::uint64_t base = detail::mix_seed(seed, static_cast<std::uint64_t>(rep));
        for (std::size_t q = 0; q < sizes.size(); ++q) {
            const std::uint64_t salt = static_cast<std::uint64_t>(q);
            Dataset train = gen(sizes[q], detail::mix_seed(base, 2 * salt));
            Dataset test = gen(test_rows, detail::mix_seed(base, 2 * salt + 1));
            train.validate();
            test.validate();
            if (train.cols() != test.cols())
                fail(Stage::training, "generator produced inconsistent feature counts");
            TrainedModel model =
                fit_model(kind, train, hyper, detail::mix_seed(base, 10000 + salt));
            losses[q] += rmse(predict(model, test.features), test.target);
        }
    }
    for (double& loss : losses) loss /= static_cast<double>(reps);
    return fit_rate(sizes, losses);
}

namespace {

nlohmann::json params_to_json(const TrainedModel& model) {
    nlohmann::json j;
    if (const auto* lin = std::get_if<LinearParams>(&model.params)) {
        j["beta"] = vector_to_json(lin->beta);
    } else if (const auto* forest = std::get_if<ForestParams>(&model.params)) {
        nlohmann::json trees = nlohmann::json::array();
        for (const auto& tree : forest->trees) {
            nlohmann::json nodes = nlohmann::json::array();
            for (const auto& node : tree)
                nodes.push_back({{"feature", node.feature},
                                 {"threshold", node.threshold},
                                 {"left", node.left},
                                 {"right", node.right},
                                 {"value", node.value}});
            trees.push_back(std::move(nodes));
        }
        j["trees"] = std::move(trees);
    } else if (const auto* kernel = std::get_if<KernelParams>(&model.params)) {
        j["x"] = matrix_to_json(kernel->x);
        j["alpha"] = vector_to_json(kernel->alpha);
        j["gamma"] = kernel->gamma;
        j["y_mean"] = kernel->y_mean;
    } else if (const auto* net = std::get_if<NetworkParams>(&model.params)) {
        nlohmann::json weights = nlohmann::json::array();
        nlohmann::json biases = nlohmann::json::array();
        for (const auto& w : net->w) weights.push_back(matrix_to_json(w));
        for (const auto& b : net->b) biases.push_back(vector_to_json(b));
        j["w"] = std::move(weights);
        j["b"] = std::move(biases);
        j["x_mean"] = vector_to_json(net->x_mean);
        j["x_scale"] = vector_to_json(net->x_scale);
        j["y_mean"] = net->y_mean;
        j["y_scale"] = net->y_scale;
    }
    return j;
}

void params_from_json(ModelKind kind, const nlohmann::json& j, TrainedModel& model) {
    switch (kind) {
    case ModelKind::linear: {
        LinearParams params;
        params.beta = vector_from_json(j.at("beta"));
        model.params = std::move(params);
        return;
    }
    case ModelKind::forest: {
        ForestParams params;
        for (const auto& tree : j.at("trees")) {
            std::vector<ForestNode> nodes;
            nodes.reserve(tree.size());
            for (const auto& nj : tree) {
                ForestNode node;
                node.feature = nj.at("feature").get<int>();
                node.threshold = nj.at("threshold").get<double>();
                node.left = nj.at("left").get<int>();
                node.right = nj.at("right").get<int>();
                node.value = nj.at("value").get<double>();
                nodes.push_back(node);
            }
            params.trees.push_back(std::move(nodes));
        }
        model.params = std::move(params);
        return;
    }
    case ModelKind::kernel: {
        KernelParams params;
        params.x = matrix_from_json(j.at("x"));
        params.alpha = vector_from_json(j.at("alpha"));
        params.gamma = j.at("gamma").get<double>();
        params.y_mean = j.at("y_mean").get<double>();
        model.params = std::move(params);
        return;
    }
    case ModelKind::network: {
        NetworkParams params;
        for (const auto& w : j.at("w")) params.w.push_back(matrix_from_json(w));
        for (const auto& b : j.at("b")) params.b.push_back(vector_from_json(b));
        params.x_mean = vector_from_json(j.at("x_mean"));
        params.x_scale = vector_from_json(j.at("x_scale"));
        params.y_mean = j.at("y_mean").get<double>();
        params.y_scale = j.at("y_scale").get<double>();
        model.params = std::move(params);
        return;
    }
    }
    fail(Stage::ingestion, "unknown model kind in JSON");
}

} // namespace

nlohmann::json to_json(const TrainedModel& model) {
    return {{"kind", kind_tag(model.kind)},
            {"feature_count", model.feature_count},
            {"base_loss", model.base_loss},
            {"seed", model.seed},
            {"parameters", params_to_json(model)}};
}

TrainedModel model_from_json(const nlohmann::json& j) {
    try {
        TrainedModel model;
        model.kind = kind_from_tag(j.at("kind").get<std::string>());
        model.feature_count = j.at("feature_count").get<Eigen::Index>();
        model.base_loss = j.at("base_loss").get<double>();
        model.seed = j.at("seed").get<std::uint64_t>();
        params_from_json(model.kind, j.at("parameters"), model);
        return model;
    } catch (const nlohmann::json::exception& e) {
        fail(Stage::ingestion, std::string("malformed model JSON: ") + e.what());
    }
}

} // namespace shapreg
