#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "shapreg/errors.hpp"
#include "shapreg/models.hpp"
#include "model_detail.hpp"

namespace shapreg {

namespace {

struct Adam {
    std::vector<Eigen::MatrixXd> mw, vw;
    std::vector<Eigen::VectorXd> mb, vb;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;

    void init(const std::vector<Eigen::MatrixXd>& w, const std::vector<Eigen::VectorXd>& b) {
        for (const auto& wi : w) {
            mw.push_back(Eigen::MatrixXd::Zero(wi.rows(), wi.cols()));
            vw.push_back(Eigen::MatrixXd::Zero(wi.rows(), wi.cols()));
        }
        for (const auto& bi : b) {
            mb.push_back(Eigen::VectorXd::Zero(bi.size()));
            vb.push_back(Eigen::VectorXd::Zero(bi.size()));
        }
    }

    void step_weights(double lr, std::vector<Eigen::MatrixXd>& w,
                      std::vector<Eigen::VectorXd>& b,
                      const std::vector<Eigen::MatrixXd>& gw,
                      const std::vector<Eigen::VectorXd>& gb) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t l = 0; l < w.size(); ++l) {
            mw[l] = beta1 * mw[l] + (1.0 - beta1) * gw[l];
            vw[l] = beta2 * vw[l] + (1.0 - beta2) * gw[l].cwiseProduct(gw[l]);
            w[l].array() -=
                lr * (mw[l].array() / c1) / ((vw[l].array() / c2).sqrt() + eps);
            mb[l] = beta1 * mb[l] + (1.0 - beta1) * gb[l];
            vb[l] = beta2 * vb[l] + (1.0 - beta2) * gb[l].cwiseProduct(gb[l]);
            b[l].array() -=
                lr * (mb[l].array() / c1) / ((vb[l].array() / c2).sqrt() + eps);
        }
    }
};

Eigen::MatrixXd forward(const NetworkParams& net, const Eigen::MatrixXd& input,
                        std::vector<Eigen::MatrixXd>* activations) {
    Eigen::MatrixXd a = input;
    if (activations) activations->push_back(a);
    for (std::size_t l = 0; l < net.w.size(); ++l) {
        Eigen::MatrixXd z = a * net.w[l].transpose();
        z.rowwise() += net.b[l].transpose();
        a = l + 1 < net.w.size() ? z.array().tanh().matrix() : z;
        if (activations) activations->push_back(a);
    }
    return a;
}

} // namespace

TrainedModel fit_network(const Dataset& ds, const std::vector<int>& hidden, int epochs,
                         double step, std::uint64_t seed) {
    ds.validate();
    if (hidden.empty()) fail(Stage::training, "fit_network requires at least one hidden layer");
    for (int width : hidden)
        if (width < 1) fail(Stage::training, "fit_network requires positive layer widths");
    if (epochs < 1) fail(Stage::training, "fit_network requires epochs >= 1");
    if (!(step > 0.0)) fail(Stage::training, "fit_network requires step > 0");

    const Eigen::Index m = ds.rows();
    const Eigen::Index n = ds.cols();

    NetworkParams net;
    net.x_mean = ds.features.colwise().mean();
    net.x_scale.resize(n);
    for (Eigen::Index c = 0; c < n; ++c) {
        const double var =
            (ds.features.col(c).array() - net.x_mean(c)).square().sum() / static_cast<double>(m);
        const double sd = std::sqrt(var);
        net.x_scale(c) = sd > 0.0 ? sd : 1.0; // constant columns pass through unscaled
    }
    net.y_mean = ds.target.mean();
    {
        const double var =
            (ds.target.array() - net.y_mean).square().sum() / static_cast<double>(m);
        const double sd = std::sqrt(var);
        net.y_scale = sd > 0.0 ? sd : 1.0;
    }

    Eigen::MatrixXd x = (ds.features.rowwise() - net.x_mean.transpose()).array().rowwise() /
                        net.x_scale.transpose().array();
    Eigen::VectorXd y = (ds.target.array() - net.y_mean) / net.y_scale;

    // Randomness consumption order: He-scaled weight init layer by layer
    // (row-major within a layer), then one index shuffle per epoch.
    std::mt19937_64 engine(detail::mix_seed(seed, 0));
    std::vector<Eigen::Index> widths;
    widths.push_back(n);
    for (int width : hidden) widths.push_back(width);
    widths.push_back(1);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const Eigen::Index fan_in = widths[l];
        const Eigen::Index fan_out = widths[l + 1];
        std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        Eigen::MatrixXd w(fan_out, fan_in);
        for (Eigen::Index r = 0; r < fan_out; ++r)
            for (Eigen::Index c = 0; c < fan_in; ++c) w(r, c) = gauss(engine);
        net.w.push_back(std::move(w));
        net.b.push_back(Eigen::VectorXd::Zero(fan_out));
    }

    Adam adam;
    adam.init(net.w, net.b);
    const Eigen::Index batch = std::min<Eigen::Index>(32, m);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), Eigen::Index{0});

    std::vector<Eigen::MatrixXd> acts;
    std::vector<Eigen::MatrixXd> gw(net.w.size());
    std::vector<Eigen::VectorXd> gb(net.b.size());
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), engine);
        for (Eigen::Index start = 0; start < m; start += batch) {
            const Eigen::Index count = std::min(batch, m - start);
            Eigen::MatrixXd xb(count, n);
            Eigen::VectorXd yb(count);
            for (Eigen::Index i = 0; i < count; ++i) {
                xb.row(i) = x.row(order[static_cast<std::size_t>(start + i)]);
                yb(i) = y(order[static_cast<std::size_t>(start + i)]);
            }
            acts.clear();
            Eigen::MatrixXd pred = forward(net, xb, &acts);
            Eigen::MatrixXd delta = pred.col(0) - yb; // d(MSE)/d(pred) up to 2/count
            const double loss = delta.squaredNorm() / static_cast<double>(count);
            if (!std::isfinite(loss))
                fail(Stage::training, "non-finite loss during network training");
            delta *= 2.0 / static_cast<double>(count);
            for (std::size_t l = net.w.size(); l-- > 0;) {
                gw[l] = delta.transpose() * acts[l];
                gb[l] = delta.colwise().sum().transpose();
                if (l > 0)
                    delta = (delta * net.w[l])
                                .cwiseProduct((1.0 - acts[l].array().square()).matrix());
            }
            adam.step_weights(step, net.w, net.b, gw, gb);
        }
    }

    TrainedModel model;
    model.kind = ModelKind::network;
    model.feature_count = n;
    model.seed = seed;
    model.params = std::move(net);
    model.base_loss = rmse(predict(model, ds.features), ds.target);
    return model;
}

namespace detail {

Eigen::VectorXd predict_network(const NetworkParams& params, const Eigen::MatrixXd& rows) {
    Eigen::MatrixXd x = (rows.rowwise() - params.x_mean.transpose()).array().rowwise() /
                        params.x_scale.transpose().array();
    Eigen::MatrixXd out = forward(params, x, nullptr);
    return params.y_mean + params.y_scale * out.col(0).array();
}

} // namespace detail

} // namespace shapreg
