#include "shapreg/treatment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <random>
#include <set>

#include "shapreg/errors.hpp"
#include "shapreg/text.hpp"

namespace shapreg {

namespace {

// Index of the player that consists of exactly the given feature.
int standalone_player(const CoalitionUniverse& universe, Eigen::Index feature) {
    for (std::size_t p = 0; p < universe.players.size(); ++p) {
        const auto& members = universe.players[p];
        if (members.size() == 1 && members[0] == feature) return static_cast<int>(p);
    }
    fail(Stage::decomposition, "treatment feature " + std::to_string(feature + 1) +
                                   " is not a standalone player in the coalition universe");
}

void check_aligned(const ShapleyDecomposition& h1, const ShapleyDecomposition& h2) {
    if (h1.order != 1 || h2.order != 2)
        fail(Stage::decomposition, "treatment regrouping needs an order-1 and an order-2 decomposition");
    if (h1.row_ids != h2.row_ids)
        fail(Stage::decomposition, "decompositions cover different rows");
    if (h1.model_id != h2.model_id)
        fail(Stage::decomposition, "decompositions come from different models");
    if (h1.background_id != h2.background_id)
        fail(Stage::decomposition, "decompositions use different backgrounds");
    if (h1.universe.labels != h2.universe.labels || h1.universe.players != h2.universe.players)
        fail(Stage::decomposition, "decompositions use different coalition universes");
    const double scale = 1.0 + std::abs(h1.phi0);
    if (std::abs(h1.phi0 - h2.phi0) > 1e-9 * scale)
        fail(Stage::decomposition, "decompositions disagree on the baseline value");
}

} // namespace

double dgp_noise_sd(const SimConfig& cfg) {
    if (cfg.noise_ratio < 0.0) fail(Stage::config, "noise ratio must be nonnegative");
    const double b1 = cfg.beta[0], b2 = cfg.beta[1], b3 = cfg.beta[2];
    return cfg.noise_ratio * std::sqrt(b1 * b1 / 4.0 + b2 * b2 / 2.0 + b3 * b3);
}

Dataset simulate_dgp(const SimConfig& cfg) {
    if (cfg.m < 1) fail(Stage::config, "sample size must be at least 1");
    const double sd = dgp_noise_sd(cfg);

    std::mt19937_64 engine(cfg.seed);
    std::bernoulli_distribution coin(0.5);
    std::normal_distribution<double> gauss(0.0, 1.0);

    Dataset ds;
    ds.features.resize(cfg.m, 3);
    ds.target.resize(cfg.m);
    ds.names = {"t", "x1", "x2"};
    ds.treatment_index = 0;
    for (Eigen::Index r = 0; r < cfg.m; ++r) {
        const double t = coin(engine) ? 1.0 : 0.0;
        const double x1 = gauss(engine);
        const double x2 = gauss(engine);
        const double eps = gauss(engine); // always drawn, so covariates are ratio-invariant
        ds.features(r, 0) = t;
        ds.features(r, 1) = x1;
        ds.features(r, 2) = x2;
        ds.target(r) = cfg.beta[0] * t + cfg.beta[1] * t * x1 + cfg.beta[2] * x1 * x2 +
                       cfg.beta[3] + sd * eps;
    }
    return ds;
}

TreatmentFunction treatment_decompose(const ShapleyDecomposition& h1,
                                      const ShapleyDecomposition& h2, Eigen::Index t_feature,
                                      const std::vector<bool>& treated) {
    check_aligned(h1, h2);
    const Eigen::Index m = h1.values.rows();
    if (static_cast<Eigen::Index>(treated.size()) != m)
        fail(Stage::decomposition, "treated mask length does not match the row count");

    const int t_player = standalone_player(h1.universe, t_feature);
    const int players = static_cast<int>(h1.universe.count());

    TreatmentFunction tf;
    tf.phi00 = h1.phi0;
    tf.treated = treated;
    tf.row_ids = h1.row_ids;
    tf.model_id = h1.model_id;
    tf.background_id = h1.background_id;
    tf.bare_t.resize(m);
    tf.phi_z.resize(m);
    tf.interactions.resize(m, players - 1);

    const int t_term = h1.find_term({t_player});
    std::vector<int> partner_terms; // in h1, one per non-treatment player
    std::vector<int> pair_terms;    // in h2, the (k, t) pairs in the same order
    for (int k = 0; k < players; ++k) {
        if (k == t_player) continue;
        partner_terms.push_back(h1.find_term({k}));
        pair_terms.push_back(h2.find_term({k, t_player}));
        tf.interaction_labels.push_back(h1.universe.labels[static_cast<std::size_t>(k)]);
    }
    if (partner_terms.empty())
        fail(Stage::decomposition, "treatment regrouping needs at least one non-treatment player");
    if (t_term < 0 || std::ranges::min(partner_terms) < 0 || std::ranges::min(pair_terms) < 0)
        fail(Stage::decomposition, "decompositions are missing required singleton or pair terms");

    for (Eigen::Index r = 0; r < m; ++r) {
        double pair_sum = 0.0, remainder = 0.0;
        for (std::size_t j = 0; j < pair_terms.size(); ++j) {
            const double phi_k = h1.values(r, partner_terms[j]);
            const double phi_kt = h2.values(r, pair_terms[j]);
            tf.interactions(r, static_cast<Eigen::Index>(j)) = 2.0 * phi_kt;
            pair_sum += phi_kt;
            remainder += phi_k - phi_kt;
        }
        tf.bare_t(r) = h1.values(r, t_term) - pair_sum;
        tf.phi_z(r) = remainder;
    }
    return tf;
}

double ate(const TreatmentFunction& tf) {
    double sum = 0.0;
    Eigen::Index count = 0;
    for (Eigen::Index r = 0; r < tf.bare_t.size(); ++r) {
        if (!tf.treated[static_cast<std::size_t>(r)]) continue;
        sum += tf.bare_t(r) + tf.interactions.row(r).sum();
        ++count;
    }
    if (count == 0) fail(Stage::inference, "average treatment effect needs at least one treated row");
    return sum / static_cast<double>(count);
}

std::vector<bool> treated_mask(const Eigen::MatrixXd& rows, Eigen::Index t_feature) {
    if (t_feature < 0 || t_feature >= rows.cols())
        fail(Stage::decomposition, "treatment column out of range");
    std::vector<bool> mask(static_cast<std::size_t>(rows.rows()));
    for (Eigen::Index r = 0; r < rows.rows(); ++r)
        mask[static_cast<std::size_t>(r)] = rows(r, t_feature) != 0.0;
    return mask;
}

TreatmentFunction treatment_function_eval(const TrainedModel& model, const Eigen::MatrixXd& rows,
                                          const std::vector<Eigen::Index>& row_ids,
                                          const BackgroundSet& background,
                                          Eigen::Index t_feature,
                                          const std::vector<Eigen::Index>& keep) {
    std::set<Eigen::Index> kept(keep.begin(), keep.end());
    kept.insert(t_feature);
    if (kept.size() < 2)
        fail(Stage::decomposition, "treatment evaluation needs at least one feature besides the treatment");
    const CoalitionUniverse universe =
        group_others(rows.cols(), std::vector<Eigen::Index>(kept.begin(), kept.end()));

    const ShapleyDecomposition h1 = shapley_values(model, rows, row_ids, background, universe);
    const ShapleyDecomposition h2 = shapley_taylor(model, rows, row_ids, background, universe, 2);
    return treatment_decompose(h1, h2, t_feature, treated_mask(rows, t_feature));
}

Eigen::VectorXd interaction_curve(const Eigen::VectorXd& term_values,
                                  const Eigen::VectorXd& covariate_values,
                                  const std::vector<bool>& treated, int degree) {
    if (degree < 0) fail(Stage::inference, "polynomial degree must be nonnegative");
    if (term_values.size() != covariate_values.size() ||
        static_cast<Eigen::Index>(treated.size()) != term_values.size())
        fail(Stage::inference, "term values, covariate values, and treated mask must align");

    std::vector<Eigen::Index> picked;
    for (Eigen::Index r = 0; r < term_values.size(); ++r)
        if (treated[static_cast<std::size_t>(r)]) picked.push_back(r);
    if (static_cast<Eigen::Index>(picked.size()) < degree + 2)
        fail(Stage::inference, "polynomial fit needs at least degree + 2 treated rows");

    Eigen::MatrixXd vand(static_cast<Eigen::Index>(picked.size()), degree + 1);
    Eigen::VectorXd y(static_cast<Eigen::Index>(picked.size()));
    for (Eigen::Index i = 0; i < vand.rows(); ++i) {
        const double x = covariate_values(picked[static_cast<std::size_t>(i)]);
        double power = 1.0;
        for (int d = 0; d <= degree; ++d) {
            vand(i, d) = power;
            power *= x;
        }
        y(i) = term_values(picked[static_cast<std::size_t>(i)]);
    }
    return vand.colPivHouseholderQr().solve(y);
}

void write_treatment_csv(const TreatmentFunction& tf, std::ostream& out) {
    out << "row_id,treated,phi00,bare_t";
    for (const auto& label : tf.interaction_labels) out << ",inter_" << label;
    out << ",phi_z\n";
    for (Eigen::Index r = 0; r < tf.bare_t.size(); ++r) {
        out << tf.row_ids[static_cast<std::size_t>(r)] << ','
            << (tf.treated[static_cast<std::size_t>(r)] ? 1 : 0) << ','
            << format_number(tf.phi00) << ',' << format_number(tf.bare_t(r));
        for (Eigen::Index c = 0; c < tf.interactions.cols(); ++c)
            out << ',' << format_number(tf.interactions(r, c));
        out << ',' << format_number(tf.phi_z(r)) << '\n';
    }
}

} // namespace shapreg
