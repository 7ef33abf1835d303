#include "shapreg/inference.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <ostream>

#include <boost/math/distributions/students_t.hpp>
#include <Eigen/SVD>

#include "shapreg/errors.hpp"
#include "shapreg/text.hpp"

namespace shapreg {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return (n % 2 == 1) ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

// Smallest value strictly above the median; the median itself when nothing
// lies above (all values tied at the top).
double next_distinct_above(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const double med =
        (v.size() % 2 == 1) ? v[v.size() / 2] : (v[v.size() / 2 - 1] + v[v.size() / 2]) / 2.0;
    for (double x : v)
        if (x > med) return x;
    return med;
}

void mark_unset(RegressionTerm& term) {
    term.beta = term.se = term.t_stat = term.p_null = term.ci_low = term.ci_high = kNaN;
    term.dropped = true;
}

// Sign multiplier and printed tag for one term: single-feature players take
// the sign of the raw-feature least-squares coefficient, everything else
// (interactions, grouped remainder) is reported unsigned.
std::pair<double, std::string> term_sign(const ShapleyDecomposition& dec, std::size_t term,
                                         const Eigen::VectorXd& linear_beta) {
    const std::uint32_t mask = dec.term_masks[term];
    if (std::popcount(mask) != 1) return {1.0, "n.a."};
    const int pl = std::countr_zero(mask);
    const bool is_others = dec.universe.has_others && pl == dec.universe.count() - 1;
    if (is_others) return {1.0, "n.a."};
    const auto& features = dec.universe.players[static_cast<std::size_t>(pl)];
    if (features.size() != 1) return {1.0, "n.a."};
    const double b = linear_beta(features[0]);
    return b < 0.0 ? std::pair<double, std::string>{-1.0, "-"}
                   : std::pair<double, std::string>{1.0, "+"};
}

std::vector<Eigen::Index> checked_region(const ShapleyDecomposition& dec,
                                         const std::vector<Eigen::Index>& region) {
    if (region.empty()) fail(Stage::inference, "evaluation region is empty");
    for (Eigen::Index r : region)
        if (r < 0 || r >= dec.values.rows())
            fail(Stage::inference, "evaluation region row out of range");
    return region;
}

void check_signs_width(const ShapleyDecomposition& dec, const Eigen::VectorXd& linear_beta) {
    if (linear_beta.size() != dec.universe.feature_count)
        fail(Stage::inference, "sign coefficients do not cover the feature set");
}

} // namespace

std::string se_mode_tag(SeMode mode) {
    return mode == SeMode::homoskedastic ? "homoskedastic" : "hc1";
}

SeMode se_mode_from_tag(const std::string& tag) {
    if (tag == "homoskedastic") return SeMode::homoskedastic;
    if (tag == "hc1") return SeMode::hc1;
    fail(Stage::config, "unknown standard-error mode: " + tag);
}

double student_tail_prob(double t, double df) {
    if (!(df > 0)) fail(Stage::inference, "degrees of freedom must be positive");
    if (std::isnan(t)) return kNaN;
    if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
    boost::math::students_t_distribution<double> dist(df);
    return boost::math::cdf(boost::math::complement(dist, t));
}

double student_quantile(double q, double df) {
    if (!(df > 0)) fail(Stage::inference, "degrees of freedom must be positive");
    if (!(q > 0.0 && q < 1.0)) fail(Stage::inference, "quantile level must lie in (0,1)");
    boost::math::students_t_distribution<double> dist(df);
    return boost::math::quantile(dist, q);
}

int ShapleyRegressionFit::retained() const {
    int k = 0;
    for (const RegressionTerm& term : terms)
        if (!term.dropped) ++k;
    return k;
}

ShapleyRegressionFit shapley_regression(const ShapleyDecomposition& dec, const Eigen::VectorXd& y,
                                        SeMode se_mode, double alpha, int fold) {
    const Eigen::Index m = dec.values.rows();
    const Eigen::Index n_terms = dec.values.cols();
    if (n_terms == 0) fail(Stage::inference, "decomposition has no terms");
    if (y.size() != m) fail(Stage::inference, "targets do not align with decomposition rows");
    if (m < n_terms + 2)
        fail(Stage::inference, "regression needs at least two more rows than terms");
    if (!(alpha > 0.0 && alpha < 0.5)) fail(Stage::inference, "alpha must lie in (0, 0.5)");

    ShapleyRegressionFit fit;
    fit.fold = fold;
    fit.se_mode = se_mode;
    fit.alpha = alpha;
    fit.terms.resize(static_cast<std::size_t>(n_terms));
    for (Eigen::Index j = 0; j < n_terms; ++j)
        fit.terms[static_cast<std::size_t>(j)].label =
            dec.term_labels[static_cast<std::size_t>(j)];

    const Eigen::VectorXd resp = y.array() - dec.phi0;
    if (resp.cwiseAbs().maxCoeff() == 0.0) {
        // response carries no signal beyond the baseline: model output is
        // constant, so every coefficient is zero by construction
        fit.degenerate = true;
        fit.dof = static_cast<double>(m - n_terms);
        return fit;
    }

    // Greedy left-to-right screen: a column joins the design only while the
    // condition number stays below the collinearity limit.
    Eigen::MatrixXd design(m, n_terms);
    std::vector<Eigen::Index> kept;
    for (Eigen::Index j = 0; j < n_terms; ++j) {
        design.col(static_cast<Eigen::Index>(kept.size())) = dec.values.col(j);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(
            design.leftCols(static_cast<Eigen::Index>(kept.size()) + 1));
        const Eigen::VectorXd& sv = svd.singularValues();
        const double smin = sv(sv.size() - 1);
        const double cond = smin > 0.0 ? sv(0) / smin : std::numeric_limits<double>::infinity();
        if (cond > kCollinearityLimit) {
            mark_unset(fit.terms[static_cast<std::size_t>(j)]);
        } else {
            kept.push_back(j);
            fit.condition_number = cond;
        }
    }
    if (kept.empty()) {
        fit.degenerate = true;
        fit.dof = static_cast<double>(m);
        return fit;
    }

    const Eigen::Index k = static_cast<Eigen::Index>(kept.size());
    const Eigen::MatrixXd design_kept = design.leftCols(k);
    const Eigen::VectorXd beta = design_kept.colPivHouseholderQr().solve(resp);
    const Eigen::VectorXd resid = resp - design_kept * beta;
    fit.dof = static_cast<double>(m - k);

    const Eigen::MatrixXd xtx = design_kept.transpose() * design_kept;
    const Eigen::MatrixXd bread = xtx.llt().solve(Eigen::MatrixXd::Identity(k, k));
    Eigen::MatrixXd cov;
    if (se_mode == SeMode::homoskedastic) {
        cov = bread * (resid.squaredNorm() / fit.dof);
    } else {
        const Eigen::MatrixXd weighted =
            (design_kept.array().colwise() * resid.array().square()).matrix();
        const Eigen::MatrixXd meat = design_kept.transpose() * weighted;
        cov = bread * meat * bread * (static_cast<double>(m) / fit.dof);
    }

    const double half_quantile = student_quantile(1.0 - alpha / 2.0, fit.dof);
    for (Eigen::Index i = 0; i < k; ++i) {
        RegressionTerm& term = fit.terms[static_cast<std::size_t>(kept[static_cast<std::size_t>(i)])];
        term.beta = beta(i);
        term.se = std::sqrt(std::max(cov(i, i), 0.0));
        if (term.se > 0.0) {
            term.t_stat = term.beta / term.se;
            term.p_null = student_tail_prob(term.t_stat, fit.dof);
        } else {
            term.t_stat = term.beta == 0.0 ? 0.0
                                           : std::copysign(
                                                 std::numeric_limits<double>::infinity(),
                                                 term.beta);
            term.p_null = term.beta > 0.0 ? 0.0 : (term.beta < 0.0 ? 1.0 : 0.5);
        }
        const double half = half_quantile * term.se;
        term.ci_low = term.beta - half;
        term.ci_high = term.beta + half;
    }
    return fit;
}

std::vector<double> test_null(const ShapleyRegressionFit& fit) {
    std::vector<double> p;
    p.reserve(fit.terms.size());
    for (const RegressionTerm& term : fit.terms) p.push_back(term.dropped ? kNaN : term.p_null);
    return p;
}

std::string significance_stars(double p) {
    if (std::isnan(p)) return "";
    if (p < 0.01) return "***";
    if (p < 0.05) return "**";
    if (p < 0.1) return "*";
    return "";
}

bool robust_interval(double ci_low, double ci_high) {
    const bool excludes_zero = ci_low > 0.0 || ci_high < 0.0;
    const bool includes_one = ci_low <= 1.0 && 1.0 <= ci_high;
    return excludes_zero && includes_one;
}

std::vector<bool> test_robust(const ShapleyRegressionFit& fit, double alpha) {
    if (!(alpha > 0.0 && alpha < 0.5)) fail(Stage::inference, "alpha must lie in (0, 0.5)");
    std::vector<bool> flags;
    flags.reserve(fit.terms.size());
    const double quantile =
        fit.dof > 0.0 ? student_quantile(1.0 - alpha / 2.0, fit.dof) : 0.0;
    for (const RegressionTerm& term : fit.terms) {
        if (term.dropped) {
            flags.push_back(false);
            continue;
        }
        const double half = quantile * term.se * fit.ci_ratio;
        flags.push_back(robust_interval(term.beta - half, term.beta + half));
    }
    return flags;
}

AttributionStats ssc(const ShapleyDecomposition& dec, const Eigen::VectorXd& linear_beta,
                     const std::vector<Eigen::Index>& region) {
    check_signs_width(dec, linear_beta);
    const std::vector<Eigen::Index> rows = checked_region(dec, region);
    const Eigen::Index n_terms = dec.values.cols();

    AttributionStats stats;
    stats.values = Eigen::VectorXd::Zero(n_terms);
    for (Eigen::Index r : rows) {
        const double denom = dec.values.row(r).cwiseAbs().sum();
        if (denom == 0.0) {
            ++stats.excluded_rows; // share undefined on an all-zero row
            continue;
        }
        stats.values += dec.values.row(r).cwiseAbs().transpose() / denom;
        ++stats.used_rows;
    }
    if (stats.used_rows == 0)
        fail(Stage::inference, "every region row has zero total attribution");
    stats.values /= static_cast<double>(stats.used_rows);
    for (std::size_t t = 0; t < static_cast<std::size_t>(n_terms); ++t) {
        const auto [mult, tag] = term_sign(dec, t, linear_beta);
        stats.values(static_cast<Eigen::Index>(t)) *= mult;
        stats.signs.push_back(tag);
    }
    return stats;
}

AttributionStats smc(const ShapleyDecomposition& dec, const Eigen::VectorXd& linear_beta,
                     const std::vector<Eigen::Index>& region) {
    check_signs_width(dec, linear_beta);
    const std::vector<Eigen::Index> rows = checked_region(dec, region);
    const Eigen::Index n_terms = dec.values.cols();

    AttributionStats stats;
    stats.values = Eigen::VectorXd::Zero(n_terms);
    for (Eigen::Index r : rows) stats.values += dec.values.row(r).transpose();
    stats.values /= static_cast<double>(rows.size());
    stats.used_rows = static_cast<Eigen::Index>(rows.size());
    for (std::size_t t = 0; t < static_cast<std::size_t>(n_terms); ++t) {
        const auto [mult, tag] = term_sign(dec, t, linear_beta);
        stats.values(static_cast<Eigen::Index>(t)) *= mult;
        stats.signs.push_back(tag);
    }
    return stats;
}

double ssc_se_bound(double share, Eigen::Index region_size) {
    if (!(share >= 0.0 && share <= 1.0)) fail(Stage::inference, "share must lie in [0, 1]");
    if (region_size < 1) fail(Stage::inference, "region size must be at least one");
    const double n = static_cast<double>(region_size);
    return std::min(std::sqrt(share * (1.0 - share) / n), 1.0 / std::sqrt(2.0 * n));
}

Eigen::Index required_folds(Eigen::Index m, double xi) {
    if (m < 2) fail(Stage::config, "fold formula needs at least two rows");
    if (!(xi > 0.0)) fail(Stage::config, "convergence rate must be positive");
    if (xi >= 0.5) return 2;
    double power = std::pow(static_cast<double>(m), 1.0 - 2.0 * xi);
    const double rounded = std::round(power);
    if (std::abs(power - rounded) < 1e-9) power = rounded; // guard the ceiling against fp dust
    return static_cast<Eigen::Index>(std::ceil(power)) + 1;
}

double ci_adjustment_ratio(double df0, double df_adj, double alpha_v) {
    if (df_adj <= 0.0) return 1.0;
    const double q = 1.0 - alpha_v / 2.0;
    return std::sqrt(df0 / df_adj) * (student_quantile(q, df_adj) / student_quantile(q, df0));
}

ShapleyRegressionFit adjust_ci(ShapleyRegressionFit fit, Eigen::Index m, double xi,
                               double alpha_v) {
    if (m < 1) fail(Stage::inference, "sample size must be positive");
    if (!(xi > 0.0)) fail(Stage::inference, "convergence rate must be positive");
    const double df_adj =
        std::pow(static_cast<double>(m), 2.0 * xi) - static_cast<double>(fit.retained());
    const double ratio = ci_adjustment_ratio(fit.dof, df_adj, alpha_v);
    for (RegressionTerm& term : fit.terms) {
        if (term.dropped) continue;
        term.ci_low = term.beta - ratio * (term.beta - term.ci_low);
        term.ci_high = term.beta + ratio * (term.ci_high - term.beta);
    }
    fit.ci_ratio *= ratio;
    return fit;
}

VeinSummary vein_aggregate(const std::vector<ShapleyRegressionFit>& fits, double alpha) {
    if (fits.size() < 2) fail(Stage::inference, "aggregation needs at least two folds");
    if (!(alpha > 0.0 && alpha < 0.5)) fail(Stage::inference, "alpha must lie in (0, 0.5)");
    const std::size_t n_terms = fits.front().terms.size();
    for (const ShapleyRegressionFit& fit : fits) {
        if (fit.terms.size() != n_terms)
            fail(Stage::inference, "fold fits disagree on the term set");
        for (std::size_t t = 0; t < n_terms; ++t)
            if (fit.terms[t].label != fits.front().terms[t].label)
                fail(Stage::inference, "fold fits disagree on the term set");
    }

    VeinSummary summary;
    summary.alpha_v = 2.0 * alpha;
    summary.folds = static_cast<int>(fits.size());
    for (std::size_t t = 0; t < n_terms; ++t) {
        VeinTerm vt;
        vt.label = fits.front().terms[t].label;
        std::vector<double> betas, lows, highs, ps;
        for (const ShapleyRegressionFit& fit : fits) {
            const RegressionTerm& term = fit.terms[t];
            if (term.dropped || !std::isfinite(term.beta)) continue;
            betas.push_back(term.beta);
            lows.push_back(term.ci_low);
            highs.push_back(term.ci_high);
            ps.push_back(term.p_null);
        }
        if (betas.empty()) {
            vt.point = vt.ci_low = vt.ci_high = vt.p_med = kNaN;
            vt.dropped = true;
        } else {
            vt.point = median_of(betas);
            vt.ci_low = median_of(lows);
            vt.ci_high = next_distinct_above(highs);
            vt.p_med = median_of(ps);
            vt.robust = robust_interval(vt.ci_low, vt.ci_high);
        }
        summary.terms.push_back(std::move(vt));
    }
    return summary;
}

ShapleyDecomposition group_components(const ShapleyDecomposition& dec,
                                      const std::vector<std::vector<int>>& groups) {
    const std::size_t n_terms = dec.term_masks.size();
    if (groups.empty()) fail(Stage::inference, "grouping must contain at least one component");
    std::vector<bool> seen(n_terms, false);
    std::size_t covered = 0;
    for (const std::vector<int>& group : groups) {
        if (group.empty()) fail(Stage::inference, "grouping has an empty component");
        for (int idx : group) {
            if (idx < 0 || static_cast<std::size_t>(idx) >= n_terms)
                fail(Stage::inference, "grouping references an unknown term");
            if (seen[static_cast<std::size_t>(idx)])
                fail(Stage::inference, "grouping repeats a term");
            seen[static_cast<std::size_t>(idx)] = true;
            ++covered;
        }
    }
    if (covered != n_terms) fail(Stage::inference, "grouping does not cover every term");

    ShapleyDecomposition grouped;
    grouped.phi0 = dec.phi0;
    grouped.order = dec.order;
    grouped.universe = dec.universe;
    grouped.row_ids = dec.row_ids;
    grouped.background_id = dec.background_id;
    grouped.background_provenance = dec.background_provenance;
    grouped.background_rows = dec.background_rows;
    grouped.model_id = dec.model_id;
    grouped.values.resize(dec.values.rows(), static_cast<Eigen::Index>(groups.size()));
    for (std::size_t g = 0; g < groups.size(); ++g) {
        std::uint32_t mask = 0;
        std::vector<std::string> labels;
        Eigen::VectorXd column = Eigen::VectorXd::Zero(dec.values.rows());
        for (int idx : groups[g]) {
            mask |= dec.term_masks[static_cast<std::size_t>(idx)];
            labels.push_back(dec.term_labels[static_cast<std::size_t>(idx)]);
            column += dec.values.col(idx);
        }
        grouped.term_masks.push_back(mask);
        grouped.term_labels.push_back(join(labels, "+"));
        grouped.values.col(static_cast<Eigen::Index>(g)) = column;
    }
    return grouped;
}

void write_coefficient_csv(const std::vector<CoefficientRow>& rows, std::ostream& out) {
    out << "term,beta_S,se,p_H0,ci_low,ci_high,sign,share,mean,alpha_level,robust\n";
    const auto cell = [](double x) { return std::isnan(x) ? std::string() : format_number(x); };
    for (const CoefficientRow& row : rows)
        out << row.term << ',' << cell(row.beta) << ',' << cell(row.se) << ',' << cell(row.p)
            << ',' << cell(row.ci_low) << ',' << cell(row.ci_high) << ',' << row.sign << ','
            << cell(row.share) << ',' << cell(row.mean) << ',' << row.stars << ','
            << (row.robust ? "x" : "") << '\n';
}

} // namespace shapreg
