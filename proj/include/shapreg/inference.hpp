#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "shapreg/shapley.hpp"

namespace shapreg {

enum class SeMode { homoskedastic, hc1 };

std::string se_mode_tag(SeMode mode);
SeMode se_mode_from_tag(const std::string& tag);

// Upper-tail probability P(T_df > t) and quantile of the Student-t
// distribution; df may be fractional.
double student_tail_prob(double t, double df);
double student_quantile(double q, double df);

struct RegressionTerm {
    std::string label;
    double beta = 0.0;
    double se = 0.0;
    double t_stat = 0.0;
    double p_null = 0.5; // one-sided, against beta <= 0
    double ci_low = 0.0;
    double ci_high = 0.0;
    bool dropped = false; // removed from the design as collinear; estimates unset
};

// Least squares of (y - phi0) on the attribution columns with no free
// intercept. Columns whose addition pushes the design condition number
// past the collinearity limit are dropped and flagged rather than printed
// as estimates.
struct ShapleyRegressionFit {
    std::vector<RegressionTerm> terms;
    int fold = 0;
    double dof = 0.0; // rows minus retained columns
    SeMode se_mode = SeMode::hc1;
    double alpha = 0.05;
    double ci_ratio = 1.0;          // cumulative widening applied to the intervals
    double condition_number = 0.0;  // of the retained design
    bool degenerate = false;        // response identically equal to the baseline

    int retained() const;
};

inline constexpr double kCollinearityLimit = 1e10;

ShapleyRegressionFit shapley_regression(const ShapleyDecomposition& dec, const Eigen::VectorXd& y,
                                        SeMode se_mode = SeMode::hc1, double alpha = 0.05,
                                        int fold = 0);

// Per-term one-sided p-values of the fit (NaN for dropped terms).
std::vector<double> test_null(const ShapleyRegressionFit& fit);

// "***" below 0.01, "**" below 0.05, "*" below 0.1, otherwise empty.
std::string significance_stars(double p);

// A term is robust when its interval excludes zero and includes one.
bool robust_interval(double ci_low, double ci_high);
std::vector<bool> test_robust(const ShapleyRegressionFit& fit, double alpha);

// Signed per-term region summaries of a decomposition. Signs of
// single-feature terms come from a plain least-squares fit on the raw
// features ("+"/"-"); grouped and interaction terms carry "n.a." and a
// positive multiplier.
struct AttributionStats {
    std::vector<std::string> signs;
    Eigen::VectorXd values;        // one entry per term
    Eigen::Index used_rows = 0;
    Eigen::Index excluded_rows = 0; // rows with zero total attribution (shares only)
};

// Share: signed mean over the region of |phi_k| / sum_l |phi_l|; the
// absolute shares sum to one. `linear_beta` holds one raw-feature
// coefficient per underlying feature (no intercept entry).
AttributionStats ssc(const ShapleyDecomposition& dec, const Eigen::VectorXd& linear_beta,
                     const std::vector<Eigen::Index>& region);

// Mean: signed mean over the region of phi_k, unnormalized.
AttributionStats smc(const ShapleyDecomposition& dec, const Eigen::VectorXd& linear_beta,
                     const std::vector<Eigen::Index>& region);

// min(sqrt(share(1-share)/n), 1/sqrt(2n)): sampling error cap for a share.
double ssc_se_bound(double share, Eigen::Index region_size);

// ceil(m^(1-2 xi)) + 1 folds, snapping near-integer powers before the
// ceiling; 2 folds once xi reaches one half.
Eigen::Index required_folds(Eigen::Index m, double xi);

// Interval widening for cross-fits run with fewer folds than the rate
// demands: sqrt(df0/df_adj) times the t-quantile ratio at level alpha_v,
// where df_adj = m^(2 xi) - design width; 1 when df_adj is not positive.
double ci_adjustment_ratio(double df0, double df_adj, double alpha_v);
ShapleyRegressionFit adjust_ci(ShapleyRegressionFit fit, Eigen::Index m, double xi,
                               double alpha_v);

// Median-based aggregation across per-fold fits at twice-discounted
// confidence: point = median beta, interval = [median of lower bounds,
// next distinct value above the median of upper bounds].
struct VeinTerm {
    std::string label;
    double point = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double p_med = 0.5;
    bool robust = false;
    bool dropped = false; // no fold retained the term
};

struct VeinSummary {
    std::vector<VeinTerm> terms;
    double alpha_v = 0.1;
    int folds = 0;
};

VeinSummary vein_aggregate(const std::vector<ShapleyRegressionFit>& fits, double alpha);

// Sums member-term columns into one component per group; groups must
// partition the term set. Row sums (and thus efficiency) are unchanged.
ShapleyDecomposition group_components(const ShapleyDecomposition& dec,
                                      const std::vector<std::vector<int>>& groups);

// One row of the reported coefficient table; NaN fields print empty.
struct CoefficientRow {
    std::string term;
    double beta = 0.0;
    double se = 0.0;
    double p = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::string sign;
    double share = 0.0;
    double mean = 0.0;
    std::string stars;
    bool robust = false;
};

void write_coefficient_csv(const std::vector<CoefficientRow>& rows, std::ostream& out);

} // namespace shapreg
