#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "shapreg/shapley.hpp"

namespace shapreg {

// Per-row regrouping of attributions around one binary treatment column:
// a bare treatment effect, doubled pairwise treatment interactions, and a
// treatment-free remainder. The parts sum to the prediction by construction.
struct TreatmentFunction {
    double phi00 = 0.0;            // baseline over the (untreated) background
    Eigen::VectorXd bare_t;        // treatment effect net of interactions
    Eigen::MatrixXd interactions;  // rows x partner players, doubled pair terms
    std::vector<std::string> interaction_labels; // partner player per column
    Eigen::VectorXd phi_z;         // remainder without treatment content
    std::vector<bool> treated;
    std::vector<Eigen::Index> row_ids;
    std::string model_id;
    std::string background_id;
};

// Synthetic randomized experiment: t ~ Bernoulli(1/2), x1, x2 standard
// normal, y = b1 t + b2 t x1 + b3 x1 x2 + b4 + noise.
struct SimConfig {
    Eigen::Index m = 1000;
    std::array<double, 4> beta = {1.0, 1.0, 1.0, 0.0};
    double noise_ratio = 0.1; // noise sd as a fraction of the signal sd
    std::uint64_t seed = 0;
};

// Analytic signal sd times the ratio: noise_ratio * sqrt(b1^2/4 + b2^2/2 + b3^2).
double dgp_noise_sd(const SimConfig& cfg);

// Deterministic per seed; per row the draws are t, x1, x2, then the noise
// variate (drawn even at ratio zero, so the covariates match across ratios).
Dataset simulate_dgp(const SimConfig& cfg);

// Algebraic regrouping of an order-1 and an order-2 decomposition sharing
// rows, model, background, and universe: bare = phi_t - sum_k phi_kt,
// interaction_k = 2 phi_kt, remainder = sum_k (phi_k - phi_kt). The
// treatment feature must be a standalone player.
TreatmentFunction treatment_decompose(const ShapleyDecomposition& h1,
                                      const ShapleyDecomposition& h2, Eigen::Index t_feature,
                                      const std::vector<bool>& treated);

// Mean over treated rows of bare_t plus all interaction terms.
double ate(const TreatmentFunction& tf);

// Rows with a nonzero treatment column.
std::vector<bool> treated_mask(const Eigen::MatrixXd& rows, Eigen::Index t_feature);

// Runs the order-1 and order-2 decompositions over the kept features plus
// the treatment (remainder grouped) and regroups them.
TreatmentFunction treatment_function_eval(const TrainedModel& model, const Eigen::MatrixXd& rows,
                                          const std::vector<Eigen::Index>& row_ids,
                                          const BackgroundSet& background,
                                          Eigen::Index t_feature,
                                          const std::vector<Eigen::Index>& keep);

// Least-squares polynomial of a term value on a covariate over the treated
// rows; coefficients in ascending degree order.
Eigen::VectorXd interaction_curve(const Eigen::VectorXd& term_values,
                                  const Eigen::VectorXd& covariate_values,
                                  const std::vector<bool>& treated, int degree = 4);

// Wide export: row_id, treated, phi00, bare_t, inter_<label>..., phi_z.
void write_treatment_csv(const TreatmentFunction& tf, std::ostream& out);

} // namespace shapreg
