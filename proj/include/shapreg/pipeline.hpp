#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "shapreg/inference.hpp"
#include "shapreg/models.hpp"
#include "shapreg/treatment.hpp"

namespace shapreg {

// How the reference rows for each fold's decomposition are chosen; always
// drawn from that fold's training portion.
struct BackgroundPolicy {
    enum class Kind { auto_pick, train_all, untreated, centroids };
    Kind kind = Kind::auto_pick;
    int centroids = 0; // used by Kind::centroids only

    std::string tag() const;
};

BackgroundPolicy background_policy_from_tag(const std::string& tag);

// Full description of one pipeline invocation. Every field maps to one JSON
// key and one command-line flag; the command line wins over the file.
struct RunConfig {
    std::string input = "simulate"; // dataset CSV path or the literal "simulate"
    std::string target = "y";
    std::string treatment;          // column name; empty means no treatment
    ModelKind model = ModelKind::kernel;
    ModelHyper hyper;
    std::vector<std::string> keep;  // feature names kept standalone; empty = all
    int h = 2;                      // interaction order of the regressed expansion
    BackgroundPolicy background;
    double alpha = 0.05;            // per-fold level; reported level is 2*alpha
    SeMode se_mode = SeMode::hc1;
    std::optional<double> xi;       // convergence rate; unset = fit a learning curve
    std::optional<int> folds;       // fold count; unset = rate-implied count
    int max_folds = 0;              // 0 = uncapped; capping widens intervals
    Eigen::Index max_eval_rows = 0; // 0 = decompose every held-out row
    std::uint64_t seed = 1;
    std::string outdir = "out";
    SimConfig sim;                       // used when input == "simulate"
    std::vector<Eigen::Index> sizes;     // sweep / curve sample sizes
    int reps = 3;                        // repetitions per size

    void validate() const;
};

RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);

// Per-fold scalars surfaced in the manifest.
struct FoldDiagnostics {
    int fold = 0;
    Eigen::Index train_rows = 0;
    Eigen::Index eval_rows = 0;
    Eigen::Index treated_rows = 0;
    double base_loss = 0.0;
    double phi00 = 0.0;
    double condition_number = 0.0;
    double ci_ratio = 1.0;
    bool degenerate = false;
    Eigen::Index retained = 0;
};

// Polynomial summary of one interaction term against its partner covariate.
struct CurveFit {
    std::string term;
    std::string covariate;
    Eigen::VectorXd coefficients; // ascending degree
};

// Everything one cross-fitted pass produces, before any file is written.
struct RunResult {
    double xi = 0.0;
    bool xi_auto = false;
    int folds_required = 0;
    int folds_used = 0;
    bool capped = false;
    std::vector<ShapleyRegressionFit> fits;
    VeinSummary vein;
    ShapleyDecomposition pooled;        // held-out rows of every fold, stacked
    AttributionStats shares;            // signed share per term over pooled rows
    AttributionStats means;             // signed mean per term over pooled rows
    std::vector<std::string> term_names; // feature-name form of the term labels
    std::vector<CoefficientRow> table;
    std::vector<FoldDiagnostics> diagnostics;
    std::optional<TreatmentFunction> tf; // pooled, labels in feature-name form
    double ate_value = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> ate_per_fold;    // NaN where a fold has no treated rows
    std::vector<CurveFit> curves;
};

// Trains, decomposes, regresses, and aggregates; no files touched.
RunResult run_crossfit(const Dataset& ds, const RunConfig& cfg);

// Plain CSV with the feature columns in order and the target appended.
void write_dataset_csv(const Dataset& ds, const std::string& target_name, std::ostream& out);

// Command bodies: write their bundle under cfg.outdir and return 0. Failures
// throw a stage-tagged Error whose stage doubles as the exit code.
int cmd_simulate(const RunConfig& cfg);
int cmd_run(const RunConfig& cfg);
int cmd_sweep(const RunConfig& cfg);
int cmd_curve(const RunConfig& cfg);

// Full command-line entry point: parse, merge config file and flags,
// dispatch, and translate exceptions into exit codes.
int run_cli(int argc, const char* const* argv);

} // namespace shapreg
