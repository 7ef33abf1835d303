#include "shapreg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "shapreg/errors.hpp"
#include "shapreg/text.hpp"

namespace shapreg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double median_of_copy(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

std::string csv_cell(double v) { return std::isnan(v) ? std::string() : format_number(v); }

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path);
    if (!out) fail(Stage::config, "cannot write " + path.string());
    return out;
}

fs::path prepare_outdir(const RunConfig& cfg) {
    if (cfg.outdir.empty()) fail(Stage::config, "output directory must not be empty");
    std::error_code ec;
    fs::create_directories(cfg.outdir, ec);
    if (ec) fail(Stage::config, "cannot create output directory " + cfg.outdir);
    return cfg.outdir;
}

void write_json_file(const fs::path& path, const json& j) {
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

// --- configuration -------------------------------------------------------

void check_known_keys(const json& j, const std::set<std::string>& known,
                      const std::string& where) {
    if (!j.is_object()) fail(Stage::config, where + " must be a JSON object");
    for (const auto& item : j.items())
        if (!known.contains(item.key()))
            fail(Stage::config, "unknown configuration key '" + where + item.key() + "'");
}

template <typename T>
T field(const json& j, const std::string& key, const T& fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(Stage::config, "configuration key '" + key + "' has the wrong type");
    }
}

} // namespace

std::string BackgroundPolicy::tag() const {
    switch (kind) {
    case Kind::auto_pick: return "auto";
    case Kind::train_all: return "train-all";
    case Kind::untreated: return "untreated";
    case Kind::centroids: return "centroids:" + std::to_string(centroids);
    }
    return "auto";
}

BackgroundPolicy background_policy_from_tag(const std::string& tag) {
    BackgroundPolicy policy;
    if (tag == "auto") {
        policy.kind = BackgroundPolicy::Kind::auto_pick;
    } else if (tag == "train-all") {
        policy.kind = BackgroundPolicy::Kind::train_all;
    } else if (tag == "untreated") {
        policy.kind = BackgroundPolicy::Kind::untreated;
    } else if (tag.starts_with("centroids:")) {
        policy.kind = BackgroundPolicy::Kind::centroids;
        try {
            policy.centroids = std::stoi(tag.substr(10));
        } catch (const std::exception&) {
            fail(Stage::config, "bad centroid count in background policy '" + tag + "'");
        }
        if (policy.centroids < 1) fail(Stage::config, "centroid count must be positive");
    } else {
        fail(Stage::config, "unknown background policy '" + tag + "'");
    }
    return policy;
}

void RunConfig::validate() const {
    if (input.empty()) fail(Stage::config, "input must be a CSV path or 'simulate'");
    if (target.empty()) fail(Stage::config, "target column name must not be empty");
    if (!(alpha > 0.0 && alpha < 0.5)) fail(Stage::config, "alpha must lie in (0, 0.5)");
    if (h < 1) fail(Stage::config, "interaction order must be at least 1");
    if (xi && !(*xi > 0.0)) fail(Stage::config, "convergence rate must be positive");
    if (folds && *folds < 2) fail(Stage::config, "fold count must be at least 2");
    if (max_folds < 0 || max_folds == 1) fail(Stage::config, "fold cap must be 0 or at least 2");
    if (max_eval_rows < 0) fail(Stage::config, "evaluation row cap must be nonnegative");
    if (reps < 1) fail(Stage::config, "repetition count must be at least 1");
    if (sim.m < 1) fail(Stage::config, "simulated sample size must be at least 1");
    if (sim.noise_ratio < 0.0) fail(Stage::config, "noise ratio must be nonnegative");
    for (std::size_t i = 1; i < sizes.size(); ++i)
        if (sizes[i] <= sizes[i - 1]) fail(Stage::config, "sizes must be strictly ascending");
    if (!sizes.empty() && sizes.front() < 1) fail(Stage::config, "sizes must be positive");
}

RunConfig config_from_json(const json& j) {
    static const std::set<std::string> top = {
        "input", "target", "treatment", "model",  "keep", "h",    "background",
        "alpha", "se",     "xi",        "folds",  "max_folds", "max_eval_rows",
        "seed",  "outdir", "sim",       "sizes",  "reps"};
    static const std::set<std::string> model_keys = {"kind",   "trees",  "max_depth",
                                                     "min_leaf", "feature_frac", "gamma",
                                                     "lambda", "hidden", "epochs", "step"};
    static const std::set<std::string> sim_keys = {"m", "beta", "noise_ratio"};
    check_known_keys(j, top, "");

    RunConfig cfg;
    cfg.input = field(j, "input", cfg.input);
    cfg.target = field(j, "target", cfg.target);
    cfg.treatment = field(j, "treatment", cfg.treatment);
    cfg.keep = field(j, "keep", cfg.keep);
    cfg.h = field(j, "h", cfg.h);
    cfg.background = background_policy_from_tag(field<std::string>(j, "background", "auto"));
    cfg.alpha = field(j, "alpha", cfg.alpha);
    cfg.se_mode = se_mode_from_tag(field<std::string>(j, "se", "hc1"));
    cfg.max_folds = field(j, "max_folds", cfg.max_folds);
    cfg.max_eval_rows = static_cast<Eigen::Index>(
        field<std::int64_t>(j, "max_eval_rows", cfg.max_eval_rows));
    cfg.seed = field(j, "seed", cfg.seed);
    cfg.outdir = field(j, "outdir", cfg.outdir);
    cfg.reps = field(j, "reps", cfg.reps);

    if (j.contains("xi") && !j.at("xi").is_null()) {
        if (j.at("xi").is_string()) {
            if (j.at("xi").get<std::string>() != "auto")
                fail(Stage::config, "xi must be a number or 'auto'");
        } else {
            cfg.xi = field(j, "xi", 0.0);
        }
    }
    if (j.contains("folds") && !j.at("folds").is_null()) {
        if (j.at("folds").is_string()) {
            if (j.at("folds").get<std::string>() != "auto")
                fail(Stage::config, "folds must be an integer or 'auto'");
        } else {
            cfg.folds = field(j, "folds", 0);
        }
    }

    if (j.contains("model")) {
        const json& mj = j.at("model");
        check_known_keys(mj, model_keys, "model.");
        cfg.model = kind_from_tag(field<std::string>(mj, "kind", kind_tag(cfg.model)));
        cfg.hyper.trees = field(mj, "trees", cfg.hyper.trees);
        cfg.hyper.max_depth = field(mj, "max_depth", cfg.hyper.max_depth);
        cfg.hyper.min_leaf = field(mj, "min_leaf", cfg.hyper.min_leaf);
        cfg.hyper.feature_frac = field(mj, "feature_frac", cfg.hyper.feature_frac);
        cfg.hyper.gamma = field(mj, "gamma", cfg.hyper.gamma);
        cfg.hyper.lambda = field(mj, "lambda", cfg.hyper.lambda);
        cfg.hyper.hidden = field(mj, "hidden", cfg.hyper.hidden);
        cfg.hyper.epochs = field(mj, "epochs", cfg.hyper.epochs);
        cfg.hyper.step = field(mj, "step", cfg.hyper.step);
    }
    if (j.contains("sim")) {
        const json& sj = j.at("sim");
        check_known_keys(sj, sim_keys, "sim.");
        cfg.sim.m = static_cast<Eigen::Index>(field<std::int64_t>(sj, "m", cfg.sim.m));
        const std::vector<double> beta =
            field(sj, "beta", std::vector<double>(cfg.sim.beta.begin(), cfg.sim.beta.end()));
        if (beta.size() != 4) fail(Stage::config, "sim.beta needs exactly 4 entries");
        std::copy(beta.begin(), beta.end(), cfg.sim.beta.begin());
        cfg.sim.noise_ratio = field(sj, "noise_ratio", cfg.sim.noise_ratio);
    }
    if (j.contains("sizes")) {
        const std::vector<std::int64_t> raw = field(j, "sizes", std::vector<std::int64_t>{});
        cfg.sizes.assign(raw.begin(), raw.end());
    }
    cfg.validate();
    return cfg;
}

json config_to_json(const RunConfig& cfg) {
    json j;
    j["input"] = cfg.input;
    j["target"] = cfg.target;
    j["treatment"] = cfg.treatment;
    j["keep"] = cfg.keep;
    j["h"] = cfg.h;
    j["background"] = cfg.background.tag();
    j["alpha"] = cfg.alpha;
    j["se"] = se_mode_tag(cfg.se_mode);
    j["xi"] = cfg.xi ? json(*cfg.xi) : json("auto");
    j["folds"] = cfg.folds ? json(*cfg.folds) : json("auto");
    j["max_folds"] = cfg.max_folds;
    j["max_eval_rows"] = static_cast<std::int64_t>(cfg.max_eval_rows);
    j["seed"] = cfg.seed;
    j["outdir"] = cfg.outdir;
    j["model"] = {{"kind", kind_tag(cfg.model)},
                  {"trees", cfg.hyper.trees},
                  {"max_depth", cfg.hyper.max_depth},
                  {"min_leaf", cfg.hyper.min_leaf},
                  {"feature_frac", cfg.hyper.feature_frac},
                  {"gamma", cfg.hyper.gamma},
                  {"lambda", cfg.hyper.lambda},
                  {"hidden", cfg.hyper.hidden},
                  {"epochs", cfg.hyper.epochs},
                  {"step", cfg.hyper.step}};
    j["sim"] = {{"m", static_cast<std::int64_t>(cfg.sim.m)},
                {"beta", std::vector<double>(cfg.sim.beta.begin(), cfg.sim.beta.end())},
                {"noise_ratio", cfg.sim.noise_ratio}};
    j["sizes"] = std::vector<std::int64_t>(cfg.sizes.begin(), cfg.sizes.end());
    j["reps"] = cfg.reps;
    return j;
}

// --- cross-fitted core ----------------------------------------------------

namespace {

Dataset subset_dataset(const Dataset& ds, const std::vector<Eigen::Index>& rows) {
    Dataset out;
    out.names = ds.names;
    out.treatment_index = ds.treatment_index;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), ds.cols());
    out.target.resize(static_cast<Eigen::Index>(rows.size()));
    for (Eigen::Index i = 0; i < out.features.rows(); ++i) {
        out.features.row(i) = ds.features.row(rows[static_cast<std::size_t>(i)]);
        out.target(i) = ds.target(rows[static_cast<std::size_t>(i)]);
    }
    return out;
}

std::string player_name(const CoalitionUniverse& universe, std::size_t player,
                        const std::vector<std::string>& names) {
    const auto& members = universe.players[player];
    if (members.size() == 1) return names[static_cast<std::size_t>(members[0])];
    return "others";
}

std::string term_display(const ShapleyDecomposition& dec, std::size_t term,
                         const std::vector<std::string>& names) {
    std::string out;
    for (std::size_t p = 0; p < dec.universe.players.size(); ++p) {
        if (!(dec.term_masks[term] >> p & 1u)) continue;
        if (!out.empty()) out += ':';
        out += player_name(dec.universe, p, names);
    }
    return out;
}

// Sub-sample sizes for the automatic rate estimate: five geometric points
// between m/16 and m/2.
std::vector<Eigen::Index> rate_sizes(const Dataset& ds) {
    const Eigen::Index m = ds.rows();
    if (m < 64) fail(Stage::config, "automatic rate estimation needs at least 64 rows");
    const double lo = std::max<double>(3.0 * static_cast<double>(ds.cols() + 2),
                                       static_cast<double>(m) / 16.0);
    const double hi = static_cast<double>(m) / 2.0;
    if (!(lo < hi)) fail(Stage::config, "automatic rate estimation needs at least 64 rows");
    std::vector<Eigen::Index> sizes;
    for (int i = 0; i < 5; ++i) {
        const auto s = static_cast<Eigen::Index>(
            std::llround(lo * std::pow(hi / lo, static_cast<double>(i) / 4.0)));
        if (sizes.empty() || s > sizes.back()) sizes.push_back(s);
    }
    return sizes;
}

double auto_rate(const Dataset& ds, const RunConfig& cfg) {
    const std::vector<Eigen::Index> sizes = rate_sizes(ds);
    const Eigen::Index tail = std::min<Eigen::Index>(1000, ds.rows() - sizes.back());
    const LearningCurve lc =
        learning_curve(cfg.model, cfg.hyper, ds, sizes, 3, cfg.seed, tail);
    if (!(lc.xi > 0.0))
        fail(Stage::training,
             "learning-curve rate estimate is not positive; pass the rate explicitly");
    return lc.xi;
}

BackgroundPolicy::Kind resolved_background_kind(const RunConfig& cfg, bool has_treatment) {
    if (cfg.background.kind != BackgroundPolicy::Kind::auto_pick) return cfg.background.kind;
    return has_treatment ? BackgroundPolicy::Kind::untreated : BackgroundPolicy::Kind::train_all;
}

BackgroundSet fold_background(const Dataset& ds, const Dataset& train,
                              const std::vector<Eigen::Index>& train_rows, const RunConfig& cfg,
                              int fold) {
    const bool has_t = ds.treatment_index.has_value();
    switch (resolved_background_kind(cfg, has_t)) {
    case BackgroundPolicy::Kind::train_all:
        return train_all_background(train.features);
    case BackgroundPolicy::Kind::untreated:
        if (!has_t) fail(Stage::config, "untreated background needs a treatment column");
        return untreated_background(ds, train_rows);
    case BackgroundPolicy::Kind::centroids: {
        Eigen::MatrixXd source;
        if (has_t) {
            // Summarize only the untreated training rows so the references
            // keep the treatment column at zero.
            const Eigen::Index t = *ds.treatment_index;
            std::vector<Eigen::Index> rows;
            for (Eigen::Index r = 0; r < train.features.rows(); ++r)
                if (train.features(r, t) == 0.0) rows.push_back(r);
            source.resize(static_cast<Eigen::Index>(rows.size()), train.features.cols());
            for (Eigen::Index i = 0; i < source.rows(); ++i)
                source.row(i) = train.features.row(rows[static_cast<std::size_t>(i)]);
        } else {
            source = train.features;
        }
        return kmeans_background(source, cfg.background.centroids,
                                 cfg.seed + 11ull * static_cast<std::uint64_t>(fold));
    }
    case BackgroundPolicy::Kind::auto_pick: break;
    }
    fail(Stage::config, "unresolved background policy");
}

} // namespace

RunResult run_crossfit(const Dataset& ds, const RunConfig& cfg) {
    cfg.validate();
    ds.validate();
    const Eigen::Index m = ds.rows();
    const Eigen::Index n = ds.cols();
    const bool has_t = ds.treatment_index.has_value();
    const Eigen::Index t_idx = has_t ? *ds.treatment_index : -1;

    CoalitionUniverse universe;
    if (cfg.keep.empty()) {
        universe = full_universe(n);
    } else {
        std::set<Eigen::Index> kept;
        for (const auto& name : cfg.keep) kept.insert(ds.column_index(name));
        if (has_t) kept.insert(t_idx);
        universe = group_others(n, std::vector<Eigen::Index>(kept.begin(), kept.end()));
    }

    RunResult out;
    out.xi_auto = !cfg.xi.has_value();
    out.xi = cfg.xi ? *cfg.xi : auto_rate(ds, cfg);
    out.folds_required = static_cast<int>(required_folds(m, out.xi));
    int folds = cfg.folds ? *cfg.folds : out.folds_required;
    if (cfg.max_folds > 0 && folds > cfg.max_folds) {
        std::cerr << "warning: fold count " << folds << " capped at " << cfg.max_folds
                  << "; confidence intervals are rescaled through the effective-degrees-of-"
                     "freedom ratio\n";
        folds = cfg.max_folds;
        out.capped = true;
    }
    if (folds > m) fail(Stage::config, "more folds than rows");
    out.folds_used = folds;
    const bool adjust = folds < out.folds_required;
    const double alpha_v = 2.0 * cfg.alpha;

    const FoldPlan plan = make_folds(m, folds, cfg.seed);

    std::vector<ShapleyDecomposition> decs;
    std::vector<TreatmentFunction> tfs;
    for (int f = 1; f <= folds; ++f) {
        const std::vector<Eigen::Index> train_rows = plan.rows_not_in_fold(f);
        std::vector<Eigen::Index> eval_rows = plan.rows_in_fold(f);
        if (cfg.max_eval_rows > 0 &&
            static_cast<Eigen::Index>(eval_rows.size()) > cfg.max_eval_rows)
            eval_rows.resize(static_cast<std::size_t>(cfg.max_eval_rows));

        const Dataset train = subset_dataset(ds, train_rows);
        const TrainedModel model =
            fit_model(cfg.model, train, cfg.hyper, cfg.seed + 97ull * static_cast<std::uint64_t>(f));
        const BackgroundSet bg = fold_background(ds, train, train_rows, cfg, f);

        Eigen::MatrixXd eval_feats(static_cast<Eigen::Index>(eval_rows.size()), n);
        Eigen::VectorXd eval_y(static_cast<Eigen::Index>(eval_rows.size()));
        for (Eigen::Index i = 0; i < eval_feats.rows(); ++i) {
            eval_feats.row(i) = ds.features.row(eval_rows[static_cast<std::size_t>(i)]);
            eval_y(i) = ds.target(eval_rows[static_cast<std::size_t>(i)]);
        }

        const ShapleyDecomposition dec =
            cfg.h == 1 ? shapley_values(model, eval_feats, eval_rows, bg, universe)
                       : shapley_taylor(model, eval_feats, eval_rows, bg, universe, cfg.h);

        ShapleyRegressionFit fit = shapley_regression(dec, eval_y, cfg.se_mode, cfg.alpha, f);
        if (adjust) fit = adjust_ci(fit, m, out.xi, alpha_v);

        FoldDiagnostics diag;
        diag.fold = f;
        diag.train_rows = static_cast<Eigen::Index>(train_rows.size());
        diag.eval_rows = static_cast<Eigen::Index>(eval_rows.size());
        diag.base_loss = model.base_loss;
        diag.phi00 = dec.phi0;
        diag.condition_number = fit.condition_number;
        diag.ci_ratio = fit.ci_ratio;
        diag.degenerate = fit.degenerate;
        diag.retained = fit.retained();

        if (has_t) {
            std::optional<ShapleyDecomposition> extra1, extra2;
            const ShapleyDecomposition* h1 = &dec;
            const ShapleyDecomposition* h2 = &dec;
            if (cfg.h != 1) {
                extra1 = shapley_values(model, eval_feats, eval_rows, bg, universe);
                h1 = &*extra1;
            }
            if (cfg.h != 2) {
                extra2 = shapley_taylor(model, eval_feats, eval_rows, bg, universe, 2);
                h2 = &*extra2;
            }
            const std::vector<bool> mask = treated_mask(eval_feats, t_idx);
            TreatmentFunction tf = treatment_decompose(*h1, *h2, t_idx, mask);
            const auto treated_count =
                std::count(mask.begin(), mask.end(), true);
            diag.treated_rows = treated_count;
            out.ate_per_fold.push_back(treated_count > 0 ? ate(tf) : kNan);
            tfs.push_back(std::move(tf));
        }

        out.diagnostics.push_back(diag);
        out.fits.push_back(std::move(fit));
        decs.push_back(std::move(dec));
    }

    // Stack every fold's held-out rows into one decomposition for the pooled
    // share and mean summaries and for the row-level export.
    out.pooled = decs.front();
    Eigen::Index total = 0;
    for (const auto& dec : decs) total += dec.values.rows();
    out.pooled.values.resize(total, decs.front().values.cols());
    out.pooled.row_ids.clear();
    out.pooled.model_id = "cross-fit";
    out.pooled.background_id = "cross-fit";
    {
        Eigen::Index at = 0;
        std::vector<double> baselines;
        for (const auto& dec : decs) {
            out.pooled.values.middleRows(at, dec.values.rows()) = dec.values;
            out.pooled.row_ids.insert(out.pooled.row_ids.end(), dec.row_ids.begin(),
                                      dec.row_ids.end());
            baselines.push_back(dec.phi0);
            at += dec.values.rows();
        }
        out.pooled.phi0 = median_of_copy(baselines);
    }

    for (std::size_t term = 0; term < out.pooled.term_labels.size(); ++term)
        out.term_names.push_back(term_display(out.pooled, term, ds.names));

    out.vein = vein_aggregate(out.fits, cfg.alpha);

    const TrainedModel ols = fit_linear(ds);
    const Eigen::VectorXd slopes = std::get<LinearParams>(ols.params).beta.tail(n);
    std::vector<Eigen::Index> region(static_cast<std::size_t>(total));
    std::iota(region.begin(), region.end(), Eigen::Index{0});
    out.shares = ssc(out.pooled, slopes, region);
    out.means = smc(out.pooled, slopes, region);

    for (std::size_t i = 0; i < out.vein.terms.size(); ++i) {
        const VeinTerm& vt = out.vein.terms[i];
        CoefficientRow row;
        row.term = out.term_names[i];
        row.beta = vt.point;
        row.se = kNan; // the interval carries the fold-aggregated uncertainty
        row.p = vt.p_med;
        row.ci_low = vt.ci_low;
        row.ci_high = vt.ci_high;
        row.sign = out.shares.signs[i];
        row.share = out.shares.values(static_cast<Eigen::Index>(i));
        row.mean = out.means.values(static_cast<Eigen::Index>(i));
        row.stars = significance_stars(vt.p_med);
        row.robust = vt.robust;
        out.table.push_back(std::move(row));
    }

    if (has_t) {
        TreatmentFunction pooled;
        pooled.phi00 = out.pooled.phi0;
        pooled.model_id = "cross-fit";
        pooled.background_id = "cross-fit";
        pooled.bare_t.resize(total);
        pooled.phi_z.resize(total);
        pooled.interactions.resize(total, tfs.front().interactions.cols());
        Eigen::Index at = 0;
        for (const auto& tf : tfs) {
            pooled.bare_t.segment(at, tf.bare_t.size()) = tf.bare_t;
            pooled.phi_z.segment(at, tf.phi_z.size()) = tf.phi_z;
            pooled.interactions.middleRows(at, tf.interactions.rows()) = tf.interactions;
            pooled.treated.insert(pooled.treated.end(), tf.treated.begin(), tf.treated.end());
            pooled.row_ids.insert(pooled.row_ids.end(), tf.row_ids.begin(), tf.row_ids.end());
            at += tf.bare_t.size();
        }

        // Swap the numeric player labels for feature names, and remember each
        // interaction column's underlying covariate for the curve fits.
        std::vector<Eigen::Index> partner_features;
        int t_player = -1;
        for (std::size_t p = 0; p < universe.players.size(); ++p)
            if (universe.players[p].size() == 1 && universe.players[p][0] == t_idx)
                t_player = static_cast<int>(p);
        for (std::size_t p = 0; p < universe.players.size(); ++p) {
            if (static_cast<int>(p) == t_player) continue;
            pooled.interaction_labels.push_back(player_name(universe, p, ds.names));
            partner_features.push_back(universe.players[p].size() == 1 ? universe.players[p][0]
                                                                       : Eigen::Index{-1});
        }

        const std::string t_name = ds.names[static_cast<std::size_t>(t_idx)];
        for (Eigen::Index c = 0; c < pooled.interactions.cols(); ++c) {
            const Eigen::Index feature = partner_features[static_cast<std::size_t>(c)];
            if (feature < 0) continue; // grouped remainder has no single covariate
            Eigen::VectorXd covariate(total);
            for (Eigen::Index r = 0; r < total; ++r)
                covariate(r) = ds.features(pooled.row_ids[static_cast<std::size_t>(r)], feature);
            const auto treated_count =
                std::count(pooled.treated.begin(), pooled.treated.end(), true);
            if (treated_count < 6) continue; // under the degree-4 fit threshold
            CurveFit curve;
            curve.term = t_name + ":" + pooled.interaction_labels[static_cast<std::size_t>(c)];
            curve.covariate = pooled.interaction_labels[static_cast<std::size_t>(c)];
            curve.coefficients =
                interaction_curve(pooled.interactions.col(c), covariate, pooled.treated);
            out.curves.push_back(std::move(curve));
        }

        const bool any_treated =
            std::find(pooled.treated.begin(), pooled.treated.end(), true) != pooled.treated.end();
        out.ate_value = any_treated ? ate(pooled) : kNan;
        out.tf = std::move(pooled);
    }

    return out;
}

// --- dataset and command plumbing ------------------------------------------

void write_dataset_csv(const Dataset& ds, const std::string& target_name, std::ostream& out) {
    for (const auto& name : ds.names) out << name << ',';
    out << target_name << '\n';
    for (Eigen::Index r = 0; r < ds.rows(); ++r) {
        for (Eigen::Index c = 0; c < ds.cols(); ++c) out << format_number(ds.features(r, c)) << ',';
        out << format_number(ds.target(r)) << '\n';
    }
}

namespace {

Dataset load_input(const RunConfig& cfg) {
    if (cfg.input == "simulate") {
        SimConfig sim = cfg.sim;
        sim.seed = cfg.seed;
        return simulate_dgp(sim);
    }
    const std::optional<std::string> treatment =
        cfg.treatment.empty() ? std::nullopt : std::optional<std::string>(cfg.treatment);
    return load_csv(cfg.input, cfg.target, treatment);
}

void write_folds_csv(const RunResult& res, std::ostream& out) {
    out << "fold,term,beta_S,se,p_H0,ci_low,ci_high,dropped\n";
    for (const auto& fit : res.fits) {
        for (std::size_t i = 0; i < fit.terms.size(); ++i) {
            const RegressionTerm& t = fit.terms[i];
            out << fit.fold << ',' << res.term_names[i] << ',' << csv_cell(t.beta) << ','
                << csv_cell(t.se) << ',' << csv_cell(t.p_null) << ',' << csv_cell(t.ci_low) << ','
                << csv_cell(t.ci_high) << ',' << (t.dropped ? 1 : 0) << '\n';
        }
    }
}

void write_curve_points_csv(const RunResult& res, const Dataset& ds, std::ostream& out) {
    const TreatmentFunction& tf = *res.tf;
    const std::string t_name = ds.names[static_cast<std::size_t>(*ds.treatment_index)];
    out << "term,row_id,covariate,value,treated\n";
    for (Eigen::Index c = 0; c < tf.interactions.cols(); ++c) {
        const std::string& partner = tf.interaction_labels[static_cast<std::size_t>(c)];
        if (partner == "others") continue;
        const Eigen::Index feature = ds.column_index(partner);
        for (Eigen::Index r = 0; r < tf.interactions.rows(); ++r) {
            const Eigen::Index row_id = tf.row_ids[static_cast<std::size_t>(r)];
            out << t_name << ':' << partner << ',' << row_id << ','
                << format_number(ds.features(row_id, feature)) << ','
                << format_number(tf.interactions(r, c)) << ','
                << (tf.treated[static_cast<std::size_t>(r)] ? 1 : 0) << '\n';
        }
    }
}

json diagnostics_json(const RunResult& res) {
    json out = json::array();
    for (const auto& d : res.diagnostics) {
        out.push_back({{"fold", d.fold},
                       {"train_rows", static_cast<std::int64_t>(d.train_rows)},
                       {"eval_rows", static_cast<std::int64_t>(d.eval_rows)},
                       {"treated_rows", static_cast<std::int64_t>(d.treated_rows)},
                       {"base_loss", num_or_null(d.base_loss)},
                       {"phi00", num_or_null(d.phi00)},
                       {"condition_number", num_or_null(d.condition_number)},
                       {"ci_ratio", num_or_null(d.ci_ratio)},
                       {"degenerate", d.degenerate},
                       {"retained", static_cast<std::int64_t>(d.retained)}});
    }
    return out;
}

json run_manifest(const RunConfig& cfg, const Dataset& ds, const RunResult& res) {
    json manifest;
    manifest["command"] = "run";
    manifest["rows"] = static_cast<std::int64_t>(ds.rows());
    manifest["columns"] = static_cast<std::int64_t>(ds.cols());
    manifest["model"] = kind_tag(cfg.model);
    manifest["h"] = cfg.h;
    manifest["background"] =
        cfg.background.kind == BackgroundPolicy::Kind::auto_pick
            ? (ds.treatment_index ? std::string("untreated") : std::string("train-all"))
            : cfg.background.tag();
    manifest["alpha"] = cfg.alpha;
    manifest["alpha_v"] = res.vein.alpha_v;
    manifest["seed"] = cfg.seed;
    manifest["xi"] = {{"value", res.xi}, {"source", res.xi_auto ? "auto" : "config"}};
    manifest["folds"] = {{"used", res.folds_used},
                         {"required", res.folds_required},
                         {"capped", res.capped}};
    std::vector<double> baselines;
    json phi_folds = json::array();
    json ratio_folds = json::array();
    for (const auto& d : res.diagnostics) {
        baselines.push_back(d.phi00);
        phi_folds.push_back(num_or_null(d.phi00));
        ratio_folds.push_back(num_or_null(d.ci_ratio));
    }
    manifest["phi00"] = {{"per_fold", phi_folds}, {"median", num_or_null(median_of_copy(baselines))}};
    manifest["ci_ratio"] = ratio_folds;
    manifest["terms"] = res.term_names;
    if (res.tf) {
        json per_fold = json::array();
        for (double a : res.ate_per_fold) per_fold.push_back(num_or_null(a));
        manifest["ate"] = {{"value", num_or_null(res.ate_value)}, {"per_fold", per_fold}};
        json curves = json::array();
        for (const auto& curve : res.curves) {
            std::vector<double> coef(curve.coefficients.begin(), curve.coefficients.end());
            curves.push_back(
                {{"term", curve.term}, {"covariate", curve.covariate}, {"coefficients", coef}});
        }
        manifest["curves"] = curves;
    }
    manifest["diagnostics"] = diagnostics_json(res);
    return manifest;
}

} // namespace

int cmd_simulate(const RunConfig& cfg) {
    const fs::path dir = prepare_outdir(cfg);
    SimConfig sim = cfg.sim;
    sim.seed = cfg.seed;
    const Dataset ds = simulate_dgp(sim);

    {
        auto out = open_out(dir / "dataset.csv");
        write_dataset_csv(ds, cfg.target, out);
    }
    json truth;
    truth["command"] = "simulate";
    truth["m"] = static_cast<std::int64_t>(sim.m);
    truth["beta"] = std::vector<double>(sim.beta.begin(), sim.beta.end());
    truth["noise_ratio"] = sim.noise_ratio;
    truth["noise_sd"] = dgp_noise_sd(sim);
    truth["seed"] = sim.seed;
    truth["names"] = ds.names;
    truth["target"] = cfg.target;
    truth["treatment"] = ds.names.front();
    write_json_file(dir / "truth.json", truth);
    write_json_file(dir / "config_echo.json", config_to_json(cfg));
    std::cout << "simulate: wrote " << (dir / "dataset.csv").string() << '\n';
    return 0;
}

int cmd_run(const RunConfig& cfg) {
    const fs::path dir = prepare_outdir(cfg);
    const Dataset ds = load_input(cfg);
    const RunResult res = run_crossfit(ds, cfg);

    write_json_file(dir / "config_echo.json", config_to_json(cfg));
    write_json_file(dir / "manifest.json", run_manifest(cfg, ds, res));
    {
        auto out = open_out(dir / "coefficients.csv");
        write_coefficient_csv(res.table, out);
    }
    {
        auto out = open_out(dir / "folds.csv");
        write_folds_csv(res, out);
    }
    {
        auto out = open_out(dir / "decomposition.csv");
        write_decomposition_csv(res.pooled, out);
    }
    write_json_file(dir / "decomposition_meta.json", decomposition_meta(res.pooled));
    if (res.tf) {
        auto tf_out = open_out(dir / "tf.csv");
        write_treatment_csv(*res.tf, tf_out);
        auto curve_out = open_out(dir / "curve_points.csv");
        write_curve_points_csv(res, ds, curve_out);
    }
    std::cout << "run: wrote " << (dir / "coefficients.csv").string() << '\n';
    return 0;
}

int cmd_sweep(const RunConfig& cfg) {
    if (cfg.sizes.empty()) fail(Stage::config, "sweep needs a strictly ascending sizes list");
    const fs::path dir = prepare_outdir(cfg);

    const bool simulated = cfg.input == "simulate";
    Dataset base;
    if (!simulated) {
        base = load_input(cfg);
        if (cfg.sizes.back() > base.rows())
            fail(Stage::config, "sweep size exceeds the dataset row count");
    }

    double xi;
    if (cfg.xi) {
        xi = *cfg.xi;
    } else if (simulated) {
        SimConfig sim = cfg.sim;
        sim.m = cfg.sizes.back();
        sim.seed = cfg.seed;
        xi = auto_rate(simulate_dgp(sim), cfg);
    } else {
        xi = auto_rate(base, cfg);
    }

    auto sweep_out = open_out(dir / "sweep.csv");
    sweep_out << "m,rep,term,beta_S,ci_low,ci_high,share,p_H0,robust\n";
    json cells = json::array();
    for (std::size_t si = 0; si < cfg.sizes.size(); ++si) {
        for (int rep = 0; rep < cfg.reps; ++rep) {
            const std::uint64_t cell_seed =
                cfg.seed + 7919ull * (si + 1) + 131ull * static_cast<std::uint64_t>(rep);
            Dataset cell;
            if (simulated) {
                SimConfig sim = cfg.sim;
                sim.m = cfg.sizes[si];
                sim.seed = cell_seed;
                cell = simulate_dgp(sim);
            } else {
                std::vector<Eigen::Index> order(static_cast<std::size_t>(base.rows()));
                std::iota(order.begin(), order.end(), Eigen::Index{0});
                std::mt19937_64 engine(cell_seed);
                std::shuffle(order.begin(), order.end(), engine);
                order.resize(static_cast<std::size_t>(cfg.sizes[si]));
                cell = subset_dataset(base, order);
            }
            RunConfig cell_cfg = cfg;
            cell_cfg.xi = xi;
            cell_cfg.seed = cell_seed;
            const RunResult res = run_crossfit(cell, cell_cfg);
            for (std::size_t i = 0; i < res.vein.terms.size(); ++i) {
                const VeinTerm& vt = res.vein.terms[i];
                sweep_out << cfg.sizes[si] << ',' << rep << ',' << res.term_names[i] << ','
                          << csv_cell(vt.point) << ',' << csv_cell(vt.ci_low) << ','
                          << csv_cell(vt.ci_high) << ','
                          << csv_cell(res.shares.values(static_cast<Eigen::Index>(i))) << ','
                          << csv_cell(vt.p_med) << ',' << (vt.robust ? 1 : 0) << '\n';
            }
            cells.push_back({{"m", static_cast<std::int64_t>(cfg.sizes[si])},
                             {"rep", rep},
                             {"seed", cell_seed},
                             {"folds_used", res.folds_used},
                             {"folds_required", res.folds_required}});
        }
    }

    json manifest;
    manifest["command"] = "sweep";
    manifest["sizes"] = std::vector<std::int64_t>(cfg.sizes.begin(), cfg.sizes.end());
    manifest["reps"] = cfg.reps;
    manifest["model"] = kind_tag(cfg.model);
    manifest["alpha"] = cfg.alpha;
    manifest["alpha_v"] = 2.0 * cfg.alpha;
    manifest["seed"] = cfg.seed;
    manifest["xi"] = {{"value", xi}, {"source", cfg.xi ? "config" : "auto"}};
    manifest["cells"] = cells;
    write_json_file(dir / "manifest.json", manifest);
    write_json_file(dir / "config_echo.json", config_to_json(cfg));
    std::cout << "sweep: wrote " << (dir / "sweep.csv").string() << '\n';
    return 0;
}

int cmd_curve(const RunConfig& cfg) {
    const fs::path dir = prepare_outdir(cfg);
    const Dataset ds = load_input(cfg);
    const std::vector<Eigen::Index> sizes = cfg.sizes.empty() ? rate_sizes(ds) : cfg.sizes;
    if (sizes.back() >= ds.rows())
        fail(Stage::config, "curve sizes must leave held-out rows for scoring");
    const Eigen::Index tail = std::min<Eigen::Index>(1000, ds.rows() - sizes.back());
    const LearningCurve lc =
        learning_curve(cfg.model, cfg.hyper, ds, sizes, cfg.reps, cfg.seed, tail);

    {
        auto out = open_out(dir / "learning_curve.csv");
        out << "size,loss\n";
        for (std::size_t i = 0; i < lc.sizes.size(); ++i)
            out << lc.sizes[i] << ',' << format_number(lc.losses[i]) << '\n';
    }
    json manifest;
    manifest["command"] = "curve";
    manifest["model"] = kind_tag(cfg.model);
    manifest["sizes"] = std::vector<std::int64_t>(lc.sizes.begin(), lc.sizes.end());
    manifest["reps"] = cfg.reps;
    manifest["seed"] = cfg.seed;
    manifest["xi"] = lc.xi;
    manifest["fit_begin"] = lc.fit_begin;
    manifest["fit_end"] = lc.fit_end;
    write_json_file(dir / "manifest.json", manifest);
    write_json_file(dir / "config_echo.json", config_to_json(cfg));
    std::cout << "curve: wrote " << (dir / "learning_curve.csv").string() << '\n';
    return 0;
}

// --- command line -----------------------------------------------------------

namespace {

struct CliStaging {
    std::string config_path, input, target, treatment, model, background, se, xi, folds;
    std::string keep, beta, hidden, sizes, outdir;
    int h = 0, max_folds = 0, reps = 0, trees = 0, max_depth = 0, min_leaf = 0, epochs = 0;
    std::int64_t m = 0, max_eval_rows = 0;
    double alpha = 0.0, noise_ratio = 0.0, feature_frac = 0.0, gamma = 0.0, lambda = 0.0,
           step = 0.0;
    std::uint64_t seed = 0;
};

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream stream(text);
    std::string part;
    while (std::getline(stream, part, ','))
        if (!part.empty()) parts.push_back(part);
    return parts;
}

template <typename T>
std::vector<T> parse_number_list(const std::string& text, const std::string& flag) {
    std::vector<T> values;
    for (const auto& part : split_list(text)) {
        try {
            if constexpr (std::is_integral_v<T>)
                values.push_back(static_cast<T>(std::stoll(part)));
            else
                values.push_back(static_cast<T>(std::stod(part)));
        } catch (const std::exception&) {
            fail(Stage::config, "bad number '" + part + "' in " + flag);
        }
    }
    return values;
}

void add_options(CLI::App* sub, CliStaging& s) {
    sub->add_option("--config", s.config_path, "JSON config file; flags override it");
    sub->add_option("--input", s.input, "dataset CSV path or 'simulate'");
    sub->add_option("--target", s.target, "target column name");
    sub->add_option("--treatment", s.treatment, "binary treatment column name");
    sub->add_option("--model", s.model, "linear | forest | kernel | network");
    sub->add_option("--keep", s.keep, "comma-separated feature names kept standalone");
    sub->add_option("--order", s.h, "interaction order of the regressed expansion");
    sub->add_option("--background", s.background,
                    "auto | train-all | untreated | centroids:<count>");
    sub->add_option("--alpha", s.alpha, "per-fold test level (reported level is twice this)");
    sub->add_option("--se", s.se, "hc1 | homoskedastic");
    sub->add_option("--xi", s.xi, "convergence rate or 'auto'");
    sub->add_option("--folds", s.folds, "fold count or 'auto'");
    sub->add_option("--max-folds", s.max_folds, "cap on the fold count (0 = uncapped)");
    sub->add_option("--max-eval-rows", s.max_eval_rows,
                    "cap on decomposed rows per fold (0 = all)");
    sub->add_option("--seed", s.seed, "global random seed");
    sub->add_option("--outdir", s.outdir, "output directory");
    sub->add_option("--m", s.m, "simulated sample size");
    sub->add_option("--beta", s.beta, "simulation coefficients, four comma-separated numbers");
    sub->add_option("--noise-ratio", s.noise_ratio, "noise sd as a fraction of the signal sd");
    sub->add_option("--sizes", s.sizes, "comma-separated sample sizes (sweep/curve)");
    sub->add_option("--reps", s.reps, "repetitions per size (sweep/curve)");
    sub->add_option("--trees", s.trees, "forest: number of trees");
    sub->add_option("--max-depth", s.max_depth, "forest: depth limit");
    sub->add_option("--min-leaf", s.min_leaf, "forest: minimum rows per leaf");
    sub->add_option("--feature-frac", s.feature_frac, "forest: per-split feature fraction");
    sub->add_option("--gamma", s.gamma, "kernel: RBF width");
    sub->add_option("--lambda", s.lambda, "kernel: ridge penalty");
    sub->add_option("--hidden", s.hidden, "network: comma-separated layer widths");
    sub->add_option("--epochs", s.epochs, "network: training epochs");
    sub->add_option("--step", s.step, "network: learning rate");
}

json cli_patch(const CLI::App* sub, const CliStaging& s) {
    json patch = json::object();
    const auto passed = [&](const char* flag) { return sub->count(flag) > 0; };
    if (passed("--input")) patch["input"] = s.input;
    if (passed("--target")) patch["target"] = s.target;
    if (passed("--treatment")) patch["treatment"] = s.treatment;
    if (passed("--keep")) patch["keep"] = split_list(s.keep);
    if (passed("--order")) patch["h"] = s.h;
    if (passed("--background")) patch["background"] = s.background;
    if (passed("--alpha")) patch["alpha"] = s.alpha;
    if (passed("--se")) patch["se"] = s.se;
    if (passed("--xi")) {
        if (s.xi == "auto") {
            patch["xi"] = "auto";
        } else {
            try {
                patch["xi"] = std::stod(s.xi);
            } catch (const std::exception&) {
                fail(Stage::config, "--xi needs a number or 'auto'");
            }
        }
    }
    if (passed("--folds")) {
        if (s.folds == "auto") {
            patch["folds"] = "auto";
        } else {
            try {
                patch["folds"] = std::stoi(s.folds);
            } catch (const std::exception&) {
                fail(Stage::config, "--folds needs an integer or 'auto'");
            }
        }
    }
    if (passed("--max-folds")) patch["max_folds"] = s.max_folds;
    if (passed("--max-eval-rows")) patch["max_eval_rows"] = s.max_eval_rows;
    if (passed("--seed")) patch["seed"] = s.seed;
    if (passed("--outdir")) patch["outdir"] = s.outdir;
    if (passed("--model")) patch["model"]["kind"] = s.model;
    if (passed("--trees")) patch["model"]["trees"] = s.trees;
    if (passed("--max-depth")) patch["model"]["max_depth"] = s.max_depth;
    if (passed("--min-leaf")) patch["model"]["min_leaf"] = s.min_leaf;
    if (passed("--feature-frac")) patch["model"]["feature_frac"] = s.feature_frac;
    if (passed("--gamma")) patch["model"]["gamma"] = s.gamma;
    if (passed("--lambda")) patch["model"]["lambda"] = s.lambda;
    if (passed("--hidden")) patch["model"]["hidden"] = parse_number_list<int>(s.hidden, "--hidden");
    if (passed("--epochs")) patch["model"]["epochs"] = s.epochs;
    if (passed("--step")) patch["model"]["step"] = s.step;
    if (passed("--m")) patch["sim"]["m"] = s.m;
    if (passed("--beta")) {
        const auto beta = parse_number_list<double>(s.beta, "--beta");
        if (beta.size() != 4) fail(Stage::config, "--beta needs exactly 4 numbers");
        patch["sim"]["beta"] = beta;
    }
    if (passed("--noise-ratio")) patch["sim"]["noise_ratio"] = s.noise_ratio;
    if (passed("--sizes"))
        patch["sizes"] = parse_number_list<std::int64_t>(s.sizes, "--sizes");
    if (passed("--reps")) patch["reps"] = s.reps;
    return patch;
}

json read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(Stage::config, "cannot read config file " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        fail(Stage::config, "config file " + path + " is not valid JSON: " + e.what());
    }
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Cross-fitted model attribution with per-term inference"};
    app.require_subcommand(1);
    CliStaging s;
    CLI::App* subs[] = {
        app.add_subcommand("simulate", "Generate a synthetic randomized experiment"),
        app.add_subcommand("run", "Cross-fit, decompose, and build the report bundle"),
        app.add_subcommand("sweep", "Repeat the run over increasing sample sizes"),
        app.add_subcommand("curve", "Fit an out-of-sample learning curve"),
    };
    for (auto* sub : subs) add_options(sub, s);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e); // prints help or the parse error
        return code == 0 ? 0 : 2;
    }

    try {
        const CLI::App* sub = app.get_subcommands().front();
        json merged = config_to_json(RunConfig{});
        if (sub->count("--config") > 0) merged.merge_patch(read_config_file(s.config_path));
        merged.merge_patch(cli_patch(sub, s));
        const RunConfig cfg = config_from_json(merged);
        const std::string name = sub->get_name();
        if (name == "simulate") return cmd_simulate(cfg);
        if (name == "run") return cmd_run(cfg);
        if (name == "sweep") return cmd_sweep(cfg);
        return cmd_curve(cfg);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}

} // namespace shapreg
