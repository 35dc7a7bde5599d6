#pragma once

#include "dtr/data_model.hpp"
#include "dtr/imputation.hpp"
#include "dtr/regimes.hpp"
#include "dtr/splines.hpp"
#include "dtr/weights.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dtr {

/// Weighted proportion of X = 0. Throws DataError when the weights sum to 0.
double estimate_mortality(std::span<const double> x, std::span<const double> w);

/// Left-continuous weighted tau-quantile: the smallest x whose weighted CDF
/// reaches tau.
double estimate_quantile(std::span<const double> x, std::span<const double> w, double tau);

/// Weighted mean of X over X > 0. Throws DataError without survivors.
double estimate_survivor_mean(std::span<const double> x, std::span<const double> w);

/// Pinball loss sum w rho_tau(x - fitted).
double check_loss(std::span<const double> residuals, std::span<const double> w, double tau);

/// One (subject, regime) compliance record entering the structural model.
struct MsmRecord {
    double q = 0.0; // 0 for never, +inf for immediate
    double x = 0.0;
    double w = 1.0;
};

struct MsmOptions {
    double tau = 0.5;
    int n_knots = 4; // J; 0 keeps only the two indicator columns
    int max_iter = 1000;
    double tol = 1e-8; // on coefficients
};

/// Quantile structural model with V(q) = [I(q = inf), I(q = 0), I(q in [q_l, q_u]) d(q)].
struct MsmFit {
    std::vector<double> alpha; // J + 2 coefficients
    std::optional<NaturalSplineBasis> basis;
    double q_lower = 0.0;
    double q_upper = 0.0;
    double tau = 0.5;
    double loss = 0.0;
    int iterations = 0;
    bool converged = true;

    [[nodiscard]] std::vector<double> design_row(double q) const;
};

/// J knots at quantile levels k / (J + 1) of the continuum thresholds.
NaturalSplineBasis msm_basis(std::span<const double> thresholds, int n_knots);

/// Minimizes the weighted check loss over pooled records. The indicator
/// blocks are weighted quantiles; the spline block is solved by an MM
/// (reweighted least squares) iteration followed by an exact vertex search.
/// Throws NumericalError naming the degenerate column on rank deficiency.
MsmFit msm_fit(std::span<const MsmRecord> records, std::span<const double> thresholds, const MsmOptions& options = {});

/// V(q)' alpha. Throws ConfigError for q outside {0} U [q_l, q_u] U {inf}.
double msm_curve(const MsmFit& fit, double q);

/// msm_curve(q_ref) - msm_curve(q).
double msm_contrast(const MsmFit& fit, double q, double q_ref = std::numeric_limits<double>::infinity());

struct EstimationConfig {
    double t_star = 365.0;
    std::vector<RegimeSpec> regimes;
    WeightModelSpec weight_model;
    TruncationOptions truncation;
    bool pooled_truncation = false;
    bool weighted = true; // false: compliant subjects with unit weights
    MsmOptions msm;
    bool fit_msm = true;
    CoxOptions cox;
};

struct PointEstimate {
    double theta1 = 0.0;
    double theta2 = 0.0;
    double theta3 = 0.0; // NaN without survivors
};

/// Point estimates for every regime and imputation on one cohort.
struct EstimationRun {
    std::vector<RegimeSpec> regimes;
    std::vector<std::size_t> n_compliant; // per regime; 0 when nobody follows it
    std::vector<double> sum_weights;
    std::vector<std::vector<PointEstimate>> points; // [imputation][regime], NaN when not estimable
    std::vector<std::vector<double>> curve;         // [imputation][regime], MSM fitted median
    std::vector<std::string> notes;                 // regimes skipped and why
};

/// Weights (or unit weights) for every regime, then per-imputation estimates.
/// `outcomes` is indexed [imputation][subject].
EstimationRun run_estimation(const CohortDataset& cohort, std::span<const std::vector<CompletedOutcome>> outcomes,
                             const EstimationConfig& config);

/// Stabilized weight sets for every regime; regimes nobody follows are left out
/// and reported in `notes`.
std::vector<StabilizedWeightSet> regime_weight_sets(const CohortDataset& cohort, const EstimationConfig& config,
                                                    std::vector<std::string>* notes = nullptr);

struct BootstrapOptions {
    std::size_t replicates = 200; // B
    std::uint64_t seed = 1;
    std::size_t workers = 0;
    double max_failure_rate = 0.10;
};

struct BootstrapResult {
    std::vector<std::vector<double>> variance; // per output vector entry, [group][k]
    std::size_t failures = 0;
    std::vector<std::string> failure_log;
};

/// Nonparametric bootstrap over subjects. `statistic` maps resampled subject
/// indices to groups of values; the variance of each value over successful
/// replicates is returned (NaN values are skipped). Throws NumericalError when
/// more than max_failure_rate of the replicates fail.
BootstrapResult bootstrap(std::size_t n_subjects, const BootstrapOptions& options,
                          const std::function<std::vector<std::vector<double>>(std::span<const std::size_t>)>& statistic);

/// Cohort made of the given subjects, duplicates renamed id#k, in subject_id order.
/// `origin` receives the source index of every subject.
CohortDataset resample_cohort(const CohortDataset& cohort, std::span<const std::size_t> indices,
                              std::vector<std::size_t>* origin = nullptr);

struct TargetSummary {
    double estimate = 0.0;
    double variance = 0.0; // Rubin total variance
    double df = 0.0;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
};

struct RegimeEstimate {
    RegimeSpec regime;
    double t_star = 0.0;
    TargetSummary theta1;
    TargetSummary theta2;
    TargetSummary theta3;
    std::size_t n_compliant = 0;
    double sum_weights = 0.0;
};

struct CurvePoint {
    RegimeSpec regime;
    TargetSummary value;    // fitted median V(q)' alpha
    TargetSummary contrast; // value at immediate minus value at q
};

struct EstimationSummary {
    double t_star = 0.0;
    std::vector<RegimeEstimate> regimes;
    std::vector<CurvePoint> curve;
    std::size_t bootstrap_replicates = 0;
    std::size_t bootstrap_failures = 0;
    std::vector<std::string> notes;
};

/// Full analysis: point estimates on the cohort and, when B > 0, bootstrap
/// variances within each imputation pooled by Rubin's rules (CI = estimate
/// +- 1.96 sqrt(T)). Without bootstrap the variances and CIs are NaN.
/// Throws ConfigError when 0 < B < 50.
EstimationSummary bootstrap_pipeline(const CohortDataset& cohort, const ImputedCohort& imputed,
                                     const EstimationConfig& config, const BootstrapOptions& bootstrap_options);

/// CSV with one row per regime: regime, t_star, theta1..3 with variance and CI bounds, n_compliant, sum_weights.
std::string results_table(std::span<const EstimationSummary> summaries);

/// CSV plot data: t_star, q, estimate, ci_lo, ci_hi, contrast, contrast_ci_lo, contrast_ci_hi.
std::string curve_table(std::span<const EstimationSummary> summaries);

} // namespace dtr
