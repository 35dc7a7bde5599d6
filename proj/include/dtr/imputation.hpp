#pragma once

#include "dtr/data_model.hpp"
#include "dtr/splines.hpp"
#include "dtr/survival.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dtr {

/// Mean and random-effect structure of the CD4 model on the square-root scale.
/// Time enters in years.
struct Cd4ModelSpec {
    int time_interior_knots = 2; // natural spline in t
    int tsi_interior_knots = 2;  // natural spline in time since initiation, times N^A(t)
    bool age = true;
    bool sex = true;
    bool cdc_class = true;
    bool random_slope = true; // b_1 (t - A)_+ in addition to the random intercept
};

struct Cd4FitOptions {
    int max_iter = 500;
    double tol = 1e-5; // gradient norm of the profile log-likelihood
    /// Keep a fit whose random-effects covariance is singular instead of throwing.
    bool allow_boundary = false;
};

/// Column layout of the fixed (X) and random (Z) parts, fixed from one cohort.
class Cd4Design {
public:
    static Cd4Design build(const CohortDataset& cohort, const Cd4ModelSpec& spec);

    [[nodiscard]] const std::vector<std::string>& fixed_names() const { return names_; }
    [[nodiscard]] std::size_t n_random() const { return random_slope_ ? 2 : 1; }

    [[nodiscard]] Eigen::VectorXd fixed_row(const SubjectHistory& subject, double t) const;
    [[nodiscard]] Eigen::VectorXd random_row(const SubjectHistory& subject, double t) const;

private:
    [[nodiscard]] std::vector<double> full_row(const SubjectHistory& subject, double t) const;

    Cd4ModelSpec spec_;
    std::optional<NaturalSplineBasis> time_;
    std::optional<NaturalSplineBasis> tsi_;
    std::vector<std::string> full_names_;
    std::vector<std::size_t> kept_;
    std::vector<std::string> names_;
    bool random_slope_ = false;
};

/// Observations of one subject: y = sqrt(CD4), with its design rows.
struct Cd4Block {
    std::size_t subject = 0;
    Eigen::MatrixXd x;
    Eigen::MatrixXd z;
    Eigen::VectorXd y;
};

/// Blocks for every subject with at least one CD4 at or before `until`.
std::vector<Cd4Block> cd4_blocks(const CohortDataset& cohort, const Cd4Design& design,
                                 double until = std::numeric_limits<double>::infinity());

/// Gaussian marginal log-likelihood, b_i integrated out in closed form.
double cd4_marginal_loglik(std::span<const Cd4Block> blocks, const Eigen::VectorXd& beta,
                           const Eigen::MatrixXd& omega, double sigma);

struct Cd4Posterior {
    Eigen::VectorXd mode;       // empirical-Bayes b_i
    Eigen::MatrixXd covariance; // Var(b_i | y_i)
};

/// Two-level model sqrt(CD4) = x(t)'beta + z(t)'b_i + e, b_i ~ N(0, omega), e ~ N(0, sigma^2).
struct Cd4MixedModelFit {
    Cd4Design design;
    Eigen::VectorXd beta;
    Eigen::MatrixXd omega;
    double sigma = 0.0;
    double log_likelihood = 0.0;
    int iterations = 0;
    std::vector<double> trace; // profile log-likelihood after each iteration
    bool boundary = false;
    std::vector<Cd4Posterior> posteriors; // one per cohort subject, from all of its CD4 values

    /// Posterior of b_i from the CD4 values observed at or before `until`.
    [[nodiscard]] Cd4Posterior posterior(const SubjectHistory& subject, double until) const;

    /// Subject-specific prediction x(t)'beta + z(t)'b on the square-root scale.
    [[nodiscard]] double predict(const SubjectHistory& subject, const Cd4Posterior& post, double t) const;
};

/// Maximum marginal likelihood with beta and sigma profiled out and BFGS over
/// the Cholesky factor of omega / sigma^2. Throws DataError when fewer than two
/// subjects have two CD4 values, NumericalError on non-convergence (with the
/// trace) or a singular omega ("boundary estimate").
Cd4MixedModelFit fit_cd4_model(const CohortDataset& cohort, const Cd4ModelSpec& spec = {},
                               const Cd4FitOptions& options = {});

/// Square-root-scale predictive distribution of an observed CD4 at t given
/// the values observed at or before `until`.
struct NormalDraw {
    double mean = 0.0;
    double sd = 0.0;
};
NormalDraw cd4_predictive(const Cd4MixedModelFit& fit, const SubjectHistory& subject, double t, double until);

struct DeathModelSpec {
    int cd4_interior_knots = 2; // spline in the predicted sqrt CD4; negative drops the term
    bool treatment = true;
    bool age = true;
    bool sex = true;
    double refresh_days = 30.0; // predicted CD4 is refreshed on this grid and at visits
};

struct DeathModelFit {
    DeathModelSpec spec;
    std::optional<NaturalSplineBasis> cd4_basis;
    std::vector<std::string> full_names;
    std::vector<std::size_t> kept;
    ProportionalHazardsFit fit;

    /// Covariate path through `until`, with the predicted CD4 from `post`.
    [[nodiscard]] CovariatePath path(const SubjectHistory& subject, const Cd4MixedModelFit& cd4,
                                     const Cd4Posterior& post, double until) const;
};

/// Cox model for death with the predicted CD4 as a time-varying covariate.
/// Throws DataError("no events") without deaths.
DeathModelFit fit_death_model(const CohortDataset& cohort, const Cd4MixedModelFit& cd4_fit,
                              const DeathModelSpec& spec = {}, const CoxOptions& options = {});

/// P(death by t_star | alive at U) = 1 - S(t_star | H) / S(U | H); 0 when U >= t_star.
double conditional_death_probability(const SubjectHistory& subject, const Cd4MixedModelFit& cd4_fit,
                                     const DeathModelFit& death_fit, double t_star);

struct CompletedOutcome {
    bool dead = false;
    double x = 0.0;
    bool imputed = false;
};

struct ImputationOptions {
    std::size_t m = 20;
    std::uint64_t seed = 1;
    std::size_t workers = 0; // 0: hardware concurrency
    double floor = 1.0;      // cells/uL, lower bound of imputed CD4
};

struct ImputedCohort {
    double t_star = 0.0;
    OutcomeWindow window;
    std::uint64_t seed = 0;
    std::vector<ObservedOutcome> observed;            // per subject
    std::vector<std::vector<CompletedOutcome>> data;  // [imputation][subject]

    [[nodiscard]] std::size_t m() const { return data.size(); }
};

/// Completes missing outcomes M times. Subjects alive at t_star without a CD4
/// in the window get a draw of Z(t_star); subjects followed for less than
/// t_star first get a death draw. Throws ConfigError when M < 2.
ImputedCohort impute(const CohortDataset& cohort, const Cd4MixedModelFit& cd4_fit, const DeathModelFit& death_fit,
                     double t_star, OutcomeWindow window, const ImputationOptions& options = {});

/// CSV: imputation, subject_id, status, dead, x, imputed.
std::string imputed_table(const CohortDataset& cohort, const ImputedCohort& imputed);

struct RubinResult {
    double estimate = 0.0;
    double within = 0.0;
    double between = 0.0;
    double total_variance = 0.0;
    double df = 0.0; // +inf when the between-imputation variance is 0
};

RubinResult rubin_combine(std::span<const double> estimates, std::span<const double> variances);

} // namespace dtr
