#pragma once

#include "dtr/data_model.hpp"
#include "dtr/regimes.hpp"
#include "dtr/splines.hpp"
#include "dtr/survival.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dtr {

/// Terms of the initiation-hazard model. Time-varying markers enter as the
/// most recent observation (natural spline plus a not-yet-observed indicator).
struct WeightModelSpec {
    int spline_interior_knots = 3;
    bool cd4 = true;
    bool waz = true;
    bool haz = true;
    bool age = true;
    bool sex = true;
    bool cdc_class = true;
    /// Indicator for the day of a CD4 measurement, (t - 0.5, t + 0.5].
    bool measurement_day = true;
};

/// Knots and column layout of the initiation model, fixed from one cohort.
class InitiationDesign {
public:
    static InitiationDesign build(const CohortDataset& cohort, const WeightModelSpec& spec);

    [[nodiscard]] const std::vector<std::string>& term_names() const { return names_; }
    [[nodiscard]] const WeightModelSpec& spec() const { return spec_; }

    /// Piecewise-constant covariates from kRiskOrigin onwards. Measurements at a
    /// visit take effect kSameDayOffset days before it.
    [[nodiscard]] CovariatePath path(const SubjectHistory& subject, double until) const;

    /// Drop columns by index into the current layout.
    void drop_terms(std::span<const std::size_t> columns);

private:
    [[nodiscard]] std::vector<double> full_row(const SubjectHistory& s, double at) const;

    WeightModelSpec spec_;
    std::vector<std::string> full_names_;
    std::vector<std::size_t> kept_;
    std::vector<std::string> names_;
    std::optional<NaturalSplineBasis> cd4_;
    std::optional<NaturalSplineBasis> waz_;
    std::optional<NaturalSplineBasis> haz_;
    std::optional<NaturalSplineBasis> age_;
};

struct InitiationModel {
    InitiationDesign design;
    ProportionalHazardsFit fit;
    double t_star = 0.0;
};

/// Risk intervals for initiation, one subject per block, ending at
/// min(A, T, C, t_star). Subjects without visits contribute nothing.
IntervalData initiation_intervals(const CohortDataset& cohort, const InitiationDesign& design, double t_star);

/// Cox model for the initiation hazard. Columns that are constant
/// over the risk intervals are dropped before fitting.
/// Throws DataError("no at-risk time") when nobody is at risk after day 0.
InitiationModel fit_initiation_model(const CohortDataset& cohort, const WeightModelSpec& spec, double t_star,
                                     const CoxOptions& options = {});

/// Density of the observed initiation time for initiators by U, survivor at U
/// otherwise, without the positivity check.
double raw_denominator(const SubjectHistory& subject, const InitiationModel& model);

/// raw_denominator with the positivity guard: values below kPositivityFloor throw.
double denominator(const SubjectHistory& subject, const InitiationModel& model);

inline constexpr double kPositivityFloor = 1e-10;

struct TruncationOptions {
    double lower = 0.05;
    double upper = 0.95;
    bool enabled = true;
};

/// Nearest-rank (type-1) empirical quantile: the ceil(n p)-th order statistic,
/// the minimum for p = 0.
double type1_quantile(std::span<const double> values, double p);

struct SubjectWeight {
    std::size_t subject = 0; // index into the cohort
    double numerator = 0.0;
    double denominator = 0.0;
    double raw = 0.0;
    double weight = 0.0;
    bool truncated = false;
};

struct StabilizedWeightSet {
    RegimeSpec regime;
    double t_star = 0.0;
    std::vector<SubjectWeight> entries; // compliant subjects only, in cohort order
    double lower_clip = 0.0;
    double upper_clip = 0.0;
};

/// Denominators for every subject (nullopt for subjects without visits).
std::vector<std::optional<double>> all_denominators(const CohortDataset& cohort, const InitiationModel& model);

/// Stabilized weights S^q(min(U, t*)) / denominator for subjects compliant
/// through t*, clipped to type-1 quantiles of the set when truncation is on.
StabilizedWeightSet stabilized_weights(const CohortDataset& cohort, const RegimeSpec& regime,
                                       std::span<const std::optional<double>> denominators, double t_star,
                                       const TruncationOptions& truncation = {});

StabilizedWeightSet stabilized_weights(const CohortDataset& cohort, const RegimeSpec& regime,
                                       const InitiationModel& model, const TruncationOptions& truncation = {});

/// Clip every set to quantiles of the raw weights pooled across all sets.
void truncate_pooled(std::span<StabilizedWeightSet> sets, const TruncationOptions& truncation);

/// Discrete-time product over a grid of width grid_step starting at
/// kRiskOrigin. Each interval's event probability is the sum of u dLambda_0
/// over the baseline jumps it contains. Throws NumericalError("grid too
/// coarse") when such a sum exceeds 1.
double discrete_time_weight(const SubjectHistory& subject, const InitiationModel& model, double grid_step);

/// Same product for an explicit fit and covariate path; `initiation` is the
/// event time for initiators.
double discrete_time_weight(const ProportionalHazardsFit& fit, const CovariatePath& path, double end,
                            std::optional<double> initiation, double grid_step);

/// CSV: subject_id, regime, numerator, denominator, raw_weight, truncated_weight.
std::string weights_table(const CohortDataset& cohort, std::span<const StabilizedWeightSet> sets);

} // namespace dtr
