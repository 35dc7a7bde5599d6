#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dtr {

/// One row of counting-process data: the subject is at risk on (start, stop]
/// with covariates fixed over the interval, and `event` marks an event at stop.
struct RiskInterval {
    std::size_t subject = 0;
    double start = 0.0;
    double stop = 0.0;
    std::vector<double> covariates;
    bool event = false;
};

/// Column-major storage of many RiskIntervals sharing one covariate layout.
class IntervalData {
public:
    IntervalData() = default;
    explicit IntervalData(std::vector<std::string> term_names) : names_(std::move(term_names)) {}

    void add(std::size_t subject, double start, double stop, std::span<const double> covariates, bool event);
    void add(const RiskInterval& row) { add(row.subject, row.start, row.stop, row.covariates, row.event); }

    [[nodiscard]] std::size_t size() const { return start_.size(); }
    [[nodiscard]] std::size_t n_terms() const { return names_.size(); }
    [[nodiscard]] const std::vector<std::string>& term_names() const { return names_; }
    [[nodiscard]] double start(std::size_t i) const { return start_[i]; }
    [[nodiscard]] double stop(std::size_t i) const { return stop_[i]; }
    [[nodiscard]] bool event(std::size_t i) const { return event_[i] != 0; }
    [[nodiscard]] std::size_t subject(std::size_t i) const { return subject_[i]; }
    [[nodiscard]] std::span<const double> covariates(std::size_t i) const {
        return {x_.data() + i * names_.size(), names_.size()};
    }
    [[nodiscard]] std::size_t n_events() const;

    /// Covariate matrix, one row per interval.
    [[nodiscard]] Eigen::MatrixXd design() const;

private:
    std::vector<std::string> names_;
    std::vector<double> start_;
    std::vector<double> stop_;
    std::vector<char> event_;
    std::vector<std::size_t> subject_;
    std::vector<double> x_; // row-major, n_terms per interval
};

/// Right-continuous step function Lambda(t) = sum of increments at jump times <= t.
class CumulativeHazard {
public:
    CumulativeHazard() = default;
    CumulativeHazard(std::vector<double> jump_times, std::vector<double> increments);

    [[nodiscard]] double value(double t) const;
    [[nodiscard]] double survivor(double t) const;
    /// Increment exactly at t, or 0 when t is not a jump time.
    [[nodiscard]] double increment_at(double t) const;
    [[nodiscard]] bool is_jump(double t) const;

    [[nodiscard]] const std::vector<double>& jump_times() const { return times_; }
    [[nodiscard]] const std::vector<double>& increments() const { return increments_; }
    [[nodiscard]] bool empty() const { return times_.empty(); }

private:
    std::vector<double> times_;
    std::vector<double> increments_;
    std::vector<double> cumulative_;
};

/// Nelson-Aalen estimator: increment at t = events at t / #{start < t <= stop}.
CumulativeHazard nelson_aalen(const IntervalData& data);

struct CoxOptions {
    int max_iter = 50;
    double tol = 1e-8;              // Newton decrement sqrt(U' I^{-1} U) at convergence
    double separation_bound = 20.0; // |coefficient| on standardized covariates
};

struct ConvergenceReport {
    int iterations = 0;
    double gradient_norm = 0.0; // sqrt(U' I^{-1} U) on the standardized scale
    double log_partial_likelihood = 0.0;
    std::vector<double> trace; // log partial likelihood after each accepted step
};

/// Proportional-hazards fit with relative risk u(x) = exp(x' coefficients).
struct ProportionalHazardsFit {
    std::vector<std::string> term_names;
    std::vector<double> coefficients;
    CumulativeHazard baseline;
    ConvergenceReport convergence;
    Eigen::MatrixXd information; // observed information on the original scale

    [[nodiscard]] double relative_risk(std::span<const double> covariates) const;
    [[nodiscard]] double linear_predictor(std::span<const double> covariates) const;
};

/// Log partial likelihood with Breslow tie handling.
double cox_log_partial_likelihood(const IntervalData& data, std::span<const double> coefficients);

/// Maximum partial likelihood by Newton iterations with step halving, on
/// standardized covariates; the Breslow baseline is attached to the result.
/// Throws NumericalError on rank deficiency, separation or non-convergence.
ProportionalHazardsFit cox_fit(const IntervalData& data, const CoxOptions& options = {});

/// Breslow estimator: increment at t = events at t / sum over the risk set of u(x).
CumulativeHazard breslow_baseline(const IntervalData& data, std::span<const double> coefficients);

/// Piecewise-constant covariate path: values[k] applies on (starts[k], starts[k+1]],
/// the last one on (starts.back(), +inf).
struct CovariatePath {
    std::vector<double> starts;
    std::vector<std::vector<double>> values;

    void push(double start, std::vector<double> covariates) {
        starts.push_back(start);
        values.push_back(std::move(covariates));
    }
    /// Covariates in effect at time t, or nullptr when t <= starts.front().
    [[nodiscard]] const std::vector<double>* at(double t) const;
};

/// Cumulative hazard of an individual following `path`, integrated over
/// baseline jumps in (path start, t].
double cumulative_hazard_at(const ProportionalHazardsFit& fit, const CovariatePath& path, double t);

/// S(t | path) = exp(-sum_{jumps s <= t} u(x(s)) dLambda_0(s)).
double survivor_at(const ProportionalHazardsFit& fit, const CovariatePath& path, double t);

/// f(t | path) = u(x(t)) dLambda_0(t) S(t | path). Throws NumericalError when t
/// is not a jump time of the baseline.
double density_at(const ProportionalHazardsFit& fit, const CovariatePath& path, double t);

/// Text form of a fit (JSON) for reproducibility manifests.
std::string serialize_fit(const ProportionalHazardsFit& fit);

} // namespace dtr
