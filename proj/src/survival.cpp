#include "dtr/survival.hpp"

#include "dtr/errors.hpp"

#include <fmt/core.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dtr {

// ---------------------------------------------------------------------------
// IntervalData

void IntervalData::add(std::size_t subject, double start, double stop, std::span<const double> covariates,
                       bool event) {
    if (!(start < stop)) {
        throw DataError(fmt::format("risk interval for subject {} has start {} >= stop {}", subject, start, stop));
    }
    if (covariates.size() != names_.size()) {
        throw DataError(fmt::format("risk interval has {} covariates, expected {}", covariates.size(), names_.size()));
    }
    start_.push_back(start);
    stop_.push_back(stop);
    event_.push_back(event ? 1 : 0);
    subject_.push_back(subject);
    x_.insert(x_.end(), covariates.begin(), covariates.end());
}

std::size_t IntervalData::n_events() const {
    return static_cast<std::size_t>(std::count(event_.begin(), event_.end(), char{1}));
}

Eigen::MatrixXd IntervalData::design() const {
    const auto n = static_cast<Eigen::Index>(size());
    const auto p = static_cast<Eigen::Index>(n_terms());
    Eigen::MatrixXd x(n, p);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) x(i, j) = x_[static_cast<std::size_t>(i * p + j)];
    }
    return x;
}

// ---------------------------------------------------------------------------
// CumulativeHazard

CumulativeHazard::CumulativeHazard(std::vector<double> jump_times, std::vector<double> increments)
    : times_(std::move(jump_times)), increments_(std::move(increments)) {
    if (times_.size() != increments_.size()) throw DataError("cumulative hazard: size mismatch");
    cumulative_.resize(times_.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < times_.size(); ++k) {
        if (k > 0 && !(times_[k] > times_[k - 1])) throw DataError("cumulative hazard: jump times not increasing");
        if (increments_[k] < 0.0) throw DataError("cumulative hazard: negative increment");
        acc += increments_[k];
        cumulative_[k] = acc;
    }
}

double CumulativeHazard::value(double t) const {
    const auto it = std::upper_bound(times_.begin(), times_.end(), t);
    if (it == times_.begin()) return 0.0;
    return cumulative_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

double CumulativeHazard::survivor(double t) const { return std::exp(-value(t)); }

double CumulativeHazard::increment_at(double t) const {
    const auto it = std::lower_bound(times_.begin(), times_.end(), t);
    if (it == times_.end() || *it != t) return 0.0;
    return increments_[static_cast<std::size_t>(it - times_.begin())];
}

bool CumulativeHazard::is_jump(double t) const { return std::binary_search(times_.begin(), times_.end(), t); }

// ---------------------------------------------------------------------------
// Nelson-Aalen

CumulativeHazard nelson_aalen(const IntervalData& data) {
    const std::size_t n = data.size();
    std::vector<double> starts(n);
    std::vector<double> stops(n);
    std::vector<double> event_times;
    for (std::size_t i = 0; i < n; ++i) {
        starts[i] = data.start(i);
        stops[i] = data.stop(i);
        if (data.event(i)) event_times.push_back(data.stop(i));
    }
    std::sort(starts.begin(), starts.end());
    std::sort(stops.begin(), stops.end());
    std::sort(event_times.begin(), event_times.end());

    std::vector<double> times;
    std::vector<double> incs;
    for (std::size_t k = 0; k < event_times.size();) {
        const double t = event_times[k];
        std::size_t d = 0;
        while (k < event_times.size() && event_times[k] == t) {
            ++d;
            ++k;
        }
        // at risk: start < t <= stop
        const auto started = std::lower_bound(starts.begin(), starts.end(), t) - starts.begin();
        const auto ended = std::lower_bound(stops.begin(), stops.end(), t) - stops.begin();
        const auto at_risk = static_cast<double>(started - ended);
        times.push_back(t);
        incs.push_back(static_cast<double>(d) / at_risk);
    }
    return {std::move(times), std::move(incs)};
}

// ---------------------------------------------------------------------------
// Cox partial likelihood

namespace {

constexpr double kMaxStep = 5.0;

struct CoxSums {
    double loglik = 0.0;
    Eigen::VectorXd score;
    Eigen::MatrixXd information;
};

/// Sweeps event times in decreasing order keeping running risk-set sums.
/// `x` holds one row per interval.
class RiskSetSweep {
public:
    explicit RiskSetSweep(const IntervalData& data) : data_(data) {
        const std::size_t n = data.size();
        by_stop_.resize(n);
        by_start_.resize(n);
        std::iota(by_stop_.begin(), by_stop_.end(), std::size_t{0});
        std::iota(by_start_.begin(), by_start_.end(), std::size_t{0});
        std::stable_sort(by_stop_.begin(), by_stop_.end(),
                         [&](std::size_t a, std::size_t b) { return data.stop(a) > data.stop(b); });
        std::stable_sort(by_start_.begin(), by_start_.end(),
                         [&](std::size_t a, std::size_t b) { return data.start(a) > data.start(b); });
    }

    /// Calls visit(t, risk_indices_added/removed...) through callbacks:
    /// add(i), remove(i), at_event_time(t, first, last) with [first,last) a
    /// range of by_stop_ holding the intervals whose stop equals t.
    template <class Add, class Remove, class AtTime>
    void run(Add&& add, Remove&& remove, AtTime&& at_time) const {
        const std::size_t n = by_stop_.size();
        std::size_t ps = 0;
        std::size_t pst = 0;
        while (ps < n) {
            const double t = data_.stop(by_stop_[ps]);
            const std::size_t first = ps;
            while (ps < n && data_.stop(by_stop_[ps]) == t) add(by_stop_[ps++]);
            while (pst < n && data_.start(by_start_[pst]) >= t) remove(by_start_[pst++]);
            at_time(t, first, ps);
        }
    }

    [[nodiscard]] std::size_t stop_index(std::size_t k) const { return by_stop_[k]; }

private:
    const IntervalData& data_;
    std::vector<std::size_t> by_stop_;
    std::vector<std::size_t> by_start_;
};

CoxSums cox_sums(const IntervalData& data, const RiskSetSweep& sweep, const Eigen::MatrixXd& x,
                 const Eigen::VectorXd& beta, bool second_order) {
    const auto p = x.cols();
    const Eigen::VectorXd eta = x * beta;
    CoxSums out;
    out.score = Eigen::VectorXd::Zero(p);
    out.information = Eigen::MatrixXd::Zero(p, p);
    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);

    auto update = [&](std::size_t i, double sign) {
        const auto ii = static_cast<Eigen::Index>(i);
        const double r = sign * std::exp(eta(ii));
        s0 += r;
        s1.noalias() += r * x.row(ii).transpose();
        if (second_order) s2.selfadjointView<Eigen::Lower>().rankUpdate(x.row(ii).transpose(), r);
    };
    sweep.run([&](std::size_t i) { update(i, 1.0); }, [&](std::size_t i) { update(i, -1.0); },
              [&](double, std::size_t first, std::size_t last) {
                  double d = 0.0;
                  for (std::size_t k = first; k < last; ++k) {
                      const auto i = sweep.stop_index(k);
                      if (!data.event(i)) continue;
                      const auto ii = static_cast<Eigen::Index>(i);
                      d += 1.0;
                      out.loglik += eta(ii);
                      out.score += x.row(ii).transpose();
                  }
                  if (d == 0.0) return;
                  out.loglik -= d * std::log(s0);
                  const Eigen::VectorXd mean = s1 / s0;
                  out.score -= d * mean;
                  if (second_order) {
                      Eigen::MatrixXd full = s2.selfadjointView<Eigen::Lower>();
                      out.information += d * (full / s0 - mean * mean.transpose());
                  }
              });
    return out;
}

} // namespace

double cox_log_partial_likelihood(const IntervalData& data, std::span<const double> coefficients) {
    if (coefficients.size() != data.n_terms()) throw DataError("coefficient length mismatch");
    const RiskSetSweep sweep(data);
    const Eigen::MatrixXd x = data.design();
    const Eigen::VectorXd beta =
        Eigen::Map<const Eigen::VectorXd>(coefficients.data(), static_cast<Eigen::Index>(coefficients.size()));
    return cox_sums(data, sweep, x, beta, false).loglik;
}

ProportionalHazardsFit cox_fit(const IntervalData& data, const CoxOptions& options) {
    if (data.n_events() == 0) throw NumericalError("cox_fit: no events");
    const auto p = static_cast<Eigen::Index>(data.n_terms());
    const auto& names = data.term_names();

    Eigen::MatrixXd x = data.design();
    Eigen::VectorXd center = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd scale = Eigen::VectorXd::Ones(p);
    for (Eigen::Index j = 0; j < p; ++j) {
        center(j) = x.col(j).mean();
        const double sd = std::sqrt((x.col(j).array() - center(j)).square().mean());
        if (!(sd > 1e-12 * (1.0 + std::abs(center(j))))) {
            throw NumericalError(fmt::format("cox_fit: rank deficiency, term '{}' is constant", names[j]));
        }
        scale(j) = sd;
        x.col(j) = (x.col(j).array() - center(j)) / sd;
    }
    if (p > 0) {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
        qr.setThreshold(1e-10);
        if (qr.rank() < p) {
            std::string dropped;
            for (Eigen::Index k = qr.rank(); k < p; ++k) {
                if (!dropped.empty()) dropped += ", ";
                dropped += names[static_cast<std::size_t>(qr.colsPermutation().indices()(k))];
            }
            throw NumericalError(fmt::format("cox_fit: rank deficiency, collinear terms: {}", dropped));
        }
    }

    const RiskSetSweep sweep(data);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    CoxSums cur = cox_sums(data, sweep, x, beta, true);
    ConvergenceReport report;
    report.trace.push_back(cur.loglik);

    bool converged = false;
    for (int iter = 0; iter <= options.max_iter; ++iter) {
        if (p == 0) {
            converged = true;
            break;
        }
        Eigen::LDLT<Eigen::MatrixXd> ldlt(cur.information);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 0.0) {
            throw NumericalError("cox_fit: information matrix not positive definite (nonidentifiable/separation)");
        }
        const Eigen::VectorXd step = ldlt.solve(cur.score);
        const double decrement = std::sqrt(std::max(0.0, cur.score.dot(step)));
        report.gradient_norm = decrement;
        if (decrement < options.tol) {
            converged = true;
            break;
        }
        if (iter == options.max_iter) break;

        // Standardized steps longer than kMaxStep are shortened before halving.
        double factor = std::min(1.0, kMaxStep / step.cwiseAbs().maxCoeff());
        CoxSums next;
        Eigen::VectorXd candidate;
        for (int halving = 0; halving < 40; ++halving) {
            candidate = beta + factor * step;
            next = cox_sums(data, sweep, x, candidate, true);
            if (std::isfinite(next.loglik) && next.loglik >= cur.loglik - 1e-12 * std::abs(cur.loglik)) break;
            factor *= 0.5;
        }
        if (candidate.cwiseAbs().maxCoeff() > options.separation_bound) {
            throw NumericalError("cox_fit: nonidentifiable/separation (coefficient diverging)");
        }
        beta = candidate;
        cur = std::move(next);
        report.iterations = iter + 1;
        report.trace.push_back(cur.loglik);
    }
    if (!converged) {
        throw NumericalError(fmt::format("cox_fit: no convergence after {} iterations (gradient norm {})",
                                         options.max_iter, report.gradient_norm));
    }
    report.log_partial_likelihood = cur.loglik;

    ProportionalHazardsFit fit;
    fit.term_names = names;
    fit.coefficients.resize(static_cast<std::size_t>(p));
    for (Eigen::Index j = 0; j < p; ++j) fit.coefficients[static_cast<std::size_t>(j)] = beta(j) / scale(j);
    fit.information = Eigen::MatrixXd(p, p);
    for (Eigen::Index a = 0; a < p; ++a) {
        for (Eigen::Index b = 0; b < p; ++b) fit.information(a, b) = cur.information(a, b) / (scale(a) * scale(b));
    }
    fit.convergence = std::move(report);
    fit.baseline = breslow_baseline(data, fit.coefficients);
    return fit;
}

CumulativeHazard breslow_baseline(const IntervalData& data, std::span<const double> coefficients) {
    if (coefficients.size() != data.n_terms()) throw DataError("coefficient length mismatch");
    const RiskSetSweep sweep(data);
    std::vector<double> risk(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto x = data.covariates(i);
        double eta = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) eta += x[j] * coefficients[j];
        risk[i] = std::exp(eta);
    }
    std::vector<double> times;
    std::vector<double> incs;
    double s0 = 0.0;
    sweep.run([&](std::size_t i) { s0 += risk[i]; }, [&](std::size_t i) { s0 -= risk[i]; },
              [&](double t, std::size_t first, std::size_t last) {
                  double d = 0.0;
                  for (std::size_t k = first; k < last; ++k) d += data.event(sweep.stop_index(k)) ? 1.0 : 0.0;
                  if (d == 0.0) return;
                  times.push_back(t);
                  incs.push_back(d / s0);
              });
    std::reverse(times.begin(), times.end());
    std::reverse(incs.begin(), incs.end());
    return {std::move(times), std::move(incs)};
}

// ---------------------------------------------------------------------------
// Individual survivor and density

double ProportionalHazardsFit::linear_predictor(std::span<const double> covariates) const {
    if (covariates.size() != coefficients.size()) throw DataError("covariate length mismatch");
    double eta = 0.0;
    for (std::size_t j = 0; j < covariates.size(); ++j) eta += covariates[j] * coefficients[j];
    return eta;
}

double ProportionalHazardsFit::relative_risk(std::span<const double> covariates) const {
    return std::exp(linear_predictor(covariates));
}

const std::vector<double>* CovariatePath::at(double t) const {
    if (starts.empty() || t <= starts.front()) return nullptr;
    // last k with starts[k] < t
    const auto it = std::lower_bound(starts.begin(), starts.end(), t);
    return &values[static_cast<std::size_t>(it - starts.begin()) - 1];
}

double cumulative_hazard_at(const ProportionalHazardsFit& fit, const CovariatePath& path, double t) {
    if (path.starts.empty()) throw DataError("empty covariate path");
    const auto& times = fit.baseline.jump_times();
    const auto& incs = fit.baseline.increments();
    auto k = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), path.starts.front()) - times.begin());
    double total = 0.0;
    std::size_t seg = 0;
    for (; k < times.size() && times[k] <= t; ++k) {
        while (seg + 1 < path.starts.size() && path.starts[seg + 1] < times[k]) ++seg;
        total += fit.relative_risk(path.values[seg]) * incs[k];
    }
    return total;
}

double survivor_at(const ProportionalHazardsFit& fit, const CovariatePath& path, double t) {
    return std::exp(-cumulative_hazard_at(fit, path, t));
}

double density_at(const ProportionalHazardsFit& fit, const CovariatePath& path, double t) {
    const double d_lambda = fit.baseline.increment_at(t);
    if (!fit.baseline.is_jump(t)) {
        throw NumericalError(fmt::format("density requested at {} which is not a baseline jump time", t));
    }
    const auto* x = path.at(t);
    if (x == nullptr) throw NumericalError(fmt::format("covariate path does not cover time {}", t));
    return fit.relative_risk(*x) * d_lambda * survivor_at(fit, path, t);
}

std::string serialize_fit(const ProportionalHazardsFit& fit) {
    nlohmann::json j;
    j["terms"] = fit.term_names;
    j["coefficients"] = fit.coefficients;
    j["baseline"] = {{"jump_times", fit.baseline.jump_times()}, {"increments", fit.baseline.increments()}};
    j["convergence"] = {{"iterations", fit.convergence.iterations},
                        {"gradient_norm", fit.convergence.gradient_norm},
                        {"log_partial_likelihood", fit.convergence.log_partial_likelihood}};
    return j.dump(2);
}

} // namespace dtr
