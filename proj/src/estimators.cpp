#include "dtr/estimators.hpp"

#include "dtr/errors.hpp"
#include "dtr/parallel.hpp"

#include <Eigen/Dense>
#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace dtr {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double weight_total(std::span<const double> x, std::span<const double> w) {
    if (x.size() != w.size()) throw ConfigError(fmt::format("{} outcomes but {} weights", x.size(), w.size()));
    double total = 0.0;
    for (double v : w) {
        if (!(v >= 0.0)) throw ConfigError(fmt::format("weights must be non-negative, got {}", v));
        total += v;
    }
    if (!(total > 0.0)) throw DataError("sum of weights over compliant subjects is 0");
    return total;
}

} // namespace

double estimate_mortality(std::span<const double> x, std::span<const double> w) {
    const double total = weight_total(x, w);
    double dead = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] == 0.0) dead += w[i];
    }
    return dead / total;
}

double estimate_quantile(std::span<const double> x, std::span<const double> w, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError(fmt::format("quantile level must be in (0, 1), got {}", tau));
    const double total = weight_total(x, w);
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    double cumulative = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        cumulative += w[order[k]];
        const bool last_of_ties = k + 1 == order.size() || x[order[k + 1]] != x[order[k]];
        if (last_of_ties && cumulative / total >= tau) return x[order[k]];
    }
    return x[order.back()];
}

double estimate_survivor_mean(std::span<const double> x, std::span<const double> w) {
    weight_total(x, w);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0.0) {
            num += w[i] * x[i];
            den += w[i];
        }
    }
    if (!(den > 0.0)) throw DataError("no surviving compliant subjects with positive weight");
    return num / den;
}

double check_loss(std::span<const double> residuals, std::span<const double> w, double tau) {
    double loss = 0.0;
    for (std::size_t i = 0; i < residuals.size(); ++i) {
        const double r = residuals[i];
        loss += w[i] * r * (tau - (r < 0.0 ? 1.0 : 0.0));
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Structural model

std::vector<double> MsmFit::design_row(double q) const {
    std::vector<double> row(alpha.size(), 0.0);
    if (std::isinf(q) && q > 0.0) {
        row[0] = 1.0;
    } else if (q == 0.0) {
        row[1] = 1.0;
    } else if (basis && q >= q_lower && q <= q_upper) {
        const auto d = basis->evaluate(q);
        std::copy(d.begin(), d.end(), row.begin() + 2);
    } else {
        throw ConfigError(fmt::format("regime {} is outside the structural model domain {{0}} U [{}, {}] U {{inf}}", q,
                                      q_lower, q_upper));
    }
    return row;
}

NaturalSplineBasis msm_basis(std::span<const double> thresholds, int n_knots) {
    if (n_knots < 2) throw ConfigError(fmt::format("structural model needs at least 2 knots, got {}", n_knots));
    std::vector<double> levels;
    for (int k = 1; k <= n_knots; ++k) levels.push_back(static_cast<double>(k) / (n_knots + 1));
    std::vector<double> sorted(thresholds.begin(), thresholds.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> knots;
    for (double p : levels) {
        // Linear-interpolation quantile of the grid.
        const double h = p * static_cast<double>(sorted.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(h));
        const auto hi = std::min(lo + 1, sorted.size() - 1);
        knots.push_back(sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]));
    }
    knots.erase(std::unique(knots.begin(), knots.end()), knots.end());
    if (static_cast<int>(knots.size()) < n_knots) {
        throw NumericalError(fmt::format("structural model: {} knots requested but the regime grid yields only {} "
                                         "distinct quantiles",
                                         n_knots, knots.size()));
    }
    return NaturalSplineBasis::from_knots(knots);
}

namespace {

struct SplineBlock {
    Eigen::MatrixXd d;
    Eigen::VectorXd x;
    Eigen::VectorXd w;
};

double block_loss(const SplineBlock& b, const Eigen::VectorXd& beta, double tau) {
    const Eigen::VectorXd r = b.x - b.d * beta;
    return check_loss(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())),
                      std::span<const double>(b.w.data(), static_cast<std::size_t>(b.w.size())), tau);
}

// Basic solution through the rows with the smallest residuals, chosen greedily
// to be linearly independent.
std::optional<Eigen::VectorXd> vertex_near(const SplineBlock& b, const Eigen::VectorXd& beta) {
    const Eigen::VectorXd r = (b.x - b.d * beta).cwiseAbs();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(r.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return r(i) < r(j); });
    const auto p = b.d.cols();
    Eigen::MatrixXd a(0, p);
    Eigen::VectorXd y(0);
    for (auto i : order) {
        Eigen::MatrixXd next(a.rows() + 1, p);
        next << a, b.d.row(i);
        if (Eigen::FullPivLU<Eigen::MatrixXd>(next).rank() < next.rows()) continue;
        a = std::move(next);
        y.conservativeResize(y.size() + 1);
        y(y.size() - 1) = b.x(i);
        if (a.rows() == p) return Eigen::VectorXd(a.fullPivLu().solve(y));
    }
    return std::nullopt;
}

} // namespace

MsmFit msm_fit(std::span<const MsmRecord> records, std::span<const double> thresholds, const MsmOptions& options) {
    if (!(options.tau > 0.0 && options.tau < 1.0)) throw ConfigError("structural model tau must be in (0, 1)");
    if (options.n_knots == 1 || options.n_knots < 0) {
        throw ConfigError(fmt::format("structural model knot count must be 0 or at least 2, got {}", options.n_knots));
    }
    MsmFit fit;
    fit.tau = options.tau;
    if (options.n_knots > 0) {
        if (thresholds.empty()) throw ConfigError("structural model: no threshold regimes on the continuum");
        fit.basis = msm_basis(thresholds, options.n_knots);
        fit.q_lower = *std::min_element(thresholds.begin(), thresholds.end());
        fit.q_upper = *std::max_element(thresholds.begin(), thresholds.end());
    }
    const std::size_t j = fit.basis ? fit.basis->dimension() : 0;
    fit.alpha.assign(j + 2, 0.0);

    std::vector<double> x_inf, w_inf, x_zero, w_zero;
    SplineBlock block;
    std::vector<std::vector<double>> rows;
    std::vector<double> xs, ws;
    for (const auto& r : records) {
        if (!(r.w > 0.0)) continue;
        if (std::isinf(r.q)) {
            x_inf.push_back(r.x);
            w_inf.push_back(r.w);
        } else if (r.q == 0.0) {
            x_zero.push_back(r.x);
            w_zero.push_back(r.w);
        } else if (fit.basis) {
            rows.push_back(fit.design_row(r.q));
            xs.push_back(r.x);
            ws.push_back(r.w);
        }
    }
    if (x_inf.empty()) throw NumericalError("structural model: column I(q = inf) is degenerate (no compliant records)");
    if (x_zero.empty()) throw NumericalError("structural model: column I(q = 0) is degenerate (no compliant records)");
    fit.alpha[0] = estimate_quantile(x_inf, w_inf, options.tau);
    fit.alpha[1] = estimate_quantile(x_zero, w_zero, options.tau);
    {
        std::vector<double> r(x_inf.size());
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = x_inf[i] - fit.alpha[0];
        fit.loss = check_loss(r, w_inf, options.tau);
        r.resize(x_zero.size());
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = x_zero[i] - fit.alpha[1];
        fit.loss += check_loss(r, w_zero, options.tau);
    }
    if (!fit.basis) return fit;

    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto p = static_cast<Eigen::Index>(j);
    block.d.resize(n, p);
    block.x.resize(n);
    block.w.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < p; ++k) block.d(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k + 2)];
        block.x(i) = xs[static_cast<std::size_t>(i)];
        block.w(i) = ws[static_cast<std::size_t>(i)];
    }
    const Eigen::Index rank = n == 0 ? 0 : Eigen::ColPivHouseholderQR<Eigen::MatrixXd>(block.d).rank();
    if (rank < p) {
        throw NumericalError(fmt::format("structural model: spline columns d(q) are rank deficient (rank {} of {}); "
                                         "too few thresholds with compliant records",
                                         rank, p));
    }

    // MM iterations for the check loss, started from weighted least squares.
    const Eigen::MatrixXd dw = block.d.transpose() * block.w.asDiagonal();
    Eigen::VectorXd beta = (dw * block.d).ldlt().solve(dw * block.x);
    const double scale = 1.0 + block.x.cwiseAbs().maxCoeff();
    const double eps = 1e-9 * scale;
    fit.converged = false;
    for (int it = 1; it <= options.max_iter; ++it) {
        fit.iterations = it;
        const Eigen::VectorXd r = block.x - block.d * beta;
        const Eigen::VectorXd v = block.w.array() / (eps + r.array().abs());
        const Eigen::MatrixXd dv = block.d.transpose() * v.asDiagonal();
        const Eigen::VectorXd rhs = dv * block.x + (2.0 * options.tau - 1.0) * (block.d.transpose() * block.w);
        const Eigen::VectorXd next = (dv * block.d).ldlt().solve(rhs);
        const double change = (next - beta).cwiseAbs().maxCoeff();
        beta = next;
        if (change < options.tol * (1.0 + beta.cwiseAbs().maxCoeff())) {
            fit.converged = true;
            break;
        }
    }
    double best = block_loss(block, beta, options.tau);
    if (const auto vertex = vertex_near(block, beta)) {
        const double loss = block_loss(block, *vertex, options.tau);
        if (loss <= best) {
            best = loss;
            beta = *vertex;
        }
    }
    for (Eigen::Index k = 0; k < p; ++k) fit.alpha[static_cast<std::size_t>(k + 2)] = beta(k);
    fit.loss += best;
    return fit;
}

double msm_curve(const MsmFit& fit, double q) {
    const auto row = fit.design_row(q);
    return std::inner_product(row.begin(), row.end(), fit.alpha.begin(), 0.0);
}

double msm_contrast(const MsmFit& fit, double q, double q_ref) { return msm_curve(fit, q_ref) - msm_curve(fit, q); }

// ---------------------------------------------------------------------------
// Per-regime estimation

std::vector<StabilizedWeightSet> regime_weight_sets(const CohortDataset& cohort, const EstimationConfig& config,
                                                    std::vector<std::string>* notes) {
    std::vector<StabilizedWeightSet> sets;
    std::optional<std::vector<std::optional<double>>> denominators;
    if (config.weighted) {
        const auto model = fit_initiation_model(cohort, config.weight_model, config.t_star, config.cox);
        denominators = all_denominators(cohort, model);
    }
    TruncationOptions per_regime = config.truncation;
    if (config.pooled_truncation) per_regime.enabled = false;
    for (const auto& regime : config.regimes) {
        try {
            if (config.weighted) {
                sets.push_back(stabilized_weights(cohort, regime, *denominators, config.t_star, per_regime));
            } else {
                StabilizedWeightSet set;
                set.regime = regime;
                set.t_star = config.t_star;
                for (std::size_t i = 0; i < cohort.size(); ++i) {
                    if (!compliance_process(cohort.subjects[i], regime, config.t_star).compliant_through_follow_up()) {
                        continue;
                    }
                    SubjectWeight w;
                    w.subject = i;
                    w.numerator = w.denominator = w.raw = w.weight = 1.0;
                    set.entries.push_back(w);
                }
                if (set.entries.empty()) {
                    throw DataError(fmt::format("no compliant subjects for regime {}", regime.label()));
                }
                set.lower_clip = set.upper_clip = 1.0;
                sets.push_back(std::move(set));
            }
        } catch (const DataError& e) {
            if (notes) notes->push_back(fmt::format("regime {} skipped: {}", regime.label(), e.what()));
        }
    }
    if (config.weighted && config.pooled_truncation) truncate_pooled(sets, config.truncation);
    return sets;
}

EstimationRun run_estimation(const CohortDataset& cohort, std::span<const std::vector<CompletedOutcome>> outcomes,
                             const EstimationConfig& config) {
    if (config.regimes.empty()) throw ConfigError("no regimes to estimate");
    for (const auto& o : outcomes) {
        if (o.size() != cohort.size()) throw ConfigError("outcome table does not match the cohort");
    }
    EstimationRun run;
    run.regimes = config.regimes;
    const auto sets = regime_weight_sets(cohort, config, &run.notes);
    const std::size_t n_reg = config.regimes.size();
    std::vector<const StabilizedWeightSet*> by_regime(n_reg, nullptr);
    for (const auto& s : sets) {
        for (std::size_t r = 0; r < n_reg; ++r) {
            if (config.regimes[r] == s.regime) by_regime[r] = &s;
        }
    }
    run.n_compliant.assign(n_reg, 0);
    run.sum_weights.assign(n_reg, 0.0);
    for (std::size_t r = 0; r < n_reg; ++r) {
        if (!by_regime[r]) continue;
        run.n_compliant[r] = by_regime[r]->entries.size();
        for (const auto& e : by_regime[r]->entries) run.sum_weights[r] += e.weight;
    }

    std::vector<double> thresholds;
    for (const auto& r : config.regimes) {
        if (r.kind == RegimeKind::Threshold) thresholds.push_back(r.threshold);
    }

    run.points.assign(outcomes.size(), std::vector<PointEstimate>(n_reg, {kNaN, kNaN, kNaN}));
    run.curve.assign(outcomes.size(), std::vector<double>(n_reg, kNaN));
    for (std::size_t m = 0; m < outcomes.size(); ++m) {
        std::vector<MsmRecord> records;
        for (std::size_t r = 0; r < n_reg; ++r) {
            const auto* set = by_regime[r];
            if (!set) continue;
            std::vector<double> x, w;
            for (const auto& e : set->entries) {
                x.push_back(outcomes[m][e.subject].x);
                w.push_back(e.weight);
                records.push_back({config.regimes[r].q(), x.back(), w.back()});
            }
            auto& pe = run.points[m][r];
            pe.theta1 = estimate_mortality(x, w);
            pe.theta2 = estimate_quantile(x, w, config.msm.tau);
            const bool any_survivor = std::any_of(x.begin(), x.end(), [](double v) { return v > 0.0; });
            pe.theta3 = any_survivor ? estimate_survivor_mean(x, w) : kNaN;
        }
        if (!config.fit_msm) continue;
        try {
            const auto fit = msm_fit(records, thresholds, config.msm);
            for (std::size_t r = 0; r < n_reg; ++r) run.curve[m][r] = msm_curve(fit, config.regimes[r].q());
        } catch (const NumericalError& e) {
            if (m == 0) run.notes.push_back(fmt::format("structural model not fitted: {}", e.what()));
        }
    }
    return run;
}

// ---------------------------------------------------------------------------
// Bootstrap

CohortDataset resample_cohort(const CohortDataset& cohort, std::span<const std::size_t> indices,
                              std::vector<std::size_t>* origin) {
    std::vector<std::size_t> sorted(indices.begin(), indices.end());
    std::sort(sorted.begin(), sorted.end());
    CohortDataset out;
    out.subjects.reserve(sorted.size());
    if (origin) origin->clear();
    std::size_t copy = 0;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
        const auto i = sorted[k];
        if (i >= cohort.size()) throw ConfigError(fmt::format("resample index {} out of range", i));
        copy = (k > 0 && sorted[k - 1] == i) ? copy + 1 : 0;
        auto s = cohort.subjects[i];
        s.subject_id = fmt::format("{}#{}", s.subject_id, copy);
        if (s.visits.empty()) ++out.zero_visit_subjects;
        out.subjects.push_back(std::move(s));
        if (origin) origin->push_back(i);
    }
    return out;
}

BootstrapResult bootstrap(std::size_t n_subjects, const BootstrapOptions& options,
                          const std::function<std::vector<std::vector<double>>(std::span<const std::size_t>)>& statistic) {
    if (n_subjects == 0) throw ConfigError("bootstrap over an empty cohort");
    const std::size_t b_count = options.replicates;
    std::vector<std::optional<std::vector<std::vector<double>>>> results(b_count);
    std::vector<std::string> errors(b_count);
    parallel_for(b_count, options.workers, [&](std::size_t b) {
        std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                          static_cast<std::uint32_t>(b), 0xB007u};
        std::mt19937_64 rng(seq);
        std::uniform_int_distribution<std::size_t> pick(0, n_subjects - 1);
        std::vector<std::size_t> idx(n_subjects);
        for (auto& i : idx) i = pick(rng);
        std::sort(idx.begin(), idx.end());
        try {
            results[b] = statistic(idx);
        } catch (const Error& e) {
            errors[b] = e.what();
        }
    });

    BootstrapResult out;
    for (std::size_t b = 0; b < b_count; ++b) {
        if (!results[b]) {
            ++out.failures;
            out.failure_log.push_back(fmt::format("replicate {}: {}", b, errors[b]));
        }
    }
    if (static_cast<double>(out.failures) > options.max_failure_rate * static_cast<double>(b_count)) {
        std::string log;
        for (std::size_t k = 0; k < std::min<std::size_t>(10, out.failure_log.size()); ++k) {
            log += "\n  " + out.failure_log[k];
        }
        throw NumericalError(fmt::format("bootstrap: {} of {} replicates failed (limit {:.0f}%):{}", out.failures,
                                         b_count, 100.0 * options.max_failure_rate, log));
    }

    const std::vector<std::vector<double>>* shape = nullptr;
    for (const auto& r : results) {
        if (r) {
            shape = &*r;
            break;
        }
    }
    if (!shape) return out;
    out.variance.resize(shape->size());
    for (std::size_t g = 0; g < shape->size(); ++g) {
        out.variance[g].assign((*shape)[g].size(), kNaN);
        for (std::size_t k = 0; k < (*shape)[g].size(); ++k) {
            double n = 0.0, mean = 0.0, m2 = 0.0;
            for (const auto& r : results) {
                if (!r) continue;
                if (r->size() != shape->size() || (*r)[g].size() != (*shape)[g].size()) {
                    throw NumericalError("bootstrap: replicate statistics differ in shape");
                }
                const double v = (*r)[g][k];
                if (std::isnan(v)) continue;
                n += 1.0;
                const double delta = v - mean;
                mean += delta / n;
                m2 += delta * (v - mean);
            }
            if (n >= 2.0) out.variance[g][k] = m2 / (n - 1.0);
        }
    }
    return out;
}

namespace {

// Values per imputation, regime-major: theta1, theta2, theta3, curve, contrast.
constexpr std::size_t kValuesPerRegime = 5;

std::vector<std::vector<double>> flatten(const EstimationRun& run) {
    std::optional<std::size_t> immediate;
    for (std::size_t r = 0; r < run.regimes.size(); ++r) {
        if (run.regimes[r].kind == RegimeKind::Immediate) immediate = r;
    }
    std::vector<std::vector<double>> out(run.points.size());
    for (std::size_t m = 0; m < run.points.size(); ++m) {
        auto& v = out[m];
        for (std::size_t r = 0; r < run.regimes.size(); ++r) {
            const auto& p = run.points[m][r];
            v.push_back(p.theta1);
            v.push_back(p.theta2);
            v.push_back(p.theta3);
            v.push_back(run.curve[m][r]);
            v.push_back(immediate ? run.curve[m][*immediate] - run.curve[m][r] : kNaN);
        }
    }
    return out;
}

TargetSummary summarize(const std::vector<std::vector<double>>& point, const BootstrapResult* boot, std::size_t k) {
    std::vector<double> est, var;
    for (std::size_t m = 0; m < point.size(); ++m) {
        est.push_back(point[m][k]);
        var.push_back(boot && !boot->variance.empty() ? boot->variance[m][k] : kNaN);
    }
    TargetSummary s;
    s.estimate = std::accumulate(est.begin(), est.end(), 0.0) / static_cast<double>(est.size());
    const bool have_var = std::none_of(var.begin(), var.end(), [](double v) { return std::isnan(v); });
    if (std::isnan(s.estimate) || !have_var || est.size() < 2) {
        s.variance = s.df = s.ci_lower = s.ci_upper = kNaN;
        return s;
    }
    const auto rubin = rubin_combine(est, var);
    s.estimate = rubin.estimate;
    s.variance = rubin.total_variance;
    s.df = rubin.df;
    s.ci_lower = s.estimate - 1.96 * std::sqrt(s.variance);
    s.ci_upper = s.estimate + 1.96 * std::sqrt(s.variance);
    return s;
}

} // namespace

EstimationSummary bootstrap_pipeline(const CohortDataset& cohort, const ImputedCohort& imputed,
                                     const EstimationConfig& config, const BootstrapOptions& options) {
    if (options.replicates > 0 && options.replicates < 50) {
        throw ConfigError(fmt::format("bootstrap needs at least 50 replicates, got {}", options.replicates));
    }
    if (imputed.data.empty()) throw ConfigError("no imputed datasets");

    const auto run = run_estimation(cohort, imputed.data, config);
    const auto point = flatten(run);

    std::optional<BootstrapResult> boot;
    if (options.replicates > 0) {
        boot = bootstrap(cohort.size(), options, [&](std::span<const std::size_t> idx) {
            std::vector<std::size_t> origin;
            const auto sample = resample_cohort(cohort, idx, &origin);
            std::vector<std::vector<CompletedOutcome>> outcomes(imputed.m());
            for (std::size_t m = 0; m < imputed.m(); ++m) {
                outcomes[m].reserve(origin.size());
                for (auto i : origin) outcomes[m].push_back(imputed.data[m][i]);
            }
            return flatten(run_estimation(sample, outcomes, config));
        });
    }

    EstimationSummary out;
    out.t_star = config.t_star;
    out.notes = run.notes;
    out.bootstrap_replicates = options.replicates;
    if (boot) {
        out.bootstrap_failures = boot->failures;
        for (const auto& f : boot->failure_log) out.notes.push_back("bootstrap " + f);
    }
    const BootstrapResult* b = boot ? &*boot : nullptr;
    for (std::size_t r = 0; r < run.regimes.size(); ++r) {
        const std::size_t base = r * kValuesPerRegime;
        RegimeEstimate e;
        e.regime = run.regimes[r];
        e.t_star = config.t_star;
        e.theta1 = summarize(point, b, base);
        e.theta2 = summarize(point, b, base + 1);
        e.theta3 = summarize(point, b, base + 2);
        e.n_compliant = run.n_compliant[r];
        e.sum_weights = run.sum_weights[r];
        out.regimes.push_back(e);
        if (config.fit_msm) {
            CurvePoint c;
            c.regime = run.regimes[r];
            c.value = summarize(point, b, base + 3);
            c.contrast = summarize(point, b, base + 4);
            out.curve.push_back(c);
        }
    }
    return out;
}

namespace {

std::string number(double v) {
    if (std::isnan(v)) return "NA";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return fmt::format("{}", v);
}

std::string target_cells(const TargetSummary& t) {
    return fmt::format("{},{},{},{}", number(t.estimate), number(t.variance), number(t.ci_lower), number(t.ci_upper));
}

} // namespace

std::string results_table(std::span<const EstimationSummary> summaries) {
    std::string out =
        "regime,t_star,theta1,theta1_var,theta1_ci_lo,theta1_ci_hi,theta2,theta2_var,theta2_ci_lo,theta2_ci_hi,"
        "theta3,theta3_var,theta3_ci_lo,theta3_ci_hi,n_compliant,sum_weights\n";
    for (const auto& s : summaries) {
        for (const auto& r : s.regimes) {
            out += fmt::format("{},{},{},{},{},{},{}\n", r.regime.label(), number(r.t_star), target_cells(r.theta1),
                               target_cells(r.theta2), target_cells(r.theta3), r.n_compliant, number(r.sum_weights));
        }
    }
    return out;
}

std::string curve_table(std::span<const EstimationSummary> summaries) {
    std::string out = "t_star,q,estimate,ci_lo,ci_hi,contrast,contrast_ci_lo,contrast_ci_hi\n";
    for (const auto& s : summaries) {
        for (const auto& c : s.curve) {
            out += fmt::format("{},{},{},{},{},{},{},{}\n", number(s.t_star), number(c.regime.q()),
                               number(c.value.estimate), number(c.value.ci_lower), number(c.value.ci_upper),
                               number(c.contrast.estimate), number(c.contrast.ci_lower), number(c.contrast.ci_upper));
        }
    }
    return out;
}

} // namespace dtr
