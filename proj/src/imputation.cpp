#include "dtr/imputation.hpp"

#include "dtr/errors.hpp"
#include "dtr/parallel.hpp"
#include "dtr/regimes.hpp"

#include <fmt/core.h>
#include <fmt/ranges.h>
#include <gsl/gsl_blas.h>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

namespace dtr {

namespace {

constexpr double kDaysPerYear = 365.25;

constexpr CdcClass kCdcLevels[] = {CdcClass::Mild, CdcClass::Moderate, CdcClass::Severe, CdcClass::Asymptomatic,
                                   CdcClass::Missing};

bool treated_before(const SubjectHistory& s, double t) { return s.initiation_time && *s.initiation_time < t; }

double years_since_initiation(const SubjectHistory& s, double t) {
    return treated_before(s, t) ? (t - *s.initiation_time) / kDaysPerYear : 0.0;
}

// Natural spline with lower boundary 0, so every no-intercept column vanishes at 0.
std::optional<NaturalSplineBasis> anchored_basis(const std::vector<double>& values, int n_interior) {
    if (values.empty()) return std::nullopt;
    const double hi = *std::max_element(values.begin(), values.end());
    if (!(hi > 0.0)) return std::nullopt;
    std::vector<double> interior;
    const auto knots = quantile_knots(values, n_interior);
    for (std::size_t j = 1; j + 1 < knots.size(); ++j) {
        if (knots[j] > 0.0 && knots[j] < hi) interior.push_back(knots[j]);
    }
    return NaturalSplineBasis::build(interior, {0.0, hi});
}

} // namespace

Cd4Design Cd4Design::build(const CohortDataset& cohort, const Cd4ModelSpec& spec) {
    if (spec.time_interior_knots < 0 || spec.tsi_interior_knots < 0) {
        throw ConfigError("CD4 model spline knot counts must be non-negative");
    }
    Cd4Design d;
    d.spec_ = spec;
    std::vector<double> times, tsi;
    for (const auto& s : cohort.subjects) {
        for (const auto& v : s.visits) {
            if (!v.cd4) continue;
            times.push_back(v.time / kDaysPerYear);
            if (treated_before(s, v.time)) tsi.push_back(years_since_initiation(s, v.time));
        }
    }
    if (times.empty()) throw DataError("CD4 model: no CD4 observations");

    const auto [tmin, tmax] = std::minmax_element(times.begin(), times.end());
    if (*tmax > *tmin) d.time_ = NaturalSplineBasis::from_knots(quantile_knots(times, spec.time_interior_knots));
    d.tsi_ = anchored_basis(tsi, spec.tsi_interior_knots);
    d.random_slope_ = spec.random_slope && std::any_of(tsi.begin(), tsi.end(), [](double u) { return u > 0.0; });

    d.full_names_.push_back("intercept");
    if (d.time_) {
        for (std::size_t j = 1; j < d.time_->dimension(); ++j) d.full_names_.push_back(fmt::format("time_ns{}", j));
    }
    d.full_names_.push_back("treated");
    if (d.tsi_) {
        for (std::size_t j = 1; j < d.tsi_->dimension(); ++j) d.full_names_.push_back(fmt::format("tsi_ns{}", j));
    }
    if (spec.age) d.full_names_.push_back("age");
    if (spec.sex) d.full_names_.push_back("male");
    if (spec.cdc_class) {
        for (auto level : kCdcLevels) d.full_names_.push_back(fmt::format("cdc_{}", to_string(level)));
    }

    // Stack every observation to find constant columns and the CDC reference.
    std::vector<std::vector<double>> rows;
    std::optional<CdcClass> reference;
    for (const auto& s : cohort.subjects) {
        for (const auto& v : s.visits) {
            if (!v.cd4) continue;
            rows.push_back(d.full_row(s, v.time));
        }
    }
    if (spec.cdc_class) {
        for (auto level : kCdcLevels) {
            const bool present = std::any_of(cohort.subjects.begin(), cohort.subjects.end(), [&](const auto& s) {
                return s.baseline.cdc_class == level &&
                       std::any_of(s.visits.begin(), s.visits.end(), [](const Visit& v) { return v.cd4.has_value(); });
            });
            if (present) {
                reference = level;
                break;
            }
        }
    }
    for (std::size_t j = 0; j < d.full_names_.size(); ++j) {
        if (j > 0) {
            const bool constant = std::all_of(rows.begin(), rows.end(), [&](const auto& r) { return r[j] == rows[0][j]; });
            if (constant) continue;
            if (reference && d.full_names_[j] == fmt::format("cdc_{}", to_string(*reference))) continue;
        }
        d.kept_.push_back(j);
        d.names_.push_back(d.full_names_[j]);
    }

    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d.kept_.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < d.kept_.size(); ++j) {
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][d.kept_[j]];
        }
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    if (qr.rank() < x.cols()) {
        throw NumericalError(fmt::format("CD4 model: collinear fixed effects (rank {} of {} columns: {})", qr.rank(),
                                         x.cols(), fmt::join(d.names_, ", ")));
    }
    return d;
}

std::vector<double> Cd4Design::full_row(const SubjectHistory& s, double t) const {
    std::vector<double> row;
    row.reserve(full_names_.size());
    row.push_back(1.0);
    if (time_) {
        const auto v = time_->evaluate_no_intercept(t / kDaysPerYear);
        row.insert(row.end(), v.begin(), v.end());
    }
    const bool treated = treated_before(s, t);
    row.push_back(treated ? 1.0 : 0.0);
    if (tsi_) {
        if (treated) {
            const auto v = tsi_->evaluate_no_intercept(years_since_initiation(s, t));
            row.insert(row.end(), v.begin(), v.end());
        } else {
            row.insert(row.end(), tsi_->dimension() - 1, 0.0);
        }
    }
    if (spec_.age) row.push_back(s.baseline.age_at_diagnosis);
    if (spec_.sex) row.push_back(s.baseline.sex == Sex::Male ? 1.0 : 0.0);
    if (spec_.cdc_class) {
        for (auto level : kCdcLevels) row.push_back(s.baseline.cdc_class == level ? 1.0 : 0.0);
    }
    return row;
}

Eigen::VectorXd Cd4Design::fixed_row(const SubjectHistory& subject, double t) const {
    const auto full = full_row(subject, t);
    Eigen::VectorXd out(static_cast<Eigen::Index>(kept_.size()));
    for (std::size_t j = 0; j < kept_.size(); ++j) out(static_cast<Eigen::Index>(j)) = full[kept_[j]];
    return out;
}

Eigen::VectorXd Cd4Design::random_row(const SubjectHistory& subject, double t) const {
    Eigen::VectorXd z(static_cast<Eigen::Index>(n_random()));
    z(0) = 1.0;
    if (random_slope_) z(1) = years_since_initiation(subject, t);
    return z;
}

namespace {

std::optional<Cd4Block> subject_block(const SubjectHistory& s, std::size_t index, const Cd4Design& design,
                                      double until) {
    std::vector<const Visit*> obs;
    for (const auto& v : s.visits) {
        if (v.time > until) break;
        if (v.cd4) obs.push_back(&v);
    }
    if (obs.empty()) return std::nullopt;
    const auto n = static_cast<Eigen::Index>(obs.size());
    Cd4Block b;
    b.subject = index;
    b.x.resize(n, static_cast<Eigen::Index>(design.fixed_names().size()));
    b.z.resize(n, static_cast<Eigen::Index>(design.n_random()));
    b.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& v = *obs[static_cast<std::size_t>(i)];
        b.x.row(i) = design.fixed_row(s, v.time).transpose();
        b.z.row(i) = design.random_row(s, v.time).transpose();
        b.y(i) = std::sqrt(*v.cd4);
    }
    return b;
}

struct Profile {
    double loglik = 0.0;
    Eigen::VectorXd beta;
    double sigma2 = 0.0;
};

Eigen::MatrixXd cholesky_factor(const double* theta, Eigen::Index q) {
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(q, q);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < q; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) l(i, j) = i == j ? std::exp(theta[k++]) : theta[k++];
    }
    return l;
}

// beta and sigma^2 profiled out for relative covariance psi = omega / sigma^2.
Profile profile(std::span<const Cd4Block> blocks, const Eigen::MatrixXd& psi) {
    // Whiten each block by the Cholesky factor of H = I + Z psi Z' and solve
    // the stacked least-squares problem; residuals are formed directly so a
    // near-exact fit keeps its relative precision.
    Eigen::Index n = 0;
    for (const auto& b : blocks) n += b.y.size();
    const auto p = blocks.front().x.cols();
    Eigen::MatrixXd xw(n, p);
    Eigen::VectorXd yw(n);
    double logdet = 0.0;
    Eigen::Index row = 0;
    for (const auto& b : blocks) {
        const auto m = b.y.size();
        const Eigen::MatrixXd h = Eigen::MatrixXd::Identity(m, m) + b.z * psi * b.z.transpose();
        const Eigen::LLT<Eigen::MatrixXd> llt(h);
        const auto lower = llt.matrixL();
        xw.middleRows(row, m) = lower.solve(b.x);
        yw.segment(row, m) = lower.solve(b.y);
        logdet += 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        row += m;
    }
    Profile out;
    out.beta = xw.householderQr().solve(yw);
    const double nd = static_cast<double>(n);
    out.sigma2 = std::max((yw - xw * out.beta).squaredNorm() / nd, 1e-300);
    out.loglik = -0.5 * (nd * std::log(2.0 * std::numbers::pi * out.sigma2) + logdet + nd);
    return out;
}

struct Objective {
    std::span<const Cd4Block> blocks;
    Eigen::Index q = 1;
    double n_obs = 1.0;

    [[nodiscard]] double value(const double* theta) const {
        const auto l = cholesky_factor(theta, q);
        const double ll = profile(blocks, l * l.transpose()).loglik;
        return std::isfinite(ll) ? -ll / n_obs : 1e300;
    }
};

double gsl_f(const gsl_vector* v, void* params) {
    return static_cast<const Objective*>(params)->value(v->data);
}

void gsl_df(const gsl_vector* v, void* params, gsl_vector* g) {
    const auto* obj = static_cast<const Objective*>(params);
    std::vector<double> theta(v->data, v->data + v->size);
    for (std::size_t k = 0; k < v->size; ++k) {
        const double h = 1e-5 * std::max(1.0, std::abs(theta[k]));
        const double orig = theta[k];
        theta[k] = orig + h;
        const double fp = obj->value(theta.data());
        theta[k] = orig - h;
        const double fm = obj->value(theta.data());
        theta[k] = orig;
        gsl_vector_set(g, k, (fp - fm) / (2.0 * h));
    }
}

void gsl_fdf(const gsl_vector* v, void* params, double* f, gsl_vector* g) {
    *f = gsl_f(v, params);
    gsl_df(v, params, g);
}

Cd4Posterior posterior_from_block(const Cd4Block* block, const Eigen::VectorXd& beta, const Eigen::MatrixXd& omega,
                                  double sigma) {
    if (block == nullptr) return {Eigen::VectorXd::Zero(omega.rows()), omega};
    const double s2 = sigma * sigma;
    const Eigen::MatrixXd v =
        s2 * Eigen::MatrixXd::Identity(block->y.size(), block->y.size()) + block->z * omega * block->z.transpose();
    const Eigen::LLT<Eigen::MatrixXd> llt(v);
    const Eigen::MatrixXd oz = omega * block->z.transpose();
    Cd4Posterior post;
    post.mode = oz * llt.solve(block->y - block->x * beta);
    post.covariance = omega - oz * llt.solve(oz.transpose());
    return post;
}

} // namespace

std::vector<Cd4Block> cd4_blocks(const CohortDataset& cohort, const Cd4Design& design, double until) {
    std::vector<Cd4Block> out;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        if (auto b = subject_block(cohort.subjects[i], i, design, until)) out.push_back(std::move(*b));
    }
    return out;
}

double cd4_marginal_loglik(std::span<const Cd4Block> blocks, const Eigen::VectorXd& beta,
                           const Eigen::MatrixXd& omega, double sigma) {
    double ll = 0.0;
    for (const auto& b : blocks) {
        const auto n = b.y.size();
        const Eigen::MatrixXd v =
            sigma * sigma * Eigen::MatrixXd::Identity(n, n) + b.z * omega * b.z.transpose();
        const Eigen::LLT<Eigen::MatrixXd> llt(v);
        if (llt.info() != Eigen::Success) throw NumericalError("marginal covariance is not positive definite");
        const Eigen::VectorXd r = b.y - b.x * beta;
        const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        ll -= 0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi) + logdet + r.dot(llt.solve(r)));
    }
    return ll;
}

Cd4Posterior Cd4MixedModelFit::posterior(const SubjectHistory& subject, double until) const {
    const auto block = subject_block(subject, 0, design, until);
    return posterior_from_block(block ? &*block : nullptr, beta, omega, sigma);
}

double Cd4MixedModelFit::predict(const SubjectHistory& subject, const Cd4Posterior& post, double t) const {
    return design.fixed_row(subject, t).dot(beta) + design.random_row(subject, t).dot(post.mode);
}

Cd4MixedModelFit fit_cd4_model(const CohortDataset& cohort, const Cd4ModelSpec& spec, const Cd4FitOptions& options) {
    const std::size_t repeated = static_cast<std::size_t>(std::count_if(
        cohort.subjects.begin(), cohort.subjects.end(), [](const SubjectHistory& s) {
            return std::count_if(s.visits.begin(), s.visits.end(), [](const Visit& v) { return v.cd4.has_value(); }) >= 2;
        }));
    if (repeated < 2) {
        throw DataError(fmt::format("CD4 model needs at least two subjects with two CD4 values, found {}", repeated));
    }

    Cd4MixedModelFit fit;
    fit.design = Cd4Design::build(cohort, spec);
    const auto blocks = cd4_blocks(cohort, fit.design);
    const auto q = static_cast<Eigen::Index>(fit.design.n_random());
    double n_obs = 0.0;
    for (const auto& b : blocks) n_obs += static_cast<double>(b.y.size());

    Objective objective{blocks, q, n_obs};
    const std::size_t n_theta = static_cast<std::size_t>(q * (q + 1) / 2);

    gsl_set_error_handler_off();
    gsl_multimin_function_fdf fdf;
    fdf.n = n_theta;
    fdf.f = gsl_f;
    fdf.df = gsl_df;
    fdf.fdf = gsl_fdf;
    fdf.params = &objective;

    gsl_vector* start = gsl_vector_calloc(n_theta); // psi = identity
    gsl_multimin_fdfminimizer* solver = gsl_multimin_fdfminimizer_alloc(gsl_multimin_fdfminimizer_vector_bfgs2, n_theta);
    gsl_multimin_fdfminimizer_set(solver, &fdf, start, 0.1, 0.1);

    bool converged = false;
    bool stalled = false;
    int status = GSL_CONTINUE;
    double restart_f = solver->f;
    fit.trace.push_back(-solver->f * n_obs);
    for (int iter = 1; iter <= options.max_iter; ++iter) {
        status = gsl_multimin_fdfminimizer_iterate(solver);
        fit.iterations = iter;
        if (status == GSL_SUCCESS) fit.trace.push_back(-solver->f * n_obs);
        if (gsl_blas_dnrm2(solver->gradient) < options.tol) {
            converged = true;
            break;
        }
        if (status != GSL_SUCCESS) {
            // Line search failed: restart from the current point while that still gains.
            if (restart_f - solver->f > 1e-12 * std::abs(solver->f)) {
                restart_f = solver->f;
                gsl_multimin_fdfminimizer_restart(solver);
                continue;
            }
            stalled = true;
            break;
        }
    }
    std::vector<double> theta(solver->x->data, solver->x->data + n_theta);
    const double gnorm = gsl_blas_dnrm2(solver->gradient);
    gsl_multimin_fdfminimizer_free(solver);
    gsl_vector_free(start);

    for (std::size_t k = 1; k < fit.trace.size(); ++k) {
        if (fit.trace[k] < fit.trace[k - 1] - 1e-10 * std::abs(fit.trace[k - 1])) {
            throw NumericalError(fmt::format("CD4 model: log-likelihood decreased at iteration {} ({} -> {})", k,
                                             fit.trace[k - 1], fit.trace[k]));
        }
    }
    const auto l = cholesky_factor(theta.data(), q);
    // Stalling while a variance component collapses is a boundary solution:
    // the likelihood keeps flattening as the component goes to 0.
    const bool collapsing = (l.diagonal().array() < 1e-2).any();
    if (!converged && !(stalled && collapsing)) {
        const auto tail = std::vector<double>(fit.trace.end() - std::min<std::ptrdiff_t>(5, fit.trace.size()),
                                              fit.trace.end());
        throw NumericalError(fmt::format(
            "CD4 model did not converge after {} iterations (gradient norm {:.3g}, status '{}'); last log-likelihoods: {}",
            fit.iterations, gnorm, gsl_strerror(status), fmt::join(tail, ", ")));
    }

    const auto prof = profile(blocks, l * l.transpose());
    fit.beta = prof.beta;
    fit.sigma = std::sqrt(prof.sigma2);
    fit.omega = prof.sigma2 * l * l.transpose();
    fit.log_likelihood = prof.loglik;

    // A conditional random-effect sd below 1e-3 residual sd is a singular omega.
    fit.boundary = !converged || (l.diagonal().array() < 1e-3).any();
    if (fit.boundary && !options.allow_boundary) {
        throw NumericalError(fmt::format("CD4 model: boundary estimate, random-effects covariance is singular "
                                         "(omega diagonal {})",
                                         fmt::join(std::vector<double>(fit.omega.diagonal().begin(),
                                                                       fit.omega.diagonal().end()),
                                                   ", ")));
    }

    fit.posteriors.resize(cohort.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const Cd4Block* b = (k < blocks.size() && blocks[k].subject == i) ? &blocks[k++] : nullptr;
        fit.posteriors[i] = posterior_from_block(b, fit.beta, fit.omega, fit.sigma);
    }
    return fit;
}

NormalDraw cd4_predictive(const Cd4MixedModelFit& fit, const SubjectHistory& subject, double t, double until) {
    const auto post = fit.posterior(subject, until);
    const Eigen::VectorXd z = fit.design.random_row(subject, t);
    NormalDraw out;
    out.mean = fit.predict(subject, post, t);
    out.sd = std::sqrt(z.dot(post.covariance * z) + fit.sigma * fit.sigma);
    return out;
}

// ---------------------------------------------------------------------------
// Death model

namespace {

// Days at which the death-model covariates change: the refresh grid, visits and initiation.
std::vector<double> death_breakpoints(const SubjectHistory& s, double until, double refresh) {
    std::set<double> days;
    for (double d = 0.0; d - kSameDayOffset < until; d += refresh) days.insert(d);
    for (const auto& v : s.visits) {
        if (v.time - kSameDayOffset < until) days.insert(v.time);
    }
    if (s.initiation_time && *s.initiation_time - kSameDayOffset < until) days.insert(*s.initiation_time);
    return {days.begin(), days.end()};
}

std::vector<double> death_full_row(const DeathModelFit& d, const SubjectHistory& s, double m_hat, double day) {
    std::vector<double> row;
    if (d.cd4_basis) {
        const auto v = d.cd4_basis->evaluate_no_intercept(m_hat);
        row.insert(row.end(), v.begin(), v.end());
    }
    if (d.spec.treatment) row.push_back(s.treated_at(day) ? 1.0 : 0.0);
    if (d.spec.age) row.push_back(s.baseline.age_at_diagnosis);
    if (d.spec.sex) row.push_back(s.baseline.sex == Sex::Male ? 1.0 : 0.0);
    return row;
}

std::vector<double> select(const std::vector<double>& full, const std::vector<std::size_t>& kept) {
    std::vector<double> out;
    out.reserve(kept.size());
    for (auto j : kept) out.push_back(full[j]);
    return out;
}

} // namespace

CovariatePath DeathModelFit::path(const SubjectHistory& subject, const Cd4MixedModelFit& cd4,
                                  const Cd4Posterior& post, double until) const {
    CovariatePath out;
    const auto days = death_breakpoints(subject, until, spec.refresh_days);
    for (double day : days) {
        const double m_hat = cd4.predict(subject, post, day);
        out.push(day - kSameDayOffset, select(death_full_row(*this, subject, m_hat, day), kept));
    }
    return out;
}

DeathModelFit fit_death_model(const CohortDataset& cohort, const Cd4MixedModelFit& cd4_fit,
                              const DeathModelSpec& spec, const CoxOptions& options) {
    if (!(spec.refresh_days > 0.0)) throw ConfigError("death model refresh_days must be positive");
    if (cd4_fit.posteriors.size() != cohort.size()) {
        throw ConfigError("death model: CD4 fit belongs to a different cohort");
    }
    DeathModelFit d;
    d.spec = spec;

    struct Row {
        std::size_t subject;
        double start, stop, m_hat, day;
        bool event;
    };
    std::vector<Row> rows;
    std::vector<double> m_values;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& s = cohort.subjects[i];
        if (s.visits.empty()) continue;
        const double end = s.observation_end();
        const auto days = death_breakpoints(s, end, spec.refresh_days);
        for (std::size_t k = 0; k < days.size(); ++k) {
            const double start = days[k] - kSameDayOffset;
            const double stop = k + 1 < days.size() ? days[k + 1] - kSameDayOffset : end;
            const double m_hat = cd4_fit.predict(s, cd4_fit.posteriors[i], days[k]);
            const bool event = k + 1 == days.size() && s.death_time.has_value();
            rows.push_back({i, start, stop, m_hat, days[k], event});
            m_values.push_back(m_hat);
        }
    }
    if (std::none_of(rows.begin(), rows.end(), [](const Row& r) { return r.event; })) {
        throw DataError("death model: no events (no deaths observed)");
    }

    if (spec.cd4_interior_knots >= 0 && !m_values.empty()) {
        const auto [mn, mx] = std::minmax_element(m_values.begin(), m_values.end());
        if (*mx > *mn) d.cd4_basis = NaturalSplineBasis::from_knots(quantile_knots(m_values, spec.cd4_interior_knots));
    }
    if (d.cd4_basis) {
        for (std::size_t j = 1; j < d.cd4_basis->dimension(); ++j) d.full_names.push_back(fmt::format("cd4_ns{}", j));
    }
    if (spec.treatment) d.full_names.push_back("treated");
    if (spec.age) d.full_names.push_back("age");
    if (spec.sex) d.full_names.push_back("male");

    std::vector<std::vector<double>> full;
    full.reserve(rows.size());
    for (const auto& r : rows) full.push_back(death_full_row(d, cohort.subjects[r.subject], r.m_hat, r.day));
    std::vector<std::string> names;
    for (std::size_t j = 0; j < d.full_names.size(); ++j) {
        const bool constant = std::all_of(full.begin(), full.end(), [&](const auto& x) { return x[j] == full[0][j]; });
        if (constant) continue;
        d.kept.push_back(j);
        names.push_back(d.full_names[j]);
    }
    IntervalData data(names);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& r = rows[k];
        data.add(r.subject, r.start, r.stop, select(full[k], d.kept), r.event);
    }
    d.fit = cox_fit(data, options);
    return d;
}

double conditional_death_probability(const SubjectHistory& subject, const Cd4MixedModelFit& cd4_fit,
                                     const DeathModelFit& death_fit, double t_star) {
    const double u = subject.follow_up(t_star);
    if (subject.dead_by(u)) return 1.0;
    if (u >= t_star) return 0.0;
    const auto post = cd4_fit.posterior(subject, u);
    const auto path = death_fit.path(subject, cd4_fit, post, t_star);
    const double delta =
        cumulative_hazard_at(death_fit.fit, path, t_star) - cumulative_hazard_at(death_fit.fit, path, u);
    return std::clamp(1.0 - std::exp(-delta), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Imputation

ImputedCohort impute(const CohortDataset& cohort, const Cd4MixedModelFit& cd4_fit, const DeathModelFit& death_fit,
                     double t_star, OutcomeWindow window, const ImputationOptions& options) {
    if (options.m < 2) throw ConfigError(fmt::format("number of imputations must be at least 2, got {}", options.m));
    if (!(options.floor > 0.0)) throw ConfigError("imputation floor must be positive");

    ImputedCohort out;
    out.t_star = t_star;
    out.window = window;
    out.seed = options.seed;

    struct Plan {
        bool observed = true;
        double p_death = 0.0;
        NormalDraw z;
    };
    std::vector<Plan> plans(cohort.size());
    out.observed.reserve(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& s = cohort.subjects[i];
        out.observed.push_back(extract_outcome(s, t_star, window));
        auto& plan = plans[i];
        plan.observed = out.observed.back().observed();
        if (plan.observed) continue;
        if (s.follow_up(t_star) < t_star) {
            plan.p_death = conditional_death_probability(s, cd4_fit, death_fit, t_star);
        }
        plan.z = cd4_predictive(cd4_fit, s, t_star, t_star);
    }

    const double root_floor = std::sqrt(options.floor);
    out.data.assign(options.m, std::vector<CompletedOutcome>(cohort.size()));
    parallel_for(options.m, options.workers, [&](std::size_t m) {
        std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                          static_cast<std::uint32_t>(m)};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);
        auto& completed = out.data[m];
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            const auto& plan = plans[i];
            auto& c = completed[i];
            if (plan.observed) {
                const auto& o = out.observed[i];
                c.dead = o.status == OutcomeStatus::Dead;
                c.x = *o.x_value;
                continue;
            }
            c.imputed = true;
            if (plan.p_death > 0.0 && unif(rng) < plan.p_death) {
                c.dead = true;
                c.x = 0.0;
                continue;
            }
            const double y = plan.z.mean + plan.z.sd * normal(rng);
            c.x = y < root_floor ? options.floor : y * y;
        }
    });
    return out;
}

std::string imputed_table(const CohortDataset& cohort, const ImputedCohort& imputed) {
    std::string out = "imputation,subject_id,status,dead,x,imputed\n";
    for (std::size_t m = 0; m < imputed.m(); ++m) {
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            const auto& c = imputed.data[m][i];
            out += fmt::format("{},{},{},{},{},{}\n", m + 1, cohort.subjects[i].subject_id,
                               to_string(imputed.observed[i].status), c.dead ? 1 : 0, c.x, c.imputed ? 1 : 0);
        }
    }
    return out;
}

RubinResult rubin_combine(std::span<const double> estimates, std::span<const double> variances) {
    const std::size_t m = estimates.size();
    if (m < 2) throw ConfigError(fmt::format("Rubin's rules need at least 2 imputations, got {}", m));
    if (variances.size() != m) {
        throw ConfigError(fmt::format("{} estimates but {} variances", m, variances.size()));
    }
    for (double v : variances) {
        if (!(v >= 0.0)) throw ConfigError(fmt::format("variance must be non-negative, got {}", v));
    }
    const double md = static_cast<double>(m);
    RubinResult r;
    for (std::size_t k = 0; k < m; ++k) {
        r.estimate += estimates[k];
        r.within += variances[k];
    }
    r.estimate /= md;
    r.within /= md;
    for (double e : estimates) r.between += (e - r.estimate) * (e - r.estimate);
    r.between /= md - 1.0;
    const double inflated = (1.0 + 1.0 / md) * r.between;
    r.total_variance = r.within + inflated;
    if (r.between == 0.0) {
        r.df = std::numeric_limits<double>::infinity();
    } else {
        const double ratio = 1.0 + r.within / inflated;
        r.df = (md - 1.0) * ratio * ratio;
    }
    return r;
}

} // namespace dtr
