#include "dtr/errors.hpp"
#include "dtr/imputation.hpp"
#include "dtr/regimes.hpp"

#include <doctest.h>
#include <fmt/ranges.h>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_integration.h>

#include <array>
#include <cmath>
#include <numbers>
#include <random>

using namespace dtr;

namespace {

constexpr double kYear = 365.25;

// Visits every 90 days to day 720; even subjects initiate at day 180.
CohortDataset visit_skeleton(int n, bool with_deaths = true) {
    CohortDataset c;
    for (int i = 0; i < n; ++i) {
        SubjectHistory s;
        s.subject_id = fmt::format("s{:04d}", i);
        s.baseline.age_at_diagnosis = 1.0 + 0.1 * (i % 50);
        s.baseline.sex = i % 3 == 0 ? Sex::Male : Sex::Female;
        s.baseline.cdc_class = i % 4 == 0 ? CdcClass::Severe : CdcClass::Mild;
        const bool dies = with_deaths && i % 7 == 0;
        const double death = 100.0 + 37.0 * (i % 17);
        for (double t = 0; t <= 720; t += 90) {
            if (dies && t >= death) break;
            Visit v;
            v.time = t;
            v.cd4 = 400.0;
            v.art_status = i % 2 == 0 && t >= 180;
            s.visits.push_back(v);
        }
        if (dies) {
            s.death_time = death;
        } else {
            s.censor_time = 760.0;
        }
        validate_subject(s);
        c.subjects.push_back(s);
    }
    return c;
}

struct LmeTruth {
    double intercept = 22.0;
    double slope = -1.5;     // per year
    double jump = 1.0;       // at initiation
    double recovery = 2.0;   // per year since initiation
    double sd0 = 2.0;
    double sd1 = 0.8;
    double sigma = 1.2;
};

void fill_cd4(CohortDataset& c, const LmeTruth& truth, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    for (auto& s : c.subjects) {
        const double b0 = truth.sd0 * z(rng);
        const double b1 = truth.sd1 * z(rng);
        for (auto& v : s.visits) {
            const double tsi = s.initiation_time && *s.initiation_time < v.time ? (v.time - *s.initiation_time) / kYear : 0.0;
            const bool treated = s.initiation_time && *s.initiation_time < v.time;
            const double y = truth.intercept + b0 + truth.slope * v.time / kYear +
                             (treated ? truth.jump + (truth.recovery + b1) * tsi : 0.0) + truth.sigma * z(rng);
            v.cd4 = std::max(y, 1.0) * std::max(y, 1.0);
        }
    }
}

Cd4ModelSpec linear_spec() {
    Cd4ModelSpec spec;
    spec.time_interior_knots = 0;
    spec.tsi_interior_knots = 0;
    spec.age = spec.sex = spec.cdc_class = false;
    return spec;
}

// Two-dimensional Gaussian random-effects integral by nested adaptive quadrature.
struct QuadratureToy {
    Cd4Block block;
    Eigen::VectorXd beta;
    Eigen::MatrixXd omega;
    double sigma;
    double b0 = 0.0;
};

double integrand(const QuadratureToy& t, double b0, double b1) {
    const Eigen::Vector2d b(b0, b1);
    const Eigen::VectorXd mean = t.block.x * t.beta + t.block.z * b;
    double log_f = 0.0;
    for (Eigen::Index j = 0; j < t.block.y.size(); ++j) {
        const double r = (t.block.y(j) - mean(j)) / t.sigma;
        log_f += -0.5 * r * r - std::log(t.sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    const Eigen::Matrix2d inv = t.omega.inverse();
    log_f += -0.5 * b.dot(inv * b) - 0.5 * std::log(t.omega.determinant()) - std::log(2.0 * std::numbers::pi);
    return std::exp(log_f);
}

double inner(double b1, void* p) {
    const auto* t = static_cast<const QuadratureToy*>(p);
    return integrand(*t, t->b0, b1);
}

double outer(double b0, void* p) {
    auto* t = static_cast<QuadratureToy*>(p);
    t->b0 = b0;
    gsl_integration_workspace* w = gsl_integration_workspace_alloc(2000);
    gsl_function f{&inner, t};
    double result = 0.0, err = 0.0;
    gsl_integration_qagi(&f, 0.0, 1e-11, 2000, w, &result, &err);
    gsl_integration_workspace_free(w);
    return result;
}

double quadrature_loglik(QuadratureToy t) {
    gsl_set_error_handler_off();
    gsl_integration_workspace* w = gsl_integration_workspace_alloc(2000);
    gsl_function f{&outer, &t};
    double result = 0.0, err = 0.0;
    gsl_integration_qagi(&f, 0.0, 1e-10, 2000, w, &result, &err);
    gsl_integration_workspace_free(w);
    return std::log(result);
}

Cd4Block block(std::vector<std::array<double, 2>> x, std::vector<std::array<double, 2>> z, std::vector<double> y) {
    Cd4Block b;
    const auto n = static_cast<Eigen::Index>(y.size());
    b.x.resize(n, 2);
    b.z.resize(n, 2);
    b.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        b.x(i, 0) = x[i][0];
        b.x(i, 1) = x[i][1];
        b.z(i, 0) = z[i][0];
        b.z(i, 1) = z[i][1];
        b.y(i) = y[i];
    }
    return b;
}

} // namespace

TEST_CASE("rubin_combine") {
    SUBCASE("estimates {1, 3}, variances {1, 1}") {
        const double e[] = {1, 3}, v[] = {1, 1};
        const auto r = rubin_combine(e, v);
        CHECK(std::abs(r.estimate - 2.0) < 1e-12);
        CHECK(std::abs(r.between - 2.0) < 1e-12);
        CHECK(std::abs(r.within - 1.0) < 1e-12);
        CHECK(std::abs(r.total_variance - 4.0) < 1e-12);
        CHECK(std::abs(r.df - 1.0 * std::pow(1.0 + 1.0 / 3.0, 2)) < 1e-12);
    }
    SUBCASE("identical estimates") {
        const double e[] = {5, 5}, v[] = {2, 4};
        const auto r = rubin_combine(e, v);
        CHECK(r.estimate == 5.0);
        CHECK(r.between == 0.0);
        CHECK(std::abs(r.total_variance - 3.0) < 1e-12);
        CHECK(r.total_variance == r.within);
        CHECK(std::isinf(r.df));
    }
    SUBCASE("all zero") {
        const double e[] = {1, 1, 1}, v[] = {0, 0, 0};
        const auto r = rubin_combine(e, v);
        CHECK(r.total_variance == 0.0);
        CHECK(std::isinf(r.df));
    }
    SUBCASE("T >= W on random inputs") {
        std::mt19937_64 rng(3);
        std::uniform_real_distribution<double> u(0.0, 2.0);
        for (int k = 0; k < 200; ++k) {
            std::vector<double> e(2 + k % 9), v(e.size());
            for (std::size_t i = 0; i < e.size(); ++i) {
                e[i] = u(rng);
                v[i] = u(rng);
            }
            const auto r = rubin_combine(e, v);
            CHECK(r.total_variance >= r.within);
        }
    }
    SUBCASE("errors") {
        const double one[] = {1.0};
        CHECK_THROWS_AS(rubin_combine(one, one), ConfigError);
        const double e[] = {1, 2}, neg[] = {1, -1};
        CHECK_THROWS_AS(rubin_combine(e, neg), ConfigError);
        const double three[] = {1, 1, 1};
        CHECK_THROWS_AS(rubin_combine(e, three), ConfigError);
    }
}

TEST_CASE("marginal likelihood matches numerical integration over b") {
    const std::vector<Cd4Block> blocks = {
        block({{1, 0}, {1, 0.5}, {1, 1}}, {{1, 0}, {1, 0.2}, {1, 0.7}}, {5.1, 5.6, 6.4}),
        block({{1, 0.2}, {1, 0.9}}, {{1, 0}, {1, 0.4}}, {4.0, 4.9}),
    };
    Eigen::VectorXd beta(2);
    beta << 5.0, 1.0;
    Eigen::MatrixXd omega(2, 2);
    omega << 0.5, 0.1, 0.1, 0.3;
    const double sigma = 0.4;

    double oracle = 0.0;
    for (const auto& b : blocks) oracle += quadrature_loglik({b, beta, omega, sigma});
    CHECK(std::abs(cd4_marginal_loglik(blocks, beta, omega, sigma) - oracle) < 1e-6);
}

TEST_CASE("fit_cd4_model") {
    SUBCASE("noiseless data without random effects recovers the coefficients") {
        auto c = visit_skeleton(40);
        const auto design = Cd4Design::build(c, linear_spec());
        REQUIRE(design.fixed_names() == std::vector<std::string>{"intercept", "time_ns1", "treated", "tsi_ns1"});
        Eigen::VectorXd truth(4);
        truth << 20.0, -3.0, 1.5, 4.0;
        std::mt19937_64 rng(11);
        std::normal_distribution<double> e(0.0, 1e-3);
        for (auto& s : c.subjects) {
            for (auto& v : s.visits) {
                const double y = design.fixed_row(s, v.time).dot(truth) + e(rng);
                v.cd4 = y * y;
            }
        }
        const auto fit = fit_cd4_model(c, linear_spec());
        for (Eigen::Index j = 0; j < 4; ++j) CHECK(std::abs(fit.beta(j) - truth(j)) < 1e-2);
    }
    SUBCASE("random intercept and slope") {
        auto c = visit_skeleton(400);
        const LmeTruth truth;
        fill_cd4(c, truth, 5);
        const auto fit = fit_cd4_model(c, linear_spec());
        CHECK(!fit.boundary);
        CHECK(fit.sigma == doctest::Approx(truth.sigma).epsilon(0.1));
        CHECK(std::sqrt(fit.omega(0, 0)) == doctest::Approx(truth.sd0).epsilon(0.15));
        CHECK(std::sqrt(fit.omega(1, 1)) == doctest::Approx(truth.sd1).epsilon(0.3));
        CHECK(fit.beta(0) == doctest::Approx(truth.intercept).epsilon(0.02));
        for (std::size_t k = 1; k < fit.trace.size(); ++k) CHECK(fit.trace[k] >= fit.trace[k - 1] - 1e-9);

        // The reported maximum is the closed-form marginal likelihood at the estimates.
        const auto blocks = cd4_blocks(c, fit.design);
        const double at_fit = cd4_marginal_loglik(blocks, fit.beta, fit.omega, fit.sigma);
        CHECK(at_fit == doctest::Approx(fit.log_likelihood).epsilon(1e-10));
        for (double scale : {0.9, 1.1}) {
            CHECK(cd4_marginal_loglik(blocks, fit.beta, fit.omega * scale, fit.sigma) < at_fit);
            CHECK(cd4_marginal_loglik(blocks, fit.beta, fit.omega, fit.sigma * scale) < at_fit);
        }
        Eigen::VectorXd shifted = fit.beta;
        shifted(0) += 0.05;
        CHECK(cd4_marginal_loglik(blocks, shifted, fit.omega, fit.sigma) < at_fit);

        // Posterior modes shrink the subject means towards the population.
        const auto& s = c.subjects[1];
        const auto post = fit.posterior(s, 1e9);
        CHECK(post.mode.isApprox(fit.posteriors[1].mode, 1e-12));
        CHECK(post.covariance(0, 0) < fit.omega(0, 0));
    }
    SUBCASE("no between-subject variation is a boundary estimate") {
        // Untreated, residuals alternate in sign and sum to zero within each
        // subject: the random-intercept variance is estimated at 0.
        auto c = visit_skeleton(30, false);
        for (std::size_t i = 0; i < c.size(); ++i) {
            auto& s = c.subjects[i];
            for (std::size_t k = 0; k < s.visits.size(); ++k) {
                auto& v = s.visits[k];
                v.art_status = false;
                const double e = k + 1 == s.visits.size() ? 0.0 : (k % 2 == 0 ? 0.5 : -0.5);
                const double y = 20.0 - 1.0 * v.time / kYear + e;
                v.cd4 = y * y;
            }
            validate_subject(s);
        }
        CHECK_THROWS_WITH_AS(fit_cd4_model(c, linear_spec()), doctest::Contains("boundary estimate"), NumericalError);
        Cd4FitOptions options;
        options.allow_boundary = true;
        const auto fit = fit_cd4_model(c, linear_spec(), options);
        CHECK(fit.boundary);
        CHECK(fit.omega(0, 0) < 1e-4 * fit.sigma * fit.sigma);
        CHECK(fit.beta(0) == doctest::Approx(20.0).epsilon(0.02));
    }
    SUBCASE("preconditions") {
        auto c = visit_skeleton(1);
        CHECK_THROWS_AS(fit_cd4_model(c), DataError);
    }
    SUBCASE("untreated cohort has no random slope") {
        auto c = visit_skeleton(60);
        for (auto& s : c.subjects) {
            for (auto& v : s.visits) v.art_status = false;
            validate_subject(s);
        }
        LmeTruth truth;
        fill_cd4(c, truth, 9);
        const auto fit = fit_cd4_model(c, linear_spec());
        CHECK(fit.omega.rows() == 1);
        CHECK(fit.design.fixed_names() == std::vector<std::string>{"intercept", "time_ns1"});
    }
}

TEST_CASE("fit_death_model") {
    auto c = visit_skeleton(200);
    fill_cd4(c, LmeTruth{}, 21);
    const auto cd4 = fit_cd4_model(c, linear_spec());

    SUBCASE("intercept-only model has the Nelson-Aalen baseline") {
        DeathModelSpec spec;
        spec.cd4_interior_knots = -1;
        spec.treatment = spec.age = spec.sex = false;
        const auto d = fit_death_model(c, cd4, spec);
        CHECK(d.fit.coefficients.empty());
        IntervalData data(std::vector<std::string>{});
        for (std::size_t i = 0; i < c.size(); ++i) {
            const auto& s = c.subjects[i];
            data.add(i, kRiskOrigin, s.observation_end(), {}, s.death_time.has_value());
        }
        const auto na = nelson_aalen(data);
        REQUIRE(d.fit.baseline.jump_times() == na.jump_times());
        for (std::size_t k = 0; k < na.increments().size(); ++k) {
            CHECK(d.fit.baseline.increments()[k] == doctest::Approx(na.increments()[k]).epsilon(1e-12));
        }
    }
    SUBCASE("default terms") {
        const auto d = fit_death_model(c, cd4);
        CHECK(d.fit.term_names.front() == "cd4_ns1");
        CHECK(std::find(d.fit.term_names.begin(), d.fit.term_names.end(), "treated") != d.fit.term_names.end());
    }
    SUBCASE("no deaths") {
        auto alive = visit_skeleton(20, false);
        fill_cd4(alive, LmeTruth{}, 2);
        const auto fit = fit_cd4_model(alive, linear_spec());
        CHECK_THROWS_WITH_AS(fit_death_model(alive, fit), doctest::Contains("no events"), DataError);
    }
}

TEST_CASE("impute") {
    auto c = visit_skeleton(200);
    fill_cd4(c, LmeTruth{}, 31);
    // Censor some subjects early and thin the CD4 record of others so that
    // every outcome status occurs at t* = 540.
    for (std::size_t i = 0; i < c.size(); ++i) {
        auto& s = c.subjects[i];
        if (i % 5 == 1) {
            while (s.visits.back().time > 270) s.visits.pop_back();
            s.censor_time = 300.0;
            s.death_time.reset();
        } else if (i % 5 == 2) {
            for (auto& v : s.visits) {
                if (v.time >= 360) v.cd4.reset();
            }
        }
        validate_subject(s);
    }
    const auto cd4 = fit_cd4_model(c, linear_spec());
    const auto death = fit_death_model(c, cd4);
    const double t_star = 540;
    const auto window = OutcomeWindow::around(t_star, 90);

    ImputationOptions options;
    options.m = 5;
    options.seed = 77;
    const auto imp = impute(c, cd4, death, t_star, window, options);
    REQUIRE(imp.m() == 5);

    SUBCASE("observed outcomes are carried unchanged") {
        std::size_t n_observed = 0;
        for (std::size_t i = 0; i < c.size(); ++i) {
            const auto& o = imp.observed[i];
            if (!o.observed()) continue;
            ++n_observed;
            for (std::size_t m = 0; m < imp.m(); ++m) {
                CHECK(!imp.data[m][i].imputed);
                CHECK(imp.data[m][i].x == *o.x_value);
                CHECK(imp.data[m][i].dead == (o.status == OutcomeStatus::Dead));
            }
        }
        CHECK(n_observed > 0);
        CHECK(n_observed < c.size());
    }
    SUBCASE("completed values are coherent") {
        for (const auto& d : imp.data) {
            for (const auto& x : d) {
                if (x.dead) CHECK(x.x == 0.0);
                else CHECK(x.x >= 1.0);
            }
        }
        for (const auto& s : c.subjects) {
            const double p = conditional_death_probability(s, cd4, death, t_star);
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
        }
    }
    SUBCASE("deterministic and independent of the worker count") {
        auto one = options;
        one.workers = 1;
        auto four = options;
        four.workers = 4;
        CHECK(imputed_table(c, impute(c, cd4, death, t_star, window, one)) == imputed_table(c, imp));
        CHECK(imputed_table(c, impute(c, cd4, death, t_star, window, four)) == imputed_table(c, imp));
        auto other = options;
        other.seed = 78;
        CHECK(imputed_table(c, impute(c, cd4, death, t_star, window, other)) != imputed_table(c, imp));
    }
    SUBCASE("no death draw without hazard after U") {
        // Censored after the last death time: S(t*)/S(U) = 1.
        auto s = c.subjects[1];
        const double last_death = death.fit.baseline.jump_times().back();
        s.censor_time = last_death + 1.0;
        CHECK(conditional_death_probability(s, cd4, death, last_death + 50.0) == 0.0);
        CHECK(conditional_death_probability(c.subjects[1], cd4, death, t_star) > 0.0);
    }
    SUBCASE("imputed CD4 follows the predictive distribution") {
        std::size_t target = c.size();
        for (std::size_t i = 0; i < c.size(); ++i) {
            if (imp.observed[i].status == OutcomeStatus::AliveCd4Missing && c.subjects[i].follow_up(t_star) >= t_star) {
                target = i;
                break;
            }
        }
        REQUIRE(target < c.size());
        auto many = options;
        many.m = 400;
        const auto big = impute(c, cd4, death, t_star, window, many);
        double sum = 0.0, sum2 = 0.0;
        for (const auto& d : big.data) {
            sum += d[target].x;
            sum2 += d[target].x * d[target].x;
        }
        const double n = static_cast<double>(many.m);
        const double mean = sum / n;
        const double se = std::sqrt((sum2 / n - mean * mean) / n);
        const auto pred = cd4_predictive(cd4, c.subjects[target], t_star, t_star);
        const double expected = pred.mean * pred.mean + pred.sd * pred.sd; // floor is negligible here
        CHECK(std::abs(mean - expected) < 3.0 * se);
    }
    SUBCASE("M < 2") {
        auto bad = options;
        bad.m = 1;
        CHECK_THROWS_AS(impute(c, cd4, death, t_star, window, bad), ConfigError);
    }
}
