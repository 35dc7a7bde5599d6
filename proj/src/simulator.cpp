#include "dtr/simulator.hpp"

#include "dtr/errors.hpp"
#include "dtr/estimators.hpp"
#include "dtr/parallel.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace dtr {

namespace {

constexpr double kDaysPerYear = 365.25;
constexpr std::uint64_t kCohortStream = 0x5C0407;
constexpr std::uint64_t kTruthStream = 0x7A07;

void require(bool ok, const char* field, const char* what) {
    if (!ok) throw ConfigError(fmt::format("simulation.{}: {}", field, what));
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

/// Latent quantities shared by the observational and potential-outcome draws.
struct LatentSubject {
    double b0 = 0.0;
    double b1 = 0.0;
    std::vector<int> visit_days; // after day 0, increasing
    double death_threshold = 0.0;
    double dropout_threshold = 0.0;
    double initiation_threshold = 0.0;
};

LatentSubject draw_latent(const SimConfig& c, std::mt19937_64& rng, double horizon) {
    std::normal_distribution<double> z(0.0, 1.0);
    std::exponential_distribution<double> e(1.0);
    LatentSubject s;
    s.b0 = c.sqrt_cd4_sd * z(rng);
    s.b1 = c.recovery_sd * z(rng);
    s.death_threshold = e(rng);
    s.dropout_threshold = e(rng);
    s.initiation_threshold = e(rng);
    if (c.visit_rate > 0.0) {
        std::exponential_distribution<double> gap(c.visit_rate / kDaysPerYear);
        double t = 0.0;
        for (;;) {
            t += gap(rng);
            const int day = static_cast<int>(std::lround(t));
            if (day > horizon) break;
            if (day >= 1 && (s.visit_days.empty() || day > s.visit_days.back())) s.visit_days.push_back(day);
        }
    }
    return s;
}

double latent_cd4(const SimConfig& c, const LatentSubject& s, int day, std::optional<int> initiation) {
    double m = c.sqrt_cd4_mean + s.b0 + c.cd4_slope * day / kDaysPerYear;
    if (initiation && day > *initiation) {
        const double u = (day - *initiation) / kDaysPerYear;
        m += c.treatment_jump + c.treatment_recovery * (1.0 - std::exp(-c.recovery_rate * u)) + s.b1 * u;
    }
    return m;
}

double to_count(const SimConfig& c, double y) {
    if (y < std::sqrt(c.cd4_floor)) return c.cd4_floor;
    return std::max(c.cd4_floor, std::round(y * y));
}

double daily_death_hazard(const SimConfig& c, double m) {
    return c.death_base / kDaysPerYear * std::exp(c.death_cd4 * (c.death_reference - m));
}

double daily_dropout_hazard(const SimConfig& c, double m) {
    if (c.dropout_rate == 0.0) return 0.0;
    return c.dropout_rate / kDaysPerYear * std::exp(c.dropout_cd4 * (c.death_reference - m));
}

double daily_initiation_hazard(const SimConfig& c, int day, std::optional<double> last_cd4, bool measured_today) {
    const double shift = last_cd4 ? c.initiation_reference - std::sqrt(*last_cd4) : 0.0;
    const double multiplier = day == 0 ? c.baseline_multiplier : c.visit_multiplier;
    return c.initiation_base / kDaysPerYear * std::exp(c.initiation_confounding * shift) *
           (1.0 + (measured_today ? multiplier : 0.0));
}

CdcClass draw_cdc(std::mt19937_64& rng) {
    static const std::vector<double> probs = {0.30, 0.25, 0.10, 0.30, 0.05};
    std::discrete_distribution<int> d(probs.begin(), probs.end());
    switch (d(rng)) {
    case 0: return CdcClass::Mild;
    case 1: return CdcClass::Moderate;
    case 2: return CdcClass::Severe;
    case 3: return CdcClass::Asymptomatic;
    default: return CdcClass::Missing;
    }
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

SubjectHistory simulate_subject(const SimConfig& c, std::size_t index) {
    auto rng = stream_rng(c.seed, kCohortStream, index);
    const auto latent = draw_latent(c, rng, c.study_end);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> z(0.0, 1.0);

    SubjectHistory s;
    s.subject_id = fmt::format("S{:05d}", index + 1);
    s.baseline.age_at_diagnosis = round2(c.age_min + (c.age_max - c.age_min) * unif(rng));
    s.baseline.sex = unif(rng) < c.male_prob ? Sex::Male : Sex::Female;
    s.baseline.cdc_class = draw_cdc(rng);
    s.baseline.clinic_site = unif(rng) < 0.5 ? "north" : "south";

    const int end = static_cast<int>(std::floor(c.study_end));
    std::optional<int> initiation;
    std::optional<double> last_cd4;
    double death_cum = 0.0, dropout_cum = 0.0, initiation_cum = 0.0;
    std::size_t next_visit = 0;
    for (int day = 0; day <= end; ++day) {
        const double m = latent_cd4(c, latent, day, initiation);
        if (day >= 1) {
            death_cum += daily_death_hazard(c, m);
            if (death_cum >= latent.death_threshold) {
                s.death_time = day;
                break;
            }
        }
        const bool scheduled = day == 0 || (next_visit < latent.visit_days.size() && latent.visit_days[next_visit] == day);
        if (scheduled && day > 0) ++next_visit;
        bool measured = false;
        Visit visit;
        visit.time = day;
        if (scheduled) {
            const double u_miss = unif(rng);
            const double noise = z(rng);
            const double noise_waz = z(rng);
            const double noise_haz = z(rng);
            const double u_miss_waz = unif(rng);
            const double u_miss_haz = unif(rng);
            if (day == 0 || u_miss >= c.cd4_missing_prob) {
                measured = true;
                visit.cd4 = to_count(c, m + c.noise_sd * noise);
                last_cd4 = visit.cd4;
            }
            if (u_miss_waz >= c.cd4_missing_prob) {
                visit.waz = round2(-1.0 + 0.15 * (m - c.sqrt_cd4_mean) + 0.7 * noise_waz);
            }
            if (u_miss_haz >= c.cd4_missing_prob) {
                visit.haz = round2(-1.5 + 0.10 * (m - c.sqrt_cd4_mean) + 0.7 * noise_haz);
            }
        }
        bool initiated_today = false;
        if (!initiation) {
            initiation_cum += daily_initiation_hazard(c, day, last_cd4, measured);
            if (initiation_cum >= latent.initiation_threshold) {
                initiation = day;
                initiated_today = true;
            }
        }
        if (scheduled || initiated_today) {
            visit.art_status = initiation.has_value();
            s.visits.push_back(visit);
        }
        if (day >= 1) {
            dropout_cum += daily_dropout_hazard(c, m);
            if (dropout_cum >= latent.dropout_threshold) {
                s.censor_time = day;
                break;
            }
        }
        if (day == end) s.censor_time = day;
    }
    if (initiation) s.initiation_time = *initiation;
    return s;
}

struct PotentialOutcome {
    bool dead = false;
    double x = 0.0;
};

PotentialOutcome simulate_potential(const SimConfig& c, const RegimeSpec& regime, std::size_t draw) {
    auto rng = stream_rng(c.seed, kTruthStream, draw);
    const int t_star = static_cast<int>(std::lround(c.t_star));
    const auto latent = draw_latent(c, rng, t_star);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> z(0.0, 1.0);

    std::optional<int> initiation;
    double death_cum = 0.0;
    std::size_t next_visit = 0;
    for (int day = 0; day <= t_star; ++day) {
        const double m = latent_cd4(c, latent, day, initiation);
        if (day >= 1) {
            death_cum += daily_death_hazard(c, m);
            if (death_cum >= latent.death_threshold) return {true, 0.0};
        }
        const bool scheduled = day == 0 || (next_visit < latent.visit_days.size() && latent.visit_days[next_visit] == day);
        if (!scheduled) continue;
        if (day > 0) ++next_visit;
        const double u_miss = unif(rng);
        const double noise = z(rng);
        const bool measured = day == 0 || u_miss >= c.cd4_missing_prob;
        const double cd4 = to_count(c, m + c.noise_sd * noise);
        if (initiation) continue;
        bool treat = false;
        switch (regime.kind) {
        case RegimeKind::Never: break;
        case RegimeKind::Immediate: treat = day == 0; break;
        case RegimeKind::Threshold:
            treat = measured ? cd4 < regime.threshold : day == 0;
            break;
        }
        if (treat) initiation = day;
    }
    const double m = latent_cd4(c, latent, t_star, initiation);
    return {false, to_count(c, m + c.noise_sd * z(rng))};
}

} // namespace

void SimConfig::validate() const {
    require(n_subjects >= 1, "n_subjects", "must be at least 1");
    require(t_star > 0.0, "t_star", "must be positive");
    require(study_end >= t_star, "study_end", "must be at least t_star");
    require(visit_rate >= 0.0, "visit_rate", "must be non-negative");
    require(cd4_missing_prob >= 0.0 && cd4_missing_prob < 1.0, "cd4_missing_prob", "must be in [0, 1)");
    require(age_min > 0.0 && age_max >= age_min, "age_min", "need 0 < age_min <= age_max");
    require(male_prob >= 0.0 && male_prob <= 1.0, "male_prob", "must be in [0, 1]");
    require(sqrt_cd4_sd >= 0.0, "sqrt_cd4_sd", "must be non-negative");
    require(recovery_rate >= 0.0, "recovery_rate", "must be non-negative");
    require(recovery_sd >= 0.0, "recovery_sd", "must be non-negative");
    require(noise_sd >= 0.0, "noise_sd", "must be non-negative");
    require(cd4_floor > 0.0, "cd4_floor", "must be positive");
    // Positivity: every subject keeps a positive initiation hazard.
    require(initiation_base > 0.0, "initiation_base", "must be positive");
    require(std::isfinite(initiation_confounding), "initiation_confounding", "must be finite");
    require(visit_multiplier >= 0.0, "visit_multiplier", "must be non-negative");
    require(baseline_multiplier >= 0.0, "baseline_multiplier", "must be non-negative");
    require(death_base >= 0.0, "death_base", "must be non-negative");
    require(std::isfinite(death_cd4), "death_cd4", "must be finite");
    require(dropout_rate >= 0.0, "dropout_rate", "must be non-negative");
    require(std::isfinite(dropout_cd4), "dropout_cd4", "must be finite");
}

CohortDataset simulate_cohort(const SimConfig& config) {
    config.validate();
    CohortDataset cohort;
    cohort.subjects.resize(config.n_subjects);
    parallel_for(config.n_subjects, config.workers,
                 [&](std::size_t i) { cohort.subjects[i] = simulate_subject(config, i); });
    return cohort;
}

TruthEntry simulate_truth(const SimConfig& config, const RegimeSpec& regime, std::size_t n_mc) {
    config.validate();
    if (n_mc < 10000) throw ConfigError(fmt::format("truth: n_mc must be at least 10000, got {}", n_mc));
    std::vector<PotentialOutcome> draws(n_mc);
    parallel_for(n_mc, config.workers, [&](std::size_t j) { draws[j] = simulate_potential(config, regime, j); });

    TruthEntry out;
    out.regime = regime;
    out.n_mc = n_mc;
    const double n = static_cast<double>(n_mc);
    std::vector<double> x(n_mc);
    double deaths = 0.0, sum = 0.0, sum2 = 0.0, survivors = 0.0;
    for (std::size_t j = 0; j < n_mc; ++j) {
        x[j] = draws[j].x;
        if (draws[j].dead) {
            deaths += 1.0;
        } else {
            survivors += 1.0;
            sum += x[j];
            sum2 += x[j] * x[j];
        }
    }
    out.theta1 = deaths / n;
    out.se1 = std::sqrt(out.theta1 * (1.0 - out.theta1) / n);
    const std::vector<double> ones(n_mc, 1.0);
    out.theta2 = estimate_quantile(x, ones, 0.5);
    // Distribution-free: half the spread of order statistics one binomial SD around the median.
    std::sort(x.begin(), x.end());
    const double s = std::sqrt(0.25 / n);
    auto order_stat = [&](double p) {
        const auto k = static_cast<std::size_t>(std::clamp(std::ceil(n * p), 1.0, n)) - 1;
        return x[k];
    };
    out.se2 = 0.5 * (order_stat(0.5 + s) - order_stat(0.5 - s));
    if (survivors > 1.0) {
        out.theta3 = sum / survivors;
        const double var = (sum2 - survivors * out.theta3 * out.theta3) / (survivors - 1.0);
        out.se3 = std::sqrt(std::max(0.0, var) / survivors);
    } else {
        out.theta3 = std::numeric_limits<double>::quiet_NaN();
        out.se3 = std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

std::vector<TruthEntry> simulate_truth(const SimConfig& config, std::span<const RegimeSpec> regimes, std::size_t n_mc) {
    std::vector<TruthEntry> out;
    out.reserve(regimes.size());
    for (const auto& r : regimes) out.push_back(simulate_truth(config, r, n_mc));
    return out;
}

std::string truth_json(std::span<const TruthEntry> truth, const SimConfig& config) {
    nlohmann::ordered_json doc;
    doc["t_star"] = config.t_star;
    doc["seed"] = config.seed;
    auto& entries = doc["regimes"] = nlohmann::ordered_json::array();
    for (const auto& t : truth) {
        nlohmann::ordered_json e;
        e["regime"] = t.regime.label();
        e["theta1"] = t.theta1;
        e["theta1_se"] = t.se1;
        e["theta2"] = t.theta2;
        e["theta2_se"] = t.se2;
        e["theta3"] = std::isnan(t.theta3) ? nlohmann::ordered_json() : nlohmann::ordered_json(t.theta3);
        e["theta3_se"] = std::isnan(t.se3) ? nlohmann::ordered_json() : nlohmann::ordered_json(t.se3);
        e["n_mc"] = t.n_mc;
        entries.push_back(std::move(e));
    }
    return doc.dump(2) + "\n";
}

double first_year_visit_rate(const CohortDataset& cohort) {
    double visits = 0.0, person_years = 0.0;
    for (const auto& s : cohort.subjects) {
        const double end = std::min(365.0, s.observation_end());
        person_years += end / kDaysPerYear;
        for (const auto& v : s.visits) {
            if (v.time > 0.0 && v.time <= end) visits += 1.0;
        }
    }
    return person_years > 0.0 ? visits / person_years : 0.0;
}

} // namespace dtr
