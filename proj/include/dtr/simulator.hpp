#pragma once

#include "dtr/data_model.hpp"
#include "dtr/regimes.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dtr {

/// Generative model on integer days. Latent square-root CD4:
///   m(t) = mu0 + b0 + slope * y + N^A(t) * (jump + recovery * (1 - exp(-rate * u)) + b1 * u)
/// with y = t / 365.25, u = (t - A) / 365.25 and N^A(t) = 1 for t > A.
/// Rates are per year unless stated.
struct SimConfig {
    std::size_t n_subjects = 2000;
    std::uint64_t seed = 1;
    double t_star = 365.0;
    double study_end = 1095.0; // administrative censoring day

    double visit_rate = 1.7;
    double cd4_missing_prob = 0.1; // per marker and visit after day 0, independently; baseline CD4 is always measured

    double age_min = 0.5;
    double age_max = 12.0;
    double male_prob = 0.5;

    double sqrt_cd4_mean = 24.0;
    double sqrt_cd4_sd = 4.0;   // sd of b0
    double cd4_slope = -2.0;    // per year
    double treatment_jump = 2.0;
    double treatment_recovery = 4.0;
    double recovery_rate = 2.0;
    double recovery_sd = 1.0;   // sd of b1
    double noise_sd = 1.5;
    double cd4_floor = 1.0;

    /// Initiation hazard base * exp(confounding * (reference - sqrt Z)) * (1 + multiplier * I(CD4 today)),
    /// Z the last observed CD4 (reference when none yet). The multiplier is
    /// baseline_multiplier on day 0 and visit_multiplier afterwards.
    double initiation_base = 0.1;
    double initiation_confounding = 0.0;
    double initiation_reference = 20.0;
    double visit_multiplier = 800.0;
    double baseline_multiplier = 200.0;

    /// Death hazard death_base * exp(death_cd4 * (death_reference - m(t))).
    double death_base = 0.05;
    double death_cd4 = 0.4;
    double death_reference = 20.0;

    double dropout_rate = 0.1;
    /// Robustness toggle: dropout hazard multiplied by exp(dropout_cd4 * (death_reference - m(t))).
    double dropout_cd4 = 0.0;

    std::size_t workers = 0;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

/// Observational cohort, subjects S00001, S00002, ... in id order.
/// Bit-identical for a fixed seed regardless of the worker count.
CohortDataset simulate_cohort(const SimConfig& config);

struct TruthEntry {
    RegimeSpec regime;
    double theta1 = 0.0;
    double theta2 = 0.0;
    double theta3 = 0.0;
    double se1 = 0.0;
    double se2 = 0.0;
    double se3 = 0.0;
    std::size_t n_mc = 0;
};

/// Potential outcomes at config.t_star under `regime`, with treatment forced
/// by the regime rule on each latent path and no dropout. X is the CD4 that
/// would be measured at t_star (0 when dead). Throws ConfigError for n_mc < 10^4.
TruthEntry simulate_truth(const SimConfig& config, const RegimeSpec& regime, std::size_t n_mc);

std::vector<TruthEntry> simulate_truth(const SimConfig& config, std::span<const RegimeSpec> regimes, std::size_t n_mc);

std::string truth_json(std::span<const TruthEntry> truth, const SimConfig& config);

/// Visits per person-year among the living over [0, 365], baseline visit excluded.
double first_year_visit_rate(const CohortDataset& cohort);

} // namespace dtr
