#pragma once

#include "dtr/data_model.hpp"
#include "dtr/survival.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dtr {

/// Origin of every risk interval. Decisions at day 0 are events on (-0.5, 0],
/// and covariates measured at a visit take effect half a day before it.
inline constexpr double kRiskOrigin = -0.5;
inline constexpr double kSameDayOffset = 0.5;

enum class RegimeKind { Never, Threshold, Immediate };

/// "Initiate when CD4 falls below q", plus the two extremes q = 0 and q = inf.
struct RegimeSpec {
    RegimeKind kind = RegimeKind::Never;
    double threshold = 0.0;  // Threshold only
    double grace_days = 0.0; // Immediate only: initiation before this day still complies

    static RegimeSpec never() { return {RegimeKind::Never, 0.0, 0.0}; }
    static RegimeSpec at_threshold(double q);
    static RegimeSpec immediate(double grace_days = 0.0);

    /// Numeric regime index: 0 for Never, q for Threshold, +inf for Immediate.
    [[nodiscard]] double q() const;
    /// Stable text label: "never", "immediate", or the threshold ("350").
    [[nodiscard]] std::string label() const;

    friend bool operator==(const RegimeSpec&, const RegimeSpec&) = default;
};

RegimeSpec parse_regime(std::string_view label);

/// {never} + thresholds lower, lower+step, ..., upper + {immediate}.
std::vector<RegimeSpec> regime_grid(double lower = 200.0, double upper = 500.0, double step = 10.0,
                                    double immediate_grace = 0.0);

/// Decision r_q at decision point `point`: 0 is the baseline decision at day 0,
/// k >= 1 is the visit at subject.visits[k - 1] when that visit is after day 0.
/// See decision_times().
bool regime_rule(const SubjectHistory& subject, const RegimeSpec& regime, std::size_t point);

/// Decision times of a subject: day 0, then every visit after day 0.
std::vector<double> decision_times(const SubjectHistory& subject);

struct ComplianceProcess {
    std::string subject_id;
    RegimeSpec regime;
    std::vector<double> times;       // decision times in [0, U]
    std::vector<char> values;        // Delta_q at each time, absorbing at 0
    std::optional<double> deviation_time;
    double follow_up = 0.0;          // U = min(T, C, t_star)
    bool evaluable = false;          // false for subjects with no recorded visit

    /// Delta_q(t), right-continuous between decision times and frozen after U.
    [[nodiscard]] bool compliant_at(double t) const;
    [[nodiscard]] bool compliant_through_follow_up() const { return evaluable && !deviation_time; }
};

ComplianceProcess compliance_process(const SubjectHistory& subject, const RegimeSpec& regime, double t_star);

/// Nelson-Aalen estimate of the deviation hazard Lambda^q; S^q(t) = survivor(t).
/// Risk intervals run from kRiskOrigin to the deviation time or U.
/// Throws DataError("regime never followed") when nobody complies at day 0.
CumulativeHazard compliance_survivor(std::span<const ComplianceProcess> processes);
CumulativeHazard compliance_survivor(const CohortDataset& cohort, const RegimeSpec& regime, double t_star);

/// Wide table: one row per subject, one column per regime holding the
/// deviation day or "compliant" ("NA" for subjects with no visits).
std::string compliance_table(const CohortDataset& cohort, std::span<const RegimeSpec> regimes, double t_star);

} // namespace dtr
