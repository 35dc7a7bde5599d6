#include "dtr/regimes.hpp"

#include "dtr/errors.hpp"

#include <fmt/core.h>

#include <charconv>
#include <cmath>
#include <limits>

namespace dtr {

RegimeSpec RegimeSpec::at_threshold(double q) {
    if (!std::isfinite(q) || q <= 0.0) throw ConfigError(fmt::format("regime threshold must be positive, got {}", q));
    return {RegimeKind::Threshold, q, 0.0};
}

RegimeSpec RegimeSpec::immediate(double grace_days) {
    if (!(grace_days >= 0.0)) throw ConfigError("immediate-regime grace window must be non-negative");
    return {RegimeKind::Immediate, 0.0, grace_days};
}

double RegimeSpec::q() const {
    switch (kind) {
    case RegimeKind::Never: return 0.0;
    case RegimeKind::Threshold: return threshold;
    case RegimeKind::Immediate: return std::numeric_limits<double>::infinity();
    }
    return 0.0;
}

std::string RegimeSpec::label() const {
    switch (kind) {
    case RegimeKind::Never: return "never";
    case RegimeKind::Threshold: return fmt::format("{}", threshold);
    case RegimeKind::Immediate: return "immediate";
    }
    return "never";
}

RegimeSpec parse_regime(std::string_view label) {
    if (label == "never" || label == "0") return RegimeSpec::never();
    if (label == "immediate" || label == "inf") return RegimeSpec::immediate();
    double q = 0.0;
    const auto [ptr, ec] = std::from_chars(label.data(), label.data() + label.size(), q);
    if (ec != std::errc() || ptr != label.data() + label.size()) {
        throw ConfigError(fmt::format("unknown regime '{}'", label));
    }
    return RegimeSpec::at_threshold(q);
}

std::vector<RegimeSpec> regime_grid(double lower, double upper, double step, double immediate_grace) {
    if (!(lower > 0.0) || !(upper >= lower) || !(step > 0.0)) {
        throw ConfigError(fmt::format("invalid regime grid [{}, {}] step {}", lower, upper, step));
    }
    std::vector<RegimeSpec> grid{RegimeSpec::never()};
    const auto n = static_cast<long>(std::floor((upper - lower) / step + 1e-9));
    for (long k = 0; k <= n; ++k) grid.push_back(RegimeSpec::at_threshold(lower + static_cast<double>(k) * step));
    grid.push_back(RegimeSpec::immediate(immediate_grace));
    return grid;
}

namespace {

struct DecisionPoint {
    double time;
    std::optional<double> cd4;
};

std::vector<DecisionPoint> decision_points(const SubjectHistory& s) {
    std::vector<DecisionPoint> points;
    points.reserve(s.visits.size() + 1);
    points.push_back({0.0, std::nullopt});
    for (const auto& v : s.visits) {
        if (v.time == 0.0) {
            points.front().cd4 = v.cd4;
        } else {
            points.push_back({v.time, v.cd4});
        }
    }
    return points;
}

bool rule_at(const std::vector<DecisionPoint>& points, std::size_t k, const SubjectHistory& s,
             const RegimeSpec& regime) {
    if (regime.kind == RegimeKind::Never) return false;
    if (regime.kind == RegimeKind::Immediate) return true;
    const double q = regime.threshold;
    if (k == 0) return !points[0].cd4 || *points[0].cd4 < q;

    const double t = points[k].time;
    if (s.initiation_time && *s.initiation_time < t) return true;

    double z_min = std::numeric_limits<double>::infinity();
    bool seen = false;
    for (std::size_t j = 0; j < k; ++j) {
        if (points[j].cd4) {
            seen = true;
            z_min = std::min(z_min, *points[j].cd4);
        }
    }
    if (!seen && !points[k].cd4) return false; // CD4 not yet observed
    // An untreated subject whose earlier CD4 already fell below q was due for
    // treatment at that crossing; the regime still calls for treatment.
    if (z_min < q) return true;
    return points[k].cd4 && *points[k].cd4 < q;
}

} // namespace

std::vector<double> decision_times(const SubjectHistory& subject) {
    std::vector<double> out;
    for (const auto& p : decision_points(subject)) out.push_back(p.time);
    return out;
}

bool regime_rule(const SubjectHistory& subject, const RegimeSpec& regime, std::size_t point) {
    const auto points = decision_points(subject);
    if (point >= points.size()) {
        throw ConfigError(fmt::format("subject {}: decision point {} out of range", subject.subject_id, point));
    }
    return rule_at(points, point, subject, regime);
}

bool ComplianceProcess::compliant_at(double t) const {
    if (!evaluable || times.empty() || t < times.front()) return false;
    if (deviation_time && t >= *deviation_time) return false;
    return true;
}

ComplianceProcess compliance_process(const SubjectHistory& subject, const RegimeSpec& regime, double t_star) {
    ComplianceProcess out;
    out.subject_id = subject.subject_id;
    out.regime = regime;
    out.follow_up = subject.follow_up(t_star);
    out.evaluable = !subject.visits.empty();
    if (!out.evaluable) return out;

    const auto points = decision_points(subject);
    for (std::size_t k = 0; k < points.size(); ++k) {
        const double t = points[k].time;
        if (t > out.follow_up) break;
        const bool treated = subject.treated_at(t);
        bool delta = false;
        if (regime.kind == RegimeKind::Immediate) {
            delta = treated || t < regime.grace_days;
        } else {
            const bool r = rule_at(points, k, subject, regime);
            delta = treated == r;
        }
        out.times.push_back(t);
        out.values.push_back(delta ? 1 : 0);
        if (!delta) {
            out.deviation_time = t;
            break;
        }
    }
    return out;
}

CumulativeHazard compliance_survivor(std::span<const ComplianceProcess> processes) {
    IntervalData data{std::vector<std::string>{}};
    bool any_compliant = false;
    for (std::size_t i = 0; i < processes.size(); ++i) {
        const auto& p = processes[i];
        if (!p.evaluable) continue;
        any_compliant |= p.values.front() != 0;
        const double stop = p.deviation_time ? *p.deviation_time : p.follow_up;
        data.add(i, kRiskOrigin, stop, {}, p.deviation_time.has_value());
    }
    if (!any_compliant) {
        const std::string label = processes.empty() ? std::string("?") : processes.front().regime.label();
        throw DataError(fmt::format("regime never followed: no subject complies with regime {} at day 0", label));
    }
    return nelson_aalen(data);
}

CumulativeHazard compliance_survivor(const CohortDataset& cohort, const RegimeSpec& regime, double t_star) {
    std::vector<ComplianceProcess> processes;
    processes.reserve(cohort.size());
    for (const auto& s : cohort.subjects) processes.push_back(compliance_process(s, regime, t_star));
    return compliance_survivor(processes);
}

std::string compliance_table(const CohortDataset& cohort, std::span<const RegimeSpec> regimes, double t_star) {
    std::string out = "subject_id";
    for (const auto& r : regimes) out += "," + r.label();
    out += '\n';
    for (const auto& s : cohort.subjects) {
        out += s.subject_id;
        for (const auto& r : regimes) {
            const auto p = compliance_process(s, r, t_star);
            if (!p.evaluable) {
                out += ",NA";
            } else if (p.deviation_time) {
                out += fmt::format(",{}", *p.deviation_time);
            } else {
                out += ",compliant";
            }
        }
        out += '\n';
    }
    return out;
}

} // namespace dtr
