#include "dtr/weights.hpp"

#include "dtr/errors.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <map>

namespace dtr {

namespace {

constexpr CdcClass kCdcLevels[] = {CdcClass::Mild, CdcClass::Moderate, CdcClass::Severe, CdcClass::Asymptomatic,
                                   CdcClass::Missing};

std::optional<NaturalSplineBasis> marker_basis(const std::vector<double>& values, int n_interior) {
    if (values.empty()) return std::nullopt;
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    if (!(*mx > *mn)) return std::nullopt;
    return NaturalSplineBasis::from_knots(quantile_knots(values, n_interior));
}

void push_marker(std::vector<double>& row, const std::optional<NaturalSplineBasis>& basis,
                 const std::optional<double>& value) {
    if (basis) {
        if (value) {
            const auto v = basis->evaluate_no_intercept(*value);
            row.insert(row.end(), v.begin(), v.end());
        } else {
            row.insert(row.end(), basis->dimension() - 1, 0.0);
        }
    }
    row.push_back(value ? 0.0 : 1.0);
}

void name_marker(std::vector<std::string>& names, const std::optional<NaturalSplineBasis>& basis,
                 const std::string& marker) {
    if (basis) {
        for (std::size_t j = 1; j < basis->dimension(); ++j) names.push_back(fmt::format("{}_ns{}", marker, j));
    }
    names.push_back(marker + "_missing");
}

} // namespace

InitiationDesign InitiationDesign::build(const CohortDataset& cohort, const WeightModelSpec& spec) {
    if (spec.spline_interior_knots < 0) throw ConfigError("spline_interior_knots must be non-negative");
    InitiationDesign d;
    d.spec_ = spec;
    std::vector<double> cd4, waz, haz, age;
    for (const auto& s : cohort.subjects) {
        if (s.visits.empty()) continue;
        age.push_back(s.baseline.age_at_diagnosis);
        for (const auto& v : s.visits) {
            if (v.cd4) cd4.push_back(*v.cd4);
            if (v.waz) waz.push_back(*v.waz);
            if (v.haz) haz.push_back(*v.haz);
        }
    }
    const int k = spec.spline_interior_knots;
    if (spec.cd4) {
        d.cd4_ = marker_basis(cd4, k);
        name_marker(d.full_names_, d.cd4_, "cd4");
    }
    if (spec.waz) {
        d.waz_ = marker_basis(waz, k);
        name_marker(d.full_names_, d.waz_, "waz");
    }
    if (spec.haz) {
        d.haz_ = marker_basis(haz, k);
        name_marker(d.full_names_, d.haz_, "haz");
    }
    if (spec.age) {
        d.age_ = marker_basis(age, k);
        if (d.age_) {
            for (std::size_t j = 1; j < d.age_->dimension(); ++j) d.full_names_.push_back(fmt::format("age_ns{}", j));
        }
    }
    if (spec.sex) d.full_names_.push_back("male");
    if (spec.cdc_class) {
        for (auto level : kCdcLevels) d.full_names_.push_back(fmt::format("cdc_{}", to_string(level)));
    }
    if (spec.measurement_day) d.full_names_.push_back("measurement_day");

    d.kept_.resize(d.full_names_.size());
    for (std::size_t j = 0; j < d.kept_.size(); ++j) d.kept_[j] = j;
    d.names_ = d.full_names_;

    // The first CDC level present is the reference category.
    if (spec.cdc_class) {
        for (auto level : kCdcLevels) {
            const bool present = std::any_of(cohort.subjects.begin(), cohort.subjects.end(), [&](const auto& s) {
                return !s.visits.empty() && s.baseline.cdc_class == level;
            });
            if (present) {
                const auto name = fmt::format("cdc_{}", to_string(level));
                const auto it = std::find(d.names_.begin(), d.names_.end(), name);
                const std::size_t col[] = {static_cast<std::size_t>(it - d.names_.begin())};
                d.drop_terms(col);
                break;
            }
        }
    }
    return d;
}

void InitiationDesign::drop_terms(std::span<const std::size_t> columns) {
    std::vector<std::size_t> kept;
    std::vector<std::string> names;
    for (std::size_t j = 0; j < kept_.size(); ++j) {
        if (std::find(columns.begin(), columns.end(), j) != columns.end()) continue;
        kept.push_back(kept_[j]);
        names.push_back(names_[j]);
    }
    kept_ = std::move(kept);
    names_ = std::move(names);
}

std::vector<double> InitiationDesign::full_row(const SubjectHistory& s, double at) const {
    std::optional<double> cd4, waz, haz;
    bool measurement_day = false;
    for (const auto& v : s.visits) {
        if (v.time - kSameDayOffset > at) break;
        if (v.cd4) cd4 = v.cd4;
        if (v.waz) waz = v.waz;
        if (v.haz) haz = v.haz;
        if (v.cd4 && at < v.time + kSameDayOffset) measurement_day = true;
    }
    std::vector<double> row;
    row.reserve(full_names_.size());
    if (spec_.cd4) push_marker(row, cd4_, cd4);
    if (spec_.waz) push_marker(row, waz_, waz);
    if (spec_.haz) push_marker(row, haz_, haz);
    if (spec_.age && age_) {
        const auto v = age_->evaluate_no_intercept(s.baseline.age_at_diagnosis);
        row.insert(row.end(), v.begin(), v.end());
    }
    if (spec_.sex) row.push_back(s.baseline.sex == Sex::Male ? 1.0 : 0.0);
    if (spec_.cdc_class) {
        for (auto level : kCdcLevels) row.push_back(s.baseline.cdc_class == level ? 1.0 : 0.0);
    }
    if (spec_.measurement_day) row.push_back(measurement_day ? 1.0 : 0.0);
    return row;
}

CovariatePath InitiationDesign::path(const SubjectHistory& subject, double until) const {
    std::vector<double> starts{kRiskOrigin};
    for (const auto& v : subject.visits) {
        starts.push_back(v.time - kSameDayOffset);
        if (spec_.measurement_day && v.cd4) starts.push_back(v.time + kSameDayOffset);
    }
    std::sort(starts.begin(), starts.end());
    starts.erase(std::unique(starts.begin(), starts.end()), starts.end());

    CovariatePath out;
    for (double start : starts) {
        if (start < kRiskOrigin) continue;
        if (start >= until && !out.starts.empty()) break;
        const auto full = full_row(subject, start);
        std::vector<double> row;
        row.reserve(kept_.size());
        for (auto j : kept_) row.push_back(full[j]);
        if (!out.values.empty() && out.values.back() == row) continue;
        out.push(start, std::move(row));
    }
    return out;
}

namespace {

struct Exit {
    double time;
    bool initiated;
};

Exit initiation_exit(const SubjectHistory& s, double t_star) {
    const double u = s.follow_up(t_star);
    if (s.initiation_time && *s.initiation_time <= u) return {*s.initiation_time, true};
    return {u, false};
}

} // namespace

IntervalData initiation_intervals(const CohortDataset& cohort, const InitiationDesign& design, double t_star) {
    IntervalData data(design.term_names());
    for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
        const auto& s = cohort.subjects[i];
        if (s.visits.empty()) continue;
        const auto exit = initiation_exit(s, t_star);
        const auto path = design.path(s, exit.time);
        for (std::size_t k = 0; k < path.starts.size(); ++k) {
            const double start = path.starts[k];
            const double stop = k + 1 < path.starts.size() ? path.starts[k + 1] : exit.time;
            if (!(stop > start)) continue;
            const bool last = k + 1 == path.starts.size();
            data.add(i, start, stop, path.values[k], last && exit.initiated);
        }
    }
    return data;
}

InitiationModel fit_initiation_model(const CohortDataset& cohort, const WeightModelSpec& spec, double t_star,
                                     const CoxOptions& options) {
    if (!(t_star > 0.0)) throw ConfigError("t_star must be positive");
    InitiationModel model{InitiationDesign::build(cohort, spec), {}, t_star};
    auto data = initiation_intervals(cohort, model.design, t_star);

    bool at_risk_after_baseline = false;
    for (std::size_t i = 0; i < data.size() && !at_risk_after_baseline; ++i) at_risk_after_baseline = data.stop(i) > 0.0;
    if (!at_risk_after_baseline) {
        throw DataError("no at-risk time: no subject remains untreated and under follow-up after day 0");
    }

    std::vector<std::size_t> constant;
    for (std::size_t j = 0; j < data.n_terms(); ++j) {
        const double first = data.covariates(0)[j];
        bool varies = false;
        for (std::size_t i = 1; i < data.size() && !varies; ++i) varies = data.covariates(i)[j] != first;
        if (!varies) constant.push_back(j);
    }
    if (!constant.empty()) {
        model.design.drop_terms(constant);
        data = initiation_intervals(cohort, model.design, t_star);
    }
    model.fit = cox_fit(data, options);
    return model;
}

double raw_denominator(const SubjectHistory& subject, const InitiationModel& model) {
    const auto exit = initiation_exit(subject, model.t_star);
    const auto path = model.design.path(subject, exit.time);
    if (exit.initiated) {
        if (!model.fit.baseline.is_jump(exit.time)) {
            throw NumericalError(fmt::format("subject {}: initiation time {} is not an event time of the fitted "
                                             "initiation model",
                                             subject.subject_id, exit.time));
        }
        return density_at(model.fit, path, exit.time);
    }
    return survivor_at(model.fit, path, exit.time);
}

double denominator(const SubjectHistory& subject, const InitiationModel& model) {
    const double d = raw_denominator(subject, model);
    if (!(d >= kPositivityFloor)) {
        throw NumericalError(fmt::format("positivity violation: subject {} has denominator {}", subject.subject_id, d));
    }
    return d;
}

double type1_quantile(std::span<const double> values, double p) {
    if (values.empty()) throw ConfigError("quantile of an empty sample");
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(fmt::format("quantile level {} outside [0, 1]", p));
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    // the tolerance keeps n p = integer from rounding up to the next rank
    const auto rank = static_cast<std::size_t>(std::max(1.0, std::ceil(n * p - 1e-9)));
    return sorted[std::min(rank, sorted.size()) - 1];
}

std::vector<std::optional<double>> all_denominators(const CohortDataset& cohort, const InitiationModel& model) {
    std::vector<std::optional<double>> out(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        if (!cohort.subjects[i].visits.empty()) out[i] = raw_denominator(cohort.subjects[i], model);
    }
    return out;
}

namespace {

void apply_clip(StabilizedWeightSet& set, double lo, double hi) {
    set.lower_clip = lo;
    set.upper_clip = hi;
    for (auto& e : set.entries) {
        e.weight = std::clamp(e.raw, lo, hi);
        e.truncated = e.weight != e.raw;
    }
}

} // namespace

StabilizedWeightSet stabilized_weights(const CohortDataset& cohort, const RegimeSpec& regime,
                                       std::span<const std::optional<double>> denominators, double t_star,
                                       const TruncationOptions& truncation) {
    if (denominators.size() != cohort.size()) throw ConfigError("denominator count does not match the cohort");
    std::vector<ComplianceProcess> processes;
    processes.reserve(cohort.size());
    for (const auto& s : cohort.subjects) processes.push_back(compliance_process(s, regime, t_star));
    const auto numerator_hazard = compliance_survivor(processes);

    StabilizedWeightSet set;
    set.regime = regime;
    set.t_star = t_star;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& p = processes[i];
        if (!p.compliant_through_follow_up()) continue;
        if (!denominators[i]) throw ConfigError(fmt::format("missing denominator for subject {}", p.subject_id));
        const double den = *denominators[i];
        if (!(den >= kPositivityFloor)) {
            throw NumericalError(fmt::format("positivity violation: subject {} under regime {} has denominator {}",
                                             p.subject_id, regime.label(), den));
        }
        SubjectWeight w;
        w.subject = i;
        w.numerator = numerator_hazard.survivor(std::min(p.follow_up, t_star));
        w.denominator = den;
        w.raw = w.numerator / den;
        w.weight = w.raw;
        set.entries.push_back(w);
    }
    if (set.entries.empty()) {
        throw DataError(fmt::format("no compliant subjects for regime {} through day {}", regime.label(), t_star));
    }
    std::vector<double> raw;
    raw.reserve(set.entries.size());
    for (const auto& e : set.entries) raw.push_back(e.raw);
    if (truncation.enabled) {
        apply_clip(set, type1_quantile(raw, truncation.lower), type1_quantile(raw, truncation.upper));
    } else {
        const auto [mn, mx] = std::minmax_element(raw.begin(), raw.end());
        set.lower_clip = *mn;
        set.upper_clip = *mx;
    }
    return set;
}

StabilizedWeightSet stabilized_weights(const CohortDataset& cohort, const RegimeSpec& regime,
                                       const InitiationModel& model, const TruncationOptions& truncation) {
    const auto dens = all_denominators(cohort, model);
    return stabilized_weights(cohort, regime, dens, model.t_star, truncation);
}

void truncate_pooled(std::span<StabilizedWeightSet> sets, const TruncationOptions& truncation) {
    std::vector<double> raw;
    for (const auto& s : sets) {
        for (const auto& e : s.entries) raw.push_back(e.raw);
    }
    if (raw.empty()) return;
    if (!truncation.enabled) {
        for (auto& s : sets) {
            for (auto& e : s.entries) {
                e.weight = e.raw;
                e.truncated = false;
            }
        }
        return;
    }
    const double lo = type1_quantile(raw, truncation.lower);
    const double hi = type1_quantile(raw, truncation.upper);
    for (auto& s : sets) apply_clip(s, lo, hi);
}

double discrete_time_weight(const ProportionalHazardsFit& fit, const CovariatePath& path, double end,
                            std::optional<double> initiation, double grid_step) {
    if (!(grid_step > 0.0)) throw ConfigError("grid_step must be positive");
    std::map<long, double> mass; // interval index -> sum of u dLambda_0
    const auto& times = fit.baseline.jump_times();
    const auto& incs = fit.baseline.increments();
    for (std::size_t j = 0; j < times.size(); ++j) {
        const double s = times[j];
        if (s <= kRiskOrigin) continue;
        if (s > end) break;
        const auto* x = path.at(s);
        if (x == nullptr) continue;
        const auto k = static_cast<long>(std::ceil((s - kRiskOrigin) / grid_step)) - 1;
        mass[k] += fit.relative_risk(*x) * incs[j];
    }
    const long last = static_cast<long>(std::ceil((end - kRiskOrigin) / grid_step)) - 1;
    double product = 1.0;
    for (const auto& [k, p] : mass) {
        if (p > 1.0) {
            throw NumericalError(fmt::format("grid too coarse: interval {} has event probability {}", k, p));
        }
        if (initiation && k == last) {
            product *= p;
        } else {
            product *= 1.0 - p;
        }
    }
    if (initiation && mass.find(last) == mass.end()) return 0.0;
    return product;
}

double discrete_time_weight(const SubjectHistory& subject, const InitiationModel& model, double grid_step) {
    const auto exit = initiation_exit(subject, model.t_star);
    const auto path = model.design.path(subject, exit.time);
    return discrete_time_weight(model.fit, path, exit.time,
                                exit.initiated ? std::optional<double>(exit.time) : std::nullopt, grid_step);
}

std::string weights_table(const CohortDataset& cohort, std::span<const StabilizedWeightSet> sets) {
    std::string out = "subject_id,regime,numerator,denominator,raw_weight,truncated_weight\n";
    for (const auto& set : sets) {
        const auto label = set.regime.label();
        for (const auto& e : set.entries) {
            out += fmt::format("{},{},{},{},{},{}\n", cohort.subjects[e.subject].subject_id, label, e.numerator,
                               e.denominator, e.raw, e.weight);
        }
    }
    return out;
}

} // namespace dtr
