#include "dtr/data_model.hpp"

#include "csv.hpp"
#include "dtr/errors.hpp"

#include <fmt/core.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace dtr {

std::string_view to_string(Sex sex) { return sex == Sex::Male ? "male" : "female"; }

std::string_view to_string(CdcClass cdc) {
    switch (cdc) {
    case CdcClass::Mild: return "mild";
    case CdcClass::Moderate: return "moderate";
    case CdcClass::Severe: return "severe";
    case CdcClass::Asymptomatic: return "asymptomatic";
    case CdcClass::Missing: return "missing";
    }
    return "missing";
}

Sex parse_sex(std::string_view text) {
    if (text == "male") return Sex::Male;
    if (text == "female") return Sex::Female;
    throw DataError(fmt::format("unknown sex '{}'", text));
}

CdcClass parse_cdc_class(std::string_view text) {
    if (text.empty() || text == "missing") return CdcClass::Missing;
    if (text == "mild") return CdcClass::Mild;
    if (text == "moderate") return CdcClass::Moderate;
    if (text == "severe") return CdcClass::Severe;
    if (text == "asymptomatic") return CdcClass::Asymptomatic;
    throw DataError(fmt::format("unknown cdc_class '{}'", text));
}

std::string_view to_string(OutcomeStatus status) {
    switch (status) {
    case OutcomeStatus::Dead: return "Dead";
    case OutcomeStatus::AliveWithCd4: return "AliveWithCd4";
    case OutcomeStatus::AliveCd4Missing: return "AliveCd4Missing";
    case OutcomeStatus::CensoredBeforeWindow: return "CensoredBeforeWindow";
    }
    return "AliveCd4Missing";
}

bool SubjectHistory::baseline_cd4_missing() const {
    return visits.empty() || visits.front().time != 0.0 || !visits.front().cd4.has_value();
}

double SubjectHistory::observation_end() const {
    if (death_time) return *death_time;
    if (censor_time) return *censor_time;
    if (visits.empty()) return 0.0;
    return visits.back().time;
}

void validate_subject(SubjectHistory& s) {
    std::sort(s.visits.begin(), s.visits.end(),
              [](const Visit& a, const Visit& b) { return a.time < b.time; });
    s.initiation_time.reset();
    bool on_art = false;
    for (std::size_t k = 0; k < s.visits.size(); ++k) {
        const auto& v = s.visits[k];
        if (!(v.time >= 0.0) || !std::isfinite(v.time)) {
            throw DataError(fmt::format("subject {}: negative or non-finite visit time", s.subject_id));
        }
        if (k > 0 && v.time == s.visits[k - 1].time) {
            throw DataError(fmt::format("subject {}: duplicate visit at time {}", s.subject_id, v.time));
        }
        if (v.cd4 && *v.cd4 <= 0.0) {
            throw DataError(fmt::format("subject {}: CD4 must be positive for a living subject (time {})",
                                        s.subject_id, v.time));
        }
        if (on_art && !v.art_status) {
            throw DataError(fmt::format("subject {}: ART status decreases at time {}", s.subject_id, v.time));
        }
        if (v.art_status && !on_art) {
            on_art = true;
            s.initiation_time = v.time;
        }
    }
    if (s.death_time && s.censor_time) {
        throw DataError(fmt::format("subject {}: both death and censoring recorded", s.subject_id));
    }
    const double end = s.observation_end();
    if (!s.visits.empty() && s.visits.back().time > end) {
        throw DataError(fmt::format("subject {}: visit after end of follow-up", s.subject_id));
    }
    if (!(s.baseline.age_at_diagnosis > 0.0)) {
        throw DataError(fmt::format("subject {}: age_at_diagnosis must be positive", s.subject_id));
    }
}

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(fmt::format("cannot open '{}'", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::optional<double> numeric_field(const csv::Table& t, std::size_t row, std::size_t col,
                                    std::string_view what) {
    try {
        return csv::parse_optional_double(t.rows[row][col]);
    } catch (const DataError&) {
        throw DataError(fmt::format("{}: row {} column '{}': not a number: '{}'", what,
                                    t.line_numbers[row], t.header[col], t.rows[row][col]));
    }
}

bool flag_field(const csv::Table& t, std::size_t row, std::size_t col, std::string_view what) {
    const auto& f = t.rows[row][col];
    if (f == "0" || f.empty()) return false;
    if (f == "1") return true;
    throw DataError(fmt::format("{}: row {} column '{}': expected 0/1, got '{}'", what,
                                t.line_numbers[row], t.header[col], f));
}

} // namespace

CohortDataset parse_cohort(std::string_view baseline_csv, std::string_view visits_csv) {
    const auto base = csv::parse(baseline_csv, "baseline");
    const auto c_id = base.column("subject_id");
    const auto c_age = base.column("age");
    const auto c_sex = base.column("sex");
    const auto c_cdc = base.column("cdc_class");
    const auto c_site = base.column("clinic_site");

    std::map<std::string, SubjectHistory> by_id;
    for (std::size_t r = 0; r < base.rows.size(); ++r) {
        const auto& row = base.rows[r];
        SubjectHistory s;
        s.subject_id = row[c_id];
        if (s.subject_id.empty()) {
            throw DataError(fmt::format("baseline: row {} column 'subject_id': empty", base.line_numbers[r]));
        }
        const auto age = numeric_field(base, r, c_age, "baseline");
        if (!age || *age <= 0.0) {
            throw DataError(fmt::format("baseline: row {} column 'age': must be a positive number",
                                        base.line_numbers[r]));
        }
        s.baseline.age_at_diagnosis = *age;
        try {
            s.baseline.sex = parse_sex(row[c_sex]);
        } catch (const DataError& e) {
            throw DataError(fmt::format("baseline: row {} column 'sex': {}", base.line_numbers[r], e.what()));
        }
        try {
            s.baseline.cdc_class = parse_cdc_class(row[c_cdc]);
        } catch (const DataError& e) {
            throw DataError(
                fmt::format("baseline: row {} column 'cdc_class': {}", base.line_numbers[r], e.what()));
        }
        s.baseline.clinic_site = row[c_site];
        if (!by_id.emplace(s.subject_id, s).second) {
            throw DataError(fmt::format("baseline: row {}: duplicate subject_id '{}'", base.line_numbers[r],
                                        s.subject_id));
        }
    }

    // a completely empty visits file is a cohort with no encounters
    csv::Table vis;
    if (visits_csv.find_first_not_of(" \t\r\n") == std::string_view::npos) {
        vis.header = {"subject_id", "time_days", "cd4", "waz", "haz", "art_status", "death", "censor"};
    } else {
        vis = csv::parse(visits_csv, "visits");
    }
    const auto v_id = vis.column("subject_id");
    const auto v_time = vis.column("time_days");
    const auto v_cd4 = vis.column("cd4");
    const auto v_waz = vis.column("waz");
    const auto v_haz = vis.column("haz");
    const auto v_art = vis.column("art_status");
    const auto v_death = vis.column("death");
    const auto v_censor = vis.column("censor");

    // Pure event rows (death/censor without measurements) are kept apart so the
    // ART status they carry can be checked against the visit sequence.
    std::map<std::string, std::vector<std::pair<double, bool>>> event_art;

    for (std::size_t r = 0; r < vis.rows.size(); ++r) {
        const auto& row = vis.rows[r];
        auto it = by_id.find(row[v_id]);
        if (it == by_id.end()) {
            throw DataError(fmt::format("visits: row {} column 'subject_id': '{}' not in baseline file",
                                        vis.line_numbers[r], row[v_id]));
        }
        auto& s = it->second;
        const auto time = numeric_field(vis, r, v_time, "visits");
        if (!time || *time < 0.0) {
            throw DataError(
                fmt::format("visits: row {} column 'time_days': must be non-negative", vis.line_numbers[r]));
        }
        Visit v;
        v.time = *time;
        v.cd4 = numeric_field(vis, r, v_cd4, "visits");
        v.waz = numeric_field(vis, r, v_waz, "visits");
        v.haz = numeric_field(vis, r, v_haz, "visits");
        if (v.cd4 && *v.cd4 <= 0.0) {
            throw DataError(fmt::format(
                "visits: row {} column 'cd4': must be positive (0 is reserved for death)", vis.line_numbers[r]));
        }
        const auto art = row[v_art];
        if (art != "0" && art != "1") {
            throw DataError(fmt::format("visits: row {} column 'art_status': expected 0/1, got '{}'",
                                        vis.line_numbers[r], art));
        }
        v.art_status = art == "1";
        const bool death = flag_field(vis, r, v_death, "visits");
        const bool censor = flag_field(vis, r, v_censor, "visits");
        if (death && censor) {
            throw DataError(fmt::format("visits: row {}: death and censor both set", vis.line_numbers[r]));
        }
        if (death) {
            if (s.death_time) {
                throw DataError(fmt::format("visits: row {}: second death for subject {}", vis.line_numbers[r],
                                            s.subject_id));
            }
            if (v.cd4) {
                throw DataError(fmt::format("visits: row {} column 'cd4': death rows carry no CD4",
                                            vis.line_numbers[r]));
            }
            s.death_time = v.time;
        }
        if (censor) {
            if (s.censor_time) {
                throw DataError(fmt::format("visits: row {}: second censoring for subject {}",
                                            vis.line_numbers[r], s.subject_id));
            }
            s.censor_time = v.time;
        }
        const bool measured = v.cd4 || v.waz || v.haz;
        if ((death || censor) && !measured) {
            event_art[s.subject_id].emplace_back(v.time, v.art_status);
        } else {
            s.visits.push_back(v);
        }
    }

    CohortDataset cohort;
    cohort.subjects.reserve(by_id.size());
    for (auto& [id, s] : by_id) {
        validate_subject(s);
        for (const auto& [t, art] : event_art[id]) {
            for (const auto& v : s.visits) {
                if (v.time == t) {
                    throw DataError(fmt::format("subject {}: duplicate visit at time {}", id, t));
                }
            }
            if (art != s.treated_at(t)) {
                throw DataError(fmt::format("subject {}: ART status on event row at time {} disagrees with visits",
                                            id, t));
            }
        }
        if (s.visits.empty()) ++cohort.zero_visit_subjects;
        cohort.subjects.push_back(std::move(s));
    }
    return cohort;
}

CohortDataset ingest_cohort(const std::filesystem::path& baseline_path,
                            const std::filesystem::path& visits_path) {
    return parse_cohort(read_file(baseline_path), read_file(visits_path));
}

namespace {

std::string opt(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); }

} // namespace

std::string serialize_baseline(const CohortDataset& cohort) {
    std::string out = "subject_id,age,sex,cdc_class,clinic_site\n";
    for (const auto& s : cohort.subjects) {
        out += fmt::format("{},{},{},{},{}\n", s.subject_id, s.baseline.age_at_diagnosis,
                           to_string(s.baseline.sex), to_string(s.baseline.cdc_class), s.baseline.clinic_site);
    }
    return out;
}

std::string serialize_visits(const CohortDataset& cohort) {
    std::string out = "subject_id,time_days,cd4,waz,haz,art_status,death,censor\n";
    for (const auto& s : cohort.subjects) {
        bool death_written = false;
        bool censor_written = false;
        for (const auto& v : s.visits) {
            const bool d = s.death_time && *s.death_time == v.time;
            const bool c = s.censor_time && *s.censor_time == v.time;
            death_written |= d;
            censor_written |= c;
            out += fmt::format("{},{},{},{},{},{},{},{}\n", s.subject_id, v.time, opt(v.cd4), opt(v.waz),
                               opt(v.haz), v.art_status ? 1 : 0, d ? 1 : 0, c ? 1 : 0);
        }
        if (s.death_time && !death_written) {
            out += fmt::format("{},{},,,,{},1,0\n", s.subject_id, *s.death_time, s.treated_at(*s.death_time) ? 1 : 0);
        }
        if (s.censor_time && !censor_written) {
            out += fmt::format("{},{},,,,{},0,1\n", s.subject_id, *s.censor_time,
                               s.treated_at(*s.censor_time) ? 1 : 0);
        }
    }
    return out;
}

void write_cohort(const CohortDataset& cohort, const std::filesystem::path& baseline_path,
                  const std::filesystem::path& visits_path) {
    std::ofstream b(baseline_path, std::ios::binary);
    std::ofstream v(visits_path, std::ios::binary);
    if (!b || !v) throw DataError("cannot open cohort output files");
    b << serialize_baseline(cohort);
    v << serialize_visits(cohort);
}

ObservedOutcome extract_outcome(const SubjectHistory& subject, double t_star, OutcomeWindow window) {
    if (window.lower > window.upper) {
        throw ConfigError(fmt::format("outcome window inverted: [{}, {}]", window.lower, window.upper));
    }
    if (t_star < window.lower || t_star > window.upper) {
        throw ConfigError(fmt::format("t_star {} outside window [{}, {}]", t_star, window.lower, window.upper));
    }
    ObservedOutcome out;
    if (subject.dead_by(t_star)) {
        out.status = OutcomeStatus::Dead;
        out.x_value = 0.0;
        return out;
    }
    const Visit* best = nullptr;
    for (const auto& v : subject.visits) {
        if (!v.cd4 || v.time < window.lower || v.time > window.upper) continue;
        // visits are time-ordered, so strict < keeps the earlier one on ties
        if (!best || std::abs(v.time - t_star) < std::abs(best->time - t_star)) best = &v;
    }
    if (best) {
        out.status = OutcomeStatus::AliveWithCd4;
        out.x_value = *best->cd4;
        out.measurement_time = best->time;
        return out;
    }
    out.status = subject.observation_end() < window.lower && !subject.death_time
                     ? OutcomeStatus::CensoredBeforeWindow
                     : OutcomeStatus::AliveCd4Missing;
    return out;
}

} // namespace dtr
