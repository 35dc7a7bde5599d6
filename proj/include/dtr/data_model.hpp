#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dtr {

enum class Sex { Male, Female };
enum class CdcClass { Mild, Moderate, Severe, Asymptomatic, Missing };

std::string_view to_string(Sex sex);
std::string_view to_string(CdcClass cdc);
Sex parse_sex(std::string_view text);
CdcClass parse_cdc_class(std::string_view text);

struct BaselineCovariates {
    double age_at_diagnosis = 0.0; // years
    Sex sex = Sex::Female;
    CdcClass cdc_class = CdcClass::Missing;
    std::string clinic_site;
};

/// One clinic encounter. Measurements are optional; art_status is the
/// treatment status after the same-day initiation decision.
struct Visit {
    double time = 0.0; // days since diagnosis
    std::optional<double> cd4;
    std::optional<double> waz;
    std::optional<double> haz;
    bool art_status = false;
};

struct SubjectHistory {
    std::string subject_id;
    BaselineCovariates baseline;
    std::vector<Visit> visits; // strictly increasing in time
    std::optional<double> initiation_time;
    std::optional<double> death_time;
    std::optional<double> censor_time;

    /// R^Z(0): no CD4 recorded at time 0.
    [[nodiscard]] bool baseline_cd4_missing() const;

    /// End of observation: death, else censoring, else the last visit.
    /// Subjects without visits end at time 0.
    [[nodiscard]] double observation_end() const;

    /// U = min(T, C, t*).
    [[nodiscard]] double follow_up(double t_star) const { return std::min(observation_end(), t_star); }

    /// N^A(t): 1 once treatment has been initiated at or before t.
    [[nodiscard]] bool treated_at(double t) const { return initiation_time && *initiation_time <= t; }

    [[nodiscard]] bool dead_by(double t) const { return death_time && *death_time <= t; }
};

struct CohortDataset {
    std::vector<SubjectHistory> subjects; // sorted by subject_id
    std::size_t zero_visit_subjects = 0;

    [[nodiscard]] std::size_t size() const { return subjects.size(); }
};

/// Reads the baseline and visit tables. Throws DataError naming the offending
/// row and column on malformed input.
CohortDataset ingest_cohort(const std::filesystem::path& baseline_path,
                            const std::filesystem::path& visits_path);

/// Same as ingest_cohort, reading from in-memory CSV text.
CohortDataset parse_cohort(std::string_view baseline_csv, std::string_view visits_csv);

/// Validates invariants and derives initiation_time from the ART status column.
void validate_subject(SubjectHistory& subject);

std::string serialize_baseline(const CohortDataset& cohort);
std::string serialize_visits(const CohortDataset& cohort);
void write_cohort(const CohortDataset& cohort, const std::filesystem::path& baseline_path,
                  const std::filesystem::path& visits_path);

struct OutcomeWindow {
    double lower = 0.0;
    double upper = 0.0;

    static OutcomeWindow around(double t_star, double half_width) {
        return {t_star - half_width, t_star + half_width};
    }
};

enum class OutcomeStatus { Dead, AliveWithCd4, AliveCd4Missing, CensoredBeforeWindow };
std::string_view to_string(OutcomeStatus status);

struct ObservedOutcome {
    OutcomeStatus status = OutcomeStatus::AliveCd4Missing;
    std::optional<double> x_value;          // 0 for Dead, CD4 for AliveWithCd4
    std::optional<double> measurement_time; // AliveWithCd4 only

    [[nodiscard]] bool observed() const {
        return status == OutcomeStatus::Dead || status == OutcomeStatus::AliveWithCd4;
    }
};

/// Composite outcome at t_star: death dominates, then the CD4 closest to
/// t_star inside the window (earlier visit on ties).
ObservedOutcome extract_outcome(const SubjectHistory& subject, double t_star, OutcomeWindow window);

} // namespace dtr
