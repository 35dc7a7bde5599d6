#pragma once

#include "dtr/estimators.hpp"
#include "dtr/imputation.hpp"
#include "dtr/simulator.hpp"
#include "dtr/weights.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dtr {

/// Everything a pipeline run depends on. Parsed from a JSON document whose
/// fields are listed in the README; unknown fields are rejected.
struct RunConfig {
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 1;
    std::size_t workers = 0;

    std::optional<SimConfig> simulation; // otherwise input paths; seed and workers come from above
    std::size_t truth_mc = 0;            // potential-outcome draws per regime, 0 skips the truth table
    std::filesystem::path baseline_path;
    std::filesystem::path visits_path;

    std::vector<double> t_star = {365.0};
    double window_half_width = 180.0;
    std::vector<RegimeSpec> regimes = regime_grid();

    WeightModelSpec weight_model;
    TruncationOptions truncation;
    bool pooled_truncation = false;
    bool weighted = true;
    CoxOptions cox;

    Cd4ModelSpec cd4_model;
    Cd4FitOptions cd4_fit;
    DeathModelSpec death_model;
    ImputationOptions imputation;

    std::size_t bootstrap_replicates = 200;
    MsmOptions msm;

    /// Canonical JSON of the parsed configuration, defaults included. The
    /// output directory and worker count are left out: neither changes results.
    [[nodiscard]] std::string canonical_json() const;
};

/// Throws ConfigError with the JSON path of the offending field, e.g.
/// "config.bootstrap.replicates: expected a non-negative integer".
RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

enum class Subcommand { Simulate, Weights, Impute, Estimate, Msm, Report, All };
Subcommand parse_subcommand(std::string_view name);
std::string_view to_string(Subcommand command);

/// Runs one stage (or all of them) and writes its artifacts plus manifest.json
/// into config.output_dir. Stages other than `all` require the artifacts of
/// their upstream stages and raise ConfigError("<name> artifact missing: run
/// `<stage>` first") otherwise.
void run_pipeline(Subcommand command, const RunConfig& config);

/// 64-bit FNV-1a as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

/// Artifact file names inside the output directory.
namespace artifact {
inline constexpr const char* kBaseline = "cohort_baseline.csv";
inline constexpr const char* kVisits = "cohort_visits.csv";
inline constexpr const char* kTruth = "truth.json";
inline constexpr const char* kCompliance = "compliance.csv";
inline constexpr const char* kWeights = "weights.csv";
inline constexpr const char* kImputed = "imputed.csv";
inline constexpr const char* kModels = "models.json";
inline constexpr const char* kResults = "results.csv";
inline constexpr const char* kCurve = "curve.csv";
inline constexpr const char* kTable = "report_table.csv";
inline constexpr const char* kFigure = "report_figure.csv";
inline constexpr const char* kManifest = "manifest.json";
} // namespace artifact

} // namespace dtr
