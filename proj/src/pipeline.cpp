#include "dtr/pipeline.hpp"

#include <fmt/format.h>

#include "csv.hpp"
#include "dtr/errors.hpp"

#include <Eigen/Core>
#include <gsl/gsl_version.h>
#include <json.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace dtr {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Config reading with JSON paths in every message.

class Fields {
public:
    Fields(const Json& node, std::string path) : node_(node), path_(std::move(path)) {
        if (!node_.is_object()) fail(path_, "expected an object");
    }

    [[nodiscard]] bool has(const char* key) {
        if (!node_.contains(key)) return false;
        seen_.insert(key);
        return true;
    }

    [[nodiscard]] const Json& at(const char* key) const { return node_.at(key); }
    [[nodiscard]] std::string path(const char* key) const { return path_ + "." + key; }

    void number(const char* key, double& out) {
        if (has(key)) out = as_number(at(key), path(key));
    }
    void integer(const char* key, int& out) {
        if (!has(key)) return;
        const auto& v = at(key);
        if (!v.is_number_integer()) fail(path(key), "expected an integer");
        out = v.get<int>();
    }
    template <class T>
    void count(const char* key, T& out) {
        if (!has(key)) return;
        const auto& v = at(key);
        if (!v.is_number_integer() || v.get<long long>() < 0) fail(path(key), "expected a non-negative integer");
        out = static_cast<T>(v.get<unsigned long long>());
    }
    void boolean(const char* key, bool& out) {
        if (!has(key)) return;
        const auto& v = at(key);
        if (!v.is_boolean()) fail(path(key), "expected true or false");
        out = v.get<bool>();
    }
    void text(const char* key, std::string& out) {
        if (!has(key)) return;
        const auto& v = at(key);
        if (!v.is_string()) fail(path(key), "expected a string");
        out = v.get<std::string>();
    }

    /// Rejects keys that were never looked at.
    void finish() const {
        for (const auto& [key, value] : node_.items()) {
            if (!seen_.count(key)) fail(path_ + "." + key, "unknown field");
        }
    }

    [[noreturn]] static void fail(const std::string& path, std::string_view what) {
        throw ConfigError(fmt::format("{}: {}", path, what));
    }

    static double as_number(const Json& v, const std::string& path) {
        if (!v.is_number()) fail(path, "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) fail(path, "expected a finite number");
        return d;
    }

private:
    const Json& node_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_simulation(Fields& f, SimConfig& s, std::size_t& truth_mc) {
    f.count("n_subjects", s.n_subjects);
    f.number("t_star", s.t_star);
    f.number("study_end", s.study_end);
    f.number("visit_rate", s.visit_rate);
    f.number("cd4_missing_prob", s.cd4_missing_prob);
    f.number("age_min", s.age_min);
    f.number("age_max", s.age_max);
    f.number("male_prob", s.male_prob);
    f.number("sqrt_cd4_mean", s.sqrt_cd4_mean);
    f.number("sqrt_cd4_sd", s.sqrt_cd4_sd);
    f.number("cd4_slope", s.cd4_slope);
    f.number("treatment_jump", s.treatment_jump);
    f.number("treatment_recovery", s.treatment_recovery);
    f.number("recovery_rate", s.recovery_rate);
    f.number("recovery_sd", s.recovery_sd);
    f.number("noise_sd", s.noise_sd);
    f.number("cd4_floor", s.cd4_floor);
    f.number("initiation_base", s.initiation_base);
    f.number("initiation_confounding", s.initiation_confounding);
    f.number("initiation_reference", s.initiation_reference);
    f.number("visit_multiplier", s.visit_multiplier);
    f.number("baseline_multiplier", s.baseline_multiplier);
    f.number("death_base", s.death_base);
    f.number("death_cd4", s.death_cd4);
    f.number("death_reference", s.death_reference);
    f.number("dropout_rate", s.dropout_rate);
    f.number("dropout_cd4", s.dropout_cd4);
    f.count("truth_mc", truth_mc);
    f.finish();
}

std::vector<RegimeSpec> read_regimes(const Json& node, const std::string& path) {
    if (node.is_array()) {
        std::vector<RegimeSpec> out;
        for (std::size_t k = 0; k < node.size(); ++k) {
            const auto item_path = fmt::format("{}[{}]", path, k);
            if (node[k].is_string()) {
                try {
                    out.push_back(parse_regime(node[k].get<std::string>()));
                } catch (const Error& e) {
                    Fields::fail(item_path, e.what());
                }
            } else {
                out.push_back(RegimeSpec::at_threshold(Fields::as_number(node[k], item_path)));
            }
        }
        if (out.empty()) Fields::fail(path, "needs at least one regime");
        return out;
    }
    Fields f(node, path);
    double lower = 200.0, upper = 500.0, step = 10.0, grace = 0.0;
    f.number("lower", lower);
    f.number("upper", upper);
    f.number("step", step);
    f.number("immediate_grace", grace);
    f.finish();
    if (!(step > 0.0)) Fields::fail(path + ".step", "must be positive");
    if (!(upper >= lower) || !(lower > 0.0)) Fields::fail(path + ".upper", "need 0 < lower <= upper");
    if (grace < 0.0) Fields::fail(path + ".immediate_grace", "must be non-negative");
    return regime_grid(lower, upper, step, grace);
}

Json regime_labels(const std::vector<RegimeSpec>& regimes) {
    Json out = Json::array();
    for (const auto& r : regimes) out.push_back(r.label());
    return out;
}

// ---------------------------------------------------------------------------
// Files and artifacts.

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(fmt::format("cannot read {}", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
    out << content;
}

fs::path in_output(const RunConfig& c, const char* name) { return c.output_dir / name; }

void require_artifact(const RunConfig& c, const char* file, std::string_view what, std::string_view stage) {
    if (!fs::exists(in_output(c, file))) {
        throw ConfigError(fmt::format("{} artifact missing: run `{}` first", what, stage));
    }
}

std::string prefix_column(std::string_view table, std::string_view name, double value) {
    std::string out;
    std::size_t pos = 0;
    bool header = true;
    while (pos < table.size()) {
        auto end = table.find('\n', pos);
        if (end == std::string_view::npos) end = table.size();
        const auto line = table.substr(pos, end - pos);
        if (!line.empty()) {
            out += header ? fmt::format("{},{}\n", name, line) : fmt::format("{},{}\n", value, line);
            header = false;
        }
        pos = end + 1;
    }
    return out;
}

std::string strip_header(const std::string& table) {
    const auto nl = table.find('\n');
    return nl == std::string::npos ? std::string() : table.substr(nl + 1);
}

CohortDataset load_cohort(const RunConfig& c) {
    const auto baseline = in_output(c, artifact::kBaseline);
    const auto visits = in_output(c, artifact::kVisits);
    if (fs::exists(baseline) && fs::exists(visits)) return ingest_cohort(baseline, visits);
    if (!c.simulation) return ingest_cohort(c.baseline_path, c.visits_path);
    throw ConfigError("cohort artifact missing: run `simulate` first");
}

EstimationConfig estimation_config(const RunConfig& c, double t_star, bool fit_msm) {
    EstimationConfig e;
    e.t_star = t_star;
    e.regimes = c.regimes;
    e.weight_model = c.weight_model;
    e.truncation = c.truncation;
    e.pooled_truncation = c.pooled_truncation;
    e.weighted = c.weighted;
    e.msm = c.msm;
    e.fit_msm = fit_msm;
    e.cox = c.cox;
    return e;
}

ImputationOptions imputation_options(const RunConfig& c) {
    auto o = c.imputation;
    o.seed = c.seed;
    o.workers = c.workers;
    return o;
}

double parse_double(const std::string& text, std::string_view what, std::size_t line) {
    double v = 0.0;
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) {
        throw DataError(fmt::format("{}: row {}: expected a number, got '{}'", what, line, text));
    }
    return v;
}

/// Completed outcomes for one t_star read back from the imputation artifact.
ImputedCohort read_imputed(const RunConfig& c, const CohortDataset& cohort, double t_star) {
    const auto table = csv::parse(read_file(in_output(c, artifact::kImputed)), artifact::kImputed);
    const auto col_t = table.column("t_star");
    const auto col_m = table.column("imputation");
    const auto col_id = table.column("subject_id");
    const auto col_dead = table.column("dead");
    const auto col_x = table.column("x");
    const auto col_imp = table.column("imputed");

    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < cohort.size(); ++i) index[cohort.subjects[i].subject_id] = i;

    ImputedCohort out;
    out.t_star = t_star;
    out.window = OutcomeWindow::around(t_star, c.window_half_width);
    out.seed = c.seed;
    for (const auto& s : cohort.subjects) out.observed.push_back(extract_outcome(s, t_star, out.window));
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const auto line = table.line_numbers[r];
        if (parse_double(row[col_t], artifact::kImputed, line) != t_star) continue;
        const auto m = static_cast<std::size_t>(parse_double(row[col_m], artifact::kImputed, line));
        if (m < 1) throw DataError(fmt::format("{}: row {}: imputation index must be >= 1", artifact::kImputed, line));
        const auto it = index.find(row[col_id]);
        if (it == index.end()) {
            throw DataError(fmt::format("{}: row {}: unknown subject '{}'", artifact::kImputed, line, row[col_id]));
        }
        if (out.data.size() < m) out.data.resize(m, std::vector<CompletedOutcome>(cohort.size()));
        auto& cell = out.data[m - 1][it->second];
        cell.dead = row[col_dead] == "1";
        cell.x = parse_double(row[col_x], artifact::kImputed, line);
        cell.imputed = row[col_imp] == "1";
    }
    if (out.data.empty()) {
        throw ConfigError(fmt::format("imputation artifact has no rows for t_star {}: run `impute` first", t_star));
    }
    return out;
}

Json cd4_model_json(const Cd4MixedModelFit& fit) {
    Json j;
    j["fixed_effects"] = Json::object();
    for (std::size_t k = 0; k < fit.design.fixed_names().size(); ++k) {
        j["fixed_effects"][fit.design.fixed_names()[k]] = fit.beta(static_cast<Eigen::Index>(k));
    }
    Json omega = Json::array();
    for (Eigen::Index r = 0; r < fit.omega.rows(); ++r) {
        Json row = Json::array();
        for (Eigen::Index k = 0; k < fit.omega.cols(); ++k) row.push_back(fit.omega(r, k));
        omega.push_back(row);
    }
    j["random_effects_covariance"] = omega;
    j["residual_sd"] = fit.sigma;
    j["log_likelihood"] = fit.log_likelihood;
    j["iterations"] = fit.iterations;
    j["boundary"] = fit.boundary;
    return j;
}

Json cox_json(const ProportionalHazardsFit& fit) {
    Json j;
    j["coefficients"] = Json::object();
    for (std::size_t k = 0; k < fit.term_names.size(); ++k) j["coefficients"][fit.term_names[k]] = fit.coefficients[k];
    j["iterations"] = fit.convergence.iterations;
    return j;
}

// ---------------------------------------------------------------------------
// Manifest.

std::string library_versions_key() {
    return fmt::format("eigen {}.{}.{}; fmt {}; gsl {}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION,
                       EIGEN_MINOR_VERSION, FMT_VERSION, GSL_VERSION);
}

void update_manifest(const RunConfig& c, Subcommand command, std::span<const char* const> written) {
    const auto path = in_output(c, artifact::kManifest);
    const auto canonical = c.canonical_json();
    const auto config_hash = fnv1a_hex(canonical);
    Json manifest;
    if (fs::exists(path)) {
        try {
            manifest = Json::parse(read_file(path));
        } catch (const Json::exception&) {
            manifest = Json();
        }
        if (!manifest.is_object() || manifest.value("config_hash", "") != config_hash) manifest = Json();
    }
    if (manifest.is_null()) {
        manifest["program"] = "dtr";
        manifest["version"] = kVersion;
        manifest["libraries"] = library_versions_key();
        manifest["config_hash"] = config_hash;
        manifest["seed"] = c.seed;
        manifest["config"] = Json::parse(canonical);
        manifest["stages"] = Json::array();
        manifest["artifacts"] = Json::object();
    }
    const std::string stage(to_string(command));
    auto& stages = manifest["stages"];
    if (std::find(stages.begin(), stages.end(), stage) == stages.end()) stages.push_back(stage);
    for (const char* name : written) manifest["artifacts"][name] = fnv1a_hex(read_file(in_output(c, name)));
    write_file(path, manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Stages.

std::vector<const char*> stage_simulate(const RunConfig& c) {
    if (!c.simulation) throw ConfigError("config.simulation: required by `simulate`");
    auto sim = *c.simulation;
    sim.seed = c.seed;
    sim.workers = c.workers;
    const auto cohort = simulate_cohort(sim);
    write_cohort(cohort, in_output(c, artifact::kBaseline), in_output(c, artifact::kVisits));
    std::vector<const char*> written = {artifact::kBaseline, artifact::kVisits};
    if (c.truth_mc > 0) {
        Json doc = Json::array();
        for (double t : c.t_star) {
            sim.t_star = t;
            if (sim.study_end < t) sim.study_end = t;
            const auto truth = simulate_truth(sim, c.regimes, c.truth_mc);
            doc.push_back(Json::parse(truth_json(truth, sim)));
        }
        write_file(in_output(c, artifact::kTruth), doc.dump(2) + "\n");
        written.push_back(artifact::kTruth);
    }
    return written;
}

std::vector<const char*> stage_weights(const RunConfig& c, const CohortDataset& cohort) {
    std::string weights, compliance;
    for (double t : c.t_star) {
        const auto config = estimation_config(c, t, false);
        std::vector<std::string> notes;
        const auto sets = regime_weight_sets(cohort, config, &notes);
        const auto w = prefix_column(weights_table(cohort, sets), "t_star", t);
        const auto p = prefix_column(compliance_table(cohort, c.regimes, t), "t_star", t);
        weights += weights.empty() ? w : strip_header(w);
        compliance += compliance.empty() ? p : strip_header(p);
    }
    write_file(in_output(c, artifact::kWeights), weights);
    write_file(in_output(c, artifact::kCompliance), compliance);
    return {artifact::kWeights, artifact::kCompliance};
}

std::vector<const char*> stage_impute(const RunConfig& c, const CohortDataset& cohort) {
    const auto cd4 = fit_cd4_model(cohort, c.cd4_model, c.cd4_fit);
    const auto death = fit_death_model(cohort, cd4, c.death_model, c.cox);
    std::string table;
    for (double t : c.t_star) {
        const auto imputed = impute(cohort, cd4, death, t, OutcomeWindow::around(t, c.window_half_width),
                                    imputation_options(c));
        const auto part = prefix_column(imputed_table(cohort, imputed), "t_star", t);
        table += table.empty() ? part : strip_header(part);
    }
    write_file(in_output(c, artifact::kImputed), table);
    Json models;
    models["cd4_model"] = cd4_model_json(cd4);
    models["death_model"] = cox_json(death.fit);
    write_file(in_output(c, artifact::kModels), models.dump(2) + "\n");
    return {artifact::kImputed, artifact::kModels};
}

std::vector<EstimationSummary> estimate_all(const RunConfig& c, const CohortDataset& cohort, bool fit_msm) {
    require_artifact(c, artifact::kWeights, "weights", "weights");
    require_artifact(c, artifact::kImputed, "imputation", "impute");
    BootstrapOptions boot;
    boot.replicates = c.bootstrap_replicates;
    boot.seed = c.seed;
    boot.workers = c.workers;
    std::vector<EstimationSummary> out;
    for (double t : c.t_star) {
        const auto imputed = read_imputed(c, cohort, t);
        out.push_back(bootstrap_pipeline(cohort, imputed, estimation_config(c, t, fit_msm), boot));
    }
    return out;
}

std::string notes_text(const std::vector<EstimationSummary>& summaries) {
    std::string out = "t_star,note\n";
    for (const auto& s : summaries) {
        for (const auto& n : s.notes) {
            std::string clean = n;
            std::replace(clean.begin(), clean.end(), ',', ';');
            std::replace(clean.begin(), clean.end(), '\n', ' ');
            out += fmt::format("{},{}\n", s.t_star, clean);
        }
    }
    return out;
}

constexpr const char* kNotes = "notes.csv";

std::vector<const char*> stage_report(const RunConfig& c) {
    require_artifact(c, artifact::kResults, "results", "estimate");
    const auto results = csv::parse(read_file(in_output(c, artifact::kResults)), artifact::kResults);
    auto cell = [&](const std::vector<std::string>& row, const char* name, double scale) -> std::string {
        const auto& v = row[results.column(name)];
        if (v == "NA" || v == "inf" || v == "-inf") return v;
        return fmt::format("{:.1f}", parse_double(v, artifact::kResults, 0) * scale);
    };
    std::string table =
        "t_star,regime,mortality_pct,mortality_lo,mortality_hi,median_cd4,median_lo,median_hi,"
        "survivor_mean_cd4,survivor_mean_lo,survivor_mean_hi,n_compliant\n";
    for (const auto& row : results.rows) {
        table += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}\n", row[results.column("t_star")],
                             row[results.column("regime")], cell(row, "theta1", 100.0),
                             cell(row, "theta1_ci_lo", 100.0), cell(row, "theta1_ci_hi", 100.0),
                             cell(row, "theta2", 1.0), cell(row, "theta2_ci_lo", 1.0), cell(row, "theta2_ci_hi", 1.0),
                             cell(row, "theta3", 1.0), cell(row, "theta3_ci_lo", 1.0), cell(row, "theta3_ci_hi", 1.0),
                             row[results.column("n_compliant")]);
    }
    write_file(in_output(c, artifact::kTable), table);
    std::vector<const char*> written = {artifact::kTable};

    if (fs::exists(in_output(c, artifact::kCurve))) {
        const auto curve = csv::parse(read_file(in_output(c, artifact::kCurve)), artifact::kCurve);
        std::string figure = "t_star,regime,q,median,lo,hi,contrast_vs_immediate,contrast_lo,contrast_hi,interval\n";
        for (const auto& row : curve.rows) {
            const auto& q = row[curve.column("q")];
            const std::string label = q == "inf" ? "immediate" : q == "0" ? "never" : q;
            figure += fmt::format("{},{},{},{},{},{},{},{},{},pointwise\n", row[curve.column("t_star")], label, q,
                                  row[curve.column("estimate")], row[curve.column("ci_lo")],
                                  row[curve.column("ci_hi")], row[curve.column("contrast")],
                                  row[curve.column("contrast_ci_lo")], row[curve.column("contrast_ci_hi")]);
        }
        write_file(in_output(c, artifact::kFigure), figure);
        written.push_back(artifact::kFigure);
    }
    return written;
}

} // namespace

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return fmt::format("{:016x}", h);
}

std::string RunConfig::canonical_json() const {
    Json j;
    j["seed"] = seed;
    if (simulation) {
        const auto& s = *simulation;
        Json sim;
        sim["n_subjects"] = s.n_subjects;
        sim["t_star"] = s.t_star;
        sim["study_end"] = s.study_end;
        sim["visit_rate"] = s.visit_rate;
        sim["cd4_missing_prob"] = s.cd4_missing_prob;
        sim["age_min"] = s.age_min;
        sim["age_max"] = s.age_max;
        sim["male_prob"] = s.male_prob;
        sim["sqrt_cd4_mean"] = s.sqrt_cd4_mean;
        sim["sqrt_cd4_sd"] = s.sqrt_cd4_sd;
        sim["cd4_slope"] = s.cd4_slope;
        sim["treatment_jump"] = s.treatment_jump;
        sim["treatment_recovery"] = s.treatment_recovery;
        sim["recovery_rate"] = s.recovery_rate;
        sim["recovery_sd"] = s.recovery_sd;
        sim["noise_sd"] = s.noise_sd;
        sim["cd4_floor"] = s.cd4_floor;
        sim["initiation_base"] = s.initiation_base;
        sim["initiation_confounding"] = s.initiation_confounding;
        sim["initiation_reference"] = s.initiation_reference;
        sim["visit_multiplier"] = s.visit_multiplier;
        sim["baseline_multiplier"] = s.baseline_multiplier;
        sim["death_base"] = s.death_base;
        sim["death_cd4"] = s.death_cd4;
        sim["death_reference"] = s.death_reference;
        sim["dropout_rate"] = s.dropout_rate;
        sim["dropout_cd4"] = s.dropout_cd4;
        sim["truth_mc"] = truth_mc;
        j["simulation"] = sim;
    } else {
        j["input"] = {{"baseline", baseline_path.generic_string()}, {"visits", visits_path.generic_string()}};
    }
    j["t_star"] = t_star;
    j["window_half_width"] = window_half_width;
    j["regimes"] = regime_labels(regimes);
    j["weights"] = {{"spline_interior_knots", weight_model.spline_interior_knots},
                    {"cd4", weight_model.cd4},
                    {"waz", weight_model.waz},
                    {"haz", weight_model.haz},
                    {"age", weight_model.age},
                    {"sex", weight_model.sex},
                    {"cdc_class", weight_model.cdc_class},
                    {"measurement_day", weight_model.measurement_day},
                    {"weighted", weighted},
                    {"truncation",
                     {{"lower", truncation.lower},
                      {"upper", truncation.upper},
                      {"enabled", truncation.enabled},
                      {"pooled", pooled_truncation}}},
                    {"cox", {{"max_iter", cox.max_iter}, {"tol", cox.tol}, {"separation_bound", cox.separation_bound}}}};
    j["cd4_model"] = {{"time_interior_knots", cd4_model.time_interior_knots},
                      {"tsi_interior_knots", cd4_model.tsi_interior_knots},
                      {"age", cd4_model.age},
                      {"sex", cd4_model.sex},
                      {"cdc_class", cd4_model.cdc_class},
                      {"random_slope", cd4_model.random_slope},
                      {"max_iter", cd4_fit.max_iter},
                      {"tol", cd4_fit.tol},
                      {"allow_boundary", cd4_fit.allow_boundary}};
    j["death_model"] = {{"cd4_interior_knots", death_model.cd4_interior_knots},
                        {"treatment", death_model.treatment},
                        {"age", death_model.age},
                        {"sex", death_model.sex},
                        {"refresh_days", death_model.refresh_days}};
    j["imputation"] = {{"m", imputation.m}, {"floor", imputation.floor}};
    j["bootstrap"] = {{"replicates", bootstrap_replicates}};
    j["msm"] = {{"knots", msm.n_knots}, {"tau", msm.tau}, {"max_iter", msm.max_iter}, {"tol", msm.tol}};
    return j.dump(2);
}

RunConfig parse_run_config(std::string_view json_text, const fs::path& base_dir) {
    Json doc;
    try {
        doc = Json::parse(json_text);
    } catch (const Json::parse_error& e) {
        throw ConfigError(fmt::format("config: invalid JSON: {}", e.what()));
    }
    RunConfig c;
    Fields root(doc, "config");
    std::string output = c.output_dir.string();
    root.text("output_dir", output);
    c.output_dir = output;
    root.count("seed", c.seed);
    root.count("workers", c.workers);

    const bool has_input = root.has("input");
    const bool has_sim = root.has("simulation");
    if (has_input == has_sim) Fields::fail("config", "exactly one of 'input' and 'simulation' is required");
    if (has_input) {
        Fields in(root.at("input"), root.path("input"));
        std::string baseline, visits;
        in.text("baseline", baseline);
        in.text("visits", visits);
        in.finish();
        if (baseline.empty()) Fields::fail(root.path("input") + ".baseline", "required");
        if (visits.empty()) Fields::fail(root.path("input") + ".visits", "required");
        c.baseline_path = fs::path(baseline).is_absolute() ? fs::path(baseline) : base_dir / baseline;
        c.visits_path = fs::path(visits).is_absolute() ? fs::path(visits) : base_dir / visits;
    } else {
        Fields sim(root.at("simulation"), root.path("simulation"));
        SimConfig s;
        read_simulation(sim, s, c.truth_mc);
        s.seed = c.seed;
        try {
            s.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(fmt::format("config.{}", e.what()));
        }
        if (c.truth_mc > 0 && c.truth_mc < 10000) {
            Fields::fail(root.path("simulation") + ".truth_mc", "must be 0 or at least 10000");
        }
        c.simulation = s;
    }

    if (root.has("t_star")) {
        const auto& t = root.at("t_star");
        c.t_star.clear();
        if (t.is_array()) {
            for (std::size_t k = 0; k < t.size(); ++k) {
                c.t_star.push_back(Fields::as_number(t[k], fmt::format("config.t_star[{}]", k)));
            }
        } else {
            c.t_star.push_back(Fields::as_number(t, "config.t_star"));
        }
        if (c.t_star.empty()) Fields::fail("config.t_star", "needs at least one value");
        for (std::size_t k = 0; k < c.t_star.size(); ++k) {
            if (!(c.t_star[k] > 0.0)) Fields::fail(fmt::format("config.t_star[{}]", k), "must be positive");
        }
    }
    if (c.simulation) {
        c.simulation->t_star = c.t_star.front();
        for (double t : c.t_star) {
            if (t > c.simulation->study_end) {
                Fields::fail("config.t_star", "must not exceed simulation.study_end");
            }
        }
    }
    root.number("window_half_width", c.window_half_width);
    if (!(c.window_half_width >= 0.0)) Fields::fail("config.window_half_width", "must be non-negative");
    if (root.has("regimes")) c.regimes = read_regimes(root.at("regimes"), root.path("regimes"));

    if (root.has("weights")) {
        Fields w(root.at("weights"), root.path("weights"));
        w.integer("spline_interior_knots", c.weight_model.spline_interior_knots);
        w.boolean("cd4", c.weight_model.cd4);
        w.boolean("waz", c.weight_model.waz);
        w.boolean("haz", c.weight_model.haz);
        w.boolean("age", c.weight_model.age);
        w.boolean("sex", c.weight_model.sex);
        w.boolean("cdc_class", c.weight_model.cdc_class);
        w.boolean("measurement_day", c.weight_model.measurement_day);
        w.boolean("weighted", c.weighted);
        if (w.has("truncation")) {
            Fields t(w.at("truncation"), w.path("truncation"));
            t.number("lower", c.truncation.lower);
            t.number("upper", c.truncation.upper);
            t.boolean("enabled", c.truncation.enabled);
            t.boolean("pooled", c.pooled_truncation);
            t.finish();
            if (!(c.truncation.lower >= 0.0 && c.truncation.lower < c.truncation.upper && c.truncation.upper <= 1.0)) {
                Fields::fail(w.path("truncation"), "need 0 <= lower < upper <= 1");
            }
        }
        if (w.has("cox")) {
            Fields x(w.at("cox"), w.path("cox"));
            x.integer("max_iter", c.cox.max_iter);
            x.number("tol", c.cox.tol);
            x.number("separation_bound", c.cox.separation_bound);
            x.finish();
        }
        w.finish();
        if (c.weight_model.spline_interior_knots < 0) {
            Fields::fail("config.weights.spline_interior_knots", "must be non-negative");
        }
    }
    if (root.has("cd4_model")) {
        Fields m(root.at("cd4_model"), root.path("cd4_model"));
        m.integer("time_interior_knots", c.cd4_model.time_interior_knots);
        m.integer("tsi_interior_knots", c.cd4_model.tsi_interior_knots);
        m.boolean("age", c.cd4_model.age);
        m.boolean("sex", c.cd4_model.sex);
        m.boolean("cdc_class", c.cd4_model.cdc_class);
        m.boolean("random_slope", c.cd4_model.random_slope);
        m.integer("max_iter", c.cd4_fit.max_iter);
        m.number("tol", c.cd4_fit.tol);
        m.boolean("allow_boundary", c.cd4_fit.allow_boundary);
        m.finish();
    }
    if (root.has("death_model")) {
        Fields d(root.at("death_model"), root.path("death_model"));
        d.integer("cd4_interior_knots", c.death_model.cd4_interior_knots);
        d.boolean("treatment", c.death_model.treatment);
        d.boolean("age", c.death_model.age);
        d.boolean("sex", c.death_model.sex);
        d.number("refresh_days", c.death_model.refresh_days);
        d.finish();
    }
    if (root.has("imputation")) {
        Fields m(root.at("imputation"), root.path("imputation"));
        m.count("m", c.imputation.m);
        m.number("floor", c.imputation.floor);
        m.finish();
        if (c.imputation.m < 2) Fields::fail("config.imputation.m", "must be at least 2");
    }
    if (root.has("bootstrap")) {
        Fields b(root.at("bootstrap"), root.path("bootstrap"));
        b.count("replicates", c.bootstrap_replicates);
        b.finish();
        if (c.bootstrap_replicates > 0 && c.bootstrap_replicates < 50) {
            Fields::fail("config.bootstrap.replicates", "must be 0 or at least 50");
        }
    }
    if (root.has("msm")) {
        Fields m(root.at("msm"), root.path("msm"));
        m.integer("knots", c.msm.n_knots);
        m.number("tau", c.msm.tau);
        m.integer("max_iter", c.msm.max_iter);
        m.number("tol", c.msm.tol);
        m.finish();
        if (c.msm.n_knots < 0) Fields::fail("config.msm.knots", "must be non-negative");
        if (!(c.msm.tau > 0.0 && c.msm.tau < 1.0)) Fields::fail("config.msm.tau", "must be in (0, 1)");
    }
    root.finish();
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError(fmt::format("config file not found: {}", path.string()));
    return parse_run_config(read_file(path), path.parent_path());
}

Subcommand parse_subcommand(std::string_view name) {
    if (name == "simulate") return Subcommand::Simulate;
    if (name == "weights") return Subcommand::Weights;
    if (name == "impute") return Subcommand::Impute;
    if (name == "estimate") return Subcommand::Estimate;
    if (name == "msm") return Subcommand::Msm;
    if (name == "report") return Subcommand::Report;
    if (name == "all") return Subcommand::All;
    throw ConfigError(fmt::format("unknown subcommand '{}'", name));
}

std::string_view to_string(Subcommand command) {
    switch (command) {
    case Subcommand::Simulate: return "simulate";
    case Subcommand::Weights: return "weights";
    case Subcommand::Impute: return "impute";
    case Subcommand::Estimate: return "estimate";
    case Subcommand::Msm: return "msm";
    case Subcommand::Report: return "report";
    case Subcommand::All: return "all";
    }
    return "all";
}

void run_pipeline(Subcommand command, const RunConfig& config) {
    fs::create_directories(config.output_dir);
    std::vector<const char*> written;
    auto append = [&](const std::vector<const char*>& more) { written.insert(written.end(), more.begin(), more.end()); };

    switch (command) {
    case Subcommand::Simulate:
        append(stage_simulate(config));
        break;
    case Subcommand::Weights:
        append(stage_weights(config, load_cohort(config)));
        break;
    case Subcommand::Impute:
        append(stage_impute(config, load_cohort(config)));
        break;
    case Subcommand::Estimate:
    case Subcommand::Msm: {
        const bool msm = command == Subcommand::Msm;
        const auto summaries = estimate_all(config, load_cohort(config), msm);
        if (msm) {
            write_file(in_output(config, artifact::kCurve), curve_table(summaries));
            append({artifact::kCurve});
        } else {
            write_file(in_output(config, artifact::kResults), results_table(summaries));
            write_file(in_output(config, kNotes), notes_text(summaries));
            append({artifact::kResults, kNotes});
        }
        break;
    }
    case Subcommand::Report:
        append(stage_report(config));
        break;
    case Subcommand::All: {
        if (config.simulation) append(stage_simulate(config));
        const auto cohort = load_cohort(config);
        append(stage_weights(config, cohort));
        append(stage_impute(config, cohort));
        const auto summaries = estimate_all(config, cohort, true);
        write_file(in_output(config, artifact::kResults), results_table(summaries));
        write_file(in_output(config, artifact::kCurve), curve_table(summaries));
        write_file(in_output(config, kNotes), notes_text(summaries));
        append({artifact::kResults, artifact::kCurve, kNotes});
        append(stage_report(config));
        break;
    }
    }
    update_manifest(config, command, written);
}

} // namespace dtr
