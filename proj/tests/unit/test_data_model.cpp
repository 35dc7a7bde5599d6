#include "dtr/data_model.hpp"
#include "dtr/errors.hpp"

#include <doctest.h>

#include <random>
#include <string>

using namespace dtr;

namespace {

const char* kBaseline = "subject_id,age,sex,cdc_class,clinic_site\n"
                        "a,1.5,male,mild,s1\n"
                        "b,0.7,female,,s2\n"
                        "c,3.25,female,severe,s1\n";

const char* kVisits = "subject_id,time_days,cd4,waz,haz,art_status,death,censor\n"
                      "a,0,850,-1.2,-0.5,0,0,0\n"
                      "a,120,700,,,1,0,0\n"
                      "a,300,,,,1,1,0\n"
                      "b,0,,0.1,0.2,0,0,0\n"
                      "b,200,1200,,,0,0,1\n"
                      "c,0,400,-2,-1,1,0,0\n";

SubjectHistory with_visits(std::vector<std::pair<double, double>> cd4_at) {
    SubjectHistory s;
    s.subject_id = "x";
    s.baseline.age_at_diagnosis = 1.0;
    for (auto [t, v] : cd4_at) s.visits.push_back(Visit{t, v, std::nullopt, std::nullopt, false});
    return s;
}

std::string error_of(const char* baseline, const char* visits) {
    try {
        parse_cohort(baseline, visits);
    } catch (const DataError& e) {
        return e.what();
    }
    return {};
}

} // namespace

TEST_CASE("ingest_cohort parses three subjects") {
    const auto cohort = parse_cohort(kBaseline, kVisits);
    REQUIRE(cohort.size() == 3);
    CHECK(cohort.zero_visit_subjects == 0);

    const auto& a = cohort.subjects[0];
    CHECK(a.subject_id == "a");
    CHECK(a.baseline.sex == Sex::Male);
    CHECK(a.visits.size() == 2); // the death row carries no measurement
    CHECK(a.initiation_time == 120.0);
    CHECK(a.death_time == 300.0);
    CHECK(!a.baseline_cd4_missing());

    const auto& b = cohort.subjects[1];
    CHECK(b.baseline.cdc_class == CdcClass::Missing);
    CHECK(b.censor_time == 200.0);
    CHECK(b.baseline_cd4_missing());
    CHECK(!b.initiation_time);
    CHECK(b.follow_up(365.0) == 200.0);

    CHECK(cohort.subjects[2].initiation_time == 0.0);
}

TEST_CASE("ingest errors") {
    SUBCASE("non-monotone ART names the subject") {
        const char* v = "subject_id,time_days,cd4,waz,haz,art_status,death,censor\n"
                        "b,0,500,,,1,0,0\n"
                        "b,30,510,,,0,0,0\n";
        CHECK(error_of(kBaseline, v).find("subject b") != std::string::npos);
    }
    SUBCASE("malformed number names row and column") {
        const char* v = "subject_id,time_days,cd4,waz,haz,art_status,death,censor\n"
                        "a,0,500,,,0,0,0\n"
                        "a,30,abc,,,0,0,0\n";
        const auto msg = error_of(kBaseline, v);
        CHECK(msg.find("row 3") != std::string::npos);
        CHECK(msg.find("'cd4'") != std::string::npos);
    }
    SUBCASE("bad ART flag names row and column") {
        const char* v = "subject_id,time_days,cd4,waz,haz,art_status,death,censor\n"
                        "a,0,500,,,2,0,0\n";
        const auto msg = error_of(kBaseline, v);
        CHECK(msg.find("row 2") != std::string::npos);
        CHECK(msg.find("'art_status'") != std::string::npos);
    }
    SUBCASE("duplicate visit") {
        const char* v = "subject_id,time_days,cd4,waz,haz,art_status,death,censor\n"
                        "c,10,500,,,1,0,0\n"
                        "c,10,510,,,1,0,0\n";
        CHECK(error_of(kBaseline, v).find("duplicate") != std::string::npos);
    }
    SUBCASE("zero CD4 is rejected") {
        const char* v = "subject_id,time_days,cd4,waz,haz,art_status,death,censor\n"
                        "c,10,0,,,1,0,0\n";
        CHECK(error_of(kBaseline, v).find("'cd4'") != std::string::npos);
    }
    SUBCASE("non-positive age") {
        const char* b = "subject_id,age,sex,cdc_class,clinic_site\n"
                        "a,0,male,mild,s1\n";
        CHECK(error_of(b, "").find("'age'") != std::string::npos);
    }
    SUBCASE("unknown subject in visits") {
        const char* v = "subject_id,time_days,cd4,waz,haz,art_status,death,censor\n"
                        "zz,10,500,,,1,0,0\n";
        CHECK(error_of(kBaseline, v).find("'zz'") != std::string::npos);
    }
}

TEST_CASE("empty visits file yields zero-visit subjects censored before any window") {
    const auto cohort = parse_cohort(kBaseline, "");
    REQUIRE(cohort.size() == 3);
    CHECK(cohort.zero_visit_subjects == 3);
    for (const auto& s : cohort.subjects) {
        CHECK(s.observation_end() == 0.0);
        CHECK(s.baseline_cd4_missing());
        const auto out = extract_outcome(s, 365.0, OutcomeWindow::around(365.0, 180.0));
        CHECK(out.status == OutcomeStatus::CensoredBeforeWindow);
        CHECK(!out.observed());
    }
    // header-only file behaves the same
    CHECK(parse_cohort(kBaseline, "subject_id,time_days,cd4,waz,haz,art_status,death,censor\n").zero_visit_subjects ==
          3);
}

TEST_CASE("extract_outcome") {
    const auto window = OutcomeWindow::around(365.0, 180.0);

    SUBCASE("death before target") {
        auto s = with_visits({{0, 500}, {200, 600}});
        s.death_time = 300.0;
        const auto out = extract_outcome(s, 365.0, window);
        CHECK(out.status == OutcomeStatus::Dead);
        CHECK(out.x_value == 0.0);
        CHECK(!out.measurement_time);
    }
    SUBCASE("closest visit wins") {
        const auto out = extract_outcome(with_visits({{200, 610}, {400, 720}}), 365.0, {185.0, 545.0});
        CHECK(out.status == OutcomeStatus::AliveWithCd4);
        CHECK(out.x_value == 720.0);
        CHECK(out.measurement_time == 400.0);
    }
    SUBCASE("tie goes to the earlier visit") {
        const auto out = extract_outcome(with_visits({{330, 610}, {400, 720}}), 365.0, window);
        CHECK(out.x_value == 610.0);
        CHECK(out.measurement_time == 330.0);
    }
    SUBCASE("death after the target does not dominate") {
        auto s = with_visits({{0, 500}, {360, 640}});
        s.death_time = 500.0;
        CHECK(extract_outcome(s, 365.0, window).status == OutcomeStatus::AliveWithCd4);
    }
    SUBCASE("censored before window") {
        auto s = with_visits({{0, 500}, {100, 640}});
        s.censor_time = 150.0;
        CHECK(extract_outcome(s, 365.0, window).status == OutcomeStatus::CensoredBeforeWindow);
    }
    SUBCASE("alive without a measurement in the window") {
        auto s = with_visits({{0, 500}, {100, 640}});
        s.censor_time = 600.0;
        CHECK(extract_outcome(s, 365.0, window).status == OutcomeStatus::AliveCd4Missing);
    }
    SUBCASE("inverted window") {
        CHECK_THROWS_AS(extract_outcome(with_visits({{0, 500}}), 365.0, {400.0, 300.0}), ConfigError);
    }
}

TEST_CASE("canonical serialization round-trips bit-exactly") {
    std::mt19937_64 rng(20240611);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int rep = 0; rep < 20; ++rep) {
        CohortDataset cohort;
        const int n = 1 + static_cast<int>(unif(rng) * 15);
        for (int i = 0; i < n; ++i) {
            SubjectHistory s;
            s.subject_id = "s" + std::to_string(1000 + i);
            s.baseline.age_at_diagnosis = 0.1 + 4.9 * unif(rng);
            s.baseline.sex = unif(rng) < 0.5 ? Sex::Male : Sex::Female;
            s.baseline.cdc_class = static_cast<CdcClass>(static_cast<int>(unif(rng) * 5));
            s.baseline.clinic_site = "site" + std::to_string(static_cast<int>(unif(rng) * 3));
            const int k = static_cast<int>(unif(rng) * 6);
            double t = 0.0;
            const double init = unif(rng) < 0.5 ? 200.0 * unif(rng) : 1e9;
            for (int j = 0; j < k; ++j) {
                Visit v;
                v.time = t;
                if (unif(rng) < 0.8) v.cd4 = 50.0 + 1500.0 * unif(rng);
                if (unif(rng) < 0.5) v.waz = unif(rng) * 4 - 2;
                if (unif(rng) < 0.5) v.haz = unif(rng) * 4 - 2;
                if (!v.cd4 && !v.waz && !v.haz) v.cd4 = 321.0;
                v.art_status = t >= init;
                s.visits.push_back(v);
                t += 1.0 + 100.0 * unif(rng);
            }
            const double u = unif(rng);
            if (u < 0.3) s.death_time = t + 10.0 * unif(rng);
            else if (u < 0.6) s.censor_time = t;
            validate_subject(s);
            cohort.subjects.push_back(std::move(s));
        }
        const auto b1 = serialize_baseline(cohort);
        const auto v1 = serialize_visits(cohort);
        const auto back = parse_cohort(b1, v1);
        CHECK(serialize_baseline(back) == b1);
        CHECK(serialize_visits(back) == v1);
        REQUIRE(back.size() == cohort.size());
        for (std::size_t i = 0; i < back.size(); ++i) {
            const auto& x = cohort.subjects[i];
            const auto& y = back.subjects[i];
            CHECK(x.baseline.age_at_diagnosis == y.baseline.age_at_diagnosis);
            CHECK(x.death_time == y.death_time);
            CHECK(x.censor_time == y.censor_time);
            CHECK(x.initiation_time == y.initiation_time);
            REQUIRE(x.visits.size() == y.visits.size());
            for (std::size_t j = 0; j < x.visits.size(); ++j) {
                CHECK(x.visits[j].time == y.visits[j].time);
                CHECK(x.visits[j].cd4 == y.visits[j].cd4);
                CHECK(x.visits[j].waz == y.visits[j].waz);
                CHECK(x.visits[j].haz == y.visits[j].haz);
            }
        }
    }
}

TEST_CASE("outcome statuses partition the cohort") {
    const auto cohort = parse_cohort(kBaseline, kVisits);
    const auto window = OutcomeWindow::around(200.0, 180.0);
    int counts[4] = {0, 0, 0, 0};
    for (const auto& s : cohort.subjects) ++counts[static_cast<int>(extract_outcome(s, 200.0, window).status)];
    CHECK(counts[0] + counts[1] + counts[2] + counts[3] == 3);
    CHECK(counts[static_cast<int>(OutcomeStatus::AliveWithCd4)] == 2); // a at 120, b at 200
}
