#include "dtr/errors.hpp"
#include "dtr/regimes.hpp"

#include <doctest.h>

#include <cmath>

using namespace dtr;

namespace {

// visits given as (day, cd4 or NaN for missing, on ART)
struct V {
    double t;
    double cd4;
    bool art;
};

SubjectHistory subject(const std::string& id, std::vector<V> visits) {
    SubjectHistory s;
    s.subject_id = id;
    s.baseline.age_at_diagnosis = 1.0;
    for (const auto& v : visits) {
        Visit x;
        x.time = v.t;
        if (!std::isnan(v.cd4)) x.cd4 = v.cd4;
        else x.waz = 0.0;
        x.art_status = v.art;
        s.visits.push_back(x);
    }
    validate_subject(s);
    return s;
}

const double NA = std::nan("");

} // namespace

TEST_CASE("regime grid") {
    const auto grid = regime_grid();
    REQUIRE(grid.size() == 33);
    CHECK(grid.front().kind == RegimeKind::Never);
    CHECK(grid.front().q() == 0.0);
    CHECK(grid[1].q() == 200.0);
    CHECK(grid[31].q() == 500.0);
    CHECK(std::isinf(grid.back().q()));
    for (const auto& r : grid) CHECK(parse_regime(r.label()) == r);
    CHECK_THROWS_AS(parse_regime("abc"), ConfigError);
    CHECK_THROWS_AS(regime_grid(500, 200, 10), ConfigError);
}

TEST_CASE("regime_rule") {
    SUBCASE("immediate at day 0 ignores Z(0)") {
        for (double z : {50.0, 900.0, NA}) {
            CHECK(regime_rule(subject("a", {{0, z, false}}), RegimeSpec::immediate(), 0));
        }
    }
    SUBCASE("never") { CHECK(!regime_rule(subject("a", {{0, NA, false}}), RegimeSpec::never(), 0)); }
    SUBCASE("day 0 threshold rule") {
        const auto q = RegimeSpec::at_threshold(350);
        CHECK(regime_rule(subject("a", {{0, 300, false}}), q, 0));
        CHECK(!regime_rule(subject("a", {{0, 350, false}}), q, 0));
        CHECK(regime_rule(subject("a", {{0, NA, false}}), q, 0)); // missing baseline CD4
    }
    SUBCASE("first crossing") {
        const auto s = subject("a", {{0, 450, false}, {90, 380, false}});
        CHECK(regime_rule(s, RegimeSpec::at_threshold(400), 1));
        CHECK(!regime_rule(s, RegimeSpec::at_threshold(300), 1));
    }
    SUBCASE("already treated") {
        const auto s = subject("a", {{0, 800, true}, {90, 900, true}});
        CHECK(regime_rule(s, RegimeSpec::at_threshold(200), 1));
    }
    SUBCASE("CD4 not yet observed after day 0") {
        const auto s = subject("a", {{0, NA, false}, {60, NA, false}});
        CHECK(!regime_rule(s, RegimeSpec::at_threshold(500), 1));
    }
}

TEST_CASE("compliance_process") {
    SUBCASE("immediate initiator complies throughout") {
        auto s = subject("a", {{0, 400, true}, {100, 500, true}, {200, 520, true}});
        const auto p = compliance_process(s, RegimeSpec::immediate(), 365);
        CHECK(p.compliant_through_follow_up());
        CHECK(p.times.size() == 3);
    }
    SUBCASE("never regime deviates at initiation") {
        auto s = subject("a", {{0, 400, false}, {100, 300, true}, {200, 520, true}});
        const auto p = compliance_process(s, RegimeSpec::never(), 365);
        CHECK(p.deviation_time == 100.0);
        CHECK(p.compliant_at(99.9));
        CHECK(!p.compliant_at(100.0));
    }
    SUBCASE("q=350 follower with CD4 500 -> 300 at day 90") {
        auto s = subject("a", {{0, 500, false}, {90, 300, true}, {180, 420, true}});
        const auto p = compliance_process(s, RegimeSpec::at_threshold(350), 365);
        CHECK(p.compliant_through_follow_up());
        // not the 250 regime: initiated above its threshold
        CHECK(compliance_process(s, RegimeSpec::at_threshold(250), 365).deviation_time == 90.0);
        // 450: the first crossing is also at day 90
        CHECK(compliance_process(s, RegimeSpec::at_threshold(450), 365).compliant_through_follow_up());
        // 550: CD4 at day 0 was already below, initiation was due at day 0
        CHECK(compliance_process(s, RegimeSpec::at_threshold(550), 365).deviation_time == 0.0);
    }
    SUBCASE("missed crossing") {
        auto s = subject("a", {{0, 500, false}, {90, 300, false}, {180, 280, true}});
        CHECK(compliance_process(s, RegimeSpec::at_threshold(350), 365).deviation_time == 90.0);
    }
    SUBCASE("untreated subject complies with never and every threshold below its CD4 path") {
        auto s = subject("a", {{0, 900, false}, {100, 820, false}, {200, 760, false}});
        CHECK(compliance_process(s, RegimeSpec::never(), 365).compliant_through_follow_up());
        for (const auto& r : regime_grid()) {
            if (r.kind != RegimeKind::Threshold) continue;
            CHECK(compliance_process(s, r, 365).compliant_through_follow_up());
        }
        CHECK(compliance_process(s, RegimeSpec::immediate(), 365).deviation_time == 0.0);
    }
    SUBCASE("immediate complies iff A = 0") {
        auto late = subject("a", {{0, 300, false}, {14, 300, true}});
        CHECK(compliance_process(late, RegimeSpec::immediate(), 365).deviation_time == 0.0);
        CHECK(compliance_process(late, RegimeSpec::immediate(30), 365).compliant_through_follow_up());
    }
    SUBCASE("evaluation stops at U and freezes afterwards") {
        auto s = subject("a", {{0, 500, false}, {100, 480, false}, {300, 200, false}});
        s.censor_time = 200.0;
        const auto p = compliance_process(s, RegimeSpec::at_threshold(350), 365);
        CHECK(p.follow_up == 200.0);
        CHECK(p.compliant_at(365.0)); // frozen at its value at C
        CHECK(p.times.size() == 2);
    }
    SUBCASE("deterministic") {
        auto s = subject("a", {{0, 500, false}, {90, 300, true}});
        const auto a = compliance_process(s, RegimeSpec::at_threshold(400), 365);
        const auto b = compliance_process(s, RegimeSpec::at_threshold(400), 365);
        CHECK(a.values == b.values);
        CHECK(a.deviation_time == b.deviation_time);
    }
}

TEST_CASE("compliance_survivor") {
    const auto never = RegimeSpec::never();
    SUBCASE("no deviations gives S = 1") {
        CohortDataset c;
        c.subjects = {subject("a", {{0, 500, false}, {100, 400, false}}), subject("b", {{0, 600, false}})};
        const auto h = compliance_survivor(c, never, 365);
        CHECK(h.empty());
        CHECK(h.survivor(365) == 1.0);
    }
    SUBCASE("one of three deviates at day 10") {
        CohortDataset c;
        c.subjects = {subject("a", {{0, 500, false}, {10, 400, true}, {40, 400, true}}),
                      subject("b", {{0, 600, false}, {50, 600, false}}), subject("c", {{0, 700, false}, {30, 700, false}})};
        const auto h = compliance_survivor(c, never, 365);
        CHECK(std::abs(h.survivor(10) - std::exp(-1.0 / 3)) < 1e-15);

        CohortDataset doubled = c;
        for (const auto& s : c.subjects) {
            auto copy = s;
            copy.subject_id += "_copy";
            doubled.subjects.push_back(copy);
        }
        const auto h2 = compliance_survivor(doubled, never, 365);
        CHECK(h2.jump_times() == h.jump_times());
        CHECK(h2.increments() == h.increments());
    }
    SUBCASE("nobody follows the regime") {
        CohortDataset c;
        c.subjects = {subject("a", {{0, 500, true}})};
        CHECK_THROWS_WITH_AS(compliance_survivor(c, never, 365), doctest::Contains("regime never followed"),
                             DataError);
    }
    SUBCASE("deviations at day 0 enter the hazard") {
        CohortDataset c;
        c.subjects = {subject("a", {{0, 500, true}}), subject("b", {{0, 600, false}})};
        CHECK(std::abs(compliance_survivor(c, never, 365).value(0.0) - 0.5) < 1e-15);
    }
}

TEST_CASE("compliance table") {
    CohortDataset c;
    c.subjects = {subject("a", {{0, 500, false}, {90, 300, true}})};
    SubjectHistory empty;
    empty.subject_id = "z";
    empty.baseline.age_at_diagnosis = 2.0;
    c.subjects.push_back(empty);
    const std::vector<RegimeSpec> rs = {RegimeSpec::never(), RegimeSpec::at_threshold(350)};
    CHECK(compliance_table(c, rs, 365) == "subject_id,never,350\na,90,compliant\nz,NA,NA\n");
}
