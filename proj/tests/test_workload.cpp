#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "sesemi/workload.h"

using namespace sesemi::workload;

namespace {

bool monotone(const Trace& tr) {
    for (size_t i = 1; i < tr.size(); ++i)
        if (tr[i].t_ms < tr[i - 1].t_ms) return false;
    return true;
}

}  // namespace

TEST_CASE("poisson arrival count matches the rate over pooled seeds") {
    // 2 rps x 480 s x 20 seeds = 19200 expected arrivals; the pooled count has
    // a relative sigma of ~0.7%, so a 5% band is a >6-sigma property.
    size_t total = 0;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Trace tr = poisson_trace(2.0, 480.0, "u", "m", seed);
        CHECK(monotone(tr));
        for (const auto& e : tr) {
            REQUIRE(e.t_ms >= 0);
            REQUIRE(e.t_ms < 480'000.0);
        }
        total += tr.size();
    }
    CHECK(total > 19200 * 0.95);
    CHECK(total < 19200 * 1.05);
}

TEST_CASE("poisson traces are deterministic in the seed") {
    Trace a = poisson_trace(5.0, 60.0, "u", "m", 77);
    Trace b = poisson_trace(5.0, 60.0, "u", "m", 77);
    Trace c = poisson_trace(5.0, 60.0, "u", "m", 78);
    CHECK(a == b);
    CHECK(a != c);
    CHECK(poisson_trace(0.0, 60.0, "u", "m", 1).empty());
    CHECK(poisson_trace(2.0, 0.0, "u", "m", 1).empty());
    CHECK_THROWS_AS(poisson_trace(-1.0, 60.0, "u", "m", 1), std::invalid_argument);
}

TEST_CASE("mmpp alternates between the two rates on the switch grid") {
    // low 1 rps, high 40 rps, 60 s intervals over 240 s: [0,60) and [120,180)
    // are low, [60,120) and [180,240) are high.
    size_t low_total = 0, high_total = 0;
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Trace tr = mmpp_trace(1.0, 40.0, 60.0, 240.0, "u", "m", seed);
        CHECK(monotone(tr));
        for (const auto& e : tr) {
            REQUIRE(e.t_ms >= 0);
            REQUIRE(e.t_ms < 240'000.0);
            bool high = std::fmod(e.t_ms, 120'000.0) >= 60'000.0;
            (high ? high_total : low_total) += 1;
        }
    }
    // expectations: low 2x60x1x10 = 1200, high 2x60x40x10 = 48000
    CHECK(low_total > 1200 * 0.85);
    CHECK(low_total < 1200 * 1.15);
    CHECK(high_total > 48000 * 0.95);
    CHECK(high_total < 48000 * 1.05);
}

TEST_CASE("mmpp with equal rates behaves like a plain poisson stream") {
    size_t total = 0;
    for (uint64_t seed = 1; seed <= 10; ++seed)
        total += mmpp_trace(3.0, 3.0, 30.0, 300.0, "u", "m", seed).size();
    // 3 rps x 300 s x 10 = 9000 expected
    CHECK(total > 9000 * 0.94);
    CHECK(total < 9000 * 1.06);

    CHECK(mmpp_trace(2.0, 8.0, 60.0, 120.0, "u", "m", 5) ==
          mmpp_trace(2.0, 8.0, 60.0, 120.0, "u", "m", 5));
    CHECK_THROWS_AS(mmpp_trace(2.0, 8.0, 0.0, 120.0, "u", "m", 5), std::invalid_argument);
    CHECK_THROWS_AS(mmpp_trace(-2.0, 8.0, 60.0, 120.0, "u", "m", 5), std::invalid_argument);
}

TEST_CASE("mmpp silent low state emits bursts only") {
    Trace tr = mmpp_trace(0.0, 10.0, 60.0, 240.0, "u", "m", 3);
    CHECK(!tr.empty());
    for (const auto& e : tr) {
        bool high = std::fmod(e.t_ms, 120'000.0) >= 60'000.0;
        REQUIRE(high);
    }
}

TEST_CASE("interactive sessions visit each model once per session") {
    std::vector<std::string> models{"a", "b", "c", "d", "e"};
    Trace tr = interactive_sessions(models, {1000.0, 5000.0}, "u", 200.0);
    REQUIRE(tr.size() == 10);
    CHECK(monotone(tr));
    for (int s = 0; s < 2; ++s) {
        double start = s == 0 ? 1000.0 : 5000.0;
        for (int i = 0; i < 5; ++i) {
            CHECK(tr[s * 5 + i].model_id == models[i]);
            CHECK(tr[s * 5 + i].t_ms == doctest::Approx(start + 200.0 * i));
        }
    }
    CHECK_THROWS_AS(interactive_sessions({}, {0.0}, "u", 100.0), std::invalid_argument);
}

TEST_CASE("merge interleaves traces by time, stably") {
    Trace a = {{10, "u1", "m"}, {30, "u1", "m"}};
    Trace b = {{10, "u2", "m"}, {20, "u2", "m"}};
    Trace m = merge({a, b});
    REQUIRE(m.size() == 4);
    CHECK(monotone(m));
    CHECK(m[0].user_id == "u1");  // equal timestamps keep input order
    CHECK(m[1].user_id == "u2");
    CHECK(m[2].user_id == "u2");
    CHECK(m[3].user_id == "u1");
}

TEST_CASE("csv roundtrip is byte-stable") {
    Trace tr = merge({poisson_trace(3.0, 30.0, "alice", "mbnet", 9),
                      poisson_trace(1.0, 30.0, "bob", "rsnet", 10)});
    std::string csv = to_csv(tr);
    Trace back = from_csv(csv);
    REQUIRE(back.size() == tr.size());
    // timestamps rounded to the same 3 decimals on both sides
    CHECK(to_csv(back) == csv);
    for (size_t i = 0; i < tr.size(); ++i) {
        CHECK(back[i].user_id == tr[i].user_id);
        CHECK(back[i].model_id == tr[i].model_id);
        CHECK(back[i].t_ms == doctest::Approx(tr[i].t_ms).epsilon(1e-6));
    }
    CHECK(from_csv("t_ms,user_id,model_id\n").empty());
    CHECK_THROWS_AS(from_csv("1.0,only-one-comma"), std::invalid_argument);
}
