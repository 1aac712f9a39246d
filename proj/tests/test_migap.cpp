// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

#include "comoe/migap.hpp"

using namespace comoe;

namespace {

// Brute-force MI with explicit marginal arrays, sharing nothing with the
// library path beyond std::log.
double mi_oracle(std::size_t nx, std::size_t nm, const std::vector<double>& p) {
    std::vector<double> px(nx, 0.0), pm(nm, 0.0);
    for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t m = 0; m < nm; ++m) {
            px[x] += p[x * nm + m];
            pm[m] += p[x * nm + m];
        }
    double mi = 0.0;
    for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t m = 0; m < nm; ++m) {
            const double v = p[x * nm + m];
            if (v > 0.0) mi += v * std::log(v / (px[x] * pm[m]));
        }
    return mi;
}

DiscreteJoint random_joint(std::size_t nx, std::size_t nm, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.01, 1.0);
    std::vector<double> p(nx * nm);
    double z = 0.0;
    for (auto& v : p) z += (v = u(rng));
    for (auto& v : p) v /= z;
    return DiscreteJoint(nx, nm, std::move(p));
}

}  // namespace

TEST_CASE("independent joint carries zero information") {
    std::vector<double> px = {0.3, 0.7};
    std::vector<double> pm = {0.2, 0.5, 0.3};
    std::vector<double> p;
    for (double a : px)
        for (double b : pm) p.push_back(a * b);
    const double mi = mutual_information(DiscreteJoint(2, 3, p));
    CHECK(mi >= 0.0);
    CHECK(mi <= 1e-12);
}

TEST_CASE("uniform bijection carries ln |M|") {
    std::vector<double> p(16, 0.0);
    for (int i = 0; i < 4; ++i) p[static_cast<std::size_t>(i * 4 + i)] = 0.25;
    CHECK(mutual_information(DiscreteJoint(4, 4, p)) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("mutual information matches a brute-force evaluation") {
    std::mt19937_64 rng(71);
    for (int t = 0; t < 20; ++t) {
        auto j = random_joint(5, 3, rng);
        CHECK(mutual_information(j) ==
              doctest::Approx(mi_oracle(5, 3, j.values())).epsilon(1e-12));
    }
}

TEST_CASE("factorizing joints score zero, correlated joints score positive") {
    std::mt19937_64 rng(73);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> px(3), pm(4);
        double zx = 0.0, zm = 0.0;
        for (auto& v : px) zx += (v = u(rng));
        for (auto& v : pm) zm += (v = u(rng));
        std::vector<double> p;
        for (double a : px)
            for (double b : pm) p.push_back((a / zx) * (b / zm));
        CHECK(mutual_information(DiscreteJoint(3, 4, p)) <= 1e-12);
    }
    // A joint with strong diagonal correlation is far from factorizing.
    std::vector<double> corr = {0.4, 0.05, 0.05, 0.05, 0.4, 0.05};
    CHECK(mutual_information(DiscreteJoint(2, 3, corr)) > 0.01);
}

TEST_CASE("malformed joints are rejected") {
    CHECK_THROWS_AS(DiscreteJoint(2, 2, {0.5, 0.5, 0.5, -0.5}), ValidationError);
    CHECK_THROWS_AS(DiscreteJoint(2, 2, {0.3, 0.3, 0.3, 0.3}), ValidationError);
    CHECK_THROWS_AS(DiscreteJoint(2, 2, {0.5, 0.5}), ValidationError);
    CHECK_THROWS_AS(DiscreteJoint(0, 2, {}), ValidationError);
    CHECK_THROWS_AS(mutual_information(DiscreteJoint()), ValidationError);
}

TEST_CASE("identical joints give a zero gap and the composed case gives ln m") {
    std::mt19937_64 rng(79);
    auto j = random_joint(4, 4, rng);
    CHECK(mi_gap({j, j}) == 0.0);

    auto s = make_deterministic_vs_independent(4);
    CHECK(mi_gap(s) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(mi_gap(s) == mutual_information(s.joint_pos) - mutual_information(s.joint_neg));
}

TEST_CASE("diverging x-marginals are rejected") {
    DiscreteJoint pos(2, 2, {0.25, 0.25, 0.25, 0.25});
    DiscreteJoint neg(2, 2, {0.3, 0.3, 0.2, 0.2});
    CHECK_THROWS_AS(mi_gap({pos, neg}), DomainError);
    CHECK_THROWS_AS(validate_gap_scenario({pos, neg}), DomainError);
    DiscreteJoint wider(3, 2, {0.2, 0.2, 0.2, 0.2, 0.1, 0.1});
    CHECK_THROWS_AS(mi_gap({pos, wider}), DomainError);
}

TEST_CASE("deterministic scenario has a closed-form exact estimate") {
    // h1 = m for the realized pair, h2 = 1 always, so every tuple evaluates
    // to log(N m / (m + N)) and slack is log(1 + m/N), decreasing in N.
    const std::size_t m = 4;
    auto s = make_deterministic_vs_independent(m);
    double prev_slack = 1e300;
    for (std::size_t N : {1, 4, 16, 64}) {
        auto est = infonce_estimate(s, N, 1000, 42);
        CHECK(est.exact);
        CHECK(est.std_error == 0.0);
        const double expect =
            std::log(static_cast<double>(N) * m / static_cast<double>(m + N));
        CHECK(est.value == doctest::Approx(expect).epsilon(1e-9));
        const double slack = mi_gap(s) - est.value;
        CHECK(slack == doctest::Approx(std::log(1.0 + static_cast<double>(m) / N))
                           .epsilon(1e-9));
        CHECK(slack < prev_slack);
        prev_slack = slack;
    }
}

TEST_CASE("exact estimates respect the bound within 1e-9") {
    std::mt19937_64 rng(83);
    for (int t = 0; t < 25; ++t) {
        auto s = make_random_scenario(3 + t % 3, 2 + t % 3, 2 + (t + 1) % 3, rng);
        const double delta = mi_gap(s);
        for (std::size_t N : {1, 4, 16}) {
            auto est = infonce_estimate(s, N, 100, 7);
            REQUIRE(est.exact);
            CHECK(delta - est.value >= -1e-9);
        }
    }
}

TEST_CASE("zero-gap scenario estimates stay at or below zero") {
    auto s = make_independent_pair(4, 4);
    CHECK(mi_gap(s) == doctest::Approx(0.0).epsilon(1e-12));
    auto est = infonce_estimate(s, 1, 1000, 99);
    REQUIRE(est.exact);
    CHECK(est.value <= 1e-9);
}

TEST_CASE("Monte-Carlo path is reproducible and agrees with enumeration") {
    std::mt19937_64 rng(89);
    auto s = make_random_scenario(4, 3, 3, rng);
    auto exact = infonce_estimate(s, 4, 100, 0, EstimateMode::kExact);
    auto mc1 = infonce_estimate(s, 4, 60000, 12345, EstimateMode::kMonteCarlo);
    auto mc2 = infonce_estimate(s, 4, 60000, 12345, EstimateMode::kMonteCarlo);
    CHECK(mc1.value == mc2.value);
    CHECK(mc1.std_error == mc2.std_error);
    CHECK_FALSE(mc1.exact);
    CHECK(mc1.std_error > 0.0);
    CHECK(std::fabs(mc1.value - exact.value) <= 4.0 * mc1.std_error);

    auto mc3 = infonce_estimate(s, 4, 60000, 54321, EstimateMode::kMonteCarlo);
    CHECK(mc3.value != mc1.value);
}

TEST_CASE("large supports fall back to sampling and still respect the bound") {
    std::mt19937_64 rng(97);
    auto s = make_random_scenario(10, 10, 10, rng);
    const double delta = mi_gap(s);
    for (std::size_t N : {1, 16}) {
        auto est = infonce_estimate(s, N, 40000, 7 + N);
        CHECK_FALSE(est.exact);
        CHECK(est.std_error > 0.0);
        CHECK(delta - est.value >= -3.0 * est.std_error);
    }
    CHECK_THROWS_AS(infonce_estimate(s, 64, 100, 1, EstimateMode::kExact), ContractError);
}

TEST_CASE("degenerate negative conditionals are reported") {
    // x = 1 carries 5e-10 positive mass (inside the marginal tolerance)
    // while the negative joint gives it exactly zero.
    const double eps = 5e-10;
    DiscreteJoint pos(2, 2, {(1 - eps) / 2, (1 - eps) / 2, eps / 2, eps / 2});
    DiscreteJoint neg(2, 2, {0.5, 0.5, 0.0, 0.0});
    CHECK_THROWS_AS(infonce_estimate({pos, neg}, 2, 100, 1), DomainError);
}

TEST_CASE("estimate argument contracts") {
    auto s = make_independent_pair(2, 2);
    CHECK_THROWS_AS(infonce_estimate(s, 0, 100, 1), ContractError);
    CHECK_THROWS_AS(infonce_estimate(s, 1, 0, 1), ContractError);
}

TEST_CASE("bound report covers the grid and serializes cleanly") {
    std::vector<GapScenario> scenarios = {make_deterministic_vs_independent(4),
                                          make_independent_pair(3, 3)};
    std::vector<std::size_t> Ns = {1, 4, 16};
    auto rows = bound_report(scenarios, Ns, 5000, 77);
    REQUIRE(rows.size() == 6);
    for (const auto& r : rows) {
        CHECK(r.slack == r.delta_I - r.estimate);
        CHECK(r.slack >= -3.0 * r.std_error - 1e-9);
    }
    // Deterministic scenario rows come first; slack shrinks with N.
    CHECK(rows[0].slack > rows[1].slack);
    CHECK(rows[1].slack > rows[2].slack);

    auto csv = bound_report_csv(rows);
    std::istringstream is(csv);
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "scenario_id,N,delta_I,estimate,slack,stderr");
    std::size_t data_lines = 0;
    while (std::getline(is, line)) {
        ++data_lines;
        CHECK(std::count(line.begin(), line.end(), ',') == 5);
    }
    CHECK(data_lines == 6);

    CHECK(bound_report_csv({}) == "scenario_id,N,delta_I,estimate,slack,stderr\n");

    // Same seed, same table.
    auto rows2 = bound_report(scenarios, Ns, 5000, 77);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].estimate == rows2[i].estimate);
        CHECK(rows[i].std_error == rows2[i].std_error);
    }
}

TEST_CASE("builtin scenario suite is valid and bound-consistent") {
    auto suite = builtin_scenarios();
    CHECK(suite.size() >= 10);
    for (const auto& s : suite) validate_gap_scenario(s);
    auto rows = bound_report(suite, {1, 4}, 20000, 3);
    for (const auto& r : rows) CHECK(r.slack >= -3.0 * r.std_error - 1e-9);
}

TEST_CASE("scenario files load and validate") {
    const std::string path = "scenarios_test.json";
    {
        std::ofstream out(path);
        out << R"({"scenarios": [
            {"joint_pos": [[0.25, 0.25], [0.25, 0.25]],
             "joint_neg": [[0.4, 0.1], [0.1, 0.4]]}
        ]})";
    }
    auto loaded = load_scenarios(path);
    REQUIRE(loaded.size() == 1);
    CHECK(mi_gap(loaded[0]) < 0.0);  // negatives more informative here
    std::remove(path.c_str());

    {
        std::ofstream out(path);
        out << R"({"scenarios": [{"joint_pos": [[0.6, 0.4]], "joint_neg": [[0.3, 0.3]]}]})";
    }
    CHECK_THROWS_AS(load_scenarios(path), ValidationError);
    std::remove(path.c_str());

    {
        std::ofstream out(path);
        out << "{ not json";
    }
    CHECK_THROWS_AS(load_scenarios(path), IoError);
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_scenarios("does_not_exist.json"), IoError);
}
