#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <edm2se/rng.hpp>
#include <edm2se/schedule.hpp>

#include "testing/oracles.hpp"

using namespace edm2se;

namespace {
const BridgeSchedule kSched{0.4, 2.6, 0.02};
}

TEST_CASE("closed-form variances match quadrature", "[schedule]") {
    for (int i = 0; i <= 200; ++i) {
        const double t = i / 200.0;
        const auto co = schedule_coefficients(kSched, t);
        const double fwd = testing::variance_by_quadrature(kSched.c, kSched.k, 0.0, t);
        const double bwd = testing::variance_by_quadrature(kSched.c, kSched.k, t, 1.0);
        REQUIRE(std::abs(co.var_fwd - fwd) < 1e-8);
        REQUIRE(std::abs(co.var_bwd - bwd) < 1e-8);
    }
}

TEST_CASE("frozen reference values", "[schedule]") {
    REQUIRE(schedule_total_variance(kSched) == Catch::Approx(1.2056370501840736).epsilon(1e-12));

    const auto mid = schedule_coefficients(kSched, 0.5);
    REQUIRE(mid.var_fwd == Catch::Approx(0.3348991806066871).epsilon(1e-12));
    REQUIRE(mid.var_bwd == Catch::Approx(0.8707378695773865).epsilon(1e-12));
    REQUIRE(mid.w_x == Catch::Approx(13.0 / 18.0).epsilon(1e-12));
    REQUIRE(mid.w_y == Catch::Approx(5.0 / 18.0).epsilon(1e-12));
    REQUIRE(mid.var_marg == Catch::Approx(0.2418716304381629).epsilon(1e-12));
    REQUIRE(mid.g == Catch::Approx(1.0198039027185570).epsilon(1e-12));

    const auto lo = schedule_coefficients(kSched, 0.02);
    REQUIRE(lo.var_fwd == Catch::Approx(0.008154848323096225).epsilon(1e-12));
    REQUIRE(lo.w_y == Catch::Approx(0.006763933077414271).epsilon(1e-12));
    REQUIRE(lo.var_marg == Catch::Approx(0.008099689474782338).epsilon(1e-12));

    const auto hi = schedule_coefficients(kSched, 0.98);
    REQUIRE(hi.var_bwd == Catch::Approx(0.05305956067519223).epsilon(1e-12));
    REQUIRE(hi.w_x == Catch::Approx(0.04400956379624467).epsilon(1e-12));
}

TEST_CASE("endpoint behaviour", "[schedule]") {
    const auto a = schedule_coefficients(kSched, 0.0);
    REQUIRE(a.var_fwd == 0.0);
    REQUIRE(a.w_x == 1.0);
    REQUIRE(a.w_y == 0.0);
    REQUIRE(a.var_marg == 0.0);
    REQUIRE(a.g == Catch::Approx(std::sqrt(0.4)).epsilon(1e-15));

    const auto b = schedule_coefficients(kSched, 1.0);
    REQUIRE(b.var_bwd == 0.0);
    REQUIRE(b.w_y == 1.0);
    REQUIRE(b.w_x == 0.0);
    REQUIRE(b.var_marg == 0.0);
}

TEST_CASE("weights partition unity and variances telescope", "[schedule]") {
    const double total = schedule_total_variance(kSched);
    for (int i = 0; i <= 97; ++i) {
        const double t = i / 97.0;
        const auto co = schedule_coefficients(kSched, t);
        REQUIRE(co.w_x + co.w_y == Catch::Approx(1.0).epsilon(1e-14));
        REQUIRE(co.var_fwd + co.var_bwd == Catch::Approx(total).epsilon(1e-14));
        REQUIRE(co.var_marg <= std::min(co.var_fwd, co.var_bwd) + 1e-15);
        REQUIRE(co.var_fwd >= 0.0);
        REQUIRE(co.var_bwd >= -1e-15);
    }
}

TEST_CASE("parameter and domain validation", "[schedule]") {
    REQUIRE_THROWS_AS(schedule_coefficients(BridgeSchedule{-0.1, 2.6, 0.02}, 0.5), std::invalid_argument);
    REQUIRE_THROWS_AS(schedule_coefficients(BridgeSchedule{0.4, 1.0, 0.02}, 0.5), std::invalid_argument);
    REQUIRE_THROWS_AS(schedule_coefficients(BridgeSchedule{0.4, 2.6, 0.0}, 0.5), std::invalid_argument);
    REQUIRE_THROWS_AS(schedule_coefficients(kSched, -0.01), std::domain_error);
    REQUIRE_THROWS_AS(schedule_coefficients(kSched, 1.01), std::domain_error);
}

TEST_CASE("marginal sampler matches analytic mean and variance", "[schedule]") {
    Rng rng(1234);
    const int n = 200000;
    TensorT<double> x0({n}), y({n}), z({n});
    x0.fill(0.7);
    y.fill(-0.4);
    for (size_t i = 0; i < z.numel(); ++i) z[i] = rng.normal();

    const double t = 0.37;
    const auto co = schedule_coefficients(kSched, t);
    const auto xt = sample_marginal(kSched, x0, y, t, z);

    const double want_mean = co.w_x * 0.7 + co.w_y * (-0.4);
    REQUIRE(xt.mean() == Catch::Approx(want_mean).margin(4.0 * std::sqrt(co.var_marg / n)));
    REQUIRE(xt.variance() == Catch::Approx(co.var_marg).epsilon(0.02));
}
