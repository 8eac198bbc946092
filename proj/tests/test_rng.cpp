#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "mkid/rng.hpp"

using mkid::Rng;

TEST_CASE("underlying generator stream is the standard one", "[rng]") {
    // The C++ standard pins this value for a default-constructed mt19937_64,
    // which is what makes the raw stream portable across implementations.
    std::mt19937_64 eng;
    eng.discard(9999);
    CHECK(eng() == 9981545732273789042ull);
}

TEST_CASE("identical seeds give identical streams", "[rng]") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        REQUIRE(a.uniform01() == b.uniform01());
        REQUIRE(a.normal() == b.normal());
        REQUIRE(a.poisson(12.4) == b.poisson(12.4));
    }
    CHECK(Rng(42).bits() == 13930160852258120406ull);
}

TEST_CASE("seed derivation decorrelates sub-streams", "[rng]") {
    CHECK(mkid::derive_seed(1, 2) == 15390029708041997934ull);
    CHECK(mkid::derive_seed(1, 3) == 4636796436627489519ull);
    CHECK(mkid::derive_seed(1, 2) != mkid::derive_seed(2, 2));
    CHECK(mkid::derive_seed(1, 2) != mkid::derive_seed(1, 4));
}

TEST_CASE("uniform01 stays in [0,1) and is flat", "[rng]") {
    Rng g(3);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double u = g.uniform01();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    // 3 standard errors of the mean of U(0,1).
    CHECK(std::abs(sum / n - 0.5) < 3.0 / std::sqrt(12.0 * n));
}

TEST_CASE("normal variates have the right two moments", "[rng]") {
    Rng g(7);
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = g.normal();
        s += x;
        s2 += x * x;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / n));
}

TEST_CASE("poisson sample mean matches the rate", "[rng]") {
    Rng g(11);
    const int n = 100000;
    const double mu = 12.4;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = static_cast<double>(g.poisson(mu));
        REQUIRE(x >= 0.0);
        s += x;
        s2 += x * x;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean - mu) < 3.0 * std::sqrt(mu / n));
    // Poisson variance equals the mean; generous 5 percent window.
    CHECK(var == Catch::Approx(mu).epsilon(0.05));
    CHECK(g.poisson(0.0) == 0);
    CHECK_THROWS_AS(g.poisson(-1.0), mkid::InvalidInput);
}
