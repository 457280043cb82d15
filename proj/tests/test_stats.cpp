#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "alope/common.hpp"
#include "alope/stats.hpp"

using namespace alope;
namespace st = alope::stats;

namespace {

// Brute-force average-rank oracle: for each element, rank = (#smaller) + (1 + #equal) / 2.
std::vector<double> brute_force_ranks(const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::size_t smaller = 0, equal = 0;
        for (std::size_t j = 0; j < v.size(); ++j) {
            if (v[j] < v[i]) ++smaller;
            if (v[j] == v[i]) ++equal;
        }
        out[i] = static_cast<double>(smaller) + 0.5 * static_cast<double>(equal + 1);
    }
    return out;
}

// Independent one-pass pearson at long double for cross-checking.
double pearson_reference(const std::vector<double>& a, const std::vector<double>& b) {
    long double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
    const auto n = static_cast<long double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        sa += a[i];
        sb += b[i];
        sab += static_cast<long double>(a[i]) * b[i];
        saa += static_cast<long double>(a[i]) * a[i];
        sbb += static_cast<long double>(b[i]) * b[i];
    }
    const long double cov = sab - sa * sb / n;
    const long double va = saa - sa * sa / n;
    const long double vb = sbb - sb * sb / n;
    return static_cast<double>(cov / std::sqrt(va * vb));
}

std::vector<double> random_vec(Rng& rng, std::size_t n, bool with_ties) {
    std::vector<double> v(n);
    for (auto& x : v) x = with_ties ? std::floor(rng.uniform(0, 6)) : rng.uniform(0, 1);
    return v;
}

}  // namespace

TEST_CASE("spearman perfect monotone") {
    std::vector<double> a = {1, 2, 3}, b = {10, 20, 30};
    CHECK(st::spearman(a, b) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("spearman reversed") {
    std::vector<double> a = {1, 2, 3}, b = {3, 2, 1};
    CHECK(st::spearman(a, b) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("spearman tie case matches frozen average-rank value") {
    std::vector<double> a = {1, 2, 2, 4}, b = {1, 3, 2, 4};
    // 3 / sqrt(10), from the brute-force average-rank computation
    CHECK(st::spearman(a, b) == doctest::Approx(0.9486832980505139).epsilon(1e-14));
}

TEST_CASE("fractional ranks agree with brute force on tied data") {
    Rng rng(101);
    for (int rep = 0; rep < 50; ++rep) {
        auto v = random_vec(rng, 40, true);
        auto fast = st::fractional_ranks(v);
        auto slow = brute_force_ranks(v);
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-15));
    }
}

TEST_CASE("spearman invariant under strictly increasing transforms") {
    Rng rng(55);
    auto a = random_vec(rng, 64, true);
    auto b = random_vec(rng, 64, false);
    const double base = st::spearman(a, b);
    auto a_exp = a;
    for (auto& x : a_exp) x = std::exp(x);
    auto b_aff = b;
    for (auto& x : b_aff) x = 3.0 * x + 7.0;
    CHECK(st::spearman(a_exp, b) == doctest::Approx(base).epsilon(1e-13));
    CHECK(st::spearman(a, b_aff) == doctest::Approx(base).epsilon(1e-13));
    CHECK(st::spearman(b, a) == doctest::Approx(base).epsilon(1e-13));
}

TEST_CASE("spearman rejects constant input") {
    std::vector<double> a = {1, 1, 1}, b = {1, 2, 3};
    CHECK_THROWS_AS(st::spearman(a, b), DegenerateInputError);
    CHECK_THROWS_AS(st::spearman(b, std::vector<double>{5, 5, 5}), DegenerateInputError);
}

TEST_CASE("pearson affine and inverse") {
    std::vector<double> x = {0, 1, 2, 3, 4};
    std::vector<double> y = x;
    for (auto& v : y) v = 2 * v + 1;
    CHECK(st::pearson(x, y) == doctest::Approx(1.0).epsilon(1e-15));
    for (auto& v : y) v = -v;
    CHECK(st::pearson(x, y) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("pearson matches independent reference") {
    Rng rng(77);
    auto a = random_vec(rng, 100, false);
    auto b = random_vec(rng, 100, false);
    CHECK(std::fabs(st::pearson(a, b) - pearson_reference(a, b)) < 1e-12);
}

TEST_CASE("pearson rejects zero variance and short input") {
    std::vector<double> c = {2, 2, 2}, v = {1, 2, 3};
    CHECK_THROWS_AS(st::pearson(c, v), DegenerateInputError);
    CHECK_THROWS_AS(st::pearson(std::vector<double>{1}, std::vector<double>{2}), DegenerateInputError);
}

TEST_CASE("student t cdf basics") {
    CHECK(st::student_t_cdf(0.0, 7) == 0.5);
    // reference values from an independent implementation
    CHECK(st::student_t_cdf(1.5, 7) == doctest::Approx(0.911350756505015).epsilon(1e-10));
    CHECK(st::student_t_cdf(-2.3, 97) == doctest::Approx(0.011795680784095004).epsilon(1e-10));
    for (double t : {0.1, 0.7, 1.9, 3.3}) {
        for (double df : {4.0, 29.0, 997.0}) {
            CHECK(st::student_t_cdf(t, df) + st::student_t_cdf(-t, df) == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("williams symmetric null gives t zero p half") {
    auto r = st::williams_test(0.5, 0.5, 0.3, 50);
    CHECK(r.t == 0.0);
    CHECK(r.p == 0.5);
    CHECK(r.df == 47);
}

TEST_CASE("williams reference triple matches independent implementation") {
    auto r = st::williams_test(0.60, 0.55, 0.80, 1000);
    CHECK(r.t == doctest::Approx(3.144838202455009).epsilon(1e-10));
    CHECK(r.p == doctest::Approx(0.0008554852306555949).epsilon(1e-8));
    CHECK(r.df == 997);
}

TEST_CASE("williams p decreases monotonically in n") {
    double prev = 1.0;
    for (std::int64_t n : {10, 100, 1000}) {
        auto r = st::williams_test(0.60, 0.55, 0.80, n);
        CHECK(r.p < prev);
        prev = r.p;
    }
}

TEST_CASE("williams antisymmetry in the two metrics") {
    auto a = st::williams_test(0.62, 0.48, 0.7, 200);
    auto b = st::williams_test(0.48, 0.62, 0.7, 200);
    CHECK(a.t == doctest::Approx(-b.t).epsilon(1e-15));
}

TEST_CASE("williams input validation") {
    CHECK_THROWS_AS(st::williams_test(1.5, 0.2, 0.2, 100), std::invalid_argument);
    CHECK_THROWS_AS(st::williams_test(0.5, 0.2, 0.2, 3), std::invalid_argument);
    // K <= 0: r12 = r13 = 0.9 with strongly negative r23 makes the matrix non-PSD
    CHECK_THROWS_AS(st::williams_test(0.9, 0.9, -0.9, 100), DegenerateInputError);
}

TEST_CASE("williams identical-predictions boundary") {
    // r23 = 1 with matching reference correlations: no difference to test.
    auto res = st::williams_test(0.7, 0.7, 1.0, 50);
    CHECK(res.t == 0.0);
    CHECK(res.df == 47);
    CHECK(res.p == 0.5);
    auto two = st::williams_test(0.7, 0.7, 1.0, 50, true);
    CHECK(two.p == 1.0);
    // r23 = 1 with unequal rhos is still an infeasible matrix
    CHECK_THROWS_AS(st::williams_test(0.5, 0.3, 1.0, 50), DegenerateInputError);
    // spearman of a vector with itself must hit the boundary exactly
    std::vector<double> v = {3.1, 0.2, 9.9, 4.4, 7.3, 1.0};
    CHECK(st::spearman(v, v) == 1.0);
}

TEST_CASE("williams two sided doubles the tail") {
    auto one = st::williams_test(0.60, 0.55, 0.80, 1000, false);
    auto two = st::williams_test(0.60, 0.55, 0.80, 1000, true);
    CHECK(two.p == doctest::Approx(2.0 * one.p).epsilon(1e-12));
}
