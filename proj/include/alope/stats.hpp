#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "alope/common.hpp"

namespace alope::stats {

// 1-based fractional (average) ranks; tied values share the mean of their ranks.
std::vector<double> fractional_ranks(std::span<const double> values);

// Product-moment correlation, two-pass, 64-bit accumulation.
// Throws DegenerateInputError for n < 2 or zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

// Pearson correlation of the fractional rank vectors.
double spearman(std::span<const double> a, std::span<const double> b);

// Regularized incomplete beta I_x(a, b) via continued fraction.
double incomplete_beta(double a, double b, double x);

// Student-t CDF with real df; CDF(0) == 0.5 exactly, |error| < 1e-10.
double student_t_cdf(double t, double df);

struct WilliamsResult {
    double t = 0.0;
    double p = 0.0;
    std::int64_t df = 0;
};

// Significance of the difference between two correlations r12 = corr(m1, human)
// and r13 = corr(m2, human) that share the human variable, with r23 = corr(m1, m2).
// t follows Student-t with n-3 df; p is one-sided (P[T > t]) unless two_sided.
WilliamsResult williams_test(double r12, double r13, double r23, std::int64_t n, bool two_sided = false);

}  // namespace alope::stats
