#include "alope/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace alope::stats {

std::vector<double> fractional_ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });

    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
        // positions i..j (0-based) share the average of ranks i+1..j+1
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DegenerateInputError("pearson: lengths differ: " + std::to_string(a.size()) + " vs " +
                                   std::to_string(b.size()));
    const std::size_t n = a.size();
    if (n < 2) throw DegenerateInputError("pearson: need at least 2 samples, got " + std::to_string(n));
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0)
        throw DegenerateInputError("pearson: zero variance (constant vector), correlation undefined");
    // Identical deviation vectors produce exactly equal accumulations; return
    // exactly 1 so perfect correlations survive downstream equality checks.
    if (sab == saa && saa == sbb) return 1.0;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DegenerateInputError("spearman: lengths differ: " + std::to_string(a.size()) + " vs " +
                                   std::to_string(b.size()));
    if (a.size() < 2) throw DegenerateInputError("spearman: need at least 2 samples");
    const auto ra = fractional_ranks(a);
    const auto rb = fractional_ranks(b);
    return pearson(ra, rb);
}

namespace {

// Continued fraction for the incomplete beta (Lentz's method).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 1e-15;
    constexpr double kTiny = 1e-300;

    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
    if (df <= 0.0) throw DegenerateInputError("student_t_cdf: df must be positive");
    if (t == 0.0) return 0.5;
    const double x = df / (df + t * t);
    const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, x);
    return t > 0.0 ? 1.0 - tail : tail;
}

WilliamsResult williams_test(double r12, double r13, double r23, std::int64_t n, bool two_sided) {
    for (double r : {r12, r13, r23})
        if (r < -1.0 || r > 1.0)
            throw std::invalid_argument("williams_test: correlation " + std::to_string(r) + " outside [-1, 1]");
    if (n < 4) throw std::invalid_argument("williams_test: need n >= 4, got " + std::to_string(n));

    // Identical prediction vectors: r23 = 1 with equal reference correlations.
    // K collapses to 0 there, but the comparison is well-defined — no difference.
    if (r23 == 1.0 && r12 == r13) {
        WilliamsResult res;
        res.t = 0.0;
        res.df = n - 3;
        res.p = two_sided ? 1.0 : 0.5;
        return res;
    }

    const double k = 1.0 - r12 * r12 - r13 * r13 - r23 * r23 + 2.0 * r12 * r13 * r23;
    if (k <= 0.0)
        throw DegenerateInputError("williams_test: degenerate correlation matrix (K = " + std::to_string(k) + ")");
    const double nn = static_cast<double>(n);
    const double rbar = 0.5 * (r12 + r13);
    const double denom = 2.0 * k * (nn - 1.0) / (nn - 3.0) + rbar * rbar * std::pow(1.0 - r23, 3);
    const double t = (r12 - r13) * std::sqrt((nn - 1.0) * (1.0 + r23) / denom);

    WilliamsResult res;
    res.t = t;
    res.df = n - 3;
    const double cdf = student_t_cdf(t, static_cast<double>(res.df));
    res.p = two_sided ? 2.0 * (1.0 - student_t_cdf(std::fabs(t), static_cast<double>(res.df))) : 1.0 - cdf;
    return res;
}

}  // namespace alope::stats
