#include "ncchi/special.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

namespace ncchi::special {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kEps = 1e-17;

// Orders at or above this use the uniform (Debye) expansion once the power
// series becomes long; below it the Hankel expansion plus order recurrence.
constexpr double kDebyeMinOrder = 25.0;
// Series is used while the index of its largest term stays below this.
constexpr double kSeriesPeakLimit = 64.0;

[[noreturn]] void domain_fail(const char* fn, const std::string& what) {
    throw std::domain_error(std::string(fn) + ": " + what);
}

// ln sum_k (z^2/4)^k / (k! (order+1)_k). The leading factor
// (z/2)^order / Gamma(order+1) is left to the caller.
double log_series(double order, double z) {
    const double q = 0.25 * z * z;
    double term = 1.0;
    double sum = 1.0;
    double log_scale = 0.0;
    for (int k = 1; k < 100000; ++k) {
        term *= q / (k * (order + k));
        sum += term;
        if (sum > 1e250) {
            sum *= 1e-250;
            term *= 1e-250;
            log_scale += 250.0 * std::numbers::ln10;
        }
        if (term < kEps * sum && k > q / (order + k)) break;
    }
    return std::log(sum) + log_scale;
}

double series_log_i(double order, double z) {
    return order * std::log(0.5 * z) - std::lgamma(order + 1.0) + log_series(order, z);
}

bool in_series_region(double order, double z) {
    // peak of the series terms: k (order + k) = z^2 / 4
    const double a = std::max(order, 0.0);
    const double peak = 0.5 * (std::sqrt(a * a + z * z) - a);
    return z <= 20.0 || peak <= kSeriesPeakLimit;
}

// Hankel sum  sum_k (-1)^k a_k(order) / z^k  with
// I_order(z) ~ e^z / sqrt(2 pi z) * sum. Only called for |order| < 2 and
// z well above 100 where the series is well behaved.
double hankel_sum(double order, double z) {
    const double mu = 4.0 * order * order;
    double term = 1.0;
    double sum = 1.0;
    double prev = kInf;
    for (int k = 1; k < 200; ++k) {
        const double odd = 2.0 * k - 1.0;
        term *= -(mu - odd * odd) / (8.0 * k * z);
        const double mag = std::fabs(term);
        if (mag > prev) break;  // asymptotic series started to diverge
        sum += term;
        if (mag < kEps * std::fabs(sum)) break;
        prev = mag;
    }
    return sum;
}

double hankel_log_i(double order, double z) {
    return z - 0.5 * std::log(2.0 * std::numbers::pi * z) + std::log(hankel_sum(order, z));
}

// Debye polynomials u_1..u_6 evaluated at p.
double debye_sum(double order, double p) {
    const double p2 = p * p;
    const double u1 = p * (3.0 - 5.0 * p2) / 24.0;
    const double u2 = p2 * (81.0 + p2 * (-462.0 + p2 * 385.0)) / 1152.0;
    const double u3 =
        p * p2 * (30375.0 + p2 * (-369603.0 + p2 * (765765.0 - p2 * 425425.0))) / 414720.0;
    const double u4 = p2 * p2 *
                      (4465125.0 +
                       p2 * (-94121676.0 + p2 * (349922430.0 + p2 * (-446185740.0 + p2 * 185910725.0)))) /
                      39813120.0;
    const double u5 =
        p * p2 * p2 *
        (1519035525.0 +
         p2 * (-49286948607.0 +
               p2 * (284499769554.0 + p2 * (-614135872350.0 + p2 * (566098157625.0 - p2 * 188699385875.0))))) /
        6688604160.0;
    const double u6 =
        p2 * p2 * p2 *
        (2757049477875.0 +
         p2 * (-127577298354750.0 +
               p2 * (1050760774457901.0 +
                     p2 * (-3369032068261860.0 +
                           p2 * (5104696716244125.0 + p2 * (-3685299006138750.0 + p2 * 1023694168371875.0)))))) /
        4815794995200.0;
    const double inv = 1.0 / order;
    return 1.0 + inv * (u1 + inv * (u2 + inv * (u3 + inv * (u4 + inv * (u5 + inv * u6)))));
}

double debye_log_i(double order, double z) {
    const double t = z / order;
    const double s = std::sqrt(1.0 + t * t);
    const double eta = s + std::log(t / (1.0 + s));
    return order * eta - 0.5 * std::log(2.0 * std::numbers::pi * order) - 0.5 * std::log(s) +
           std::log(debye_sum(order, 1.0 / s));
}

// Gauss continued fraction  I_order / I_{order-1} = 1 / (2 order/z + 1 / (2 (order+1)/z + ...)),
// modified Lentz evaluation. Needs O(z) terms once z exceeds the order.
double ratio_continued_fraction(double order, double z) {
    constexpr double tiny = 1e-300;
    double f = 2.0 * order / z;
    double c = f;
    double d = 0.0;
    for (int k = 1; k < 100000; ++k) {
        const double b = 2.0 * (order + k) / z;
        d = b + d;
        d = d == 0.0 ? 1.0 / tiny : 1.0 / d;
        c = b + 1.0 / c;
        if (c == 0.0) c = tiny;
        const double delta = c * d;
        f *= delta;
        if (std::fabs(delta - 1.0) < 1e-16) break;
    }
    return 1.0 / f;
}

// Hankel-seeded upward recurrence for small orders at large z:
// returns ln I_order(z) and, through `top_ratio`, I_order / I_{order-1}.
double recurrence_log_i(double order, double z, double* top_ratio) {
    if (order < 1.0) {
        if (top_ratio) {
            *top_ratio = hankel_sum(order, z) / hankel_sum(order - 1.0, z);
        }
        return hankel_log_i(order, z);
    }
    const double base = order - std::floor(order);
    const int steps = static_cast<int>(std::floor(order));
    double log_i = hankel_log_i(base, z);
    double ratio = hankel_sum(base + 1.0, z) / hankel_sum(base, z);
    log_i += std::log(ratio);
    for (int j = 2; j <= steps; ++j) {
        ratio = 1.0 / ratio - 2.0 * (base + j - 1.0) / z;
        log_i += std::log(ratio);
    }
    if (top_ratio) *top_ratio = ratio;
    return log_i;
}

}  // namespace

double log_bessel_i(double order, double z) {
    if (!(order > -1.0)) domain_fail("log_bessel_i", "order must exceed -1");
    if (!(z >= 0.0)) domain_fail("log_bessel_i", "argument must be non-negative");
    if (z == 0.0) {
        if (order == 0.0) return 0.0;
        return order > 0.0 ? -kInf : kInf;
    }
    if (std::isinf(z)) return kInf;
    if (in_series_region(order, z)) return series_log_i(order, z);
    if (order >= kDebyeMinOrder) return debye_log_i(order, z);
    return recurrence_log_i(order, z, nullptr);
}

double bessel_ratio(double order, double z) {
    if (!(order > 0.0)) domain_fail("bessel_ratio", "order must be positive");
    if (!(z >= 0.0)) domain_fail("bessel_ratio", "argument must be non-negative");
    if (z == 0.0) return 0.0;
    const double lower = order - 1.0;
    double ratio = 0.0;
    if (std::isinf(z)) {
        ratio = 1.0;
    } else if (in_series_region(lower, z)) {
        ratio = ratio_continued_fraction(order, z);
    } else if (lower >= kDebyeMinOrder) {
        ratio = std::exp(debye_log_i(order, z) - debye_log_i(lower, z));
    } else {
        recurrence_log_i(order, z, &ratio);
    }
    // the ratio is strictly below one from order 1/2 up; rounding can reach it at large z
    if (order >= 0.5) ratio = std::min(ratio, std::nextafter(1.0, 0.0));
    return ratio;
}

double digamma(double x) {
    if (!(x > 0.0)) domain_fail("digamma", "argument must be positive");
    double shift = 0.0;
    while (x < 10.0) {
        shift -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // Bernoulli tail: -sum B_2k / (2k x^2k)
    const double tail =
        inv2 * (1.0 / 12.0 -
                inv2 * (1.0 / 120.0 -
                        inv2 * (1.0 / 252.0 -
                                inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    return shift + std::log(x) - 0.5 * inv - tail;
}

double trigamma(double x) {
    if (!(x > 0.0)) domain_fail("trigamma", "argument must be positive");
    double shift = 0.0;
    while (x < 10.0) {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    const double tail =
        inv * inv2 *
        (1.0 / 6.0 -
         inv2 * (1.0 / 30.0 -
                 inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    return shift + inv + 0.5 * inv2 + tail;
}

double laguerre_half(double alpha, double x) {
    if (!(alpha > -1.0)) domain_fail("laguerre_half", "alpha must exceed -1");
    if (!(x <= 0.0)) domain_fail("laguerre_half", "argument must be non-positive");
    const double b = alpha + 1.0;
    const double y = -x;
    const double two_over_sqrt_pi = 2.0 / std::sqrt(std::numbers::pi);

    if (y == 0.0) return std::exp(std::lgamma(b + 0.5) - std::lgamma(1.5) - std::lgamma(b));

    if (y >= 400.0 + 40.0 * b) {
        // 1F1(-1/2; b; -y) ~ Gamma(b)/Gamma(b+1/2) sqrt(y) sum_n (-1/2)_n (1/2-b)_n / (n! y^n)
        double term = 1.0;
        double sum = 1.0;
        double prev = kInf;
        for (int n = 1; n < 60; ++n) {
            term *= (n - 1.5) * (n - 0.5 - b) / (n * y);
            const double mag = std::fabs(term);
            if (mag > prev) break;
            sum += term;
            if (mag < kEps * std::fabs(sum)) break;
            prev = mag;
        }
        return two_over_sqrt_pi * std::sqrt(y) * sum;
    }

    // Kummer: L = (2/sqrt(pi)) sum_j Pois(j; y) Gamma(b+j+1/2)/Gamma(b+j),
    // summed outward from the Poisson mode.
    const double mode = std::floor(y);
    const double log_w0 = -y + mode * std::log(y) - std::lgamma(mode + 1.0);
    const double log_g0 = std::lgamma(b + mode + 0.5) - std::lgamma(b + mode);
    const double w0 = std::exp(log_w0);
    const double g0 = std::exp(log_g0);
    double sum = w0 * g0;

    double w = w0;
    double g = g0;
    for (double j = mode; j < mode + 1e7; j += 1.0) {
        w *= y / (j + 1.0);
        g *= (b + j + 0.5) / (b + j);
        const double term = w * g;
        sum += term;
        if (term < kEps * sum && j > y) break;
    }
    w = w0;
    g = g0;
    for (double j = mode; j > 0.0; j -= 1.0) {
        w *= j / y;
        g *= (b + j - 1.0) / (b + j - 0.5);
        const double term = w * g;
        sum += term;
        if (term < kEps * sum) break;
    }
    return two_over_sqrt_pi * sum;
}

}  // namespace ncchi::special
