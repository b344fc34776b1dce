#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "ncchi/distributions.hpp"
#include "ncchi/synthetic.hpp"
#include "oracles.hpp"

using namespace ncchi;

namespace {

NoiseModel chi(double nu, double sigma) { return {Family::Chi, nu, sigma * sigma}; }
NoiseModel ncchi_model(double nu, double sigma) { return {Family::NcChi, nu, sigma * sigma}; }

double ncchi_integral(double mu, double nu, double sigma) {
    const NoiseModel m = ncchi_model(nu, sigma);
    const double hi = mu + 12.0 * sigma * std::sqrt(nu);
    return oracle::integrate([&](double x) { return x > 0 ? std::exp(ncchi_logpdf({x, mu}, m)) : 0.0; }, 0.0, hi);
}

}  // namespace

TEST_SUITE("distributions") {

TEST_CASE("family names") {
    CHECK(family_from_string("gauss") == Family::Gaussian);
    CHECK(family_from_string("gaussian") == Family::Gaussian);
    CHECK(family_from_string("chi") == Family::Chi);
    CHECK(family_from_string("ncchi") == Family::NcChi);
    CHECK(family_from_string("nc-chi") == Family::NcChi);
    CHECK_THROWS_AS(family_from_string("rice"), std::invalid_argument);
    for (Family f : {Family::Gaussian, Family::Chi, Family::NcChi}) CHECK(family_from_string(to_string(f)) == f);
}

TEST_CASE("noise model validation") {
    CHECK_THROWS_AS((NoiseModel{Family::NcChi, 0.0, 1.0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((NoiseModel{Family::NcChi, 2.0, 0.0}.validate()), std::invalid_argument);
    CHECK_NOTHROW((NoiseModel{Family::Gaussian, 0.0, 1.0}.validate()));
}

TEST_CASE("chi_logpdf reference values") {
    CHECK(chi_logpdf(1.0, chi(2, 1)) == doctest::Approx(-0.5).epsilon(1e-15));
    CHECK(chi_logpdf(1.0, chi(3, 1)) == doctest::Approx(std::log(std::sqrt(2.0 / std::numbers::pi)) - 0.5).epsilon(1e-14));
    CHECK(chi_logpdf(1.0, chi(3, 1)) == doctest::Approx(-0.7258).epsilon(1e-4));
}

TEST_CASE("chi_logpdf at zero and negative x") {
    CHECK(chi_logpdf(0.0, chi(2, 1)) == -std::numeric_limits<double>::infinity());
    // half-normal density at 0
    CHECK(chi_logpdf(0.0, chi(1, 1)) == doctest::Approx(0.5 * std::log(2.0 / std::numbers::pi)).epsilon(1e-14));
    CHECK_THROWS_AS(chi_logpdf(0.0, chi(0.5, 1)), std::domain_error);
    CHECK_THROWS_AS(chi_logpdf(-1.0, chi(2, 1)), std::domain_error);
    CHECK(ncchi_logpdf({0.0, 1.0}, ncchi_model(2, 1)) == -std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(ncchi_logpdf({-1.0, 1.0}, ncchi_model(2, 1)), std::domain_error);
}

TEST_CASE("chi density integrates to one") {
    for (double nu : {2.0, 3.0, 7.5, 128.0}) {
        for (double sigma : {0.5, 1.0, 40.0}) {
            const NoiseModel m = chi(nu, sigma);
            const double hi = 12.0 * sigma * std::sqrt(nu);
            const double total =
                oracle::integrate([&](double x) { return x > 0 ? std::exp(chi_logpdf(x, m)) : 0.0; }, 0.0, hi);
            CHECK_MESSAGE(std::fabs(total - 1.0) < 1e-8, "nu " << nu << " sigma " << sigma);
        }
    }
}

TEST_CASE("ncchi_logpdf reference values") {
    CHECK(ncchi_logpdf({1.0, 1.0}, ncchi_model(2, 1)) == doctest::Approx(std::log(0.465759)).epsilon(1e-6));
    CHECK(ncchi_logpdf({1.0, 1.0}, ncchi_model(2, 1)) ==
          doctest::Approx(std::log(std::exp(-1.0) * 1.2660658777520082)).epsilon(1e-14));
    CHECK(ncchi_logpdf({1.0, 0.0}, ncchi_model(3, 1)) == doctest::Approx(chi_logpdf(1.0, chi(3, 1))).epsilon(1e-14));
    CHECK(ncchi_logpdf({1.0, 1e-12}, ncchi_model(3, 1)) == doctest::Approx(chi_logpdf(1.0, chi(3, 1))).epsilon(1e-12));
}

TEST_CASE("ncchi density integrates to one") {
    for (double nu : {1.0, 2.0, 4.0, 12.0, 31.5}) {
        for (double sigma : {0.3, 2.0, 25.0}) {
            for (double snr : {0.0, 0.5, 3.0, 40.0}) {
                const double mu = snr * sigma;
                CHECK_MESSAGE(std::fabs(ncchi_integral(mu, nu, sigma) - 1.0) < 1e-8,
                              "mu " << mu << " nu " << nu << " sigma " << sigma);
            }
        }
    }
    CHECK(std::fabs(ncchi_integral(5.0, 12.0, 2.0) - 1.0) < 1e-8);
}

TEST_CASE("nu = 2 matches an independent Rice density") {
    for (double sigma : {1.0, 2.0}) {
        for (double mu = 0.0; mu <= 10.0; mu += 0.5) {
            for (double x = 0.05; x <= 20.0; x += 0.05) {
                const double ref = oracle::rice_logpdf(x, mu, sigma);
                CHECK(std::fabs(ncchi_logpdf({x, mu}, ncchi_model(2, sigma)) - ref) < 1e-12);
            }
        }
    }
}

TEST_CASE("small-mu branch is continuous with the chi limit") {
    for (double nu : {1.0, 2.0, 3.0, 12.0}) {
        for (double x : {0.2, 1.0, 4.0}) {
            const NoiseModel m = ncchi_model(nu, 1.3);
            const double a = ncchi_logpdf({x, 1e-6}, m);
            const double b = ncchi_logpdf({x, 1e-8}, m);
            CHECK(std::fabs(a - b) < 1e-6);
            CHECK(std::fabs(b - chi_logpdf(x, {Family::Chi, nu, 1.69})) < 1e-10);
            // either side of the branch threshold z = 1e-6
            const double below = ncchi_logpdf({x, 0.99e-6 * 1.69 / x}, m);
            const double above = ncchi_logpdf({x, 1.01e-6 * 1.69 / x}, m);
            CHECK(std::fabs(below - above) < 1e-12);
        }
    }
}

TEST_CASE("gaussian_logpdf") {
    const NoiseModel g{Family::Gaussian, 0.0, 4.0};
    CHECK(gaussian_logpdf({3.0, 1.0}, g) == doctest::Approx(-0.5 * 4.0 / 4.0 - 0.5 * std::log(2.0 * std::numbers::pi * 4.0)));
    CHECK(log_likelihood({3.0, 1.0}, g) == gaussian_logpdf({3.0, 1.0}, g));
    CHECK(log_likelihood({3.0, 1.0}, {Family::Chi, 2.0, 4.0}) == chi_logpdf(3.0, {Family::Chi, 2.0, 4.0}));
}

TEST_CASE("ncchi_mean reference values") {
    CHECK(ncchi_mean(ncchi_model(2, 1), 0.0) == doctest::Approx(std::sqrt(std::numbers::pi / 2.0)).epsilon(1e-14));
    CHECK(ncchi_mean(ncchi_model(2, 1), 0.0) == doctest::Approx(1.253314).epsilon(1e-6));
    CHECK(expected_signal({Family::Gaussian, 2.0, 1.0}, 3.0) == 3.0);
}

TEST_CASE("ncchi_mean matches the quadrature mean") {
    for (double nu : {0.7, 1.0, 2.0, 5.5, 32.0}) {
        for (double snr : {0.0, 0.7, 2.0, 8.0, 30.0}) {
            const double sigma = 1.7;
            const double mu = snr * sigma;
            const NoiseModel m = ncchi_model(nu, sigma);
            const double hi = mu + 12.0 * sigma * std::sqrt(nu);
            const double ref = oracle::integrate(
                [&](double x) { return x > 0 ? x * std::exp(ncchi_logpdf({x, mu}, m)) : 0.0; }, 0.0, hi);
            CHECK(ncchi_mean(m, mu) == doctest::Approx(ref).epsilon(1e-9));
        }
    }
}

TEST_CASE("below one degree of freedom the mean falls under mu at high SNR") {
    // E[x] ~ sqrt(mu^2 + (nu - 1) sigma^2)
    const NoiseModel m = ncchi_model(0.7, 1.0);
    CHECK(ncchi_mean(m, 20.0) < 20.0);
    CHECK(ncchi_mean(m, 20.0) == doctest::Approx(std::sqrt(400.0 - 0.3)).epsilon(1e-6));
}

TEST_CASE("ncchi_mean of Rice samples") {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> n01;
    std::vector<double> xs(1'000'000);
    for (auto& x : xs) {
        const double a = 10.0 + n01(rng), b = n01(rng);
        x = std::sqrt(a * a + b * b);
    }
    const auto m = oracle::moments(xs);
    CHECK(std::fabs(ncchi_mean(ncchi_model(2, 1), 10.0) - m.mean) < 3.0 * m.se());
}

TEST_CASE("ncchi_mean of sampler draws at nu = 12") {
    const NoiseModel model = ncchi_model(12, 1.5);
    auto rng = stream(99, 0, 0);
    std::vector<double> xs(1'000'000);
    for (auto& x : xs) x = sample_ncchi(3.0, model, rng);
    const auto m = oracle::moments(xs);
    CHECK(std::fabs(ncchi_mean(model, 3.0) - m.mean) < 3.0 * m.se());
}

TEST_CASE("ncchi_mean dominates mu and the zero-signal mean for nu >= 1") {
    for (double nu : {1.0, 2.0, 8.0, 64.0}) {
        const NoiseModel m = ncchi_model(nu, 2.0);
        const double floor = ncchi_mean(m, 0.0);
        double prev = 0.0;
        for (double mu = 0.0; mu < 1e4; mu = mu * 1.5 + 0.1) {
            const double e = ncchi_mean(m, mu);
            CHECK(e >= mu * (1.0 - 1e-14));
            CHECK(e >= floor * (1.0 - 1e-14));
            CHECK(e >= prev * (1.0 - 1e-14));
            prev = e;
        }
        CHECK(ncchi_mean(m, 1e6) == doctest::Approx(1e6).epsilon(1e-9 * nu));
    }
}

}
