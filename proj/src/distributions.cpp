#include "ncchi/distributions.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "ncchi/special.hpp"

namespace ncchi {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Below this Bessel argument the noncentral density uses its mu -> 0 expansion.
constexpr double kSmallArgument = 1e-6;

// Density at x = 0 behaves like x^(nu-1).
double logpdf_at_zero(const char* fn, const NoiseModel& model) {
    if (model.nu > 1.0) return kNegInf;
    if (model.nu == 1.0) {
        // half-normal: sqrt(2 / (pi sigma2))
        return 0.5 * (std::numbers::ln2 - std::log(std::numbers::pi * model.sigma2));
    }
    throw std::domain_error(std::string(fn) + ": density is unbounded at x = 0 for nu < 1");
}

}  // namespace

std::string_view to_string(Family f) {
    switch (f) {
        case Family::Gaussian: return "gauss";
        case Family::Chi: return "chi";
        case Family::NcChi: return "ncchi";
    }
    return "unknown";
}

Family family_from_string(std::string_view name) {
    if (name == "gauss" || name == "gaussian") return Family::Gaussian;
    if (name == "chi") return Family::Chi;
    if (name == "ncchi" || name == "nc-chi") return Family::NcChi;
    throw std::invalid_argument("unknown likelihood family '" + std::string(name) + "'");
}

double NoiseModel::sigma() const { return std::sqrt(sigma2); }

void NoiseModel::validate() const {
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) {
        throw std::invalid_argument("noise model: sigma2 must be positive and finite");
    }
    if (family != Family::Gaussian && (!(nu > 0.0) || !std::isfinite(nu))) {
        throw std::invalid_argument("noise model: nu must be positive and finite");
    }
}

double chi_logpdf(double x, const NoiseModel& model) {
    if (!(x >= 0.0)) throw std::domain_error("chi_logpdf: x must be non-negative");
    if (x == 0.0) return logpdf_at_zero("chi_logpdf", model);
    const double nu = model.nu;
    return (1.0 - 0.5 * nu) * std::numbers::ln2 + (nu - 1.0) * std::log(x) - 0.5 * x * x / model.sigma2 -
           0.5 * nu * std::log(model.sigma2) - std::lgamma(0.5 * nu);
}

double ncchi_logpdf(const Observation& obs, const NoiseModel& model) {
    const double x = obs.x;
    const double mu = obs.mu;
    if (!(x >= 0.0)) throw std::domain_error("ncchi_logpdf: x must be non-negative");
    if (!(mu >= 0.0)) throw std::domain_error("ncchi_logpdf: mu must be non-negative");
    if (x == 0.0) return logpdf_at_zero("ncchi_logpdf", model);

    const double nu = model.nu;
    const double s2 = model.sigma2;
    const double z = mu * x / s2;
    const double quad = -0.5 * (x * x + mu * mu) / s2;
    if (z < kSmallArgument) {
        // ln mu cancels between the power term and ln I_{nu/2-1}(z) ~ (nu/2-1) ln(z/2) - lgamma(nu/2)
        const double half = 0.5 * nu;
        return quad + (nu - 1.0) * std::log(x) - half * std::log(s2) - (half - 1.0) * std::numbers::ln2 -
               std::lgamma(half) + std::log1p(z * z / (4.0 * half));
    }
    return quad + 0.5 * nu * std::log(x) + (1.0 - 0.5 * nu) * std::log(mu) - std::log(s2) +
           special::log_bessel_i(0.5 * nu - 1.0, z);
}

double gaussian_logpdf(const Observation& obs, const NoiseModel& model) {
    const double r = obs.x - obs.mu;
    return -0.5 * r * r / model.sigma2 - 0.5 * std::log(2.0 * std::numbers::pi * model.sigma2);
}

double log_likelihood(const Observation& obs, const NoiseModel& model) {
    switch (model.family) {
        case Family::Gaussian: return gaussian_logpdf(obs, model);
        case Family::Chi: return chi_logpdf(obs.x, model);
        case Family::NcChi: return ncchi_logpdf(obs, model);
    }
    return kNegInf;
}

double ncchi_mean(const NoiseModel& model, double mu) {
    if (!(mu >= 0.0)) throw std::domain_error("ncchi_mean: mu must be non-negative");
    const double sigma = model.sigma();
    return sigma * std::sqrt(0.5 * std::numbers::pi) *
           special::laguerre_half(0.5 * model.nu - 1.0, -0.5 * mu * mu / model.sigma2);
}

double expected_signal(const NoiseModel& model, double mu) {
    switch (model.family) {
        case Family::Gaussian: return mu;
        case Family::Chi: return ncchi_mean(model, 0.0);
        case Family::NcChi: return ncchi_mean(model, mu);
    }
    return mu;
}

}  // namespace ncchi
