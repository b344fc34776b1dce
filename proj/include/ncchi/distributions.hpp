#pragma once

#include <string>
#include <string_view>

namespace ncchi {

enum class Family { Gaussian, Chi, NcChi };

std::string_view to_string(Family f);
/// Accepts "gauss"/"gaussian", "chi", "ncchi"/"nc-chi".
Family family_from_string(std::string_view name);

/// Noise parameters: degrees of freedom and per-channel variance.
/// The Gaussian family ignores `nu`.
struct NoiseModel {
    Family family = Family::NcChi;
    double nu = 2.0;
    double sigma2 = 1.0;

    double sigma() const;
    /// Throws std::invalid_argument when nu <= 0 (non-Gaussian) or sigma2 <= 0.
    void validate() const;
};

/// A magnitude sample and the noise-free signal it is modelled around.
struct Observation {
    double x = 0.0;
    double mu = 0.0;
};

/// Log density of the (central) chi distribution with scale sigma.
/// x = 0 gives -inf for nu > 1; x < 0 (or x = 0 with nu < 1) is a domain error.
double chi_logpdf(double x, const NoiseModel& model);

/// Log density of the noncentral chi distribution.
///
/// Uses the small-argument Bessel limit when mu*x/sigma2 < 1e-6 so that
/// mu -> 0 continuously reduces to chi_logpdf.
double ncchi_logpdf(const Observation& obs, const NoiseModel& model);

double gaussian_logpdf(const Observation& obs, const NoiseModel& model);

/// Family-dispatched log likelihood ln p(x | mu). The Chi family treats mu as zero.
double log_likelihood(const Observation& obs, const NoiseModel& model);

/// E[x] under the noncentral chi model: sigma sqrt(pi/2) L_{1/2}^{(nu/2-1)}(-mu^2 / 2 sigma^2).
double ncchi_mean(const NoiseModel& model, double mu);

/// Expected magnitude for the given family; the Gaussian family returns mu.
double expected_signal(const NoiseModel& model, double mu);

}  // namespace ncchi
