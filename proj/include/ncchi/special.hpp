#pragma once

// Special functions used by the chi / noncentral-chi likelihoods.
//
// Everything here is a pure function of its arguments. Modified Bessel
// functions are only ever exposed in log form or as ratios so that callers
// never see overflow at high SNR.

namespace ncchi::special {

/// ln I_order(z) for order > -1, z >= 0.
///
/// Returns -inf for I_order(0) = 0 (order > 0) and +inf for the singular
/// negative-order case at z = 0. Throws std::domain_error outside the domain.
double log_bessel_i(double order, double z);

/// I_order(z) / I_{order-1}(z) for order > 0, z >= 0. Lies in [0, 1) when order >= 1/2;
/// smaller orders (nu < 1) can exceed one at moderate z.
double bessel_ratio(double order, double z);

double digamma(double x);
double trigamma(double x);

/// Generalised Laguerre function L_{1/2}^{(alpha)}(x) for x <= 0, alpha > -1.
///
/// Evaluated through Kummer's transformation as a Poisson mixture of
/// Gamma-function ratios, switching to the large-argument asymptotic series
/// when |x| is large.
double laguerre_half(double alpha, double x);

}  // namespace ncchi::special
