#include "ncchi/forward_model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ncchi {

void AcquisitionSettings::validate() const {
    if (!(tr > 0.0)) throw std::invalid_argument("acquisition: TR must be positive");
    if (!(te >= 0.0)) throw std::invalid_argument("acquisition: TE must be non-negative");
    if (!(flip > 0.0 && flip < 0.5 * std::numbers::pi)) {
        throw std::invalid_argument("acquisition: flip angle must lie in (0, 90) degrees");
    }
    if (!(tr2 >= 0.0)) throw std::invalid_argument("acquisition: TR2 must be non-negative");
}

// Both cases share mu = PD sin(a) exp(-TE R2*) N / D with
//   N = 1 + (m - 1) A - m B,  D = 1 + (m - 1) cos(a) A,
//   A = exp(-T R1), B = exp(-TR2 R1), T = TR + TR2,
// where m = MTsat for MT runs. Non-MT runs take m = 0 and TR2 = 0, which
// gives the plain FLASH steady state.
SignalDerivatives signal_derivatives(const VoxelParams& theta, const AcquisitionSettings& s) {
    const bool mt = s.mt;
    const double m = mt ? theta.mtsat : 0.0;
    const double t2 = mt ? s.tr2 : 0.0;
    const double t = s.tr + t2;
    const double c = std::cos(s.flip);
    const double a = std::exp(-t * theta.r1);
    const double b = std::exp(-t2 * theta.r1);

    const double n = -std::expm1(-t * theta.r1) + m * (a - b);
    const double n1 = -t * (m - 1.0) * a + m * t2 * b;
    const double n11 = t * t * (m - 1.0) * a - m * t2 * t2 * b;
    const double n4 = a - b;
    const double n14 = -t * a + t2 * b;

    const double d = 1.0 + (m - 1.0) * c * a;
    const double d1 = -t * (m - 1.0) * c * a;
    const double d11 = t * t * (m - 1.0) * c * a;
    const double d4 = c * a;
    const double d14 = -t * c * a;

    // q = N / D and its derivatives in (R1, MTsat)
    const double q = n / d;
    const double q1 = (n1 - q * d1) / d;
    const double q4 = mt ? (n4 - q * d4) / d : 0.0;
    const double q11 = (n11 - 2.0 * q1 * d1 - q * d11) / d;
    const double q14 = mt ? (n14 - q1 * d4 - q4 * d1 - q * d14) / d : 0.0;
    const double q44 = mt ? -2.0 * q4 * d4 / d : 0.0;

    const double decay = std::exp(-s.te * theta.r2s);
    const double amp = std::sin(s.flip) * decay;
    const double p = theta.pd * amp;
    const double mu = p * q;

    SignalDerivatives out;
    out.value = mu;
    auto& g = out.grad;
    g[kR1] = p * q1;
    g[kR2s] = -s.te * mu;
    g[kPD] = amp * q;
    g[kMTsat] = p * q4;

    auto& h = out.hess;
    h(kR1, kR1) = p * q11;
    h(kR1, kR2s) = -s.te * g[kR1];
    h(kR1, kPD) = amp * q1;
    h(kR1, kMTsat) = p * q14;
    h(kR2s, kR2s) = s.te * s.te * mu;
    h(kR2s, kPD) = -s.te * amp * q;
    h(kR2s, kMTsat) = -s.te * g[kMTsat];
    h(kPD, kPD) = 0.0;
    h(kPD, kMTsat) = amp * q4;
    h(kMTsat, kMTsat) = p * q44;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < i; ++j) h(i, j) = h(j, i);
    }
    return out;
}

double signal(const VoxelParams& theta, const AcquisitionSettings& s) {
    const bool mt = s.mt;
    const double m = mt ? theta.mtsat : 0.0;
    const double t2 = mt ? s.tr2 : 0.0;
    const double a = std::exp(-(s.tr + t2) * theta.r1);
    const double b = std::exp(-t2 * theta.r1);
    const double q = (-std::expm1(-(s.tr + t2) * theta.r1) + m * (a - b)) / (1.0 + (m - 1.0) * std::cos(s.flip) * a);
    // same association as signal_derivatives so both agree bit for bit
    const double amp = std::sin(s.flip) * std::exp(-s.te * theta.r2s);
    return theta.pd * amp * q;
}

Eigen::Vector4d signal_grad(const VoxelParams& theta, const AcquisitionSettings& s) {
    return signal_derivatives(theta, s).grad;
}

Eigen::Matrix4d signal_hess(const VoxelParams& theta, const AcquisitionSettings& s) {
    return signal_derivatives(theta, s).hess;
}

}  // namespace ncchi
