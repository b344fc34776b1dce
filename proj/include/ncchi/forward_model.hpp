#pragma once

#include <Eigen/Core>

namespace ncchi {

/// One FLASH acquisition: TR (s), TE (s), flip angle (rad), MT pulse flag and
/// the second repeat time (s) used only by MT-weighted runs.
struct AcquisitionSettings {
    double tr = 0.025;
    double te = 0.0;
    double flip = 0.1;
    bool mt = false;
    double tr2 = 0.0;

    /// Throws std::invalid_argument on TR <= 0, TE < 0, flip outside (0, pi/2) or TR2 < 0.
    void validate() const;
};

/// Tissue parameters: R1 (1/s), R2* (1/s), PD (arbitrary units), MTsat.
struct VoxelParams {
    double r1 = 1.0;
    double r2s = 20.0;
    double pd = 1.0;
    double mtsat = 0.0;

    Eigen::Vector4d as_vector() const { return {r1, r2s, pd, mtsat}; }
    static VoxelParams from_vector(const Eigen::Vector4d& v) { return {v[0], v[1], v[2], v[3]}; }
};

enum ParamIndex : int { kR1 = 0, kR2s = 1, kPD = 2, kMTsat = 3 };

struct SignalDerivatives {
    double value = 0.0;
    Eigen::Vector4d grad = Eigen::Vector4d::Zero();
    Eigen::Matrix4d hess = Eigen::Matrix4d::Zero();
};

/// Spoiled gradient-echo signal. Non-MT runs use the steady state
///   PD sin(a) (1 - E1) / (1 - cos(a) E1) exp(-TE R2*),  E1 = exp(-TR R1);
/// MT runs use the two-interval saturation form with MTsat and TR2.
double signal(const VoxelParams& theta, const AcquisitionSettings& s);
Eigen::Vector4d signal_grad(const VoxelParams& theta, const AcquisitionSettings& s);
Eigen::Matrix4d signal_hess(const VoxelParams& theta, const AcquisitionSettings& s);

/// Value, gradient and Hessian in one pass.
SignalDerivatives signal_derivatives(const VoxelParams& theta, const AcquisitionSettings& s);

}  // namespace ncchi
