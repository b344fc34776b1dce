#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "ncchi/distributions.hpp"
#include "ncchi/forward_model.hpp"
#include "ncchi/volume_io.hpp"

namespace ncchi {

/// One observed intensity with the acquisition and noise model it came from.
struct Measurement {
    double x = 0.0;
    AcquisitionSettings settings;
    NoiseModel noise;
};

/// Negative log likelihood of a voxel's measurements. `likelihood` selects the
/// density (Gaussian or NcChi); each measurement supplies its own nu / sigma2.
double voxel_objective(const VoxelParams& theta, std::span<const Measurement> data, Family likelihood);

/// Bessel shrinkage factor I_{nu/2}(z) / I_{nu/2-1}(z), z = x mu / sigma2; 0 at z = 0.
double shrinkage(double x, double mu, const NoiseModel& noise);

enum class Curvature {
    /// Second-order term S = sum r d2mu replaced by its matrix absolute value
    /// (eigenvalues made non-negative) in coordinates scaled by s. Positive
    /// semidefinite and never below the signed form in Loewner order.
    Absolute,
    /// Signed residual, i.e. the Hessian of the objective with xi held fixed.
    Signed,
};

struct GradHess {
    Eigen::Vector4d g = Eigen::Vector4d::Zero();
    Eigen::Matrix4d h = Eigen::Matrix4d::Zero();
    /// sum dmu dmu^T / sigma2
    Eigen::Matrix4d gauss_newton = Eigen::Matrix4d::Zero();
    /// sum r d2mu, signed
    Eigen::Matrix4d second = Eigen::Matrix4d::Zero();
    bool finite = true;
};

/// Symmetric matrix with the eigenvalues of `a` replaced by their magnitudes.
Eigen::Matrix4d spectral_abs(const Eigen::Matrix4d& a);

/// Gradient of voxel_objective in (R1, R2*, PD, MTsat) and the Gauss-Newton-like
/// curvature  sum (dmu dmu^T + r d2mu) / sigma2  with residual r = mu - xi x
/// (the second term made positive semidefinite under Curvature::Absolute).
GradHess voxel_grad_hess(const VoxelParams& theta, std::span<const Measurement> data, Family likelihood,
                         Curvature curvature = Curvature::Absolute,
                         const Eigen::Vector4d& scale = Eigen::Vector4d::Ones());

struct SolverSettings {
    int max_iters = 50;
    /// Stop when the accepted decrease falls below tol * N.
    double tol = 1e-7;
    Family likelihood = Family::NcChi;
    int max_halvings = 10;
    int max_failures = 3;
    /// Levenberg damping as a fraction of trace(H) / 4.
    double damping = 1e-3;
    /// Absolute: always the absolute-residual curvature. Adaptive: the signed
    /// curvature whenever it is positive definite, absolute otherwise.
    enum class Hessian { Absolute, Adaptive } hessian = Hessian::Absolute;
    /// Box constraints on (R1, R2*, PD, MTsat); iterates are projected onto
    /// them. Zero lower / infinite upper bounds leave a parameter free.
    std::array<double, 4> lower{0.05, 0.1, 0.0, 0.0};
    std::array<double, 4> upper{20.0, 1000.0, std::numeric_limits<double>::infinity(), 1.0};
    /// Membrane penalty weight per map (R1, R2*, PD, MTsat) on log / logit values; 0 disables.
    std::array<double, 4> regularization{0.0, 0.0, 0.0, 0.0};
    int regularization_sweeps = 10;
    std::string mask_path;
    unsigned threads = 0;

    bool regularized() const;
};

void to_json(nlohmann::json& j, const SolverSettings& s);
/// Missing keys keep their current values.
void from_json(const nlohmann::json& j, SolverSettings& s);

/// Thrown by FitProblem::validate; `volume` names the offending input when known.
class ProblemError : public DataError {
public:
    ProblemError(const std::string& what, std::optional<std::size_t> volume = std::nullopt)
        : DataError(what), volume_(volume) {}
    std::optional<std::size_t> volume() const { return volume_; }

private:
    std::optional<std::size_t> volume_;
};

struct FitProblem {
    std::vector<EchoVolume> volumes;
    std::vector<AcquisitionSettings> settings;
    /// One noise model per volume (volumes of a run share their run's model).
    std::vector<NoiseModel> noise;
    Family likelihood = Family::NcChi;
    /// Non-zero marks voxels to fit; empty means every voxel.
    std::vector<std::uint8_t> mask;

    void validate() const;
    std::size_t voxel_count() const { return volumes.empty() ? 0 : volumes.front().voxel_count(); }
    bool in_mask(std::size_t v) const { return mask.empty() || mask[v] != 0; }
    std::vector<Measurement> measurements(std::size_t voxel) const;
};

enum class VoxelStatus : std::uint8_t {
    Outside = 0,
    Converged = 1,
    /// Iteration cap reached while still decreasing.
    MaxIterations = 2,
    /// Line search failed max_failures times in a row.
    NotConverged = 3,
    /// Non-finite gradient or objective; voxel skipped.
    NonFinite = 4,
};

struct VoxelFit {
    VoxelParams theta;
    double objective = 0.0;
    int iterations = 0;
    VoxelStatus status = VoxelStatus::Converged;
    /// Objective after every accepted step, starting with the initial value.
    std::vector<double> trace;
};

/// Quadratic penalty on the transformed parameters, sum_m w_m sum_nb (phi_m - nb_m)^2.
struct MembranePrior {
    Eigen::Vector4d weights = Eigen::Vector4d::Zero();
    std::vector<Eigen::Vector4d> neighbours;
};

/// Log-linear echo regression for R2* and amplitudes, rational approximation
/// for R1 / PD, closed-form MTsat; physiological defaults where degenerate.
VoxelParams initial_params(std::span<const Measurement> data);

/// Damped Newton iterations on (ln R1, ln R2*, ln PD, logit MTsat) with backtracking.
VoxelFit fit_voxel(std::span<const Measurement> data, Family likelihood, const SolverSettings& settings,
                   const std::optional<VoxelParams>& init = std::nullopt, const MembranePrior* prior = nullptr,
                   bool keep_trace = false);

/// Transformed coordinates used by the solver.
Eigen::Vector4d to_unconstrained(const VoxelParams& theta);
VoxelParams from_unconstrained(const Eigen::Vector4d& phi);

struct ParameterMaps {
    EchoVolume r1, r2s, pd, mtsat;
    EchoVolume objective, iterations;
    std::vector<VoxelStatus> status;

    VoxelParams at(std::size_t voxel) const {
        return {r1.data[voxel], r2s.data[voxel], pd.data[voxel], mtsat.data[voxel]};
    }
    std::size_t count(VoxelStatus s) const;
    /// Status as a float volume (codes of VoxelStatus).
    EchoVolume status_volume() const;
};

/// Blank maps on the grid of `like`.
ParameterMaps make_maps(const EchoVolume& like);

ParameterMaps fit_maps(const FitProblem& problem, const SolverSettings& settings);

}  // namespace ncchi
