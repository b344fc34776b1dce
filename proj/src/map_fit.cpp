#include "ncchi/map_fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <tuple>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "ncchi/parallel.hpp"
#include "ncchi/special.hpp"

namespace ncchi {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::size_t kVoxelChunk = 64;

constexpr double kDefaultR1 = 0.7;
constexpr double kDefaultR2s = 20.0;
constexpr double kDefaultMTsat = 0.02;
constexpr double kMinMTsat = 1e-4;
constexpr double kMaxMTsat = 0.9;

// Floor for non-positive intensities under the noncentral model, in units of sigma.
constexpr double kIntensityFloor = 1e-6;

double effective_x(double x, const NoiseModel& noise, Family likelihood) {
    if (likelihood == Family::Gaussian) return x;
    return std::max(x, kIntensityFloor * noise.sigma());
}

double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// Bounds in the solver coordinates; 0 and 1 map to -inf / +inf as appropriate.
Eigen::Vector4d to_unconstrained_bound(const std::array<double, 4>& b) {
    const double m = b[kMTsat];
    return {std::log(b[kR1]), std::log(b[kR2s]), std::log(b[kPD]), std::log(m) - std::log1p(-m)};
}

double penalty(const Eigen::Vector4d& phi, const MembranePrior* prior) {
    if (!prior) return 0.0;
    double total = 0.0;
    for (const auto& nb : prior->neighbours) total += prior->weights.dot((phi - nb).cwiseAbs2());
    return total;
}

// Run key: TR, flip, MT flag, TR2. Echoes of one run differ only in TE.
using RunKey = std::tuple<double, double, bool, double>;
RunKey run_key(const AcquisitionSettings& s) { return {s.tr, s.flip, s.mt, s.mt ? s.tr2 : 0.0}; }

struct RunAmplitude {
    AcquisitionSettings settings;
    double amplitude = 0.0;
};

}  // namespace

double shrinkage(double x, double mu, const NoiseModel& noise) {
    const double z = x * mu / noise.sigma2;
    if (!(z > 0.0)) return 0.0;
    return special::bessel_ratio(0.5 * noise.nu, z);
}

double voxel_objective(const VoxelParams& theta, std::span<const Measurement> data, Family likelihood) {
    double total = 0.0;
    for (const auto& m : data) {
        const double mu = signal(theta, m.settings);
        // extreme trial steps can overflow the forward model
        if (!std::isfinite(mu) || mu < 0.0) return kInf;
        const Observation obs{effective_x(m.x, m.noise, likelihood), mu};
        if (likelihood == Family::Gaussian) {
            total -= gaussian_logpdf(obs, m.noise);
        } else {
            total -= ncchi_logpdf(obs, m.noise);
        }
    }
    return total;
}

Eigen::Matrix4d spectral_abs(const Eigen::Matrix4d& a) {
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(a);
    const Eigen::Matrix4d out = eig.eigenvectors() * eig.eigenvalues().cwiseAbs().asDiagonal() * eig.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

GradHess voxel_grad_hess(const VoxelParams& theta, std::span<const Measurement> data, Family likelihood,
                         Curvature curvature, const Eigen::Vector4d& scale) {
    GradHess out;
    for (const auto& m : data) {
        const auto d = signal_derivatives(theta, m.settings);
        const double x = effective_x(m.x, m.noise, likelihood);
        const double xi = likelihood == Family::Gaussian ? 1.0 : shrinkage(x, d.value, m.noise);
        const double inv_s2 = 1.0 / m.noise.sigma2;
        const double residual = (d.value - xi * x) * inv_s2;
        out.g += residual * d.grad;
        out.gauss_newton += inv_s2 * d.grad * d.grad.transpose();
        out.second += residual * d.hess;
    }
    out.finite = out.g.allFinite() && out.gauss_newton.allFinite() && out.second.allFinite();
    if (!out.finite) return out;
    if (curvature == Curvature::Absolute) {
        const Eigen::Matrix4d scaled = scale.asDiagonal() * out.second * scale.asDiagonal();
        const Eigen::Vector4d inv = scale.cwiseInverse();
        out.h = out.gauss_newton + inv.asDiagonal() * spectral_abs(scaled) * inv.asDiagonal();
    } else {
        out.h = out.gauss_newton + out.second;
    }
    return out;
}

bool SolverSettings::regularized() const {
    return std::any_of(regularization.begin(), regularization.end(), [](double w) { return w > 0.0; });
}

namespace {

// JSON has no infinity: unbounded entries are written as null.
nlohmann::json bounds_to_json(const std::array<double, 4>& b) {
    nlohmann::json out = nlohmann::json::array();
    for (double v : b) out.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
    return out;
}

std::array<double, 4> bounds_from_json(const nlohmann::json& j, double missing) {
    if (!j.is_array() || j.size() != 4) throw std::invalid_argument("solver bounds: expected four values");
    std::array<double, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) out[i] = j[i].is_null() ? missing : j[i].get<double>();
    return out;
}

}  // namespace

void to_json(nlohmann::json& j, const SolverSettings& s) {
    j = nlohmann::json{{"max_iters", s.max_iters},
                       {"tol", s.tol},
                       {"likelihood", std::string(to_string(s.likelihood))},
                       {"max_halvings", s.max_halvings},
                       {"max_failures", s.max_failures},
                       {"damping", s.damping},
                       {"hessian", s.hessian == SolverSettings::Hessian::Adaptive ? "adaptive" : "absolute"},
                       {"lower", bounds_to_json(s.lower)},
                       {"upper", bounds_to_json(s.upper)},
                       {"regularization", s.regularization},
                       {"regularization_sweeps", s.regularization_sweeps},
                       {"mask", s.mask_path}};
}

void from_json(const nlohmann::json& j, SolverSettings& s) {
    s.max_iters = j.value("max_iters", s.max_iters);
    s.tol = j.value("tol", s.tol);
    if (j.contains("likelihood")) s.likelihood = family_from_string(j.at("likelihood").get<std::string>());
    s.max_halvings = j.value("max_halvings", s.max_halvings);
    s.max_failures = j.value("max_failures", s.max_failures);
    s.damping = j.value("damping", s.damping);
    if (j.contains("hessian")) {
        const auto h = j.at("hessian").get<std::string>();
        if (h != "absolute" && h != "adaptive") throw std::invalid_argument("hessian must be 'absolute' or 'adaptive'");
        s.hessian = h == "adaptive" ? SolverSettings::Hessian::Adaptive : SolverSettings::Hessian::Absolute;
    }
    if (j.contains("lower")) s.lower = bounds_from_json(j.at("lower"), 0.0);
    if (j.contains("upper")) s.upper = bounds_from_json(j.at("upper"), std::numeric_limits<double>::infinity());
    for (int i = 0; i < 4; ++i) {
        if (!(s.lower[i] >= 0.0 && s.lower[i] < s.upper[i])) throw std::invalid_argument("solver bounds: need 0 <= lower < upper");
    }
    if (s.upper[kMTsat] > 1.0) throw std::invalid_argument("solver bounds: MTsat upper bound exceeds 1");
    if (j.contains("regularization")) {
        const auto& r = j.at("regularization");
        if (r.is_number()) {
            s.regularization.fill(r.get<double>());
        } else {
            s.regularization = r.get<std::array<double, 4>>();
        }
    }
    s.regularization_sweeps = j.value("regularization_sweeps", s.regularization_sweeps);
    s.mask_path = j.value("mask", s.mask_path);
}

void FitProblem::validate() const {
    if (volumes.empty()) throw ProblemError("fit problem has no volumes");
    if (settings.size() != volumes.size()) throw ProblemError("one acquisition record is required per volume");
    if (noise.size() != volumes.size()) throw ProblemError("one noise model is required per volume");
    for (std::size_t i = 1; i < volumes.size(); ++i) {
        if (!volumes[i].same_grid(volumes.front())) {
            throw ProblemError("volume dimensions differ from the first volume", i);
        }
    }
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        if (volumes[i].data.size() != volumes[i].voxel_count()) throw ProblemError("volume data size mismatch", i);
        try {
            settings[i].validate();
            noise[i].validate();
        } catch (const std::invalid_argument& e) {
            throw ProblemError(e.what(), i);
        }
    }
    if (!mask.empty() && mask.size() != voxel_count()) throw ProblemError("mask dimensions differ from the volumes");
    if (volumes.size() < 4) throw ProblemError("at least four volumes are required");
    std::set<double> flips;
    std::set<double> echoes;
    for (const auto& s : settings) {
        flips.insert(s.flip);
        echoes.insert(s.te);
    }
    if (flips.size() < 2) throw ProblemError("at least two flip angles are required");
    if (echoes.size() < 2) throw ProblemError("at least two echo times are required");
}

std::vector<Measurement> FitProblem::measurements(std::size_t voxel) const {
    std::vector<Measurement> out;
    out.reserve(volumes.size());
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        out.push_back({static_cast<double>(volumes[i].data[voxel]), settings[i], noise[i]});
    }
    return out;
}

Eigen::Vector4d to_unconstrained(const VoxelParams& t) {
    const double m = std::clamp(t.mtsat, 1e-12, 1.0 - 1e-12);
    return {std::log(t.r1), std::log(t.r2s), std::log(t.pd), std::log(m / (1.0 - m))};
}

VoxelParams from_unconstrained(const Eigen::Vector4d& phi) {
    return {std::exp(phi[0]), std::exp(phi[1]), std::exp(phi[2]), logistic(phi[3])};
}

VoxelParams initial_params(std::span<const Measurement> data) {
    // Pooled log-linear fit across runs: common slope -R2*, per-run intercepts.
    std::map<RunKey, std::vector<const Measurement*>> runs;
    for (const auto& m : data) {
        if (m.x > 0.0 && std::isfinite(m.x)) runs[run_key(m.settings)].push_back(&m);
    }
    double sxy = 0.0;
    double sxx = 0.0;
    for (const auto& [key, ms] : runs) {
        if (ms.size() < 2) continue;
        double te_mean = 0.0;
        double y_mean = 0.0;
        for (const auto* m : ms) {
            te_mean += m->settings.te;
            y_mean += std::log(m->x);
        }
        te_mean /= static_cast<double>(ms.size());
        y_mean /= static_cast<double>(ms.size());
        for (const auto* m : ms) {
            sxy += (m->settings.te - te_mean) * (std::log(m->x) - y_mean);
            sxx += (m->settings.te - te_mean) * (m->settings.te - te_mean);
        }
    }
    VoxelParams theta{kDefaultR1, kDefaultR2s, 1.0, kDefaultMTsat};
    if (sxx > 0.0) {
        const double r2s = -sxy / sxx;
        if (std::isfinite(r2s) && r2s > 0.1 && r2s < 500.0) theta.r2s = r2s;
    }

    std::vector<RunAmplitude> plain;
    std::vector<RunAmplitude> mt;
    for (const auto& [key, ms] : runs) {
        double log_amp = 0.0;
        for (const auto* m : ms) log_amp += std::log(m->x) + theta.r2s * m->settings.te;
        RunAmplitude ra{ms.front()->settings, std::exp(log_amp / static_cast<double>(ms.size()))};
        (ra.settings.mt ? mt : plain).push_back(ra);
    }

    if (plain.size() >= 2) {
        // small-angle rational approximation on the two most different flip angles
        auto [lo, hi] = std::minmax_element(plain.begin(), plain.end(),
                                            [](const auto& a, const auto& b) { return a.settings.flip < b.settings.flip; });
        if (hi->settings.flip > lo->settings.flip) {
            const double a1 = lo->settings.flip, tr1 = lo->settings.tr, s1 = lo->amplitude;
            const double a2 = hi->settings.flip, tr2 = hi->settings.tr, s2 = hi->amplitude;
            const double r1 = 0.5 * (s2 * a2 / tr2 - s1 * a1 / tr1) / (s1 / a1 - s2 / a2);
            if (std::isfinite(r1) && r1 > 0.01 && r1 < 20.0) theta.r1 = r1;
        }
    }
    const auto& ref = plain.empty() ? (mt.empty() ? RunAmplitude{} : mt.front()) : plain.front();
    if (ref.amplitude > 0.0) {
        VoxelParams unit = theta;
        unit.pd = 1.0;
        unit.r2s = 0.0;
        unit.mtsat = kDefaultMTsat;
        const double pd = ref.amplitude / signal(unit, ref.settings);
        if (std::isfinite(pd) && pd > 0.0) theta.pd = pd;
    } else {
        theta.pd = 1.0;
    }

    if (!mt.empty()) {
        // Signal is a Moebius function of MTsat: solve it exactly given R1 and PD.
        const auto& s = mt.front().settings;
        const double q = mt.front().amplitude / (theta.pd * std::sin(s.flip));
        const double t = s.tr + s.tr2;
        const double a = std::exp(-t * theta.r1);
        const double b = std::exp(-s.tr2 * theta.r1);
        const double c = std::cos(s.flip);
        const double n0 = -std::expm1(-t * theta.r1);
        const double d0 = 1.0 - c * a;
        const double m = (q * d0 - n0) / ((a - b) - q * c * a);
        theta.mtsat = std::isfinite(m) ? std::clamp(m, kMinMTsat, kMaxMTsat) : kDefaultMTsat;
    }
    return theta;
}

VoxelFit fit_voxel(std::span<const Measurement> data, Family likelihood, const SolverSettings& settings,
                   const std::optional<VoxelParams>& init, const MembranePrior* prior, bool keep_trace) {
    VoxelFit fit;
    const Eigen::Vector4d phi_lo = to_unconstrained_bound(settings.lower);
    const Eigen::Vector4d phi_hi = to_unconstrained_bound(settings.upper);
    auto project = [&](const Eigen::Vector4d& p) { return p.cwiseMax(phi_lo).cwiseMin(phi_hi); };

    fit.theta = init.value_or(initial_params(data));
    fit.theta.mtsat = std::clamp(fit.theta.mtsat, kMinMTsat * 1e-3, kMaxMTsat);
    Eigen::Vector4d phi = project(to_unconstrained(fit.theta));
    fit.theta = from_unconstrained(phi);

    const double n = static_cast<double>(data.size());
    auto objective = [&](const Eigen::Vector4d& p, const VoxelParams& t) {
        return voxel_objective(t, data, likelihood) + penalty(p, prior);
    };
    double energy = objective(phi, fit.theta);
    if (!std::isfinite(energy)) {
        fit.status = VoxelStatus::NonFinite;
        fit.objective = energy;
        return fit;
    }
    if (keep_trace) fit.trace.push_back(energy);

    double damping = settings.damping;
    int failures = 0;
    fit.status = VoxelStatus::MaxIterations;
    for (int iter = 1; iter <= settings.max_iters; ++iter) {
        fit.iterations = iter;
        // Newton system in the unconstrained coordinates
        const double m = fit.theta.mtsat;
        const Eigen::Vector4d jac{fit.theta.r1, fit.theta.r2s, fit.theta.pd, m * (1.0 - m)};
        const Eigen::Vector4d jac2{fit.theta.r1, fit.theta.r2s, fit.theta.pd, m * (1.0 - m) * (1.0 - 2.0 * m)};
        Eigen::Vector4d g;
        Eigen::Matrix4d h;
        bool finite = true;
        const bool adaptive = settings.hessian == SolverSettings::Hessian::Adaptive;
        for (const Curvature curvature : {adaptive ? Curvature::Signed : Curvature::Absolute, Curvature::Absolute}) {
            const auto gh = voxel_grad_hess(fit.theta, data, likelihood, curvature, jac);
            finite = gh.finite;
            if (!finite) break;
            g = jac.cwiseProduct(gh.g);
            // second-order part in the unconstrained coordinates, including the
            // curvature of the parameter transform
            Eigen::Matrix4d second = jac.asDiagonal() * gh.second * jac.asDiagonal();
            second.diagonal() += jac2.cwiseProduct(gh.g);
            h = jac.asDiagonal() * gh.gauss_newton * jac.asDiagonal() +
                (curvature == Curvature::Signed ? second : spectral_abs(second));
            if (prior) {
                for (const auto& nb : prior->neighbours) {
                    g += 2.0 * prior->weights.cwiseProduct(phi - nb);
                    h.diagonal() += 2.0 * prior->weights;
                }
            }
            if (curvature == Curvature::Absolute || Eigen::LLT<Eigen::Matrix4d>(h).info() == Eigen::Success) break;
        }
        if (!finite) {
            fit.status = VoxelStatus::NonFinite;
            break;
        }
        // coordinates held at a bound by the gradient stay fixed for this step
        for (int i = 0; i < 4; ++i) {
            if ((phi[i] <= phi_lo[i] && g[i] > 0.0) || (phi[i] >= phi_hi[i] && g[i] < 0.0)) {
                g[i] = 0.0;
                h.row(i).setZero();
                h.col(i).setZero();
                h(i, i) = 1.0;
            }
        }
        const double lambda = damping * std::max(h.trace() / 4.0, std::numeric_limits<double>::min());
        const Eigen::Matrix4d damped = h + lambda * Eigen::Matrix4d::Identity();
        const Eigen::LDLT<Eigen::Matrix4d> solver(damped);
        const Eigen::Vector4d delta = solver.solve(g);
        if (!delta.allFinite()) {
            fit.status = VoxelStatus::NonFinite;
            break;
        }
        const double predicted = g.dot(delta);
        if (predicted < 2.0 * settings.tol * n) {
            fit.status = VoxelStatus::Converged;
            break;
        }

        bool accepted = false;
        double step = 1.0;
        Eigen::Vector4d trial_phi;
        VoxelParams trial;
        double trial_energy = kInf;
        for (int halving = 0; halving <= settings.max_halvings; ++halving) {
            trial_phi = project(phi - step * delta);
            trial = from_unconstrained(trial_phi);
            trial_energy = objective(trial_phi, trial);
            if (std::isfinite(trial_energy) && trial_energy <= energy && trial.mtsat > 0.0 && trial.mtsat < 1.0) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            ++failures;
            damping = std::max(damping * 10.0, settings.damping);
            if (failures >= settings.max_failures) {
                fit.status = VoxelStatus::NotConverged;
                break;
            }
            continue;
        }
        failures = 0;
        damping = std::max(damping * 0.1, 1e-12);
        const double decrease = energy - trial_energy;
        phi = trial_phi;
        fit.theta = trial;
        energy = trial_energy;
        if (keep_trace) fit.trace.push_back(energy);
        if (decrease < settings.tol * n) {
            fit.status = VoxelStatus::Converged;
            break;
        }
    }
    fit.objective = energy;
    return fit;
}

std::size_t ParameterMaps::count(VoxelStatus s) const {
    return static_cast<std::size_t>(std::count(status.begin(), status.end(), s));
}

EchoVolume ParameterMaps::status_volume() const {
    EchoVolume v = objective;
    for (std::size_t i = 0; i < status.size(); ++i) v.data[i] = static_cast<float>(status[i]);
    return v;
}

ParameterMaps make_maps(const EchoVolume& like) {
    EchoVolume blank = like;
    std::fill(blank.data.begin(), blank.data.end(), 0.0f);
    ParameterMaps maps{blank, blank, blank, blank, blank, blank, {}};
    maps.status.assign(like.voxel_count(), VoxelStatus::Outside);
    return maps;
}

ParameterMaps fit_maps(const FitProblem& problem, const SolverSettings& settings) {
    problem.validate();
    const std::size_t count = problem.voxel_count();
    ParameterMaps maps = make_maps(problem.volumes.front());
    std::vector<VoxelFit> fits(count);

    auto store = [&](std::size_t v, const VoxelFit& f) {
        maps.r1.data[v] = static_cast<float>(f.theta.r1);
        maps.r2s.data[v] = static_cast<float>(f.theta.r2s);
        maps.pd.data[v] = static_cast<float>(f.theta.pd);
        maps.mtsat.data[v] = static_cast<float>(f.theta.mtsat);
        maps.objective.data[v] = static_cast<float>(f.objective);
        maps.iterations.data[v] = static_cast<float>(f.iterations);
        maps.status[v] = f.status;
    };

    parallel_chunks(count, kVoxelChunk, settings.threads, [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t v = begin; v < end; ++v) {
            if (!problem.in_mask(v)) continue;
            const auto data = problem.measurements(v);
            fits[v] = fit_voxel(data, problem.likelihood, settings);
        }
    });

    if (settings.regularized()) {
        // Jacobi sweeps: every voxel is refit against its neighbours' previous values.
        const auto& grid = problem.volumes.front();
        const Eigen::Vector4d weights{settings.regularization[0], settings.regularization[1],
                                      settings.regularization[2], settings.regularization[3]};
        for (int sweep = 0; sweep < settings.regularization_sweeps; ++sweep) {
            std::vector<Eigen::Vector4d> previous(count, Eigen::Vector4d::Zero());
            for (std::size_t v = 0; v < count; ++v) {
                if (problem.in_mask(v) && fits[v].status != VoxelStatus::NonFinite) previous[v] = to_unconstrained(fits[v].theta);
            }
            std::vector<VoxelFit> next = fits;
            parallel_chunks(count, kVoxelChunk, settings.threads, [&](std::size_t begin, std::size_t end, std::size_t) {
                for (std::size_t v = begin; v < end; ++v) {
                    if (!problem.in_mask(v) || fits[v].status == VoxelStatus::NonFinite) continue;
                    const int i = static_cast<int>(v % static_cast<std::size_t>(grid.dims[0]));
                    const int j = static_cast<int>((v / static_cast<std::size_t>(grid.dims[0])) % static_cast<std::size_t>(grid.dims[1]));
                    const int k = static_cast<int>(v / (static_cast<std::size_t>(grid.dims[0]) * static_cast<std::size_t>(grid.dims[1])));
                    MembranePrior prior;
                    prior.weights = weights;
                    const std::array<std::array<int, 3>, 6> offsets{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
                    for (const auto& o : offsets) {
                        const int a = i + o[0], b = j + o[1], c = k + o[2];
                        if (a < 0 || b < 0 || c < 0 || a >= grid.dims[0] || b >= grid.dims[1] || c >= grid.dims[2]) continue;
                        const std::size_t u = grid.index(a, b, c);
                        if (!problem.in_mask(u) || fits[u].status == VoxelStatus::NonFinite) continue;
                        prior.neighbours.push_back(previous[u]);
                    }
                    const auto data = problem.measurements(v);
                    next[v] = fit_voxel(data, problem.likelihood, settings, fits[v].theta, &prior);
                }
            });
            fits = std::move(next);
        }
    }

    for (std::size_t v = 0; v < count; ++v) {
        if (problem.in_mask(v)) store(v, fits[v]);
    }
    return maps;
}

}  // namespace ncchi
