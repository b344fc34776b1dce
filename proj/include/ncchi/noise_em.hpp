#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "ncchi/distributions.hpp"

namespace ncchi {

struct MixtureComponent {
    double nu = 2.0;
    double sigma = 1.0;
    double pi = 0.5;
};

/// EM state of a chi mixture. Mixing proportions sum to one.
struct MixtureState {
    std::vector<MixtureComponent> components;

    std::size_t size() const { return components.size(); }
    /// Throws std::invalid_argument when a component is invalid or sum(pi) != 1.
    void validate() const;
};

/// K x N posterior class probabilities; every column sums to one.
struct Responsibilities {
    Eigen::MatrixXd r;
};

struct EStepResult {
    Responsibilities resp;
    double loglik = 0.0;
    /// Set when some component carries (numerically) zero mixing weight.
    bool degenerate = false;
};

/// Posterior responsibilities and observed-data log likelihood.
/// All samples must be strictly positive.
EStepResult e_step(std::span<const double> x, const MixtureState& state, unsigned threads = 0);

/// Per-component weighted sufficient statistics: sum r, sum r x^2, sum r ln x.
struct ComponentStats {
    double weight = 0.0;
    double sum_x2 = 0.0;
    double sum_log_x = 0.0;
};

std::vector<ComponentStats> component_stats(std::span<const double> x, const Responsibilities& resp,
                                            unsigned threads = 0);

/// Expected complete-data log likelihood of one chi component (without the ln pi term).
double component_objective(const ComponentStats& stats, double nu, double sigma);

/// d/dnu of component_objective at fixed sigma.
double component_nu_gradient(const ComponentStats& stats, double nu, double sigma);

struct InnerSettings {
    int max_iters = 50;
    double nu_tol = 1e-6;
    double sigma_rel_tol = 1e-8;
    double nu_min = 0.5;
    double nu_max = 4096.0;
};

/// Alternating sigma (closed form) / nu (Newton) maximisation for one component.
/// Never decreases component_objective.
MixtureComponent update_component(const ComponentStats& stats, MixtureComponent current,
                                  const InnerSettings& inner);

/// Mixing-proportion update followed by per-component sigma/nu alternation.
MixtureState m_step(std::span<const double> x, const Responsibilities& resp, const MixtureState& state,
                    int inner_iters, unsigned threads = 0);

struct EmSettings {
    int max_iters = 1000;
    /// Stop when |delta loglik| < tol * N.
    double tol = 1e-9;
    /// Starting degrees of freedom, nominally twice the receive channel count.
    double initial_nu = 2.0;
    int inner_iters = 5000;
    std::size_t max_samples = 2'000'000;
    /// Fall back to a single component when the mixture does not improve BIC.
    bool select_components = true;
    unsigned threads = 0;
};

void to_json(nlohmann::json& j, const EmSettings& s);
void from_json(const nlohmann::json& j, EmSettings& s);

struct NoiseFit {
    MixtureState state;
    NoiseModel background;
    std::size_t background_index = 0;
    std::vector<double> history;
    /// EM converged, or the selected one-component fit is stationary.
    bool converged = false;
    /// The mixture was rejected in favour of one component.
    bool single_class = false;
    std::size_t samples_used = 0;
};

/// Fits a two-component chi mixture to strictly positive samples.
/// Throws std::invalid_argument if fewer than two positive samples are given.
NoiseFit fit_noise(std::span<const double> x, const EmSettings& settings);

/// Drops zeros and non-finite values, then applies a deterministic stride so
/// at most `max_samples` remain.
std::vector<double> prepare_noise_samples(std::span<const float> intensities, std::size_t max_samples);

/// Otsu threshold over a 256-bin histogram.
double otsu_threshold(std::span<const double> x);

/// Initial state: Otsu split, per-class method of moments with nu fixed to `initial_nu`.
MixtureState initial_state(std::span<const double> x, double initial_nu);

/// Noise-report record: per component {nu, sigma2, pi}, background index, loglik history.
nlohmann::json noise_report(const NoiseFit& fit);
NoiseModel background_from_report(const nlohmann::json& record);

}  // namespace ncchi
