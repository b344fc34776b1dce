#include "ncchi/noise_em.hpp"

#include <algorithm>
#include <array>
#include <tuple>
#include <utility>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "ncchi/parallel.hpp"
#include "ncchi/special.hpp"

namespace ncchi {
namespace {

constexpr std::size_t kChunk = 8192;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kDegenerateWeight = 1e-12;

// ln chi(x | nu, sigma) without the x-dependent terms.
double chi_constant(const MixtureComponent& c) {
    return (1.0 - 0.5 * c.nu) * std::numbers::ln2 - c.nu * std::log(c.sigma) - std::lgamma(0.5 * c.nu);
}

}  // namespace

void MixtureState::validate() const {
    if (components.empty()) throw std::invalid_argument("mixture: no components");
    double total = 0.0;
    for (const auto& c : components) {
        if (!(c.nu > 0.0) || !(c.sigma > 0.0) || !(c.pi >= 0.0) || !(c.pi <= 1.0)) {
            throw std::invalid_argument("mixture: invalid component parameters");
        }
        total += c.pi;
    }
    if (std::fabs(total - 1.0) > 1e-12) throw std::invalid_argument("mixture: proportions do not sum to one");
}

EStepResult e_step(std::span<const double> x, const MixtureState& state, unsigned threads) {
    const std::size_t k_count = state.size();
    const std::size_t n = x.size();
    EStepResult out;
    out.resp.r.resize(static_cast<Eigen::Index>(k_count), static_cast<Eigen::Index>(n));

    std::vector<double> log_pi(k_count), constant(k_count), inv2s2(k_count), nu_m1(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
        const auto& c = state.components[k];
        if (c.pi < kDegenerateWeight) out.degenerate = true;
        log_pi[k] = c.pi > 0.0 ? std::log(c.pi) : kNegInf;
        constant[k] = chi_constant(c);
        inv2s2[k] = 0.5 / (c.sigma * c.sigma);
        nu_m1[k] = c.nu - 1.0;
    }

    std::vector<double> partial(chunk_count(n, kChunk), 0.0);
    parallel_chunks(n, kChunk, threads, [&](std::size_t begin, std::size_t end, std::size_t chunk) {
        std::vector<double> lp(k_count);
        double acc = 0.0;
        for (std::size_t i = begin; i < end; ++i) {
            const double xi = x[i];
            if (!(xi > 0.0)) throw std::domain_error("e_step: samples must be strictly positive");
            const double lx = std::log(xi);
            const double x2 = xi * xi;
            double peak = kNegInf;
            for (std::size_t k = 0; k < k_count; ++k) {
                lp[k] = log_pi[k] + constant[k] + nu_m1[k] * lx - inv2s2[k] * x2;
                peak = std::max(peak, lp[k]);
            }
            double total = 0.0;
            for (std::size_t k = 0; k < k_count; ++k) {
                lp[k] = std::exp(lp[k] - peak);
                total += lp[k];
            }
            const auto col = static_cast<Eigen::Index>(i);
            for (std::size_t k = 0; k < k_count; ++k) {
                out.resp.r(static_cast<Eigen::Index>(k), col) = lp[k] / total;
            }
            acc += peak + std::log(total);
        }
        partial[chunk] = acc;
    });
    out.loglik = std::accumulate(partial.begin(), partial.end(), 0.0);
    return out;
}

std::vector<ComponentStats> component_stats(std::span<const double> x, const Responsibilities& resp,
                                            unsigned threads) {
    const auto k_count = static_cast<std::size_t>(resp.r.rows());
    const std::size_t n = x.size();
    if (static_cast<std::size_t>(resp.r.cols()) != n) {
        throw std::invalid_argument("component_stats: responsibilities do not match sample count");
    }
    const std::size_t chunks = chunk_count(n, kChunk);
    std::vector<std::vector<ComponentStats>> partial(chunks, std::vector<ComponentStats>(k_count));
    parallel_chunks(n, kChunk, threads, [&](std::size_t begin, std::size_t end, std::size_t chunk) {
        auto& acc = partial[chunk];
        for (std::size_t i = begin; i < end; ++i) {
            const double xi = x[i];
            const double lx = std::log(xi);
            for (std::size_t k = 0; k < k_count; ++k) {
                const double r = resp.r(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i));
                acc[k].weight += r;
                acc[k].sum_x2 += r * xi * xi;
                acc[k].sum_log_x += r * lx;
            }
        }
    });
    std::vector<ComponentStats> total(k_count);
    for (const auto& chunk : partial) {
        for (std::size_t k = 0; k < k_count; ++k) {
            total[k].weight += chunk[k].weight;
            total[k].sum_x2 += chunk[k].sum_x2;
            total[k].sum_log_x += chunk[k].sum_log_x;
        }
    }
    return total;
}

double component_objective(const ComponentStats& s, double nu, double sigma) {
    return (nu - 1.0) * s.sum_log_x - 0.5 * s.sum_x2 / (sigma * sigma) +
           s.weight * ((1.0 - 0.5 * nu) * std::numbers::ln2 - nu * std::log(sigma) - std::lgamma(0.5 * nu));
}

double component_nu_gradient(const ComponentStats& s, double nu, double sigma) {
    return s.sum_log_x - s.weight * (0.5 * std::numbers::ln2 + std::log(sigma) + 0.5 * special::digamma(0.5 * nu));
}

MixtureComponent update_component(const ComponentStats& stats, MixtureComponent current, const InnerSettings& inner) {
    if (!(stats.weight > 0.0) || !(stats.sum_x2 > 0.0)) return current;
    double nu = current.nu;
    double sigma = current.sigma;
    for (int it = 0; it < inner.max_iters; ++it) {
        const double sigma_new = std::sqrt(stats.sum_x2 / (nu * stats.weight));

        // Newton ascent on nu; the curvature weight * trigamma / 4 is always positive.
        const double g = component_nu_gradient(stats, nu, sigma_new);
        const double h = 0.25 * stats.weight * special::trigamma(0.5 * nu);
        if (!(h > 0.0)) throw std::logic_error("update_component: non-positive nu curvature");
        const double q0 = component_objective(stats, nu, sigma_new);
        double step = g / h;
        double nu_new = nu;
        for (int halving = 0; halving < 60; ++halving) {
            double trial = nu + step;
            if (trial <= 0.0) {
                step *= 0.5;
                continue;
            }
            trial = std::clamp(trial, inner.nu_min, inner.nu_max);
            if (component_objective(stats, trial, sigma_new) >= q0) {
                nu_new = trial;
                break;
            }
            step *= 0.5;
        }

        const bool done = std::fabs(nu_new - nu) < inner.nu_tol && std::fabs(sigma_new - sigma) < inner.sigma_rel_tol * sigma;
        nu = nu_new;
        sigma = sigma_new;
        if (done) break;
    }
    current.nu = nu;
    current.sigma = sigma;
    return current;
}

MixtureState m_step(std::span<const double> x, const Responsibilities& resp, const MixtureState& state,
                    int inner_iters, unsigned threads) {
    const auto stats = component_stats(x, resp, threads);
    double total = 0.0;
    for (const auto& s : stats) total += s.weight;
    if (!(total > 0.0)) throw std::invalid_argument("m_step: responsibilities carry no weight");

    InnerSettings inner;
    inner.max_iters = inner_iters;
    MixtureState next = state;
    for (std::size_t k = 0; k < stats.size(); ++k) {
        next.components[k] = update_component(stats[k], state.components[k], inner);
        next.components[k].pi = stats[k].weight / total;
    }
    return next;
}

double otsu_threshold(std::span<const double> x) {
    if (x.empty()) throw std::invalid_argument("otsu_threshold: no samples");
    const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!(hi > lo)) return lo;
    constexpr int kBins = 256;
    std::vector<double> hist(kBins, 0.0);
    const double width = (hi - lo) / kBins;
    for (double v : x) {
        const int b = std::min(kBins - 1, static_cast<int>((v - lo) / width));
        hist[static_cast<std::size_t>(b)] += 1.0;
    }
    double total_mass = 0.0;
    double total_moment = 0.0;
    for (int b = 0; b < kBins; ++b) {
        total_mass += hist[static_cast<std::size_t>(b)];
        total_moment += b * hist[static_cast<std::size_t>(b)];
    }
    double mass = 0.0;
    double moment = 0.0;
    double best = -1.0;
    int best_bin = 0;
    for (int b = 0; b < kBins - 1; ++b) {
        mass += hist[static_cast<std::size_t>(b)];
        moment += b * hist[static_cast<std::size_t>(b)];
        const double rest = total_mass - mass;
        if (mass == 0.0 || rest == 0.0) continue;
        const double m0 = moment / mass;
        const double m1 = (total_moment - moment) / rest;
        const double between = mass * rest * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_bin = b;
        }
    }
    return lo + (best_bin + 1) * width;
}

MixtureState initial_state(std::span<const double> x, double initial_nu) {
    if (x.size() < 2) throw std::invalid_argument("initial_state: need at least two samples");
    if (!(initial_nu > 0.0)) throw std::invalid_argument("initial_state: initial nu must be positive");
    double threshold = otsu_threshold(x);
    auto split = [&](double t) {
        std::array<double, 2> count{0.0, 0.0};
        std::array<double, 2> sum_x2{0.0, 0.0};
        for (double v : x) {
            const std::size_t c = v <= t ? 0 : 1;
            count[c] += 1.0;
            sum_x2[c] += v * v;
        }
        return std::pair{count, sum_x2};
    };
    auto [count, sum_x2] = split(threshold);
    if (count[0] == 0.0 || count[1] == 0.0) {
        std::vector<double> sorted(x.begin(), x.end());
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
        threshold = sorted[sorted.size() / 2];
        std::tie(count, sum_x2) = split(threshold);
    }
    MixtureState state;
    const double n = static_cast<double>(x.size());
    for (std::size_t c = 0; c < 2; ++c) {
        MixtureComponent comp;
        comp.nu = initial_nu;
        // identical components when a split is impossible (constant data)
        const double m2 = count[c] > 0.0 ? sum_x2[c] / count[c] : (sum_x2[0] + sum_x2[1]) / n;
        comp.sigma = std::sqrt(m2 / initial_nu);
        comp.pi = count[c] > 0.0 ? count[c] / n : 0.5;
        state.components.push_back(comp);
    }
    const double total = state.components[0].pi + state.components[1].pi;
    for (auto& c : state.components) c.pi /= total;
    return state;
}

std::vector<double> prepare_noise_samples(std::span<const float> intensities, std::size_t max_samples) {
    std::vector<double> kept;
    kept.reserve(intensities.size());
    for (float v : intensities) {
        if (std::isfinite(v) && v > 0.0f) kept.push_back(v);
    }
    if (max_samples == 0 || kept.size() <= max_samples) return kept;
    const double stride = static_cast<double>(kept.size()) / static_cast<double>(max_samples);
    std::vector<double> out;
    out.reserve(max_samples);
    for (std::size_t i = 0; i < max_samples; ++i) {
        out.push_back(kept[static_cast<std::size_t>(std::floor(i * stride))]);
    }
    return out;
}

NoiseFit fit_noise(std::span<const double> x, const EmSettings& settings) {
    std::size_t positive = 0;
    for (double v : x) {
        if (v > 0.0 && std::isfinite(v)) ++positive;
    }
    if (positive < 2) throw std::invalid_argument("fit_noise: need at least two positive samples");
    std::vector<double> owned;
    if (positive != x.size()) {
        owned.reserve(positive);
        for (double v : x) {
            if (v > 0.0 && std::isfinite(v)) owned.push_back(v);
        }
        x = owned;
    }

    NoiseFit fit;
    fit.samples_used = x.size();
    fit.state = initial_state(x, settings.initial_nu);
    const double n = static_cast<double>(x.size());
    for (int iter = 0; iter < settings.max_iters; ++iter) {
        const auto e = e_step(x, fit.state, settings.threads);
        fit.history.push_back(e.loglik);
        if (iter > 0 && std::fabs(e.loglik - fit.history[fit.history.size() - 2]) < settings.tol * n) {
            fit.converged = true;
            break;
        }
        fit.state = m_step(x, e.resp, fit.state, settings.inner_iters, settings.threads);
    }
    if (!fit.converged) {
        // history has one entry per state visited except the last M-step result
        fit.history.push_back(e_step(x, fit.state, settings.threads).loglik);
    }

    if (settings.select_components && fit.state.size() > 1) {
        // one chi component against the mixture, Schwarz criterion
        const Responsibilities all{Eigen::MatrixXd::Ones(1, static_cast<Eigen::Index>(x.size()))};
        const auto stats = component_stats(x, all, settings.threads)[0];
        const double nu0 = settings.initial_nu;
        InnerSettings inner;
        inner.max_iters = settings.inner_iters;
        const auto single =
            update_component(stats, {nu0, std::sqrt(stats.sum_x2 / (nu0 * stats.weight)), 1.0}, inner);
        const double ll1 = component_objective(stats, single.nu, single.sigma);
        const double extra = 3.0 * static_cast<double>(fit.state.size() - 1);
        if (2.0 * (fit.history.back() - ll1) <= extra * std::log(n)) {
            fit.state = MixtureState{{single}};
            fit.single_class = true;
            // convergence now refers to the one-component fit
            inner.max_iters = 1;
            const auto again = update_component(stats, single, inner);
            fit.converged = std::fabs(again.nu - single.nu) < inner.nu_tol &&
                            std::fabs(again.sigma - single.sigma) < inner.sigma_rel_tol * single.sigma;
        }
    }

    std::size_t best = 0;
    for (std::size_t k = 1; k < fit.state.size(); ++k) {
        const auto& c = fit.state.components[k];
        const auto& b = fit.state.components[best];
        if (c.nu * c.sigma * c.sigma < b.nu * b.sigma * b.sigma) best = k;
    }
    fit.background_index = best;
    const auto& bg = fit.state.components[best];
    fit.background = NoiseModel{Family::Chi, bg.nu, bg.sigma * bg.sigma};
    return fit;
}

void to_json(nlohmann::json& j, const EmSettings& s) {
    j = nlohmann::json{{"max_iters", s.max_iters},     {"tol", s.tol},
                       {"initial_nu", s.initial_nu},   {"inner_iters", s.inner_iters},
                       {"max_samples", s.max_samples}, {"select_components", s.select_components}};
}

void from_json(const nlohmann::json& j, EmSettings& s) {
    s.max_iters = j.value("max_iters", s.max_iters);
    s.tol = j.value("tol", s.tol);
    s.initial_nu = j.value("initial_nu", s.initial_nu);
    s.inner_iters = j.value("inner_iters", s.inner_iters);
    s.max_samples = j.value("max_samples", s.max_samples);
    s.select_components = j.value("select_components", s.select_components);
}

nlohmann::json noise_report(const NoiseFit& fit) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : fit.state.components) {
        comps.push_back({{"nu", c.nu}, {"sigma2", c.sigma * c.sigma}, {"pi", c.pi}});
    }
    return {{"components", comps},
            {"background_index", fit.background_index},
            {"nu", fit.background.nu},
            {"sigma2", fit.background.sigma2},
            {"loglik_history", fit.history},
            {"converged", fit.converged},
            {"single_class", fit.single_class},
            {"samples_used", fit.samples_used}};
}

NoiseModel background_from_report(const nlohmann::json& record) {
    NoiseModel m;
    m.family = Family::NcChi;
    if (record.contains("nu") && record.contains("sigma2")) {
        m.nu = record.at("nu").get<double>();
        m.sigma2 = record.at("sigma2").get<double>();
    } else {
        const auto idx = record.at("background_index").get<std::size_t>();
        const auto& c = record.at("components").at(idx);
        m.nu = c.at("nu").get<double>();
        m.sigma2 = c.at("sigma2").get<double>();
    }
    m.validate();
    return m;
}

}  // namespace ncchi
