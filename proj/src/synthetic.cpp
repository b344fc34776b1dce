#include "ncchi/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "ncchi/parallel.hpp"

namespace ncchi {
namespace {

constexpr std::size_t kVoxelChunk = 4096;
// Above this many degrees of freedom the direct normal-sum is replaced by the mixture form.
constexpr double kDirectNuLimit = 256.0;

std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::string shape_name(Shape s) {
    switch (s) {
        case Shape::Background: return "background";
        case Shape::Sphere: return "sphere";
        case Shape::Box: return "box";
    }
    return "background";
}

Shape shape_from_name(const std::string& s) {
    if (s == "background") return Shape::Background;
    if (s == "sphere") return Shape::Sphere;
    if (s == "box") return Shape::Box;
    throw std::invalid_argument("unknown phantom shape '" + s + "'");
}

bool contains(const Region& r, double i, double j, double k) {
    const double di = i - r.center[0], dj = j - r.center[1], dk = k - r.center[2];
    switch (r.shape) {
        case Shape::Background: return true;
        case Shape::Sphere: return di * di + dj * dj + dk * dk <= r.extent[0] * r.extent[0];
        case Shape::Box:
            return std::fabs(di) <= r.extent[0] && std::fabs(dj) <= r.extent[1] && std::fabs(dk) <= r.extent[2];
    }
    return false;
}

NoiseModel noise_from_json(const nlohmann::json& j) {
    NoiseModel m;
    m.family = family_from_string(j.value("family", std::string("ncchi")));
    m.nu = j.value("nu", 2.0);
    m.sigma2 = j.value("sigma2", 1.0);
    m.validate();
    return m;
}

nlohmann::json noise_to_json(const NoiseModel& m) {
    return {{"family", std::string(to_string(m.family))}, {"nu", m.nu}, {"sigma2", m.sigma2}};
}

}  // namespace

SplitMix64::result_type SplitMix64::operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
}

SplitMix64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    return SplitMix64(mix(mix(mix(seed) ^ (a + 0x632be59bd9b4e019ULL)) ^ (b + 0x2545f4914f6cdd1dULL)));
}

double sample_ncchi_poisson(double mu, const NoiseModel& model, SplitMix64& rng) {
    const double sigma = model.sigma();
    const double lambda = 0.5 * mu * mu / model.sigma2;
    double extra = 0.0;
    if (lambda > 0.0) {
        std::poisson_distribution<long long> poisson(lambda);
        extra = 2.0 * static_cast<double>(poisson(rng));
    }
    std::gamma_distribution<double> chi2(0.5 * (model.nu + extra), 2.0);
    return sigma * std::sqrt(chi2(rng));
}

double sample_ncchi(double mu, const NoiseModel& model, SplitMix64& rng) {
    const double nu = model.nu;
    if (nu != std::floor(nu) || nu > kDirectNuLimit) return sample_ncchi_poisson(mu, model, rng);
    const double sigma = model.sigma();
    std::normal_distribution<double> normal;
    const auto channels = static_cast<int>(nu);
    const double first = normal(rng) + mu / sigma;
    double sum = first * first;
    for (int i = 1; i < channels; ++i) {
        const double z = normal(rng);
        sum += z * z;
    }
    return sigma * std::sqrt(sum);
}

double sample_noise(double mu, const NoiseModel& model, SplitMix64& rng) {
    switch (model.family) {
        case Family::Gaussian: {
            std::normal_distribution<double> normal;
            return mu + model.sigma() * normal(rng);
        }
        case Family::Chi: return sample_ncchi(0.0, model, rng);
        case Family::NcChi: return sample_ncchi(mu, model, rng);
    }
    return mu;
}

void PhantomSpec::validate() const {
    for (int d : dims) {
        if (d < 1) throw std::invalid_argument("phantom: dimensions must be positive");
    }
    for (double s : voxel_size) {
        if (!(s > 0.0)) throw std::invalid_argument("phantom: voxel size must be positive");
    }
    if (regions.empty() || regions.front().shape != Shape::Background) {
        throw std::invalid_argument("phantom: the first region must be a background region");
    }
    for (const auto& r : regions) {
        if (!r.tissue) continue;
        const auto& p = r.params;
        if (!(p.r1 > 0.0 && p.r2s > 0.0 && p.pd > 0.0 && p.mtsat >= 0.0 && p.mtsat < 1.0)) {
            throw std::invalid_argument("phantom: region '" + r.name + "' has invalid tissue parameters");
        }
    }
}

std::vector<int> PhantomSpec::labels() const {
    std::vector<int> out(static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(dims[2]), 0);
    std::size_t v = 0;
    for (int k = 0; k < dims[2]; ++k) {
        for (int j = 0; j < dims[1]; ++j) {
            for (int i = 0; i < dims[0]; ++i, ++v) {
                for (std::size_t r = 0; r < regions.size(); ++r) {
                    if (contains(regions[r], i, j, k)) out[v] = static_cast<int>(r);
                }
            }
        }
    }
    return out;
}

PhantomSpec default_phantom(std::array<int, 3> dims, std::uint64_t seed, double pd_scale) {
    PhantomSpec spec;
    spec.dims = dims;
    spec.seed = seed;
    const double n = *std::min_element(dims.begin(), dims.end());
    const std::array<double, 3> c{0.5 * (dims[0] - 1), 0.5 * (dims[1] - 1), 0.5 * (dims[2] - 1)};
    Region air{"air", Shape::Background, c, {0, 0, 0}, false, {}};
    Region gm{"gm", Shape::Sphere, c, {0.46 * n, 0, 0}, true, {0.6, 16.0, 0.80 * pd_scale, 0.02}};
    Region wm{"wm", Shape::Sphere, c, {0.34 * n, 0, 0}, true, {1.0, 26.0, 0.69 * pd_scale, 0.04}};
    Region csf{"csf", Shape::Sphere, c, {0.17 * n, 0, 0}, true, {0.25, 2.0, 1.0 * pd_scale, 0.0}};
    spec.regions = {air, gm, wm, csf};
    return spec;
}

std::vector<ProtocolVolume> default_mpm_protocol(int echoes) {
    const double deg = std::numbers::pi / 180.0;
    struct Run {
        const char* name;
        AcquisitionSettings s;
    };
    const Run runs[] = {
        {"PDw", {0.025, 0.0, 6.0 * deg, false, 0.0}},
        {"T1w", {0.025, 0.0, 21.0 * deg, false, 0.0}},
        {"MTw", {0.015, 0.0, 6.0 * deg, true, 0.010}},
    };
    std::vector<ProtocolVolume> out;
    for (const auto& r : runs) {
        for (int e = 0; e < echoes; ++e) {
            ProtocolVolume pv{r.name, e, r.s};
            pv.settings.te = 0.0023 * (e + 1);
            out.push_back(pv);
        }
    }
    return out;
}

std::vector<std::string> run_names(const std::vector<ProtocolVolume>& protocol) {
    std::vector<std::string> names;
    for (const auto& p : protocol) {
        if (std::find(names.begin(), names.end(), p.run) == names.end()) names.push_back(p.run);
    }
    return names;
}

Simulation simulate_acquisition(const PhantomSpec& phantom, const std::vector<ProtocolVolume>& protocol,
                                const std::map<std::string, NoiseModel>& noise, unsigned threads) {
    phantom.validate();
    for (const auto& p : protocol) {
        p.settings.validate();
        if (!noise.empty() && !noise.contains(p.run)) {
            throw std::invalid_argument("simulation: no noise model for run '" + p.run + "'");
        }
    }
    for (const auto& [run, m] : noise) m.validate();

    Simulation sim;
    sim.protocol = protocol;
    sim.noise = noise;
    const auto labels = phantom.labels();
    const EchoVolume grid = make_volume(phantom.dims, phantom.voxel_size);
    sim.truth = make_maps(grid);
    sim.mask.assign(labels.size(), 0);
    for (std::size_t v = 0; v < labels.size(); ++v) {
        const auto& region = phantom.regions[static_cast<std::size_t>(labels[v])];
        if (!region.tissue) continue;
        sim.mask[v] = 1;
        sim.truth.r1.data[v] = static_cast<float>(region.params.r1);
        sim.truth.r2s.data[v] = static_cast<float>(region.params.r2s);
        sim.truth.pd.data[v] = static_cast<float>(region.params.pd);
        sim.truth.mtsat.data[v] = static_cast<float>(region.params.mtsat);
        sim.truth.status[v] = VoxelStatus::Converged;
    }

    sim.volumes.assign(protocol.size(), grid);
    for (std::size_t p = 0; p < protocol.size(); ++p) {
        auto& vol = sim.volumes[p];
        const auto& settings = protocol[p].settings;
        const NoiseModel* model = noise.empty() ? nullptr : &noise.at(protocol[p].run);
        parallel_chunks(labels.size(), kVoxelChunk, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
            for (std::size_t v = begin; v < end; ++v) {
                const auto& region = phantom.regions[static_cast<std::size_t>(labels[v])];
                const double mu = region.tissue ? signal(region.params, settings) : 0.0;
                if (!model) {
                    vol.data[v] = static_cast<float>(mu);
                    continue;
                }
                auto rng = stream(phantom.seed, p, v);
                vol.data[v] = static_cast<float>(sample_noise(mu, *model, rng));
            }
        });
    }
    return sim;
}

FitProblem make_problem(const Simulation& sim, Family likelihood, const std::map<std::string, NoiseModel>& noise) {
    const auto& models = noise.empty() ? sim.noise : noise;
    FitProblem problem;
    problem.volumes = sim.volumes;
    problem.likelihood = likelihood;
    problem.mask = sim.mask;
    for (const auto& p : sim.protocol) {
        const auto it = models.find(p.run);
        if (it == models.end()) throw std::invalid_argument("make_problem: no noise model for run " + p.run);
        problem.settings.push_back(p.settings);
        problem.noise.push_back(it->second);
    }
    return problem;
}

std::map<std::string, NoiseModel> noise_for_snr(const PhantomSpec& phantom, const std::vector<ProtocolVolume>& protocol,
                                                double snr, double nu, Family family) {
    if (!(snr > 0.0)) throw std::invalid_argument("noise_for_snr: snr must be positive");
    const auto labels = phantom.labels();
    std::map<std::string, NoiseModel> out;
    for (const auto& run : run_names(protocol)) {
        const ProtocolVolume* first = nullptr;
        for (const auto& p : protocol) {
            if (p.run == run && (!first || p.settings.te < first->settings.te)) first = &p;
        }
        double sum = 0.0;
        std::size_t count = 0;
        for (int label : labels) {
            const auto& region = phantom.regions[static_cast<std::size_t>(label)];
            if (!region.tissue) continue;
            sum += signal(region.params, first->settings);
            ++count;
        }
        if (count == 0) throw std::invalid_argument("noise_for_snr: phantom has no tissue");
        const double sigma = sum / static_cast<double>(count) / snr;
        out[run] = NoiseModel{family, nu, sigma * sigma};
    }
    return out;
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
    SynthConfig c;
    const auto dims = j.value("dims", std::array<int, 3>{16, 16, 16});
    const std::uint64_t seed = j.value("seed", std::uint64_t{1});
    if (j.contains("regions")) {
        c.phantom.dims = dims;
        c.phantom.seed = seed;
        for (const auto& r : j.at("regions")) {
            Region region;
            region.name = r.value("name", std::string());
            region.shape = shape_from_name(r.value("shape", std::string("background")));
            region.center = r.value("center", std::array<double, 3>{0, 0, 0});
            if (r.contains("radius")) {
                region.extent = {r.at("radius").get<double>(), 0, 0};
            } else {
                region.extent = r.value("extent", std::array<double, 3>{0, 0, 0});
            }
            region.tissue = r.value("tissue", region.shape != Shape::Background);
            region.params.r1 = r.value("r1", 1.0);
            region.params.r2s = r.value("r2s", 20.0);
            region.params.pd = r.value("pd", 1000.0);
            region.params.mtsat = r.value("mtsat", 0.0);
            c.phantom.regions.push_back(region);
        }
    } else {
        c.phantom = default_phantom(dims, seed, j.value("pd_scale", 1000.0));
    }
    c.phantom.voxel_size = j.value("voxel_size", c.phantom.voxel_size);
    c.phantom.validate();

    const int echoes = j.value("echoes", 6);
    if (!j.contains("protocol") || (j.at("protocol").is_string() && j.at("protocol").get<std::string>() == "mpm")) {
        c.protocol = default_mpm_protocol(echoes);
    } else {
        int index = 0;
        for (const auto& p : j.at("protocol")) {
            ProtocolVolume pv;
            pv.run = p.value("run", std::string("run"));
            pv.echo = p.value("echo", index++);
            pv.settings = sidecar_from_json(p);
            c.protocol.push_back(pv);
        }
    }

    if (j.contains("noise") && !(j.at("noise").is_string() && j.at("noise").get<std::string>() == "none")) {
        const auto& n = j.at("noise");
        if (n.contains("runs")) {
            for (const auto& [run, m] : n.at("runs").items()) c.noise[run] = noise_from_json(m);
        } else if (n.contains("snr")) {
            c.noise = noise_for_snr(c.phantom, c.protocol, n.at("snr").get<double>(), n.value("nu", 2.0),
                                    family_from_string(n.value("family", std::string("ncchi"))));
        } else {
            const auto m = noise_from_json(n);
            for (const auto& run : run_names(c.protocol)) c.noise[run] = m;
        }
    }
    return c;
}

nlohmann::json synth_config_to_json(const SynthConfig& c) {
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& r : c.phantom.regions) {
        regions.push_back({{"name", r.name},
                           {"shape", shape_name(r.shape)},
                           {"center", r.center},
                           {"extent", r.extent},
                           {"tissue", r.tissue},
                           {"r1", r.params.r1},
                           {"r2s", r.params.r2s},
                           {"pd", r.params.pd},
                           {"mtsat", r.params.mtsat}});
    }
    nlohmann::json protocol = nlohmann::json::array();
    for (const auto& p : c.protocol) {
        auto entry = sidecar_to_json(p.settings);
        entry["run"] = p.run;
        entry["echo"] = p.echo;
        protocol.push_back(entry);
    }
    nlohmann::json noise = "none";
    if (!c.noise.empty()) {
        nlohmann::json runs = nlohmann::json::object();
        for (const auto& [run, m] : c.noise) runs[run] = noise_to_json(m);
        noise = {{"runs", runs}};
    }
    return {{"dims", c.phantom.dims},
            {"voxel_size", c.phantom.voxel_size},
            {"seed", c.phantom.seed},
            {"rng", SplitMix64::kAlgorithm},
            {"regions", regions},
            {"protocol", protocol},
            {"noise", noise}};
}

}  // namespace ncchi
