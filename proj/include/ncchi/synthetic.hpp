#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ncchi/distributions.hpp"
#include "ncchi/forward_model.hpp"
#include "ncchi/map_fit.hpp"
#include "ncchi/volume_io.hpp"

namespace ncchi {

/// SplitMix64 (Steele, Lea & Flood 2014). Satisfies UniformRandomBitGenerator.
class SplitMix64 {
public:
    using result_type = std::uint64_t;
    static constexpr const char* kAlgorithm = "splitmix64";

    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()();

private:
    std::uint64_t state_;
};

/// Independent stream for (seed, a, b), e.g. (seed, volume, voxel).
SplitMix64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

/// Noncentral chi draw: direct sum of squared normals for integer nu,
/// Poisson-mixed central chi-square otherwise.
double sample_ncchi(double mu, const NoiseModel& model, SplitMix64& rng);
/// Always the Poisson-mixture construction (valid for any nu > 0).
double sample_ncchi_poisson(double mu, const NoiseModel& model, SplitMix64& rng);
/// Family dispatch: Gaussian adds N(0, sigma2); Chi ignores mu.
double sample_noise(double mu, const NoiseModel& model, SplitMix64& rng);

enum class Shape { Background, Sphere, Box };

struct Region {
    std::string name;
    Shape shape = Shape::Background;
    std::array<double, 3> center{0, 0, 0};
    /// Sphere radius, or box half-extents (all three used) in voxels.
    std::array<double, 3> extent{0, 0, 0};
    /// Background-like regions carry no signal.
    bool tissue = true;
    VoxelParams params;
};

/// Regions are painted in order; later regions overwrite earlier ones.
struct PhantomSpec {
    std::array<int, 3> dims{16, 16, 16};
    std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
    std::vector<Region> regions;
    std::uint64_t seed = 1;

    /// Requires a leading background region and positive dims.
    void validate() const;
    /// Region index per voxel.
    std::vector<int> labels() const;
};

/// Concentric air / GM / WM / CSF phantom. PD is in arbitrary units scaled by `pd_scale`.
PhantomSpec default_phantom(std::array<int, 3> dims, std::uint64_t seed, double pd_scale = 1000.0);

struct ProtocolVolume {
    std::string run;
    int echo = 0;
    AcquisitionSettings settings;
};

/// PDw / T1w / MTw multi-echo FLASH, TE = 2.3 (k + 1) ms.
std::vector<ProtocolVolume> default_mpm_protocol(int echoes = 6);

std::vector<std::string> run_names(const std::vector<ProtocolVolume>& protocol);

struct Simulation {
    std::vector<EchoVolume> volumes;
    std::vector<ProtocolVolume> protocol;
    ParameterMaps truth;
    std::vector<std::uint8_t> mask;
    /// Noise used per run; absent in noiseless mode.
    std::map<std::string, NoiseModel> noise;
};

/// Forward-simulates every protocol volume and draws noise per voxel from
/// counter-derived streams. An empty `noise` map produces noiseless data.
Simulation simulate_acquisition(const PhantomSpec& phantom, const std::vector<ProtocolVolume>& protocol,
                                const std::map<std::string, NoiseModel>& noise, unsigned threads = 0);

/// Fit problem over the simulated volumes and tissue mask. Noise models come
/// from `noise` when given, otherwise from the simulation; a run without one throws.
FitProblem make_problem(const Simulation& sim, Family likelihood, const std::map<std::string, NoiseModel>& noise = {});

/// Per-run noise giving (mean first-echo tissue signal) / sigma = snr.
std::map<std::string, NoiseModel> noise_for_snr(const PhantomSpec& phantom, const std::vector<ProtocolVolume>& protocol,
                                                double snr, double nu, Family family = Family::NcChi);

/// Synthesis configuration: phantom, protocol and noise in one JSON record.
struct SynthConfig {
    PhantomSpec phantom;
    std::vector<ProtocolVolume> protocol;
    std::map<std::string, NoiseModel> noise;
};

SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json synth_config_to_json(const SynthConfig& c);

}  // namespace ncchi
