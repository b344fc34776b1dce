#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ncchi/crossval.hpp"
#include "ncchi/distributions.hpp"
#include "ncchi/map_fit.hpp"
#include "ncchi/noise_em.hpp"
#include "ncchi/synthetic.hpp"
#include "ncchi/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ncchi::cli {
namespace {

/// Bad flag values or combinations that CLI11 cannot detect on its own.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Logger {
public:
    Logger(std::ostream& out, bool as_json) : out_(out), json_(as_json) {}

    void info(const std::string& event, const std::string& message, json fields = json::object()) {
        write("info", event, message, std::move(fields));
    }
    void warn(const std::string& event, const std::string& message, json fields = json::object()) {
        write("warning", event, message, std::move(fields));
    }
    void error(const std::string& event, const std::string& message) { write("error", event, message, json::object()); }

private:
    void write(const char* level, const std::string& event, const std::string& message, json fields) {
        if (json_) {
            fields["level"] = level;
            fields["event"] = event;
            fields["message"] = message;
            out_ << fields.dump() << '\n';
        } else {
            out_ << "ncchi: " << (std::string(level) == "info" ? "" : std::string(level) + ": ") << message << '\n';
        }
    }

    std::ostream& out_;
    bool json_;
};

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

EchoVolume load_volume(const fs::path& path) {
    try {
        return read_volume(path);
    } catch (const VolumeError& e) {
        const std::string what = e.what();
        if (what.find(path.string()) != std::string::npos) throw;
        throw VolumeError(e.kind(), path.string() + ": " + what);
    }
}

AcquisitionSettings load_sidecar(const fs::path& path) {
    try {
        return read_sidecar(path);
    } catch (const SidecarError& e) {
        const std::string what = e.what();
        if (what.find(path.string()) != std::string::npos) throw;
        throw SidecarError(e.kind(), path.string() + ": " + what);
    }
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

/// Inputs shared by `fit` and `xval`.
struct ProblemInputs {
    std::vector<std::string> volumes;
    std::vector<std::string> sidecars;
    std::string noise_report;
    std::optional<double> nu;
    std::optional<double> sigma2;
    std::string mask;
    std::string pooling = "run";
};

json noise_json(const NoiseModel& m) {
    return {{"family", std::string(to_string(m.family))}, {"nu", m.nu}, {"sigma2", m.sigma2}};
}

std::vector<NoiseModel> noise_from_report(const json& report, const std::vector<std::string>& volumes,
                                          const std::string& report_path) {
    if (!report.contains("volumes") || !report.at("volumes").is_array()) {
        throw DataError(report_path + ": noise report has no 'volumes' list");
    }
    const auto& entries = report.at("volumes");
    std::vector<NoiseModel> out;
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        const json* match = nullptr;
        for (const auto& e : entries) {
            if (e.value("volume", std::string()) == volumes[i]) match = &e;
        }
        if (!match && entries.size() == volumes.size()) match = &entries.at(i);
        if (!match) throw DataError(report_path + ": no noise estimate for " + volumes[i]);
        try {
            out.push_back(background_from_report(*match));
        } catch (const std::exception& e) {
            throw DataError(report_path + ": " + e.what());
        }
    }
    return out;
}

/// Averages nu and sigma2 over the echoes of each run.
void pool_noise_by_run(const std::vector<AcquisitionSettings>& settings, std::vector<NoiseModel>& noise) {
    std::vector<int> run, echo;
    group_runs(settings, run, echo);
    std::map<int, std::pair<NoiseModel, int>> sums;
    for (std::size_t i = 0; i < noise.size(); ++i) {
        auto [it, fresh] = sums.try_emplace(run[i], NoiseModel{noise[i].family, 0.0, 0.0}, 0);
        it->second.first.nu += noise[i].nu;
        it->second.first.sigma2 += noise[i].sigma2;
        it->second.second += 1;
    }
    for (std::size_t i = 0; i < noise.size(); ++i) {
        const auto& [sum, n] = sums.at(run[i]);
        noise[i].nu = sum.nu / n;
        noise[i].sigma2 = sum.sigma2 / n;
    }
}

FitProblem build_problem(const ProblemInputs& in, json& record) {
    if (in.volumes.size() < 4) throw UsageError("at least four input volumes are required");
    if (!in.sidecars.empty() && in.sidecars.size() != in.volumes.size()) {
        throw UsageError("--sidecars must list one file per volume");
    }
    if (in.pooling != "run" && in.pooling != "volume") throw UsageError("noise pooling must be 'run' or 'volume'");

    FitProblem problem;
    std::vector<std::string> sidecars;
    for (std::size_t i = 0; i < in.volumes.size(); ++i) {
        problem.volumes.push_back(load_volume(in.volumes[i]));
        const std::string sc = in.sidecars.empty() ? sidecar_path_for(in.volumes[i]).string() : in.sidecars[i];
        problem.settings.push_back(load_sidecar(sc));
        sidecars.push_back(sc);
    }
    if (!in.noise_report.empty()) {
        problem.noise = noise_from_report(read_json_file(in.noise_report), in.volumes, in.noise_report);
    } else {
        if (!in.sigma2) throw UsageError("either --noise or --sigma2 is required");
        problem.noise.assign(in.volumes.size(), NoiseModel{Family::NcChi, 2.0, *in.sigma2});
    }
    for (auto& m : problem.noise) {
        if (in.nu) m.nu = *in.nu;
        if (in.sigma2) m.sigma2 = *in.sigma2;
        m.validate();
    }
    if (in.pooling == "run") pool_noise_by_run(problem.settings, problem.noise);

    if (!in.mask.empty()) {
        const EchoVolume mask = load_volume(in.mask);
        if (!mask.same_grid(problem.volumes.front())) {
            throw DataError(in.mask + ": mask dimensions differ from " + in.volumes.front());
        }
        problem.mask.resize(mask.data.size());
        std::transform(mask.data.begin(), mask.data.end(), problem.mask.begin(),
                       [](float v) { return static_cast<std::uint8_t>(v != 0.0f); });
    }
    try {
        problem.validate();
    } catch (const ProblemError& e) {
        if (e.volume()) throw DataError(in.volumes.at(*e.volume()) + ": " + e.what());
        throw;
    }

    json inputs = json::array();
    for (std::size_t i = 0; i < in.volumes.size(); ++i) {
        inputs.push_back({{"volume", in.volumes[i]},
                          {"sidecar", sidecars[i]},
                          {"acquisition", sidecar_to_json(problem.settings[i])},
                          {"noise", noise_json(problem.noise[i])}});
    }
    record["inputs"] = inputs;
    record["noise_pooling"] = in.pooling;
    record["mask"] = in.mask;
    return problem;
}

std::size_t unconverged_count(const ParameterMaps& maps) {
    return maps.count(VoxelStatus::NotConverged) + maps.count(VoxelStatus::NonFinite);
}

void write_maps(const ParameterMaps& maps, const fs::path& dir) {
    fs::create_directories(dir);
    write_volume(maps.r1, dir / "R1.nii");
    write_volume(maps.r2s, dir / "R2s.nii");
    write_volume(maps.pd, dir / "PD.nii");
    write_volume(maps.mtsat, dir / "MTsat.nii");
    write_volume(maps.status_volume(), dir / "convergence_status.nii");
    write_volume(maps.objective, dir / "convergence_objective.nii");
    write_volume(maps.iterations, dir / "convergence_iterations.nii");
}

struct Common {
    bool log_json = false;
    std::optional<unsigned> threads;
};

unsigned thread_setting(const Common& common, unsigned from_config) { return common.threads.value_or(from_config); }

// --- noise-estimate ---------------------------------------------------------

struct NoiseArgs {
    std::vector<std::string> volumes;
    std::string out;
    std::string config;
    std::optional<std::size_t> max_samples;
    std::optional<double> initial_nu;
};

int run_noise(const NoiseArgs& a, const Common& common, Logger& log) {
    EmSettings settings;
    if (!a.config.empty()) from_json(read_json_file(a.config), settings);
    if (a.max_samples) settings.max_samples = *a.max_samples;
    if (a.initial_nu) settings.initial_nu = *a.initial_nu;
    settings.threads = thread_setting(common, settings.threads);

    json entries = json::array();
    bool all_converged = true;
    for (const auto& path : a.volumes) {
        const EchoVolume vol = load_volume(path);
        const auto samples = prepare_noise_samples(vol.data, settings.max_samples);
        NoiseFit fit;
        try {
            fit = fit_noise(samples, settings);
        } catch (const std::invalid_argument& e) {
            throw DataError(path + ": " + e.what());
        }
        json entry = noise_report(fit);
        entry["volume"] = path;
        entries.push_back(entry);
        all_converged = all_converged && fit.converged;
        log.info("noise_estimate", path + ": nu=" + std::to_string(fit.background.nu) +
                                       " sigma2=" + std::to_string(fit.background.sigma2),
                 {{"volume", path}, {"nu", fit.background.nu}, {"sigma2", fit.background.sigma2}});
        if (!fit.converged) log.warn("not_converged", path + ": EM reached the iteration cap", {{"volume", path}});
    }
    json settings_json;
    to_json(settings_json, settings);
    settings_json.erase("threads");
    write_json(a.out, {{"settings", settings_json}, {"volumes", entries}});
    return all_converged ? kOk : kNotConverged;
}

// --- fit ---------------------------------------------------------------------

struct FitArgs {
    ProblemInputs inputs;
    std::string likelihood;
    std::string config;
    std::string out;
    std::optional<int> max_iters;
    std::optional<double> tol;
    std::vector<double> regularization;
    double max_unconverged = 0.01;
};

SolverSettings solver_settings(const std::string& config, const Common& common) {
    SolverSettings s;
    if (!config.empty()) {
        try {
            from_json(read_json_file(config), s);
        } catch (const json::exception& e) {
            throw UsageError(config + ": " + e.what());
        }
    }
    s.threads = thread_setting(common, s.threads);
    return s;
}

int run_fit(FitArgs a, const Common& common, Logger& log) {
    SolverSettings s = solver_settings(a.config, common);
    if (!a.likelihood.empty()) s.likelihood = family_from_string(a.likelihood);
    if (s.likelihood == Family::Chi) throw UsageError("--likelihood must be gauss or ncchi");
    if (a.max_iters) s.max_iters = *a.max_iters;
    if (a.tol) s.tol = *a.tol;
    if (a.regularization.size() == 1) s.regularization.fill(a.regularization.front());
    if (a.regularization.size() == 4) std::copy(a.regularization.begin(), a.regularization.end(), s.regularization.begin());
    if (!a.regularization.empty() && a.regularization.size() != 1 && a.regularization.size() != 4) {
        throw UsageError("--regularization takes one or four weights");
    }
    if (!a.inputs.mask.empty()) s.mask_path = a.inputs.mask;
    a.inputs.mask = s.mask_path;

    json record;
    FitProblem problem = build_problem(a.inputs, record);
    problem.likelihood = s.likelihood;
    log.info("fit_start", "fitting " + std::to_string(problem.volumes.size()) + " volumes with " +
                              std::string(to_string(s.likelihood)) + " likelihood");
    const ParameterMaps maps = fit_maps(problem, s);

    const fs::path dir(a.out);
    write_maps(maps, dir);
    std::size_t masked = 0;
    for (std::size_t v = 0; v < problem.voxel_count(); ++v) masked += problem.in_mask(v) ? 1 : 0;
    const std::size_t bad = unconverged_count(maps);
    json settings_json;
    to_json(settings_json, s);
    settings_json.erase("threads");
    record["solver"] = settings_json;
    record["max_unconverged"] = a.max_unconverged;
    record["voxels"] = {{"masked", masked},
                        {"converged", maps.count(VoxelStatus::Converged)},
                        {"max_iterations", maps.count(VoxelStatus::MaxIterations)},
                        {"not_converged", maps.count(VoxelStatus::NotConverged)},
                        {"non_finite", maps.count(VoxelStatus::NonFinite)}};
    record["outputs"] = {"R1.nii", "R2s.nii", "PD.nii", "MTsat.nii", "convergence_status.nii",
                         "convergence_objective.nii", "convergence_iterations.nii"};
    record["status_codes"] = {{"outside", 0}, {"converged", 1}, {"max_iterations", 2}, {"not_converged", 3},
                              {"non_finite", 4}};
    write_json(dir / "fit_metadata.json", record);
    log.info("fit_done", std::to_string(maps.count(VoxelStatus::Converged)) + " of " + std::to_string(masked) +
                             " voxels converged",
             record["voxels"]);
    if (masked > 0 && static_cast<double>(bad) > a.max_unconverged * static_cast<double>(masked)) {
        log.warn("not_converged", std::to_string(bad) + " voxels did not converge");
        return kNotConverged;
    }
    return kOk;
}

// --- predict -----------------------------------------------------------------

struct PredictArgs {
    std::string maps;
    std::string sidecar;
    std::string family = "ncchi";
    std::string noise_report;
    std::size_t noise_entry = 0;
    std::optional<double> nu;
    std::optional<double> sigma2;
    std::string out;
};

int run_predict(const PredictArgs& a, Logger& log) {
    const Family family = family_from_string(a.family);
    if (family == Family::Chi) throw UsageError("--family must be gauss or ncchi");
    const fs::path dir(a.maps);
    ParameterMaps maps{load_volume(dir / "R1.nii"),  load_volume(dir / "R2s.nii"), load_volume(dir / "PD.nii"),
                       load_volume(dir / "MTsat.nii"), {}, {}, {}};
    for (const auto* v : {&maps.r2s, &maps.pd, &maps.mtsat}) {
        if (!v->same_grid(maps.r1)) throw DataError(a.maps + ": parameter maps have different dimensions");
    }
    maps.status.assign(maps.r1.voxel_count(), VoxelStatus::Converged);
    if (fs::exists(dir / "convergence_status.nii")) {
        const EchoVolume st = load_volume(dir / "convergence_status.nii");
        if (!st.same_grid(maps.r1)) throw DataError(a.maps + ": convergence volume has different dimensions");
        for (std::size_t v = 0; v < st.data.size(); ++v) maps.status[v] = static_cast<VoxelStatus>(st.data[v]);
    }
    NoiseModel noise{family, 2.0, 1.0};
    if (!a.noise_report.empty()) {
        const json report = read_json_file(a.noise_report);
        if (!report.contains("volumes") || a.noise_entry >= report.at("volumes").size()) {
            throw DataError(a.noise_report + ": no noise entry " + std::to_string(a.noise_entry));
        }
        noise = background_from_report(report.at("volumes").at(a.noise_entry));
    } else if (family == Family::NcChi && (!a.nu || !a.sigma2)) {
        throw UsageError("nc-chi prediction needs --noise or both --nu and --sigma2");
    }
    if (a.nu) noise.nu = *a.nu;
    if (a.sigma2) noise.sigma2 = *a.sigma2;
    noise.validate();
    const AcquisitionSettings s = load_sidecar(a.sidecar);
    write_volume(predict_echo(maps, s, noise, family), a.out);
    log.info("predict_done", "wrote " + a.out);
    return kOk;
}

// --- xval --------------------------------------------------------------------

struct XvalArgs {
    std::string config;
    std::string out;
    double max_unconverged = 0.01;
};

int run_xval(const XvalArgs& a, const Common& common, Logger& log) {
    const json cfg = read_json_file(a.config);
    const fs::path base = fs::path(a.config).parent_path();
    SolverSettings s;
    if (cfg.contains("solver")) {
        try {
            from_json(cfg.at("solver"), s);
        } catch (const json::exception& e) {
            throw UsageError(a.config + ": solver: " + e.what());
        }
    }
    s.threads = thread_setting(common, s.threads);

    FitProblem problem;
    LoeoOptions options;
    json record;
    if (cfg.contains("synth")) {
        SynthConfig sc;
        try {
            sc = synth_config_from_json(cfg.at("synth"));
        } catch (const json::exception& e) {
            throw UsageError(a.config + ": synth: " + e.what());
        }
        if (sc.noise.empty()) throw UsageError(a.config + ": synth: cross-validation needs a noise model");
        const Simulation sim = simulate_acquisition(sc.phantom, sc.protocol, sc.noise, s.threads);
        problem = make_problem(sim, Family::NcChi);
        for (const auto& p : sc.protocol) options.contrast.push_back(p.run);
        record["synth"] = synth_config_to_json(sc);
    } else {
        ProblemInputs in;
        try {
            for (const auto& v : cfg.at("volumes")) in.volumes.push_back(resolve(base, v.get<std::string>()).string());
            for (const auto& v : cfg.value("sidecars", json::array())) {
                in.sidecars.push_back(resolve(base, v.get<std::string>()).string());
            }
            if (cfg.contains("noise")) in.noise_report = resolve(base, cfg.at("noise").get<std::string>()).string();
            if (cfg.contains("nu")) in.nu = cfg.at("nu").get<double>();
            if (cfg.contains("sigma2")) in.sigma2 = cfg.at("sigma2").get<double>();
            if (cfg.contains("mask")) in.mask = resolve(base, cfg.at("mask").get<std::string>()).string();
            in.pooling = cfg.value("noise_pooling", in.pooling);
            options.contrast = cfg.value("contrast", std::vector<std::string>{});
        } catch (const json::exception& e) {
            throw UsageError(a.config + ": " + e.what());
        }
        problem = build_problem(in, record);
    }
    options.solver = s;
    log.info("xval_start", "leave-one-echo-out over " + std::to_string(problem.volumes.size()) + " volumes");
    const LoeoReport report = loeo(problem, options);

    const bool as_json = fs::path(a.out).extension() == ".json";
    if (as_json) {
        json out = report.to_json();
        json settings_json;
        to_json(settings_json, s);
        settings_json.erase("threads");
        out["solver"] = settings_json;
        out["inputs"] = record;
        write_json(a.out, out);
    } else {
        write_text_file(a.out, report.to_csv());
    }
    for (const auto& row : report.summary) {
        log.info("xval_contrast", row.contrast + ": mse_ncchi - mse_gauss = " + std::to_string(row.diff),
                 {{"contrast", row.contrast}, {"diff", row.diff}});
    }
    std::size_t bad = 0, total = 0;
    for (const auto& row : report.rows) {
        bad += row.unconverged_gauss + row.unconverged_ncchi;
        total += 2 * row.voxels;
    }
    if (total > 0 && static_cast<double>(bad) > a.max_unconverged * static_cast<double>(total)) {
        log.warn("not_converged", std::to_string(bad) + " voxel fits did not converge across folds");
        return kNotConverged;
    }
    return kOk;
}

// --- synth -------------------------------------------------------------------

struct SynthArgs {
    std::string spec;
    std::string out;
    std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a, const Common& common, Logger& log) {
    json spec = a.spec.empty() ? json::object() : read_json_file(a.spec);
    if (a.seed) spec["seed"] = *a.seed;
    SynthConfig sc;
    try {
        sc = synth_config_from_json(spec);
    } catch (const json::exception& e) {
        throw UsageError(a.spec + ": " + e.what());
    }
    const Simulation sim = simulate_acquisition(sc.phantom, sc.protocol, sc.noise, common.threads.value_or(0));

    const fs::path dir(a.out);
    fs::create_directories(dir);
    json volumes = json::array();
    for (std::size_t i = 0; i < sc.protocol.size(); ++i) {
        const auto& p = sc.protocol[i];
        const std::string stem = p.run + "_e" + std::to_string(p.echo + 1);
        write_volume(sim.volumes[i], dir / (stem + ".nii"));
        write_sidecar(p.settings, dir / (stem + ".json"));
        volumes.push_back({{"volume", stem + ".nii"}, {"sidecar", stem + ".json"}, {"run", p.run}, {"echo", p.echo}});
    }
    write_volume(sim.truth.r1, dir / "truth_R1.nii");
    write_volume(sim.truth.r2s, dir / "truth_R2s.nii");
    write_volume(sim.truth.pd, dir / "truth_PD.nii");
    write_volume(sim.truth.mtsat, dir / "truth_MTsat.nii");
    EchoVolume mask = make_volume(sc.phantom.dims, sc.phantom.voxel_size);
    std::transform(sim.mask.begin(), sim.mask.end(), mask.data.begin(), [](std::uint8_t m) { return float(m); });
    write_volume(mask, dir / "mask.nii");

    json manifest{{"config", synth_config_to_json(sc)},
                  {"rng", SplitMix64::kAlgorithm},
                  {"volumes", volumes},
                  {"truth", {{"r1", "truth_R1.nii"}, {"r2s", "truth_R2s.nii"}, {"pd", "truth_PD.nii"}, {"mtsat", "truth_MTsat.nii"}}},
                  {"mask", "mask.nii"}};
    write_json(dir / "manifest.json", manifest);
    log.info("synth_done", "wrote " + std::to_string(sc.protocol.size()) + " volumes to " + a.out);
    return kOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& err) {
    CLI::App app{"Quantitative MRI maps under noncentral-chi noise", "ncchi"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    app.add_flag("--log-json", common.log_json, "Line-delimited JSON log records on stderr");
    app.add_option("--threads", common.threads, "Worker threads (default: NCCHI_THREADS or all cores)")
        ->check(CLI::PositiveNumber);

    NoiseArgs noise;
    auto* noise_cmd = app.add_subcommand("noise-estimate", "Fit a two-component chi mixture to each volume");
    noise_cmd->add_option("volumes", noise.volumes, "Input volumes")->required();
    noise_cmd->add_option("--out", noise.out, "Report JSON")->required();
    noise_cmd->add_option("--config", noise.config, "EM settings JSON");
    noise_cmd->add_option("--max-samples", noise.max_samples, "Subsample cap")->check(CLI::PositiveNumber);
    noise_cmd->add_option("--initial-nu", noise.initial_nu, "Starting degrees of freedom")->check(CLI::PositiveNumber);

    FitArgs fit;
    auto* fit_cmd = app.add_subcommand("fit", "Estimate R1, R2*, PD and MTsat maps");
    fit_cmd->add_option("volumes", fit.inputs.volumes, "Echo volumes")->required();
    fit_cmd->add_option("--sidecars", fit.inputs.sidecars, "Acquisition JSON per volume (default: co-named)");
    fit_cmd->add_option("--likelihood", fit.likelihood, "gauss or ncchi");
    fit_cmd->add_option("--noise", fit.inputs.noise_report, "Noise report from noise-estimate");
    fit_cmd->add_option("--nu", fit.inputs.nu, "Override degrees of freedom")->check(CLI::PositiveNumber);
    fit_cmd->add_option("--sigma2", fit.inputs.sigma2, "Override noise variance")->check(CLI::PositiveNumber);
    fit_cmd->add_option("--noise-pooling", fit.inputs.pooling, "run or volume");
    fit_cmd->add_option("--mask", fit.inputs.mask, "Mask volume (non-zero = fit)");
    fit_cmd->add_option("--config", fit.config, "Solver settings JSON");
    fit_cmd->add_option("--max-iters", fit.max_iters)->check(CLI::PositiveNumber);
    fit_cmd->add_option("--tol", fit.tol)->check(CLI::PositiveNumber);
    fit_cmd->add_option("--regularization", fit.regularization, "Membrane weight, one or four values");
    fit_cmd->add_option("--max-unconverged", fit.max_unconverged, "Tolerated fraction before exit 3")
        ->check(CLI::Range(0.0, 1.0));
    fit_cmd->add_option("--out", fit.out, "Output directory")->required();

    PredictArgs predict;
    auto* predict_cmd = app.add_subcommand("predict", "Predict an echo volume from fitted maps");
    predict_cmd->add_option("--maps", predict.maps, "Directory written by fit")->required();
    predict_cmd->add_option("--sidecar", predict.sidecar, "Acquisition JSON of the echo")->required();
    predict_cmd->add_option("--family", predict.family, "gauss or ncchi");
    predict_cmd->add_option("--noise", predict.noise_report, "Noise report");
    predict_cmd->add_option("--noise-entry", predict.noise_entry, "Report entry to use");
    predict_cmd->add_option("--nu", predict.nu)->check(CLI::PositiveNumber);
    predict_cmd->add_option("--sigma2", predict.sigma2)->check(CLI::PositiveNumber);
    predict_cmd->add_option("--out", predict.out, "Output volume")->required();

    XvalArgs xval;
    auto* xval_cmd = app.add_subcommand("xval", "Leave-one-echo-out comparison of Gaussian and nc-chi fits");
    xval_cmd->add_option("--config", xval.config, "Cross-validation JSON")->required();
    xval_cmd->add_option("--out", xval.out, "Report (.csv or .json)")->required();
    xval_cmd->add_option("--max-unconverged", xval.max_unconverged)->check(CLI::Range(0.0, 1.0));

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "Simulate a phantom acquisition");
    synth_cmd->add_option("--spec", synth.spec, "Phantom / protocol / noise JSON");
    synth_cmd->add_option("--seed", synth.seed, "Override the spec seed");
    synth_cmd->add_option("--out", synth.out, "Output directory")->required();

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        std::ostringstream out;
        app.exit(e, out, err);
        err << out.str();
        return kOk;
    } catch (const CLI::ParseError& e) {
        std::ostringstream out;
        app.exit(e, out, err);
        return kUsage;
    }

    Logger log(err, common.log_json);
    try {
        if (*noise_cmd) return run_noise(noise, common, log);
        if (*fit_cmd) return run_fit(fit, common, log);
        if (*predict_cmd) return run_predict(predict, log);
        if (*xval_cmd) return run_xval(xval, common, log);
        if (*synth_cmd) return run_synth(synth, common, log);
    } catch (const UsageError& e) {
        log.error("usage", e.what());
        return kUsage;
    } catch (const DataError& e) {
        log.error("data", e.what());
        return kDataError;
    } catch (const fs::filesystem_error& e) {
        log.error("data", e.what());
        return kDataError;
    } catch (const std::invalid_argument& e) {
        log.error("usage", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        log.error("data", e.what());
        return kDataError;
    }
    return kUsage;
}

}  // namespace ncchi::cli
