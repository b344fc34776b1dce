#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "ncchi/distributions.hpp"
#include "ncchi/forward_model.hpp"
#include "ncchi/map_fit.hpp"
#include "ncchi/volume_io.hpp"

namespace ncchi {

/// Expected intensity of an echo: mu for Gaussian, the nc-chi mean otherwise.
/// Voxels with status Outside are written as 0.
EchoVolume predict_echo(const ParameterMaps& maps, const AcquisitionSettings& s, const NoiseModel& noise, Family family);

struct LoeoOptions {
    SolverSettings solver;
    /// Contrast label per volume; empty derives "run0", "run1", ... from the acquisition settings.
    std::vector<std::string> contrast;
};

struct LoeoRow {
    std::string contrast;
    int held_out_echo = 0;
    double mse_gauss = 0.0;
    double mse_ncchi = 0.0;
    double diff = 0.0;
    std::size_t voxels = 0;
    /// Masked voxels whose fit did not converge (either family).
    std::size_t unconverged_gauss = 0;
    std::size_t unconverged_ncchi = 0;
    bool flagged() const { return unconverged_gauss + unconverged_ncchi > 0; }
};

struct LoeoSummary {
    std::string contrast;
    int folds = 0;
    double mse_gauss = 0.0;
    double mse_ncchi = 0.0;
    double diff = 0.0;
};

struct LoeoReport {
    std::vector<LoeoRow> rows;
    /// Per-contrast averages over held-out echoes, in order of first appearance.
    std::vector<LoeoSummary> summary;

    const LoeoSummary* find(const std::string& contrast) const;
    bool any_flagged() const;
    std::string to_csv() const;
    nlohmann::json to_json() const;
};

/// Groups volumes into runs: volumes sharing TR, flip angle, MT pulse and TR2.
/// Returns a run index per volume and the echo rank (by TE) within its run.
void group_runs(const std::vector<AcquisitionSettings>& settings, std::vector<int>& run, std::vector<int>& echo);

/// Leave-one-echo-out: for each echo rank e, refits Gaussian and nc-chi maps
/// without the e-th echo of every run and scores the predicted held-out
/// volumes by MSE inside the mask. Noise models are taken from the problem.
LoeoReport loeo(const FitProblem& problem, const LoeoOptions& options);

}  // namespace ncchi
