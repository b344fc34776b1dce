#include "ncchi/crossval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace ncchi {
namespace {

bool unconverged(VoxelStatus s) { return s == VoxelStatus::NotConverged || s == VoxelStatus::NonFinite; }

std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

EchoVolume predict_echo(const ParameterMaps& maps, const AcquisitionSettings& s, const NoiseModel& noise, Family family) {
    EchoVolume out = maps.r1;
    out.source_header.reset();
    out.extension.clear();
    const std::size_t n = out.voxel_count();
    for (std::size_t v = 0; v < n; ++v) {
        if (!maps.status.empty() && maps.status[v] == VoxelStatus::Outside) {
            out.data[v] = 0.0f;
            continue;
        }
        const double mu = signal(maps.at(v), s);
        out.data[v] = static_cast<float>(family == Family::Gaussian ? mu : ncchi_mean(noise, mu));
    }
    return out;
}

const LoeoSummary* LoeoReport::find(const std::string& contrast) const {
    for (const auto& s : summary) {
        if (s.contrast == contrast) return &s;
    }
    return nullptr;
}

bool LoeoReport::any_flagged() const {
    return std::any_of(rows.begin(), rows.end(), [](const LoeoRow& r) { return r.flagged(); });
}

std::string LoeoReport::to_csv() const {
    std::ostringstream os;
    os << "contrast,held_out_echo,mse_gauss,mse_ncchi,diff,voxels,unconverged_gauss,unconverged_ncchi\n";
    for (const auto& r : rows) {
        os << r.contrast << ',' << r.held_out_echo << ',' << format_double(r.mse_gauss) << ','
           << format_double(r.mse_ncchi) << ',' << format_double(r.diff) << ',' << r.voxels << ','
           << r.unconverged_gauss << ',' << r.unconverged_ncchi << '\n';
    }
    for (const auto& s : summary) {
        os << s.contrast << ",mean," << format_double(s.mse_gauss) << ',' << format_double(s.mse_ncchi) << ','
           << format_double(s.diff) << ",,,\n";
    }
    return os.str();
}

nlohmann::json LoeoReport::to_json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        j["rows"].push_back({{"contrast", r.contrast},
                             {"held_out_echo", r.held_out_echo},
                             {"mse_gauss", r.mse_gauss},
                             {"mse_ncchi", r.mse_ncchi},
                             {"diff", r.diff},
                             {"voxels", r.voxels},
                             {"unconverged_gauss", r.unconverged_gauss},
                             {"unconverged_ncchi", r.unconverged_ncchi},
                             {"flagged", r.flagged()}});
    }
    j["summary"] = nlohmann::json::array();
    for (const auto& s : summary) {
        j["summary"].push_back({{"contrast", s.contrast},
                                {"folds", s.folds},
                                {"mse_gauss", s.mse_gauss},
                                {"mse_ncchi", s.mse_ncchi},
                                {"diff", s.diff}});
    }
    return j;
}

void group_runs(const std::vector<AcquisitionSettings>& settings, std::vector<int>& run, std::vector<int>& echo) {
    using Key = std::tuple<double, double, bool, double>;
    std::map<Key, int> ids;
    run.assign(settings.size(), 0);
    echo.assign(settings.size(), 0);
    for (std::size_t i = 0; i < settings.size(); ++i) {
        const auto& s = settings[i];
        const Key key{s.tr, s.flip, s.mt, s.tr2};
        auto it = ids.find(key);
        if (it == ids.end()) it = ids.emplace(key, static_cast<int>(ids.size())).first;
        run[i] = it->second;
    }
    for (std::size_t i = 0; i < settings.size(); ++i) {
        int rank = 0;
        for (std::size_t k = 0; k < settings.size(); ++k) {
            if (k == i || run[k] != run[i]) continue;
            if (settings[k].te < settings[i].te || (settings[k].te == settings[i].te && k < i)) ++rank;
        }
        echo[i] = rank;
    }
}

LoeoReport loeo(const FitProblem& problem, const LoeoOptions& options) {
    problem.validate();
    const std::size_t nvol = problem.volumes.size();
    std::vector<int> run, echo;
    group_runs(problem.settings, run, echo);
    const int nruns = *std::max_element(run.begin(), run.end()) + 1;

    std::vector<std::string> label(static_cast<std::size_t>(nruns));
    for (std::size_t i = 0; i < nvol; ++i) {
        auto& l = label[static_cast<std::size_t>(run[i])];
        if (!options.contrast.empty()) {
            if (options.contrast.size() != nvol) throw std::invalid_argument("loeo: one contrast label per volume required");
            if (!l.empty() && l != options.contrast[i]) {
                throw ProblemError("loeo: volumes with identical acquisition settings carry different contrast labels", i);
            }
            l = options.contrast[i];
        } else {
            l = "run" + std::to_string(run[i]);
        }
    }
    std::vector<int> echoes(static_cast<std::size_t>(nruns), 0);
    for (std::size_t i = 0; i < nvol; ++i) echoes[static_cast<std::size_t>(run[i])]++;
    for (int r = 0; r < nruns; ++r) {
        if (echoes[static_cast<std::size_t>(r)] < 3) {
            throw ProblemError("loeo: contrast '" + label[static_cast<std::size_t>(r)] + "' has fewer than 3 echoes");
        }
    }
    const int max_echo = *std::max_element(echoes.begin(), echoes.end());

    LoeoReport report;
    for (int e = 0; e < max_echo; ++e) {
        FitProblem fold;
        fold.mask = problem.mask;
        std::vector<std::size_t> held;
        for (std::size_t i = 0; i < nvol; ++i) {
            if (echo[i] == e) {
                held.push_back(i);
                continue;
            }
            fold.volumes.push_back(problem.volumes[i]);
            fold.settings.push_back(problem.settings[i]);
            fold.noise.push_back(problem.noise[i]);
        }
        SolverSettings gauss_settings = options.solver;
        gauss_settings.likelihood = Family::Gaussian;
        SolverSettings ncchi_settings = options.solver;
        ncchi_settings.likelihood = Family::NcChi;
        fold.likelihood = Family::Gaussian;
        const ParameterMaps gauss = fit_maps(fold, gauss_settings);
        fold.likelihood = Family::NcChi;
        const ParameterMaps ncchi = fit_maps(fold, ncchi_settings);

        for (std::size_t i : held) {
            const EchoVolume pg = predict_echo(gauss, problem.settings[i], problem.noise[i], Family::Gaussian);
            const EchoVolume pn = predict_echo(ncchi, problem.settings[i], problem.noise[i], Family::NcChi);
            const auto& x = problem.volumes[i].data;
            LoeoRow row;
            row.contrast = label[static_cast<std::size_t>(run[i])];
            row.held_out_echo = e;
            double sg = 0.0, sn = 0.0;
            for (std::size_t v = 0; v < x.size(); ++v) {
                if (!problem.in_mask(v)) continue;
                if (unconverged(gauss.status[v])) ++row.unconverged_gauss;
                if (unconverged(ncchi.status[v])) ++row.unconverged_ncchi;
                const double dg = static_cast<double>(pg.data[v]) - x[v];
                const double dn = static_cast<double>(pn.data[v]) - x[v];
                sg += dg * dg;
                sn += dn * dn;
                ++row.voxels;
            }
            if (row.voxels > 0) {
                row.mse_gauss = sg / static_cast<double>(row.voxels);
                row.mse_ncchi = sn / static_cast<double>(row.voxels);
            }
            row.diff = row.mse_ncchi - row.mse_gauss;
            report.rows.push_back(row);
        }
    }
    std::stable_sort(report.rows.begin(), report.rows.end(), [&](const LoeoRow& a, const LoeoRow& b) {
        return a.held_out_echo < b.held_out_echo;
    });

    for (int r = 0; r < nruns; ++r) {
        LoeoSummary s;
        s.contrast = label[static_cast<std::size_t>(r)];
        for (const auto& row : report.rows) {
            if (row.contrast != s.contrast) continue;
            s.mse_gauss += row.mse_gauss;
            s.mse_ncchi += row.mse_ncchi;
            s.diff += row.diff;
            ++s.folds;
        }
        if (s.folds > 0) {
            s.mse_gauss /= s.folds;
            s.mse_ncchi /= s.folds;
            s.diff /= s.folds;
        }
        report.summary.push_back(s);
    }
    return report;
}

}  // namespace ncchi
