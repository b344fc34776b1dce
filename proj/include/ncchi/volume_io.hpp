#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "ncchi/forward_model.hpp"

namespace ncchi {

/// Base for recoverable input-data problems (bad files, bad metadata).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class VolumeError : public DataError {
public:
    enum class Kind { Io, Truncated, BadHeader, BadMagic, UnsupportedVariant, UnsupportedDatatype, UnsupportedDims };
    VolumeError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

class SidecarError : public DataError {
public:
    enum class Kind { Io, Parse, MissingKey, NonNumeric, InvalidValue };
    SidecarError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// Every field of the 348-byte NIfTI-1 header, in host byte order.
struct Nifti1Header {
    std::int32_t sizeof_hdr = 348;
    std::array<char, 10> data_type{};
    std::array<char, 18> db_name{};
    std::int32_t extents = 0;
    std::int16_t session_error = 0;
    char regular = 'r';
    char dim_info = 0;
    std::array<std::int16_t, 8> dim{};
    float intent_p1 = 0, intent_p2 = 0, intent_p3 = 0;
    std::int16_t intent_code = 0;
    std::int16_t datatype = 16;
    std::int16_t bitpix = 32;
    std::int16_t slice_start = 0;
    std::array<float, 8> pixdim{};
    float vox_offset = 352;
    float scl_slope = 1, scl_inter = 0;
    std::int16_t slice_end = 0;
    char slice_code = 0;
    char xyzt_units = 2;  // millimetres
    float cal_max = 0, cal_min = 0, slice_duration = 0, toffset = 0;
    std::int32_t glmax = 0, glmin = 0;
    std::array<char, 80> descrip{};
    std::array<char, 24> aux_file{};
    std::int16_t qform_code = 0, sform_code = 0;
    float quatern_b = 0, quatern_c = 0, quatern_d = 0;
    float qoffset_x = 0, qoffset_y = 0, qoffset_z = 0;
    std::array<float, 4> srow_x{}, srow_y{}, srow_z{};
    std::array<char, 16> intent_name{};
    std::array<char, 4> magic{'n', '+', '1', '\0'};
};

/// A single 3-D scalar volume, float32 canonical.
struct EchoVolume {
    std::array<int, 3> dims{1, 1, 1};
    std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
    Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
    std::vector<float> data;
    /// Header of the file this volume was read from; its unmanaged fields
    /// are written back unchanged.
    std::optional<Nifti1Header> source_header;
    /// Raw extension bytes following the header (native-endian sources only).
    std::vector<char> extension;

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(dims[2]);
    }
    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
    }
    bool same_grid(const EchoVolume& other) const { return dims == other.dims; }
};

/// Zero-filled volume with a diagonal voxel-to-world affine.
EchoVolume make_volume(std::array<int, 3> dims, std::array<double, 3> voxel_size = {1.0, 1.0, 1.0});

/// Reads a single-file NIfTI-1 volume (.nii or gzip-compressed .nii.gz).
/// Supported datatypes are uint8, int16, int32, float32 and float64;
/// scl_slope / scl_inter are applied.
EchoVolume read_volume(const std::filesystem::path& path);

/// Writes float32 NIfTI-1; compressed when the path ends in ".gz".
void write_volume(const EchoVolume& vol, const std::filesystem::path& path);

/// Parses a header from 348 bytes, detecting byte order from sizeof_hdr.
/// Sets `swapped` when the bytes were big-endian relative to the host.
Nifti1Header parse_nifti_header(const char* bytes, std::size_t size, bool& swapped);
std::array<char, 348> serialize_nifti_header(const Nifti1Header& h);

/// Acquisition metadata sidecar: {tr_s, te_s, flip_deg, mt_pulse, tr2_s}.
AcquisitionSettings read_sidecar(const std::filesystem::path& path);
AcquisitionSettings sidecar_from_json(const nlohmann::json& j);
nlohmann::json sidecar_to_json(const AcquisitionSettings& s);
void write_sidecar(const AcquisitionSettings& s, const std::filesystem::path& path);

/// X.nii / X.nii.gz -> X.json
std::filesystem::path sidecar_path_for(const std::filesystem::path& volume_path);

/// Writes `text` to `path` through a temporary file and rename.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace ncchi
