#include "ncchi/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <zlib.h>

namespace ncchi {
namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::int32_t kSwappedHeaderSize = 1543569408;  // 348 read with the wrong byte order
constexpr std::int32_t kNifti2HeaderSize = 540;

enum NiftiType : std::int16_t {
    kUint8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
};

template <typename T>
T byteswap(T v) {
    std::array<char, sizeof(T)> raw;
    std::memcpy(raw.data(), &v, sizeof(T));
    std::reverse(raw.begin(), raw.end());
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
}

// Reads fields from a byte buffer, swapping when the file's order differs from the host.
class FieldReader {
public:
    FieldReader(const char* data, bool swap) : data_(data), swap_(swap) {}

    template <typename T>
    T get(std::size_t offset) const {
        T v;
        std::memcpy(&v, data_ + offset, sizeof(T));
        return swap_ ? byteswap(v) : v;
    }
    template <typename T, std::size_t N>
    void get_array(std::size_t offset, std::array<T, N>& out) const {
        for (std::size_t i = 0; i < N; ++i) out[i] = get<T>(offset + i * sizeof(T));
    }
    template <std::size_t N>
    void get_chars(std::size_t offset, std::array<char, N>& out) const {
        std::memcpy(out.data(), data_ + offset, N);
    }

private:
    const char* data_;
    bool swap_;
};

// Always emits little-endian.
class FieldWriter {
public:
    explicit FieldWriter(char* data) : data_(data) {}

    template <typename T>
    void put(std::size_t offset, T v) {
        if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
        std::memcpy(data_ + offset, &v, sizeof(T));
    }
    template <typename T, std::size_t N>
    void put_array(std::size_t offset, const std::array<T, N>& in) {
        for (std::size_t i = 0; i < N; ++i) put<T>(offset + i * sizeof(T), in[i]);
    }
    template <std::size_t N>
    void put_chars(std::size_t offset, const std::array<char, N>& in) {
        std::memcpy(data_ + offset, in.data(), N);
    }

private:
    char* data_;
};

std::vector<char> read_all(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw VolumeError(VolumeError::Kind::Io, "cannot open '" + path.string() + "': no such file");
    }
    // gzread passes uncompressed files through unchanged.
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw VolumeError(VolumeError::Kind::Io, "cannot open '" + path.string() + "'");
    std::vector<char> out;
    std::array<char, 1 << 16> buf;
    for (;;) {
        const int got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
        if (got < 0) {
            gzclose(f);
            throw VolumeError(VolumeError::Kind::Truncated, "corrupt or truncated stream in '" + path.string() + "'");
        }
        if (got == 0) break;
        out.insert(out.end(), buf.data(), buf.data() + got);
    }
    gzclose(f);
    return out;
}

bool ends_with_gz(const std::filesystem::path& path) {
    const auto s = path.string();
    return s.size() >= 3 && s.compare(s.size() - 3, 3, ".gz") == 0;
}

void write_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    if (ends_with_gz(path)) {
        gzFile f = gzopen(tmp.string().c_str(), "wb6");
        if (!f) throw VolumeError(VolumeError::Kind::Io, "cannot write '" + path.string() + "'");
        std::size_t done = 0;
        while (done < bytes.size()) {
            const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
            if (gzwrite(f, bytes.data() + done, chunk) != static_cast<int>(chunk)) {
                gzclose(f);
                throw VolumeError(VolumeError::Kind::Io, "write failed for '" + path.string() + "'");
            }
            done += chunk;
        }
        if (gzclose(f) != Z_OK) throw VolumeError(VolumeError::Kind::Io, "write failed for '" + path.string() + "'");
    } else {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw VolumeError(VolumeError::Kind::Io, "cannot write '" + path.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw VolumeError(VolumeError::Kind::Io, "write failed for '" + path.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw VolumeError(VolumeError::Kind::Io, "cannot write '" + path.string() + "'");
    }
}

Eigen::Matrix4d affine_from_header(const Nifti1Header& h) {
    Eigen::Matrix4d a = Eigen::Matrix4d::Identity();
    if (h.sform_code > 0) {
        for (int c = 0; c < 4; ++c) {
            a(0, c) = h.srow_x[static_cast<std::size_t>(c)];
            a(1, c) = h.srow_y[static_cast<std::size_t>(c)];
            a(2, c) = h.srow_z[static_cast<std::size_t>(c)];
        }
        return a;
    }
    const double dx = h.pixdim[1], dy = h.pixdim[2], dz = h.pixdim[3];
    if (h.qform_code > 0) {
        double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
        double w2 = 1.0 - (b * b + c * c + d * d);
        double qa = 0.0;
        if (w2 < 1e-7) {
            const double norm = std::sqrt(b * b + c * c + d * d);
            b /= norm;
            c /= norm;
            d /= norm;
        } else {
            qa = std::sqrt(w2);
        }
        const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
        Eigen::Matrix3d r;
        r << qa * qa + b * b - c * c - d * d, 2 * (b * c - qa * d), 2 * (b * d + qa * c),
            2 * (b * c + qa * d), qa * qa + c * c - b * b - d * d, 2 * (c * d - qa * b),
            2 * (b * d - qa * c), 2 * (c * d + qa * b), qa * qa + d * d - c * c - b * b;
        a.block<3, 1>(0, 0) = r.col(0) * dx;
        a.block<3, 1>(0, 1) = r.col(1) * dy;
        a.block<3, 1>(0, 2) = r.col(2) * dz * qfac;
        a(0, 3) = h.qoffset_x;
        a(1, 3) = h.qoffset_y;
        a(2, 3) = h.qoffset_z;
        return a;
    }
    a(0, 0) = dx > 0 ? dx : 1.0;
    a(1, 1) = dy > 0 ? dy : 1.0;
    a(2, 2) = dz > 0 ? dz : 1.0;
    return a;
}

template <typename T>
void convert(const char* src, std::size_t count, bool swap, std::vector<float>& out) {
    out.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        T v;
        std::memcpy(&v, src + i * sizeof(T), sizeof(T));
        if (swap) v = byteswap(v);
        out[i] = static_cast<float>(v);
    }
}

}  // namespace

Nifti1Header parse_nifti_header(const char* bytes, std::size_t size, bool& swapped) {
    if (size < kHeaderSize) throw VolumeError(VolumeError::Kind::Truncated, "file shorter than a NIfTI-1 header");
    std::int32_t sizeof_hdr;
    std::memcpy(&sizeof_hdr, bytes, 4);
    if (sizeof_hdr == 348) {
        swapped = false;
    } else if (sizeof_hdr == kSwappedHeaderSize) {
        swapped = true;
    } else if (sizeof_hdr == kNifti2HeaderSize || byteswap(sizeof_hdr) == kNifti2HeaderSize) {
        throw VolumeError(VolumeError::Kind::UnsupportedVariant, "NIfTI-2 headers are not supported");
    } else {
        throw VolumeError(VolumeError::Kind::BadHeader, "sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348");
    }
    const FieldReader r(bytes, swapped);
    Nifti1Header h;
    h.sizeof_hdr = 348;
    r.get_chars(4, h.data_type);
    r.get_chars(14, h.db_name);
    h.extents = r.get<std::int32_t>(32);
    h.session_error = r.get<std::int16_t>(36);
    h.regular = bytes[38];
    h.dim_info = bytes[39];
    r.get_array(40, h.dim);
    h.intent_p1 = r.get<float>(56);
    h.intent_p2 = r.get<float>(60);
    h.intent_p3 = r.get<float>(64);
    h.intent_code = r.get<std::int16_t>(68);
    h.datatype = r.get<std::int16_t>(70);
    h.bitpix = r.get<std::int16_t>(72);
    h.slice_start = r.get<std::int16_t>(74);
    r.get_array(76, h.pixdim);
    h.vox_offset = r.get<float>(108);
    h.scl_slope = r.get<float>(112);
    h.scl_inter = r.get<float>(116);
    h.slice_end = r.get<std::int16_t>(120);
    h.slice_code = bytes[122];
    h.xyzt_units = bytes[123];
    h.cal_max = r.get<float>(124);
    h.cal_min = r.get<float>(128);
    h.slice_duration = r.get<float>(132);
    h.toffset = r.get<float>(136);
    h.glmax = r.get<std::int32_t>(140);
    h.glmin = r.get<std::int32_t>(144);
    r.get_chars(148, h.descrip);
    r.get_chars(228, h.aux_file);
    h.qform_code = r.get<std::int16_t>(252);
    h.sform_code = r.get<std::int16_t>(254);
    h.quatern_b = r.get<float>(256);
    h.quatern_c = r.get<float>(260);
    h.quatern_d = r.get<float>(264);
    h.qoffset_x = r.get<float>(268);
    h.qoffset_y = r.get<float>(272);
    h.qoffset_z = r.get<float>(276);
    r.get_array(280, h.srow_x);
    r.get_array(296, h.srow_y);
    r.get_array(312, h.srow_z);
    r.get_chars(328, h.intent_name);
    r.get_chars(344, h.magic);
    return h;
}

std::array<char, 348> serialize_nifti_header(const Nifti1Header& h) {
    std::array<char, 348> out{};
    FieldWriter w(out.data());
    w.put<std::int32_t>(0, 348);
    w.put_chars(4, h.data_type);
    w.put_chars(14, h.db_name);
    w.put(32, h.extents);
    w.put(36, h.session_error);
    out[38] = h.regular;
    out[39] = h.dim_info;
    w.put_array(40, h.dim);
    w.put(56, h.intent_p1);
    w.put(60, h.intent_p2);
    w.put(64, h.intent_p3);
    w.put(68, h.intent_code);
    w.put(70, h.datatype);
    w.put(72, h.bitpix);
    w.put(74, h.slice_start);
    w.put_array(76, h.pixdim);
    w.put(108, h.vox_offset);
    w.put(112, h.scl_slope);
    w.put(116, h.scl_inter);
    w.put(120, h.slice_end);
    out[122] = h.slice_code;
    out[123] = h.xyzt_units;
    w.put(124, h.cal_max);
    w.put(128, h.cal_min);
    w.put(132, h.slice_duration);
    w.put(136, h.toffset);
    w.put(140, h.glmax);
    w.put(144, h.glmin);
    w.put_chars(148, h.descrip);
    w.put_chars(228, h.aux_file);
    w.put(252, h.qform_code);
    w.put(254, h.sform_code);
    w.put(256, h.quatern_b);
    w.put(260, h.quatern_c);
    w.put(264, h.quatern_d);
    w.put(268, h.qoffset_x);
    w.put(272, h.qoffset_y);
    w.put(276, h.qoffset_z);
    w.put_array(280, h.srow_x);
    w.put_array(296, h.srow_y);
    w.put_array(312, h.srow_z);
    w.put_chars(328, h.intent_name);
    w.put_chars(344, h.magic);
    return out;
}

EchoVolume make_volume(std::array<int, 3> dims, std::array<double, 3> voxel_size) {
    EchoVolume v;
    v.dims = dims;
    v.voxel_size = voxel_size;
    v.affine = Eigen::Matrix4d::Identity();
    for (int i = 0; i < 3; ++i) v.affine(i, i) = voxel_size[static_cast<std::size_t>(i)];
    v.data.assign(v.voxel_count(), 0.0f);
    return v;
}

EchoVolume read_volume(const std::filesystem::path& path) {
    const auto bytes = read_all(path);
    bool swapped = false;
    const auto where = " in '" + path.string() + "'";
    Nifti1Header h;
    try {
        h = parse_nifti_header(bytes.data(), bytes.size(), swapped);
    } catch (const VolumeError& e) {
        throw VolumeError(e.kind(), e.what() + where);
    }
    if (std::memcmp(h.magic.data(), "ni1\0", 4) == 0) {
        throw VolumeError(VolumeError::Kind::UnsupportedVariant, "paired .hdr/.img NIfTI is not supported" + where);
    }
    if (std::memcmp(h.magic.data(), "n+1\0", 4) != 0) {
        throw VolumeError(VolumeError::Kind::BadMagic, "bad NIfTI-1 magic" + where);
    }
    const int ndim = h.dim[0];
    if (ndim < 1 || ndim > 7) throw VolumeError(VolumeError::Kind::BadHeader, "invalid dim[0]" + where);
    for (int d = 4; d <= ndim; ++d) {
        if (h.dim[static_cast<std::size_t>(d)] > 1) {
            throw VolumeError(VolumeError::Kind::UnsupportedDims, "only 3-D volumes are supported" + where);
        }
    }

    EchoVolume v;
    for (int d = 0; d < 3; ++d) {
        const int n = d < ndim ? h.dim[static_cast<std::size_t>(d + 1)] : 1;
        if (n < 1) throw VolumeError(VolumeError::Kind::BadHeader, "non-positive dimension" + where);
        v.dims[static_cast<std::size_t>(d)] = n;
        const double px = h.pixdim[static_cast<std::size_t>(d + 1)];
        v.voxel_size[static_cast<std::size_t>(d)] = px > 0 ? px : 1.0;
    }
    v.affine = affine_from_header(h);

    std::size_t elem = 0;
    switch (h.datatype) {
        case kUint8: elem = 1; break;
        case kInt16: elem = 2; break;
        case kInt32: elem = 4; break;
        case kFloat32: elem = 4; break;
        case kFloat64: elem = 8; break;
        default:
            throw VolumeError(VolumeError::Kind::UnsupportedDatatype,
                              "unsupported NIfTI datatype " + std::to_string(h.datatype) + where);
    }
    const auto offset = static_cast<std::size_t>(h.vox_offset);
    if (h.vox_offset < 0 || offset < kHeaderSize) {
        throw VolumeError(VolumeError::Kind::BadHeader, "invalid vox_offset" + where);
    }
    const std::size_t count = v.voxel_count();
    if (bytes.size() < offset || bytes.size() - offset < count * elem) {
        throw VolumeError(VolumeError::Kind::Truncated, "voxel data truncated" + where);
    }
    const char* src = bytes.data() + offset;
    switch (h.datatype) {
        case kUint8: convert<std::uint8_t>(src, count, false, v.data); break;
        case kInt16: convert<std::int16_t>(src, count, swapped, v.data); break;
        case kInt32: convert<std::int32_t>(src, count, swapped, v.data); break;
        case kFloat32: convert<float>(src, count, swapped, v.data); break;
        case kFloat64: convert<double>(src, count, swapped, v.data); break;
    }
    const float slope = h.scl_slope;
    const float inter = h.scl_inter;
    if (std::isfinite(slope) && slope != 0.0f && !(slope == 1.0f && inter == 0.0f)) {
        for (auto& x : v.data) x = x * slope + inter;
    }
    if (!swapped && offset > kHeaderSize + 4 && bytes.size() >= offset && bytes[kHeaderSize] != 0) {
        v.extension.assign(bytes.begin() + kHeaderSize + 4, bytes.begin() + static_cast<std::ptrdiff_t>(offset));
    }
    v.source_header = h;
    return v;
}

void write_volume(const EchoVolume& vol, const std::filesystem::path& path) {
    if (vol.data.size() != vol.voxel_count()) {
        throw std::invalid_argument("write_volume: data length does not match dimensions");
    }
    Nifti1Header h = vol.source_header.value_or(Nifti1Header{});
    h.sizeof_hdr = 348;
    h.dim = {3, static_cast<std::int16_t>(vol.dims[0]), static_cast<std::int16_t>(vol.dims[1]),
             static_cast<std::int16_t>(vol.dims[2]), 1, 1, 1, 1};
    h.datatype = kFloat32;
    h.bitpix = 32;
    if (h.pixdim[0] == 0.0f) h.pixdim[0] = 1.0f;
    for (int d = 0; d < 3; ++d) h.pixdim[static_cast<std::size_t>(d + 1)] = static_cast<float>(vol.voxel_size[static_cast<std::size_t>(d)]);
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    if (h.sform_code <= 0) h.sform_code = 2;
    for (int c = 0; c < 4; ++c) {
        h.srow_x[static_cast<std::size_t>(c)] = static_cast<float>(vol.affine(0, c));
        h.srow_y[static_cast<std::size_t>(c)] = static_cast<float>(vol.affine(1, c));
        h.srow_z[static_cast<std::size_t>(c)] = static_cast<float>(vol.affine(2, c));
    }
    h.magic = {'n', '+', '1', '\0'};
    const std::size_t ext_size = vol.extension.size();
    h.vox_offset = static_cast<float>(kHeaderSize + 4 + ext_size);

    const auto header = serialize_nifti_header(h);
    std::vector<char> bytes(kHeaderSize + 4 + ext_size + vol.data.size() * 4, 0);
    std::memcpy(bytes.data(), header.data(), kHeaderSize);
    if (ext_size > 0) {
        bytes[kHeaderSize] = 1;
        std::memcpy(bytes.data() + kHeaderSize + 4, vol.extension.data(), ext_size);
    }
    FieldWriter data_writer(bytes.data() + kHeaderSize + 4 + ext_size);
    for (std::size_t i = 0; i < vol.data.size(); ++i) data_writer.put<float>(i * 4, vol.data[i]);
    write_bytes(path, bytes);
}

AcquisitionSettings sidecar_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw SidecarError(SidecarError::Kind::Parse, "sidecar must be a JSON object");
    auto number = [&](const char* key, bool required, double fallback) {
        if (!j.contains(key)) {
            if (required) throw SidecarError(SidecarError::Kind::MissingKey, std::string("sidecar is missing '") + key + "'");
            return fallback;
        }
        const auto& v = j.at(key);
        if (!v.is_number()) throw SidecarError(SidecarError::Kind::NonNumeric, std::string("sidecar key '") + key + "' is not numeric");
        return v.get<double>();
    };
    AcquisitionSettings s;
    s.tr = number("tr_s", true, 0.0);
    s.te = number("te_s", true, 0.0);
    const double flip_deg = number("flip_deg", true, 0.0);
    const double mt = number("mt_pulse", true, 0.0);
    s.tr2 = number("tr2_s", false, 0.0);
    if (mt != 0.0 && mt != 1.0) throw SidecarError(SidecarError::Kind::InvalidValue, "sidecar 'mt_pulse' must be 0 or 1");
    s.mt = mt == 1.0;
    s.flip = flip_deg * std::numbers::pi / 180.0;
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw SidecarError(SidecarError::Kind::InvalidValue, std::string("sidecar: ") + e.what());
    }
    return s;
}

AcquisitionSettings read_sidecar(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw SidecarError(SidecarError::Kind::Io, "cannot open sidecar '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SidecarError(SidecarError::Kind::Parse, "invalid JSON in '" + path.string() + "': " + e.what());
    }
    try {
        return sidecar_from_json(j);
    } catch (const SidecarError& e) {
        throw SidecarError(e.kind(), std::string(e.what()) + " ('" + path.string() + "')");
    }
}

nlohmann::json sidecar_to_json(const AcquisitionSettings& s) {
    return {{"tr_s", s.tr},
            {"te_s", s.te},
            {"flip_deg", s.flip * 180.0 / std::numbers::pi},
            {"mt_pulse", s.mt ? 1 : 0},
            {"tr2_s", s.tr2}};
}

void write_sidecar(const AcquisitionSettings& s, const std::filesystem::path& path) {
    write_text_file(path, sidecar_to_json(s).dump(2) + "\n");
}

std::filesystem::path sidecar_path_for(const std::filesystem::path& volume_path) {
    auto p = volume_path;
    if (p.extension() == ".gz") p.replace_extension();
    p.replace_extension(".json");
    return p;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + path.string() + "'");
        out << text;
        if (!out) throw DataError("write failed for '" + path.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot write '" + path.string() + "'");
}

}  // namespace ncchi
