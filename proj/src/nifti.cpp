#include "cvox/nifti.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>

namespace cvox::nifti {

namespace {

struct Nifti1Header {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must pack to 348 bytes");

constexpr int16_t DT_UINT8 = 2;
constexpr int16_t DT_INT16 = 4;
constexpr int16_t DT_FLOAT32 = 16;
constexpr int16_t DT_FLOAT64 = 64;

// gzread/gzwrite handle plain files transparently on read; on write the
// mode string decides ("wb" compresses, "wbT" stores raw)
struct GzFile {
    gzFile f = nullptr;
    GzFile(const std::string& path, const char* mode) {
        f = gzopen(path.c_str(), mode);
        if (!f) throw Error::io("cannot open '" + path + "'");
        gzbuffer(f, 1 << 17);
    }
    ~GzFile() {
        if (f) gzclose(f);
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;

    void read_exact(void* dst, size_t n, const std::string& path) {
        int got = gzread(f, dst, static_cast<unsigned>(n));
        if (got < 0 || static_cast<size_t>(got) != n)
            throw Error::data("truncated or corrupt NIfTI file '" + path + "'");
    }
    void write_exact(const void* src, size_t n, const std::string& path) {
        int put = gzwrite(f, src, static_cast<unsigned>(n));
        if (put <= 0 || static_cast<size_t>(put) != n)
            throw Error::io("short write to '" + path + "'");
    }
};

bool wants_gzip(const std::string& path) { return path.size() > 3 && path.ends_with(".gz"); }

struct Parsed {
    Nifti1Header hdr{};
    std::vector<float> values;  // converted to float, NIfTI storage order
    coords::Affine affine;
    std::array<int64_t, 3> shape{};
    int64_t channels = 1;
};

Parsed read_file(const std::string& path) {
    if (!std::filesystem::exists(path)) throw Error::io("no such file '" + path + "'");
    GzFile gz(path, "rb");
    Parsed p;
    gz.read_exact(&p.hdr, sizeof(Nifti1Header), path);
    const auto& h = p.hdr;
    if (h.sizeof_hdr != 348)
        throw Error::data("malformed NIfTI header in '" + path +
                          "': sizeof_hdr=" + std::to_string(h.sizeof_hdr) +
                          " (byte-swapped files are not supported)");
    if (std::strncmp(h.magic, "n+1", 3) != 0)
        throw Error::data("unsupported NIfTI magic in '" + path + "' (need single-file n+1)");
    if (h.dim[0] < 3 || h.dim[0] > 5)
        throw Error::data("expected 3D (or 5D channel) NIfTI, got dim[0]=" +
                          std::to_string(h.dim[0]) + " in '" + path + "'");
    for (int a = 1; a <= h.dim[0]; ++a)
        if (h.dim[a] < 1) throw Error::data("non-positive dimension in NIfTI header '" + path + "'");
    if (h.dim[0] >= 4 && h.dim[4] != 1)
        throw Error::data("time axes are not supported ('" + path + "')");
    p.shape = {h.dim[1], h.dim[2], h.dim[3]};
    p.channels = h.dim[0] == 5 ? h.dim[5] : 1;

    if (h.sform_code <= 0)
        throw Error::data("NIfTI file '" + path + "' has no sform affine");
    coords::Mat3 m;
    coords::Vec3 o;
    const float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) m(r, c) = rows[r][c];
        o[r] = rows[r][3];
    }
    p.affine = coords::Affine(m, o);
    p.affine.validate();  // singular / non-finite -> invalid-affine error

    const int64_t n = p.shape[0] * p.shape[1] * p.shape[2] * p.channels;
    p.values.resize(n);
    // skip the 4-byte extension flag plus any extensions up to vox_offset
    const auto off = static_cast<int64_t>(h.vox_offset);
    if (off < 348) throw Error::data("bad vox_offset in '" + path + "'");
    std::vector<char> skip(off - 348);
    if (!skip.empty()) gz.read_exact(skip.data(), skip.size(), path);

    auto read_as = [&](auto tag) {
        using S = decltype(tag);
        std::vector<S> raw(n);
        gz.read_exact(raw.data(), n * sizeof(S), path);
        for (int64_t i = 0; i < n; ++i) p.values[i] = static_cast<float>(raw[i]);
    };
    switch (h.datatype) {
        case DT_FLOAT32: read_as(float{}); break;
        case DT_FLOAT64: read_as(double{}); break;
        case DT_UINT8: read_as(uint8_t{}); break;
        case DT_INT16: read_as(int16_t{}); break;
        default:
            throw Error::data("unsupported NIfTI datatype " + std::to_string(h.datatype) +
                              " in '" + path + "'");
    }
    if (h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f))
        for (auto& v : p.values) v = v * h.scl_slope + h.scl_inter;
    for (float v : p.values)
        if (!std::isfinite(v)) throw Error::data("non-finite values in '" + path + "'");
    return p;
}

Nifti1Header make_header(const coords::CoordGrid& grid, int16_t datatype, int16_t bitpix,
                         int64_t channels, const char* descrip) {
    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = channels > 1 ? 5 : 3;
    h.dim[1] = static_cast<int16_t>(grid.shape[0]);
    h.dim[2] = static_cast<int16_t>(grid.shape[1]);
    h.dim[3] = static_cast<int16_t>(grid.shape[2]);
    h.dim[4] = 1;
    h.dim[5] = channels > 1 ? static_cast<int16_t>(channels) : 1;
    h.dim[6] = h.dim[7] = 1;
    h.datatype = datatype;
    h.bitpix = bitpix;
    h.pixdim[0] = 1.0f;
    coords::Vec3 sp = grid.spacing();
    for (int a = 0; a < 3; ++a) h.pixdim[1 + a] = static_cast<float>(sp[a]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2;  // millimetres
    std::snprintf(h.descrip, sizeof(h.descrip), "%s", descrip);
    h.sform_code = 1;
    h.qform_code = 0;
    float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) rows[r][c] = static_cast<float>(grid.affine.matrix(r, c));
        rows[r][3] = static_cast<float>(grid.affine.origin[r]);
    }
    std::memcpy(h.magic, "n+1", 4);
    return h;
}

void write_file(const std::string& path, const Nifti1Header& hdr, const void* payload,
                size_t bytes) {
    GzFile gz(path, wants_gzip(path) ? "wb6" : "wbT");
    gz.write_exact(&hdr, sizeof(hdr), path);
    const char ext_flag[4] = {0, 0, 0, 0};
    gz.write_exact(ext_flag, 4, path);
    gz.write_exact(payload, bytes, path);
}

coords::CoordGrid grid_from(const Parsed& p) {
    coords::CoordGrid probe;
    probe.affine = p.affine;
    probe.shape = p.shape;
    coords::Vec3 lo, hi;
    probe.bounds(lo, hi);
    for (int a = 0; a < 3; ++a)
        if (hi[a] - lo[a] < 1e-9) {  // degenerate axis: give the space some width
            lo[a] -= 0.5;
            hi[a] += 0.5;
        }
    return coords::make_grid(p.affine, p.shape, coords::CoordSpace(lo, hi).expanded(0.1));
}

// NIfTI stores with the first index fastest; our tensors store the last
// index fastest. These convert between the two layouts.
template <class Src>
void from_nifti_order(const Src* src, float* dst, const std::array<int64_t, 3>& s, int64_t C) {
    for (int64_t c = 0; c < C; ++c)
        for (int64_t k = 0; k < s[2]; ++k)
            for (int64_t j = 0; j < s[1]; ++j)
                for (int64_t i = 0; i < s[0]; ++i)
                    dst[((c * s[0] + i) * s[1] + j) * s[2] + k] = static_cast<float>(*src++);
}

template <class Dst>
std::vector<Dst> to_nifti_order(const float* src, const std::array<int64_t, 3>& s, int64_t C) {
    std::vector<Dst> out(C * s[0] * s[1] * s[2]);
    Dst* dst = out.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t k = 0; k < s[2]; ++k)
            for (int64_t j = 0; j < s[1]; ++j)
                for (int64_t i = 0; i < s[0]; ++i)
                    *dst++ = static_cast<Dst>(src[((c * s[0] + i) * s[1] + j) * s[2] + k]);
    return out;
}

}  // namespace

void ChannelVolume::validate() const {
    if (data.rank() != 4) throw Error::contract("channel volume data must be rank 4 (C,D,H,W)");
    for (int a = 0; a < 3; ++a)
        if (data.dim(a + 1) != grid.shape[a])
            throw Error::contract("channel volume shape does not match grid");
}

Volume load_volume(const std::string& path) {
    Parsed p = read_file(path);
    if (p.channels != 1)
        throw Error::data("expected single-channel volume in '" + path + "', got " +
                          std::to_string(p.channels) + " channels");
    Volume v;
    v.grid = grid_from(p);
    v.data = ad::Tensor<float>({p.shape[0], p.shape[1], p.shape[2]});
    from_nifti_order(p.values.data(), v.data.data(), p.shape, 1);
    std::string d(p.hdr.descrip, strnlen(p.hdr.descrip, sizeof(p.hdr.descrip)));
    if (d.rfind("cvox:", 0) == 0) {
        v.modality = modality_from_name(d.substr(5));
    } else {
        v.modality = Modality::mri;
    }
    v.validate();
    return v;
}

void save_volume(const Volume& volume, const std::string& path) {
    volume.validate();
    std::string descrip = std::string("cvox:") + modality_name(volume.modality);
    Nifti1Header h = make_header(volume.grid, DT_FLOAT32, 32, 1, descrip.c_str());
    auto payload = to_nifti_order<float>(volume.data.data(), volume.grid.shape, 1);
    write_file(path, h, payload.data(), payload.size() * sizeof(float));
}

TissueMask load_mask(const std::string& path) {
    Parsed p = read_file(path);
    if (p.channels != 1) throw Error::data("expected single-channel mask in '" + path + "'");
    TissueMask m;
    m.grid = grid_from(p);
    m.data.resize(p.values.size());
    // values arrive in NIfTI order; route through a float staging buffer
    std::vector<float> staged(p.values.size());
    from_nifti_order(p.values.data(), staged.data(), p.shape, 1);
    for (size_t i = 0; i < staged.size(); ++i) m.data[i] = staged[i] != 0.0f;
    m.validate();
    return m;
}

void save_mask(const TissueMask& mask, const std::string& path) {
    mask.validate();
    Nifti1Header h = make_header(mask.grid, DT_UINT8, 8, 1, "cvox:mask");
    std::vector<float> staged(mask.data.size());
    for (size_t i = 0; i < mask.data.size(); ++i) staged[i] = mask.data[i] ? 1.0f : 0.0f;
    auto payload = to_nifti_order<uint8_t>(staged.data(), mask.grid.shape, 1);
    write_file(path, h, payload.data(), payload.size());
}

ChannelVolume load_channels(const std::string& path) {
    Parsed p = read_file(path);
    ChannelVolume cv;
    cv.grid = grid_from(p);
    cv.data = ad::Tensor<float>({p.channels, p.shape[0], p.shape[1], p.shape[2]});
    from_nifti_order(p.values.data(), cv.data.data(), p.shape, p.channels);
    cv.validate();
    return cv;
}

void save_channels(const ChannelVolume& cv, const std::string& path) {
    cv.validate();
    Nifti1Header h = make_header(cv.grid, DT_FLOAT32, 32, cv.channels(), "cvox:channels");
    auto payload = to_nifti_order<float>(cv.data.data(), cv.grid.shape, cv.channels());
    write_file(path, h, payload.data(), payload.size() * sizeof(float));
}

}  // namespace cvox::nifti
