#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "prinr/errors.hpp"
#include "prinr/fft.hpp"
#include "prinr/io_util.hpp"
#include "prinr/rng.hpp"

namespace prinr {

// 3D complex volume, C order with z the slowest axis. Values are stored as
// complex64 to match the on-disk container exactly, which keeps the
// save/load roundtrip bit-exact for every in-memory volume. Math on slices
// is done in double (see CSlice).
struct ComplexVolume {
    std::array<int, 3> shape{0, 0, 0};             // (Nz, Ny, Nx)
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // (dx, dy, dz) mm
    std::map<std::string, std::string> meta;
    std::vector<std::complex<float>> data;  // size Nz*Ny*Nx

    int nz() const { return shape[0]; }
    int ny() const { return shape[1]; }
    int nx() const { return shape[2]; }
    std::size_t size() const {
        return static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
    }
    std::size_t index(int z, int y, int x) const {
        return (static_cast<std::size_t>(z) * shape[1] + y) * shape[2] + x;
    }
    std::complex<float>& at(int z, int y, int x) { return data[index(z, y, x)]; }
    const std::complex<float>& at(int z, int y, int x) const { return data[index(z, y, x)]; }

    CSlice slice(int z) const {
        CSlice s(ny(), nx());
        for (int y = 0; y < ny(); ++y)
            for (int x = 0; x < nx(); ++x) s(y, x) = std::complex<double>(at(z, y, x));
        return s;
    }
    void set_slice(int z, const CSlice& s) {
        for (int y = 0; y < ny(); ++y)
            for (int x = 0; x < nx(); ++x)
                at(z, y, x) = std::complex<float>(static_cast<float>(s(y, x).real()),
                                                  static_cast<float>(s(y, x).imag()));
    }
    void set_slice(int z, const RSlice& s) {
        for (int y = 0; y < ny(); ++y)
            for (int x = 0; x < nx(); ++x) at(z, y, x) = {static_cast<float>(s(y, x)), 0.0f};
    }

    void validate() const {
        require(shape[0] >= 1 && shape[1] >= 1 && shape[2] >= 1,
                "ComplexVolume: all shape components must be >= 1");
        require(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0,
                "ComplexVolume: spacing components must be strictly positive");
        require(data.size() == size(), "ComplexVolume: data size does not match shape");
        for (const auto& v : data)
            if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
                throw ValidationError("ComplexVolume: non-finite value");
    }
};

inline ComplexVolume make_volume(int nz, int ny, int nx,
                                 std::array<double, 3> spacing = {1.0, 1.0, 1.0}) {
    ComplexVolume v;
    v.shape = {nz, ny, nx};
    v.spacing = spacing;
    v.data.assign(static_cast<std::size_t>(nz) * ny * nx, {0.0f, 0.0f});
    return v;
}

// ---------------------------------------------------------------------------
// Phantom generation

struct Ellipsoid {
    std::array<double, 3> center{0, 0, 0};  // normalized [-1,1]^3, (x, y, z)
    std::array<double, 3> semi{0.5, 0.5, 0.5};
    double rot_deg = 0.0;  // in-plane rotation about the z axis
    double intensity = 1.0;
};

struct PhantomSpec {
    std::array<int, 3> shape{16, 64, 64};  // (Nz, Ny, Nx)
    std::array<double, 3> spacing{1.0, 1.0, 4.0};
    std::vector<Ellipsoid> ellipsoids;
    double texture_amp = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (shape[0] < 1 || shape[1] < 1 || shape[2] < 1)
            throw ValidationError("PhantomSpec.shape: components must be >= 1");
        if (!(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0))
            throw ValidationError("PhantomSpec.spacing: components must be > 0");
        if (ellipsoids.empty())
            throw ValidationError("PhantomSpec.ellipsoids: at least one ellipsoid required");
        for (const auto& e : ellipsoids) {
            if (!(e.intensity >= 0.0 && e.intensity <= 2.0))
                throw ValidationError("PhantomSpec.ellipsoids: intensity must be in [0, 2]");
            if (!(e.semi[0] > 0 && e.semi[1] > 0 && e.semi[2] > 0))
                throw ValidationError("PhantomSpec.ellipsoids: semi-axes must be > 0");
        }
        if (!(texture_amp >= 0.0))
            throw ValidationError("PhantomSpec.texture_amp: must be >= 0");
    }
};

// Brain-like nested family: head shell, tissue, a dark cavity and two bright
// inclusions whose positions jitter with the seed.
inline PhantomSpec default_phantom_spec(std::array<int, 3> shape = {16, 64, 64},
                                        std::uint64_t seed = 0, double texture_amp = 0.15) {
    Rng rng(derive_seed(seed, 0xBEEF));
    auto j = [&](double s) { return rng.uniform(-s, s); };
    PhantomSpec spec;
    spec.shape = shape;
    spec.spacing = {1.0, 1.0, 4.0};
    spec.seed = seed;
    spec.texture_amp = texture_amp;
    spec.ellipsoids = {
        {{j(0.04), j(0.04), j(0.04)}, {0.82, 0.88, 1.30}, j(8.0), 0.85},
        {{j(0.05), j(0.05), j(0.05)}, {0.62, 0.70, 1.12}, j(10.0), 0.55},
        {{0.02 + j(0.08), -0.18 + j(0.08), j(0.10)}, {0.16, 0.24, 0.55}, j(20.0), 0.25},
        {{-0.32 + j(0.10), 0.24 + j(0.10), 0.10 + j(0.15)}, {0.12, 0.10, 0.35}, j(30.0), 1.20},
        {{0.34 + j(0.10), 0.18 + j(0.10), -0.15 + j(0.15)}, {0.09, 0.13, 0.30}, j(30.0), 1.50},
    };
    return spec;
}

namespace detail {

struct TextureParams {
    // Additive band-limited texture: sum of separable sinusoids. The axial
    // frequencies stay well below the slice Nyquist rate so that the texture
    // remains recoverable from coarsely sampled planes.
    static constexpr int kComponents = 3;
    double ax[kComponents], bx[kComponents], cz[kComponents];
    double phase_xy[kComponents], phase_z[kComponents], amp[kComponents];

    explicit TextureParams(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x7E47));
        for (int k = 0; k < kComponents; ++k) {
            ax[k] = rng.uniform(2.0, 6.0);
            bx[k] = rng.uniform(2.0, 6.0);
            cz[k] = rng.uniform(0.3, 0.9);
            phase_xy[k] = rng.uniform(0.0, 6.2831853);
            phase_z[k] = rng.uniform(0.0, 6.2831853);
            amp[k] = rng.uniform(0.5, 1.0);
        }
        double norm = 0.0;
        for (int k = 0; k < kComponents; ++k) norm += amp[k];
        for (int k = 0; k < kComponents; ++k) amp[k] /= norm;
    }

    double eval(double x, double y, double z) const {
        double t = 0.0;
        for (int k = 0; k < kComponents; ++k)
            t += amp[k] * std::sin(3.14159265358979 * (ax[k] * x + bx[k] * y) + phase_xy[k]) *
                 std::cos(3.14159265358979 * cz[k] * z + phase_z[k]);
        return t;
    }
};

inline double phantom_value(const PhantomSpec& spec, const TextureParams& tex, double x, double y,
                            double z) {
    // Ellipsoids painted in list order; the last one containing the point
    // wins. Texture is added inside the support only, clamped at zero.
    double base = 0.0;
    bool inside = false;
    for (const auto& e : spec.ellipsoids) {
        const double dx = x - e.center[0], dy = y - e.center[1], dz = z - e.center[2];
        const double th = e.rot_deg * 3.14159265358979 / 180.0;
        const double rx = std::cos(th) * dx + std::sin(th) * dy;
        const double ry = -std::sin(th) * dx + std::cos(th) * dy;
        const double q = (rx / e.semi[0]) * (rx / e.semi[0]) + (ry / e.semi[1]) * (ry / e.semi[1]) +
                         (dz / e.semi[2]) * (dz / e.semi[2]);
        if (q <= 1.0) {
            base = e.intensity;
            inside = true;
        }
    }
    if (!inside) return 0.0;
    double v = base;
    if (spec.texture_amp > 0.0) v += spec.texture_amp * tex.eval(x, y, z);
    return v < 0.0 ? 0.0 : v;
}

// Axis grid convention: N samples at linspace(-1, 1, N); a single sample sits
// at 0. Dense z grids at scale s (linspace with s*(N-1)+1 points) therefore
// contain the original planes exactly.
inline double grid_coord(int i, int n) {
    return n == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / (n - 1);
}

}  // namespace detail

// Renders the phantom at an explicit list of normalized z positions; used for
// dense ground truth when auditing through-plane interpolation.
inline ComplexVolume render_phantom_at_z(const PhantomSpec& spec,
                                         const std::vector<double>& z_norm) {
    spec.validate();
    require(!z_norm.empty(), "render_phantom_at_z: empty z list");
    const int ny = spec.shape[1], nx = spec.shape[2];
    ComplexVolume v = make_volume(static_cast<int>(z_norm.size()), ny, nx, spec.spacing);
    detail::TextureParams tex(spec.seed);
    for (std::size_t zi = 0; zi < z_norm.size(); ++zi)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const double val =
                    detail::phantom_value(spec, tex, detail::grid_coord(x, nx),
                                          detail::grid_coord(y, ny), z_norm[zi]);
                v.at(static_cast<int>(zi), y, x) = {static_cast<float>(val), 0.0f};
            }
    v.meta["kind"] = "phantom";
    v.meta["seed"] = std::to_string(spec.seed);
    return v;
}

inline ComplexVolume make_phantom(const PhantomSpec& spec) {
    spec.validate();
    std::vector<double> z(spec.shape[0]);
    for (int i = 0; i < spec.shape[0]; ++i) z[i] = detail::grid_coord(i, spec.shape[0]);
    return render_phantom_at_z(spec, z);
}

// ---------------------------------------------------------------------------
// Volume container I/O
//
// A volume is a directory holding meta.json and data.bin. data.bin is
// interleaved little-endian float32 (re, im) pairs in C z-major order; the
// payload must be exactly 8 * Nz * Ny * Nx bytes.

inline void save_volume(const ComplexVolume& v, const std::filesystem::path& dir) {
    v.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["shape"] = {v.shape[0], v.shape[1], v.shape[2]};
    meta["spacing_mm"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
    meta["dtype"] = "complex64";
    meta["order"] = "C";
    meta["meta"] = v.meta;
    write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");

    static_assert(sizeof(std::complex<float>) == 8);
    write_file_atomic(dir / "data.bin", v.data.data(), v.data.size() * 8);
}

inline ComplexVolume load_volume(const std::filesystem::path& dir) {
    const auto meta_bytes = read_file_bytes(dir / "meta.json");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("meta.json: " + std::string(e.what()), e.byte);
    }
    ComplexVolume v;
    try {
        const auto shape = meta.at("shape");
        v.shape = {shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()};
        const auto sp = meta.at("spacing_mm");
        v.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
        if (meta.at("dtype").get<std::string>() != "complex64")
            throw IntegrityError("volume container: unsupported dtype " +
                                 meta.at("dtype").get<std::string>());
        if (meta.at("order").get<std::string>() != "C")
            throw IntegrityError("volume container: unsupported order");
        if (meta.contains("meta"))
            for (const auto& [k, val] : meta.at("meta").items())
                v.meta[k] = val.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("meta.json: missing or ill-typed field: " + std::string(e.what()));
    }
    if (v.shape[0] < 1 || v.shape[1] < 1 || v.shape[2] < 1)
        throw IntegrityError("volume container: declared shape has component < 1");

    const auto payload = read_file_bytes(dir / "data.bin");
    const std::size_t expected =
        static_cast<std::size_t>(v.shape[0]) * v.shape[1] * v.shape[2] * 8;
    if (payload.size() % 8 != 0)
        throw ParseError("data.bin truncated mid-value", payload.size());
    if (payload.size() != expected)
        throw IntegrityError("data.bin: payload holds " + std::to_string(payload.size() / 8) +
                             " complex values but meta.json declares " +
                             std::to_string(expected / 8));
    v.data.resize(expected / 8);
    std::memcpy(v.data.data(), payload.data(), payload.size());
    v.validate();
    return v;
}

// ---------------------------------------------------------------------------
// Coil combination and normalization

inline ComplexVolume rss_combine(const std::vector<ComplexVolume>& coils) {
    require(!coils.empty(), "rss_combine: coil list is empty");
    const auto& ref = coils.front();
    for (const auto& c : coils) {
        require(c.shape == ref.shape, "rss_combine: coil shapes differ");
        require(c.spacing == ref.spacing, "rss_combine: coil spacings differ");
    }
    ComplexVolume out = make_volume(ref.nz(), ref.ny(), ref.nx(), ref.spacing);
    out.meta = ref.meta;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        double s = 0.0;
        for (const auto& c : coils) {
            const double re = c.data[i].real(), im = c.data[i].imag();
            s += re * re + im * im;
        }
        out.data[i] = {static_cast<float>(std::sqrt(s)), 0.0f};
    }
    return out;
}

struct NormalizationMap {
    double lo = 0.0;
    double hi = 1.0;
    bool degenerate = false;  // constant input: output all zero, hi == lo
};

// Linear map of the magnitude onto [0,1] using (min, max); returns the map so
// the transform can be inverted exactly. The output volume is real-valued.
inline std::pair<ComplexVolume, NormalizationMap> normalize01(const ComplexVolume& v) {
    v.validate();
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& c : v.data) {
        const double m = std::abs(std::complex<double>(c));
        lo = std::min(lo, m);
        hi = std::max(hi, m);
    }
    NormalizationMap map{lo, hi, hi == lo};
    ComplexVolume out = make_volume(v.nz(), v.ny(), v.nx(), v.spacing);
    out.meta = v.meta;
    if (!map.degenerate) {
        const double inv = 1.0 / (hi - lo);
        for (std::size_t i = 0; i < v.data.size(); ++i) {
            const double m = std::abs(std::complex<double>(v.data[i]));
            out.data[i] = {static_cast<float>((m - lo) * inv), 0.0f};
        }
    }
    return {out, map};
}

// Inverse of normalize01 on the magnitude image.
inline ComplexVolume denormalize01(const ComplexVolume& v, const NormalizationMap& map) {
    ComplexVolume out = make_volume(v.nz(), v.ny(), v.nx(), v.spacing);
    out.meta = v.meta;
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        const double m = std::abs(std::complex<double>(v.data[i]));
        out.data[i] = {static_cast<float>(map.degenerate ? map.lo : map.lo + m * (map.hi - map.lo)),
                       0.0f};
    }
    return out;
}

}  // namespace prinr
