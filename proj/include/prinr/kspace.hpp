#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "prinr/errors.hpp"
#include "prinr/fft.hpp"
#include "prinr/io_util.hpp"
#include "prinr/rng.hpp"

namespace prinr {

// ---------------------------------------------------------------------------
// Sampling masks

enum class MaskKind { Gauss1D, Gauss2D, Radial, Spiral, Full };

inline std::string mask_kind_name(MaskKind k) {
    switch (k) {
        case MaskKind::Gauss1D: return "gauss1d";
        case MaskKind::Gauss2D: return "gauss2d";
        case MaskKind::Radial: return "radial";
        case MaskKind::Spiral: return "spiral";
        case MaskKind::Full: return "full";
    }
    return "?";
}

inline MaskKind mask_kind_from_name(const std::string& s) {
    if (s == "gauss1d") return MaskKind::Gauss1D;
    if (s == "gauss2d") return MaskKind::Gauss2D;
    if (s == "radial") return MaskKind::Radial;
    if (s == "spiral") return MaskKind::Spiral;
    if (s == "full") return MaskKind::Full;
    throw ValidationError("unknown mask kind: " + s);
}

struct SamplingMask {
    Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pattern;
    MaskKind kind = MaskKind::Full;
    double af = 1.0;
    double center_fraction = 1.0;
    std::uint64_t seed = 0;

    int ny() const { return static_cast<int>(pattern.rows()); }
    int nx() const { return static_cast<int>(pattern.cols()); }
    double sampled_fraction() const {
        return pattern.cast<double>().sum() / static_cast<double>(pattern.size());
    }
    RSlice real() const { return pattern.cast<double>(); }
    CSlice complex() const { return pattern.cast<double>().cast<std::complex<double>>(); }
};

namespace detail {

// Calibrates amplitude A of p = clamp(A * gauss(d), 0, 1) over the free cells
// so that sum(p) hits `target`. The sum is monotone in A, so bisection works.
inline double calibrate_amplitude(const std::vector<double>& density, double target) {
    const double total_cap = static_cast<double>(density.size());
    if (target <= 0.0) return 0.0;
    if (target >= total_cap) return std::numeric_limits<double>::infinity();
    auto mass = [&](double A) {
        double s = 0.0;
        for (double d : density) s += std::min(1.0, A * d);
        return s;
    };
    double lo = 0.0, hi = 1.0;
    while (mass(hi) < target && hi < 1e12) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mass(mid) < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// Variable-density Gaussian line mask along the phase-encoding (row) axis.
// The central ceil(cf * Ny) lines are always on; remaining lines are included
// with probability A * exp(-d^2 / (2 sigma^2)), A calibrated by bisection so
// the expected sampled fraction equals 1/af.
inline SamplingMask make_mask_gauss1d(int ny, int nx, double af, double center_fraction,
                                      std::uint64_t seed) {
    SamplingMask m;
    m.pattern.setZero(ny, nx);
    const int cy = ny / 2;
    const int band = std::min<int>(ny, static_cast<int>(std::ceil(center_fraction * ny)));
    const int band_lo = cy - band / 2;
    auto in_band = [&](int j) { return j >= band_lo && j < band_lo + band; };

    const double sigma = ny / 6.0;
    std::vector<double> density;
    std::vector<int> free_rows;
    for (int j = 0; j < ny; ++j) {
        if (in_band(j)) continue;
        const double d = j - cy;
        density.push_back(std::exp(-d * d / (2.0 * sigma * sigma)));
        free_rows.push_back(j);
    }
    const double target = ny / af - band;
    const double A = detail::calibrate_amplitude(density, target);

    Rng rng(derive_seed(seed, 0x6A551));
    for (int j = 0; j < ny; ++j) {
        const double u = rng.uniform();  // one draw per row keeps streams stable
        bool on = in_band(j);
        if (!on) {
            const auto it = std::lower_bound(free_rows.begin(), free_rows.end(), j);
            const double p = std::min(1.0, A * density[it - free_rows.begin()]);
            on = u < p;
        }
        if (on)
            for (int x = 0; x < nx; ++x) m.pattern(j, x) = 1;
    }
    return m;
}

inline SamplingMask make_mask_gauss2d(int ny, int nx, double af, double center_fraction,
                                      std::uint64_t seed) {
    SamplingMask m;
    m.pattern.setZero(ny, nx);
    const int cy = ny / 2, cx = nx / 2;
    const double rc = std::sqrt(center_fraction * ny * nx / 3.14159265358979);
    const double sigma = std::min(ny, nx) / 6.0;

    std::vector<double> density;
    std::size_t n_center = 0;
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
            const double d2 = double(j - cy) * (j - cy) + double(i - cx) * (i - cx);
            if (std::sqrt(d2) <= rc)
                ++n_center;
            else
                density.push_back(std::exp(-d2 / (2.0 * sigma * sigma)));
        }
    const double target = static_cast<double>(ny) * nx / af - static_cast<double>(n_center);
    const double A = detail::calibrate_amplitude(density, target);

    Rng rng(derive_seed(seed, 0x6A552));
    std::size_t k = 0;
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
            const double u = rng.uniform();
            const double d2 = double(j - cy) * (j - cy) + double(i - cx) * (i - cx);
            if (std::sqrt(d2) <= rc)
                m.pattern(j, i) = 1;
            else if (u < std::min(1.0, A * density[k]))
                m.pattern(j, i) = 1;
            if (std::sqrt(d2) > rc) ++k;
        }
    return m;
}

namespace detail {

inline void rasterize_ray(Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic,
                                       Eigen::RowMajor>& p,
                          double angle) {
    const int ny = static_cast<int>(p.rows()), nx = static_cast<int>(p.cols());
    const double cy = ny / 2, cx = nx / 2;
    const double rmax = std::hypot(static_cast<double>(ny), static_cast<double>(nx));
    const double dx = std::cos(angle), dy = std::sin(angle);
    for (double t = -rmax; t <= rmax; t += 0.4) {
        const int x = static_cast<int>(std::lround(cx + t * dx));
        const int y = static_cast<int>(std::lround(cy + t * dy));
        if (x >= 0 && x < nx && y >= 0 && y < ny) p(y, x) = 1;
    }
}

}  // namespace detail

// Cartesian-grid inclusion pattern of diametric spokes; the spoke count is
// searched so the sampled fraction lands as close to 1/af as possible.
inline SamplingMask make_mask_radial(int ny, int nx, double af, double center_fraction,
                                     std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x6A553));
    const double offset = rng.uniform(0.0, 3.14159265358979);
    auto build = [&](int spokes) {
        Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> p(ny, nx);
        p.setZero();
        for (int s = 0; s < spokes; ++s)
            detail::rasterize_ray(p, offset + 3.14159265358979 * s / spokes);
        return p;
    };
    const double want = 1.0 / af;
    int best_n = 1;
    double best_err = 1e9;
    for (int n = 1; n <= std::max(ny, nx); ++n) {
        const auto p = build(n);
        const double frac = p.cast<double>().sum() / (double(ny) * nx);
        if (std::abs(frac - want) < best_err) {
            best_err = std::abs(frac - want);
            best_n = n;
        }
        if (frac > want * 1.5) break;
    }
    SamplingMask m;
    m.pattern = build(best_n);
    const int cy = ny / 2, cx = nx / 2;
    const double rc = std::sqrt(center_fraction * ny * nx / 3.14159265358979);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i)
            if (std::hypot(double(j - cy), double(i - cx)) <= rc) m.pattern(j, i) = 1;
    return m;
}

// Two-arm Archimedean spiral rasterized on the grid; turn count calibrated
// against 1/af.
inline SamplingMask make_mask_spiral(int ny, int nx, double af, double center_fraction,
                                     std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x6A554));
    const double offset = rng.uniform(0.0, 6.2831853);
    const double cy = ny / 2, cx = nx / 2;
    const double rmax = 0.55 * std::hypot(static_cast<double>(ny), static_cast<double>(nx));
    auto build = [&](double turns) {
        Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> p(ny, nx);
        p.setZero();
        const double phi_max = 6.2831853 * turns;
        for (int arm = 0; arm < 2; ++arm) {
            const double arm_off = offset + arm * 3.14159265358979;
            for (double phi = 0.0; phi <= phi_max; phi += 0.2 / (1.0 + phi / 6.0)) {
                const double r = rmax * phi / phi_max;
                const int x = static_cast<int>(std::lround(cx + r * std::cos(phi + arm_off)));
                const int y = static_cast<int>(std::lround(cy + r * std::sin(phi + arm_off)));
                if (x >= 0 && x < nx && y >= 0 && y < ny) p(y, x) = 1;
            }
        }
        return p;
    };
    const double want = 1.0 / af;
    double lo = 0.5, hi = 64.0;
    for (int it = 0; it < 40; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double frac = build(mid).cast<double>().sum() / (double(ny) * nx);
        (frac < want ? lo : hi) = mid;
    }
    SamplingMask m;
    m.pattern = build(0.5 * (lo + hi));
    const double rc = std::sqrt(center_fraction * ny * nx / 3.14159265358979);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i)
            if (std::hypot(double(j - cy), double(i - cx)) <= rc) m.pattern(j, i) = 1;
    return m;
}

inline SamplingMask make_mask(MaskKind kind, int ny, int nx, double af, double center_fraction,
                              std::uint64_t seed) {
    require(af >= 1.0, "make_mask: acceleration factor must be >= 1");
    require(center_fraction > 0.0 && center_fraction <= 1.0,
            "make_mask: center_fraction must be in (0, 1]");
    require(ny >= 1 && nx >= 1, "make_mask: shape components must be >= 1");
    SamplingMask m;
    switch (kind) {
        case MaskKind::Full:
            m.pattern.setOnes(ny, nx);
            break;
        case MaskKind::Gauss1D: m = make_mask_gauss1d(ny, nx, af, center_fraction, seed); break;
        case MaskKind::Gauss2D: m = make_mask_gauss2d(ny, nx, af, center_fraction, seed); break;
        case MaskKind::Radial: m = make_mask_radial(ny, nx, af, center_fraction, seed); break;
        case MaskKind::Spiral: m = make_mask_spiral(ny, nx, af, center_fraction, seed); break;
    }
    m.kind = kind;
    m.af = af;
    m.center_fraction = center_fraction;
    m.seed = seed;
    return m;
}

inline void save_mask(const SamplingMask& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["kind"] = mask_kind_name(m.kind);
    j["af"] = m.af;
    j["center_fraction"] = m.center_fraction;
    j["seed"] = m.seed;
    j["shape"] = {m.ny(), m.nx()};
    write_file_atomic(dir / "mask.json", j.dump(2) + "\n");
    write_file_atomic(dir / "pattern.bin", m.pattern.data(),
                      static_cast<std::size_t>(m.pattern.size()));
}

inline SamplingMask load_mask(const std::filesystem::path& dir) {
    const auto bytes = read_file_bytes(dir / "mask.json");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("mask.json: " + std::string(e.what()), e.byte);
    }
    SamplingMask m;
    try {
        m.kind = mask_kind_from_name(j.at("kind").get<std::string>());
        m.af = j.at("af").get<double>();
        m.center_fraction = j.at("center_fraction").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        const int ny = j.at("shape").at(0).get<int>(), nx = j.at("shape").at(1).get<int>();
        const auto pat = read_file_bytes(dir / "pattern.bin");
        if (pat.size() != static_cast<std::size_t>(ny) * nx)
            throw IntegrityError("pattern.bin: size does not match mask.json shape");
        m.pattern.resize(ny, nx);
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const std::uint8_t v = pat[static_cast<std::size_t>(y) * nx + x];
                if (v > 1) throw IntegrityError("pattern.bin: values must be 0 or 1");
                m.pattern(y, x) = v;
            }
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("mask.json: missing or ill-typed field: " + std::string(e.what()));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Rigid motion traces

struct MotionState {
    double dx_frac = 0.0;  // displacement as fraction of FOV
    double dy_frac = 0.0;
    double theta_deg = 0.0;  // in-plane rotation
    bool is_identity() const { return dx_frac == 0.0 && dy_frac == 0.0 && theta_deg == 0.0; }
};

struct RigidMotionTrace {
    std::vector<MotionState> lines;  // one per phase-encoding line
    double max_disp_frac = 0.0;
    double max_rot_deg = 0.0;
    std::uint64_t seed = 0;

    void validate(int expected_ny = -1) const {
        if (expected_ny >= 0 && static_cast<int>(lines.size()) != expected_ny)
            throw ValidationError("RigidMotionTrace: length " + std::to_string(lines.size()) +
                                  " does not match Ny " + std::to_string(expected_ny));
        for (const auto& l : lines) {
            if (std::abs(l.dx_frac) > max_disp_frac + 1e-12 ||
                std::abs(l.dy_frac) > max_disp_frac + 1e-12)
                throw ValidationError("RigidMotionTrace: displacement exceeds max_disp_frac");
            if (std::abs(l.theta_deg) > max_rot_deg + 1e-12)
                throw ValidationError("RigidMotionTrace: rotation exceeds max_rot_deg");
        }
    }
};

// Per-line parameters drawn i.i.d. uniform in [-max, +max]. burst_lines > 0
// switches to piecewise-constant motion that re-draws every burst_lines lines
// (real motion is temporally correlated; bursts approximate that).
inline RigidMotionTrace make_motion_trace(int ny, double max_disp_frac, double max_rot_deg,
                                          std::uint64_t seed, int burst_lines = 0) {
    require(ny >= 1, "make_motion_trace: ny must be >= 1");
    require(max_disp_frac >= 0.0 && max_rot_deg >= 0.0,
            "make_motion_trace: bounds must be >= 0");
    RigidMotionTrace t;
    t.max_disp_frac = max_disp_frac;
    t.max_rot_deg = max_rot_deg;
    t.seed = seed;
    t.lines.resize(ny);
    Rng rng(derive_seed(seed, 0x707BA));
    MotionState cur;
    for (int j = 0; j < ny; ++j) {
        if (burst_lines <= 0 || j % burst_lines == 0) {
            cur.dx_frac = rng.uniform(-max_disp_frac, max_disp_frac);
            cur.dy_frac = rng.uniform(-max_disp_frac, max_disp_frac);
            cur.theta_deg = rng.uniform(-max_rot_deg, max_rot_deg);
        }
        t.lines[j] = cur;
    }
    return t;
}

inline nlohmann::json trace_to_json(const RigidMotionTrace& t) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : t.lines) arr.push_back({l.dx_frac, l.dy_frac, l.theta_deg});
    return arr;
}

inline RigidMotionTrace trace_from_json(const nlohmann::json& arr) {
    RigidMotionTrace t;
    if (!arr.is_array() || arr.empty())
        throw IntegrityError("motion trace: expected non-empty JSON array");
    for (const auto& e : arr) {
        if (!e.is_array() || e.size() != 3)
            throw IntegrityError("motion trace: each entry must be [dx_frac, dy_frac, theta_deg]");
        MotionState s{e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<double>()};
        t.max_disp_frac = std::max({t.max_disp_frac, std::abs(s.dx_frac), std::abs(s.dy_frac)});
        t.max_rot_deg = std::max(t.max_rot_deg, std::abs(s.theta_deg));
        t.lines.push_back(s);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Acquisition physics

// Applies the rigid transform (rotate by theta about the image center, then
// translate by (dx, dy) pixels) with inverse-mapped bilinear resampling and
// zero padding outside the FOV.
inline CSlice rigid_resample(const CSlice& img, double dx_pix, double dy_pix, double theta_deg) {
    const int ny = static_cast<int>(img.rows()), nx = static_cast<int>(img.cols());
    if (dx_pix == 0.0 && dy_pix == 0.0 && theta_deg == 0.0) return img;
    const double th = theta_deg * 3.14159265358979 / 180.0;
    const double ct = std::cos(th), st = std::sin(th);
    const double cx = (nx - 1) / 2.0, cy = (ny - 1) / 2.0;
    CSlice out(ny, nx);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
            // inverse map: undo translation, then rotation
            const double px = x - dx_pix - cx, py = y - dy_pix - cy;
            const double sx = ct * px + st * py + cx;
            const double sy = -st * px + ct * py + cy;
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            const double fx = sx - x0, fy = sy - y0;
            std::complex<double> acc = 0.0;
            for (int oy = 0; oy <= 1; ++oy)
                for (int ox = 0; ox <= 1; ++ox) {
                    const int xs = x0 + ox, ys = y0 + oy;
                    if (xs < 0 || xs >= nx || ys < 0 || ys >= ny) continue;
                    const double w = (ox ? fx : 1.0 - fx) * (oy ? fy : 1.0 - fy);
                    acc += w * img(ys, xs);
                }
            out(y, x) = acc;
        }
    return out;
}

// Line-by-line acquisition: for each phase-encoding line j the image is seen
// under transform tau_j; row j of the output is row j of fft2c of that
// transformed image. Circular complex Gaussian noise of std noise_std is then
// added to every entry.
inline CSlice simulate_motion_acquisition(const CSlice& image, const RigidMotionTrace& trace,
                                          double noise_std, Rng& rng) {
    const int ny = static_cast<int>(image.rows()), nx = static_cast<int>(image.cols());
    trace.validate(ny);
    CSlice k(ny, nx);
    CSlice cached_fft;
    MotionState cached_state;
    bool has_cached = false;
    for (int j = 0; j < ny; ++j) {
        const MotionState& s = trace.lines[j];
        const bool same = has_cached && s.dx_frac == cached_state.dx_frac &&
                          s.dy_frac == cached_state.dy_frac &&
                          s.theta_deg == cached_state.theta_deg;
        if (!same) {
            const CSlice moved =
                s.is_identity()
                    ? image
                    : rigid_resample(image, s.dx_frac * nx, s.dy_frac * ny, s.theta_deg);
            cached_fft = fft2c(moved);
            cached_state = s;
            has_cached = true;
        }
        k.row(j) = cached_fft.row(j);
    }
    if (noise_std > 0.0) {
        const double comp_std = noise_std / std::sqrt(2.0);
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i < nx; ++i)
                k(j, i) += std::complex<double>(comp_std * rng.normal(), comp_std * rng.normal());
    }
    return k;
}

inline CSlice undersample(const CSlice& k, const SamplingMask& mask) {
    require(k.rows() == mask.pattern.rows() && k.cols() == mask.pattern.cols(),
            "undersample: k-space and mask shapes differ");
    return k * mask.complex();
}

// Inverse FFT of the masked data; the baseline reconstruction everywhere.
inline CSlice zero_filled(const CSlice& b) {
    return ifft2c(b);
}

// x0~ = F^-1[ P . b + (1 - P) . F(x_pred) ]. Measured frequencies are copied
// from b verbatim, so F(x0~) equals b at every sampled location.
inline CSlice data_consistency(const CSlice& x_pred, const CSlice& b, const SamplingMask& mask) {
    require(x_pred.rows() == b.rows() && x_pred.cols() == b.cols(),
            "data_consistency: prediction and measurement shapes differ");
    require(b.rows() == mask.pattern.rows() && b.cols() == mask.pattern.cols(),
            "data_consistency: measurement and mask shapes differ");
    const CSlice p = mask.complex();
    const CSlice one = CSlice::Constant(b.rows(), b.cols(), 1.0);
    return ifft2c(p * b + (one - p) * fft2c(x_pred));
}

// Radial frequency weighting: w_min at DC rising linearly to 1 at the
// farthest corner. d is measured from the centered DC bin.
inline RSlice frequency_weight_mask(int ny, int nx, double w_min) {
    require(w_min >= 0.0 && w_min < 1.0, "frequency_weight_mask: w_min must be in [0, 1)");
    const int cy = ny / 2, cx = nx / 2;
    double dmax = 0.0;
    for (int j : {0, ny - 1})
        for (int i : {0, nx - 1})
            dmax = std::max(dmax, std::hypot(double(j - cy), double(i - cx)));
    RSlice w(ny, nx);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
            const double d = dmax == 0.0 ? 0.0 : std::hypot(double(j - cy), double(i - cx)) / dmax;
            w(j, i) = w_min + (1.0 - w_min) * d;
        }
    return w;
}

// Spectral blend: frequencies with normalized radius > (1 - rho) come from
// the INR branch, the rest from the diffusion branch. rho == 0 and rho == 1
// short-circuit to the pure inputs so the endpoints are exact.
inline CSlice hybrid_blend(const CSlice& x_diffusion, const CSlice& x_inr, double rho) {
    require(rho >= 0.0 && rho <= 1.0, "hybrid_blend: rho must be in [0, 1]");
    require(x_diffusion.rows() == x_inr.rows() && x_diffusion.cols() == x_inr.cols(),
            "hybrid_blend: input shapes differ");
    if (rho == 0.0) return x_diffusion;
    if (rho == 1.0) return x_inr;
    const int ny = static_cast<int>(x_diffusion.rows()), nx = static_cast<int>(x_diffusion.cols());
    const int cy = ny / 2, cx = nx / 2;
    double dmax = 0.0;
    for (int j : {0, ny - 1})
        for (int i : {0, nx - 1})
            dmax = std::max(dmax, std::hypot(double(j - cy), double(i - cx)));
    const CSlice kd = fft2c(x_diffusion), ki = fft2c(x_inr);
    CSlice k(ny, nx);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
            const double d = dmax == 0.0 ? 0.0 : std::hypot(double(j - cy), double(i - cx)) / dmax;
            k(j, i) = d > (1.0 - rho) ? ki(j, i) : kd(j, i);
        }
    return ifft2c(k);
}

}  // namespace prinr
