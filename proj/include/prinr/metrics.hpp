#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "prinr/errors.hpp"
#include "prinr/fft.hpp"
#include "prinr/io_png.hpp"
#include "prinr/io_util.hpp"
#include "prinr/volume.hpp"

namespace prinr {

// ---------------------------------------------------------------------------
// PSNR: 10 log10(range^2 / MSE), capped at 100 dB for identical inputs.

inline constexpr double kPsnrCap = 100.0;

inline double psnr(const RSlice& x, const RSlice& ref, double data_range = 1.0) {
    require(x.rows() == ref.rows() && x.cols() == ref.cols(), "psnr: shapes differ");
    const double mse = (x - ref).square().mean();
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

// ---------------------------------------------------------------------------
// SSIM, the standard parameterization: 11x11 Gaussian window (sigma 1.5),
// K1 = 0.01, K2 = 0.03, population covariance, mean over the valid interior.

namespace detail {

// Separable Gaussian blur with mirrored borders (edge repeated), kernel
// sampled at integers within truncate * sigma.
inline RSlice gaussian_blur(const RSlice& img, double sigma, int radius) {
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;
    const int h = static_cast<int>(img.rows()), w = static_cast<int>(img.cols());
    auto reflect = [](int i, int n) {
        while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
        return i;
    };
    RSlice tmp(h, w), out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img(y, reflect(x + i, w));
            tmp(y, x) = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp(reflect(y + i, h), x);
            out(y, x) = acc;
        }
    return out;
}

}  // namespace detail

inline double ssim(const RSlice& x, const RSlice& ref, double data_range = 1.0) {
    require(x.rows() == ref.rows() && x.cols() == ref.cols(), "ssim: shapes differ");
    const double sigma = 1.5;
    const int radius = 5;  // 11-tap window
    require(x.rows() >= 2 * radius + 1 && x.cols() >= 2 * radius + 1,
            "ssim: image smaller than the 11x11 window");
    const double C1 = (0.01 * data_range) * (0.01 * data_range);
    const double C2 = (0.03 * data_range) * (0.03 * data_range);

    const RSlice ux = detail::gaussian_blur(x, sigma, radius);
    const RSlice uy = detail::gaussian_blur(ref, sigma, radius);
    const RSlice uxx = detail::gaussian_blur(x * x, sigma, radius);
    const RSlice uyy = detail::gaussian_blur(ref * ref, sigma, radius);
    const RSlice uxy = detail::gaussian_blur(x * ref, sigma, radius);

    const RSlice vx = uxx - ux * ux;
    const RSlice vy = uyy - uy * uy;
    const RSlice vxy = uxy - ux * uy;

    const RSlice num = (2.0 * ux * uy + C1) * (2.0 * vxy + C2);
    const RSlice den = (ux * ux + uy * uy + C1) * (vx + vy + C2);
    const RSlice s = num / den;

    const int h = static_cast<int>(x.rows()), w = static_cast<int>(x.cols());
    double acc = 0.0;
    int n = 0;
    for (int yy = radius; yy < h - radius; ++yy)
        for (int xx = radius; xx < w - radius; ++xx) {
            acc += s(yy, xx);
            ++n;
        }
    return acc / n;
}

// ---------------------------------------------------------------------------
// NCC: Pearson correlation over flattened intensities.

inline double ncc(const RSlice& x, const RSlice& ref) {
    require(x.rows() == ref.rows() && x.cols() == ref.cols(), "ncc: shapes differ");
    const double mx = x.mean(), mr = ref.mean();
    const double vx = (x - mx).square().sum(), vr = (ref - mr).square().sum();
    if (vx <= 0.0 || vr <= 0.0)
        throw ValidationError("ncc: degenerate input (zero variance), correlation undefined");
    const double cov = ((x - mx) * (ref - mr)).sum();
    return cov / std::sqrt(vx * vr);
}

// ---------------------------------------------------------------------------
// Volume-level helpers: metrics per slice against a reference volume, both
// magnitudes mapped by the reference's [min, max].

struct SliceMetrics {
    std::vector<double> psnr, ssim, ncc;
    double psnr_mean = 0, psnr_std = 0, ssim_mean = 0, ssim_std = 0, ncc_mean = 0, ncc_std = 0;
};

inline RSlice magnitude_slice(const ComplexVolume& v, int z) {
    RSlice s(v.ny(), v.nx());
    for (int y = 0; y < v.ny(); ++y)
        for (int x = 0; x < v.nx(); ++x) s(y, x) = std::abs(std::complex<double>(v.at(z, y, x)));
    return s;
}

inline SliceMetrics volume_metrics(const ComplexVolume& recon, const ComplexVolume& gt) {
    require(recon.shape == gt.shape, "volume_metrics: shapes differ");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& c : gt.data) {
        const double m = std::abs(std::complex<double>(c));
        lo = std::min(lo, m);
        hi = std::max(hi, m);
    }
    require(hi > lo, "volume_metrics: constant ground truth");
    const double inv = 1.0 / (hi - lo);

    SliceMetrics out;
    for (int z = 0; z < gt.nz(); ++z) {
        const RSlice a = ((magnitude_slice(recon, z) - lo) * inv).eval();
        const RSlice b = ((magnitude_slice(gt, z) - lo) * inv).eval();
        out.psnr.push_back(psnr(a, b));
        out.ssim.push_back(ssim(a, b));
        out.ncc.push_back(ncc(a, b));
    }
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
        mean = 0.0;
        for (double x : v) mean += x;
        mean /= v.size();
        sd = 0.0;
        for (double x : v) sd += (x - mean) * (x - mean);
        sd = v.size() > 1 ? std::sqrt(sd / (v.size() - 1)) : 0.0;
    };
    stats(out.psnr, out.psnr_mean, out.psnr_std);
    stats(out.ssim, out.ssim_mean, out.ssim_std);
    stats(out.ncc, out.ncc_mean, out.ncc_std);
    return out;
}

// ---------------------------------------------------------------------------
// Error maps: |x - ref| on a fixed [0, 0.3] display range, fixed colormap.

namespace detail {

inline void heat_color(double t, std::uint8_t* rgb) {
    static const double anchors[6][3] = {{0, 0, 0},       {40, 0, 90},    {140, 20, 120},
                                         {225, 80, 60},   {255, 170, 40}, {255, 255, 200}};
    t = std::clamp(t, 0.0, 1.0) * 5.0;
    const int i = std::min(4, static_cast<int>(t));
    const double f = t - i;
    for (int c = 0; c < 3; ++c)
        rgb[c] = static_cast<std::uint8_t>(
            std::lround(anchors[i][c] + f * (anchors[i + 1][c] - anchors[i][c])));
}

}  // namespace detail

inline constexpr double kErrorMapRange = 0.3;

inline void error_map(const RSlice& x, const RSlice& ref, const std::filesystem::path& path) {
    require(x.rows() == ref.rows() && x.cols() == ref.cols(), "error_map: shapes differ");
    const int h = static_cast<int>(x.rows()), w = static_cast<int>(x.cols());
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
            const double err = std::min(kErrorMapRange, std::abs(x(y, xx) - ref(y, xx)));
            detail::heat_color(err / kErrorMapRange, &rgb[(static_cast<std::size_t>(y) * w + xx) * 3]);
        }
    write_png_rgb8(path, rgb.data(), w, h);
}

// ---------------------------------------------------------------------------
// Ordering checks across the evaluation grid.

struct ConditionReport {
    double af = 0.0;
    double disp_frac = 0.0;  // max displacement as FOV fraction
    double psnr_method = 0.0;
    double psnr_zero_filled = 0.0;
};

// Named boolean per trend: method beats zero-filled per condition, lower af
// beats higher af at matched displacement, lower displacement beats higher at
// matched af.
inline std::vector<std::pair<std::string, bool>> ordering_checks(
    const std::vector<ConditionReport>& reports) {
    require(!reports.empty(), "ordering_checks: empty report set");
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", v);
        return std::string(buf);
    };
    std::vector<std::pair<std::string, bool>> checks;
    std::vector<double> afs, disps;
    for (const auto& r : reports) {
        if (std::find(afs.begin(), afs.end(), r.af) == afs.end()) afs.push_back(r.af);
        if (std::find(disps.begin(), disps.end(), r.disp_frac) == disps.end())
            disps.push_back(r.disp_frac);
        checks.emplace_back("method_gt_zero_filled_af" + fmt(r.af) + "_disp" + fmt(r.disp_frac),
                            r.psnr_method > r.psnr_zero_filled);
    }
    std::sort(afs.begin(), afs.end());
    std::sort(disps.begin(), disps.end());
    auto find = [&](double af, double disp) -> const ConditionReport* {
        for (const auto& r : reports)
            if (r.af == af && r.disp_frac == disp) return &r;
        return nullptr;
    };
    for (double d : disps)
        for (std::size_t i = 0; i + 1 < afs.size(); ++i) {
            const auto* lo = find(afs[i], d);
            const auto* hi = find(afs[i + 1], d);
            if (!lo || !hi)
                throw ValidationError("ordering_checks: missing condition af=" + fmt(afs[i]) +
                                      "/af=" + fmt(afs[i + 1]) + " disp=" + fmt(d));
            checks.emplace_back("psnr_af" + fmt(afs[i]) + "_gt_af" + fmt(afs[i + 1]) + "_disp" +
                                    fmt(d),
                                lo->psnr_method > hi->psnr_method);
        }
    for (double a : afs)
        for (std::size_t i = 0; i + 1 < disps.size(); ++i) {
            const auto* lo = find(a, disps[i]);
            const auto* hi = find(a, disps[i + 1]);
            if (!lo || !hi)
                throw ValidationError("ordering_checks: missing condition disp=" + fmt(disps[i]) +
                                      "/disp=" + fmt(disps[i + 1]) + " af=" + fmt(a));
            checks.emplace_back("psnr_disp" + fmt(disps[i]) + "_gt_disp" + fmt(disps[i + 1]) +
                                    "_af" + fmt(a),
                                lo->psnr_method > hi->psnr_method);
        }
    return checks;
}

// ---------------------------------------------------------------------------
// Report emission. LPIPS needs a pretrained perceptual network and is out of
// reach here; the column is kept as null so schemas line up with standard
// comparison tables.

inline void write_eval_report(const std::filesystem::path& dir, const std::string& condition,
                              const SliceMetrics& m,
                              const std::map<std::string, std::string>& config_echo = {}) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["condition"] = condition;
    j["psnr_mean"] = m.psnr_mean;
    j["psnr_std"] = m.psnr_std;
    j["ssim_mean"] = m.ssim_mean;
    j["ssim_std"] = m.ssim_std;
    j["ncc_mean"] = m.ncc_mean;
    j["ncc_std"] = m.ncc_std;
    j["lpips"] = nullptr;
    j["per_slice"] = {{"psnr", m.psnr}, {"ssim", m.ssim}, {"ncc", m.ncc}};
    j["std_aggregation"] = "per-slice";
    j["config"] = config_echo;
    write_file_atomic(dir / "eval_report.json", j.dump(2) + "\n");

    std::string csv =
        "condition,psnr_mean,psnr_std,ssim_mean,ssim_std,ncc_mean,ncc_std,lpips\n";
    char row[512];
    std::snprintf(row, sizeof row, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,null\n", condition.c_str(),
                  m.psnr_mean, m.psnr_std, m.ssim_mean, m.ssim_std, m.ncc_mean, m.ncc_std);
    csv += row;
    write_file_atomic(dir / "eval_report.csv", csv);
}

}  // namespace prinr
