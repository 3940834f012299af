#pragma once

#include <functional>
#include <vector>

#include "prinr/inr.hpp"
#include "prinr/nn/adam.hpp"
#include "prinr/volume.hpp"

namespace prinr {

struct VcrConfig {
    int num_freqs = 64;
    double b_scale = 10.0;
    double b_axial_factor = 0.02;  // axial bandwidth fraction; kept very low so
                                   // z behavior is carried by the interpolated
                                   // conditioning features, not free oscillation
    std::uint64_t b_seed = 1;
    int hidden_layers = 5;  // five hidden layers of 256 units
    int hidden_width = 256;
    double omega_first = 30.0;
    double omega_hidden = 30.0;
    AggregatorConfig agg;
    int fit_iters = 2000;
    int fit_batch = 2048;
    double fit_lr = 2e-3;
    double eps_fit = 1e-3;  // per-slice MSE threshold on normalized intensities

    void validate() const {
        require(num_freqs >= 1 && hidden_layers >= 1 && hidden_width >= 1,
                "VcrConfig: positive dims required");
        require(fit_iters >= 0 && fit_batch >= 1, "VcrConfig: bad fit budget");
        agg.validate();
    }

    static VcrConfig tiny() {
        VcrConfig c;
        c.num_freqs = 24;
        c.b_scale = 8.0;
        c.hidden_layers = 3;
        c.hidden_width = 96;
        c.agg.feat_channels = {12, 16};
        c.agg.lstm_depth = 1;
        c.agg.lstm_hidden = 16;
        c.agg.c2_dim = 16;
        c.fit_batch = 2048;
        return c;
    }
};

// The trainable pieces shared across volumes: the 3D frequency encoding, the
// feature aggregator and the volumetric SIREN head.
class VcrModel {
public:
    VcrConfig cfg;
    FrequencyEncoding enc;  // 3D coordinates
    VolumeAggregator agg;
    SirenMLP f3;

    VcrModel() = default;
    VcrModel(const VcrConfig& cfg_, Rng& rng) : cfg(cfg_) {
        cfg.validate();
        enc = FrequencyEncoding(cfg.num_freqs, 3, cfg.b_scale, cfg.b_seed,
                                {1.0, 1.0, cfg.b_axial_factor});
        // hard cap on axial frequencies: Gaussian tails would alias between
        // supervised planes in the two-slice limit
        const double z_cap = 1.5 * cfg.b_scale * cfg.b_axial_factor;
        for (Eigen::Index i = 0; i < enc.B.rows(); ++i)
            enc.B(i, 2) = std::clamp(enc.B(i, 2), -z_cap, z_cap);
        nn::quantize_f32(enc.B);
        agg = VolumeAggregator(cfg.agg, rng);
        std::vector<int> widths;
        widths.push_back(enc.out_dim() + cfg.agg.c2_dim);
        for (int i = 0; i < cfg.hidden_layers; ++i) widths.push_back(cfg.hidden_width);
        widths.push_back(1);
        f3 = SirenMLP("vcr.f3", widths, cfg.omega_first, cfg.omega_hidden, rng);
    }

    void params(nn::ParamList& out) {
        agg.params(out);
        f3.params(out);
    }
    void head_params(nn::ParamList& out) { f3.params(out); }
};

// A fitted conditional field over one stack of slices. Coordinates normalize
// per axis onto [-1, 1] using the physical extents, so spacing anisotropy
// enters through the mapping from millimeters to network coordinates.
class VcrField {
public:
    VcrModel model;                   // instance copy; f3 is fine-tuned per volume
    std::vector<nn::FeatureMap> c2;   // frozen aggregator features per slice
    std::vector<double> z_mm;         // strictly increasing slice positions
    int height = 0, width = 0;
    mutable bool clamped_query = false;  // set when a query left [z_front, z_back]

    double z_to_norm(double z) const {
        const double lo = z_mm.front(), hi = z_mm.back();
        return hi == lo ? 0.0 : -1.0 + 2.0 * (z - lo) / (hi - lo);
    }

    // continuous slice index for feature interpolation; clamps out-of-range z
    double z_to_index(double z) const {
        if (z <= z_mm.front()) {
            if (z < z_mm.front()) clamped_query = true;
            return 0.0;
        }
        if (z >= z_mm.back()) {
            if (z > z_mm.back()) clamped_query = true;
            return static_cast<double>(z_mm.size() - 1);
        }
        const auto it = std::upper_bound(z_mm.begin(), z_mm.end(), z);
        const std::size_t k = static_cast<std::size_t>(it - z_mm.begin()) - 1;
        return k + (z - z_mm[k]) / (z_mm[k + 1] - z_mm[k]);
    }

    // Dense evaluation of one z plane at the pixel-center grid.
    RSlice eval_plane(double z) const {
        const double u = z_to_index(z);
        const int k0 = std::min(static_cast<int>(u), static_cast<int>(z_mm.size()) - 1);
        const int k1 = std::min(k0 + 1, static_cast<int>(z_mm.size()) - 1);
        const double f = u - k0;
        const Eigen::Index hw = static_cast<Eigen::Index>(height) * width;

        nn::Mat in(model.enc.out_dim() + model.cfg.agg.c2_dim, hw);
        nn::Mat coords(3, hw);
        const double zn = z_to_norm(std::clamp(z, z_mm.front(), z_mm.back()));
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const Eigen::Index p = static_cast<Eigen::Index>(y) * width + x;
                coords(0, p) = width == 1 ? 0.0 : -1.0 + 2.0 * x / (width - 1);
                coords(1, p) = height == 1 ? 0.0 : -1.0 + 2.0 * y / (height - 1);
                coords(2, p) = zn;
            }
        in.topRows(model.enc.out_dim()) = model.enc.encode(coords);
        in.bottomRows(model.cfg.agg.c2_dim) =
            f == 0.0 ? c2[k0].data : ((1.0 - f) * c2[k0].data + f * c2[k1].data).eval();

        const nn::Mat out = model.f3.forward(in);
        RSlice plane(height, width);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                plane(y, x) = out(0, static_cast<Eigen::Index>(y) * width + x);
        return plane;
    }

    // Single-point evaluation at continuous pixel coordinates and physical z.
    double eval_point(double px, double py, double z) const {
        const double u = z_to_index(z);
        const int k0 = std::min(static_cast<int>(u), static_cast<int>(z_mm.size()) - 1);
        const int k1 = std::min(k0 + 1, static_cast<int>(z_mm.size()) - 1);
        const double f = u - k0;
        Eigen::VectorXd feat = (1.0 - f) * sample_bilinear(c2[k0], px, py);
        if (f > 0.0) feat += f * sample_bilinear(c2[k1], px, py);

        Eigen::VectorXd coord(3);
        coord(0) = width == 1 ? 0.0 : -1.0 + 2.0 * px / (width - 1);
        coord(1) = height == 1 ? 0.0 : -1.0 + 2.0 * py / (height - 1);
        coord(2) = z_to_norm(std::clamp(z, z_mm.front(), z_mm.back()));
        nn::Mat in(model.enc.out_dim() + feat.size(), 1);
        in.topRows(model.enc.out_dim()) = model.enc.encode(coord);
        in.bottomRows(feat.size()) = feat;
        return model.f3.forward(in)(0, 0);
    }
};

struct VcrFitReport {
    std::vector<double> per_slice_mse;  // final MSE at each training plane
    double mean_mse = 0.0;
    int iters_run = 0;
    bool converged = false;  // mean per-slice MSE <= eps_fit
};

namespace detail {

inline std::vector<double> field_per_slice_mse(const VcrField& field,
                                               const std::vector<RSlice>& slices,
                                               const std::vector<double>& z_mm) {
    std::vector<double> mse;
    for (std::size_t i = 0; i < slices.size(); ++i)
        mse.push_back((field.eval_plane(z_mm[i]) - slices[i]).square().mean());
    return mse;
}

}  // namespace detail

// Fits the volumetric head to the given slices by minibatch coordinate
// regression (the integral objective discretized at pixel centers). The
// aggregator is frozen at instance-fit time; joint aggregator training
// happens in the pipeline's training loop.
inline VcrField vcr_fit(const std::vector<RSlice>& slices, const std::vector<double>& z_mm,
                        const VcrModel& init, std::uint64_t seed, VcrFitReport* report = nullptr,
                        int fit_iters_override = -1) {
    require(slices.size() >= 2, "vcr_fit: need at least 2 slices");
    require(slices.size() == z_mm.size(), "vcr_fit: slice/position count mismatch");
    for (std::size_t i = 1; i < z_mm.size(); ++i)
        require(z_mm[i] > z_mm[i - 1], "vcr_fit: z positions must be strictly increasing");

    VcrField field;
    field.model = init;
    field.z_mm = z_mm;
    field.height = static_cast<int>(slices[0].rows());
    field.width = static_cast<int>(slices[0].cols());
    field.c2 = field.model.agg.forward(slices);

    const int iters = fit_iters_override >= 0 ? fit_iters_override : init.cfg.fit_iters;
    const int n = static_cast<int>(slices.size());
    const Eigen::Index hw = static_cast<Eigen::Index>(field.height) * field.width;
    const int batch = std::min<Eigen::Index>(init.cfg.fit_batch, hw * n);

    nn::ParamList params;
    field.model.head_params(params);
    nn::Adam opt(init.cfg.fit_lr, 0.0, 1.0);
    for (auto* p : params) {
        p->m_state.setZero();
        p->v_state.setZero();
    }

    Rng rng(derive_seed(seed, 0xFC3));
    const int gdim = field.model.enc.out_dim();
    const int cdim = field.model.cfg.agg.c2_dim;
    for (int it = 0; it < iters; ++it) {
        nn::Mat in(gdim + cdim, batch);
        nn::Mat target(1, batch);
        nn::Mat coords(3, batch);
        std::vector<std::pair<int, Eigen::Index>> picks(batch);
        for (int s = 0; s < batch; ++s) {
            const int i = static_cast<int>(rng.below(n));
            const Eigen::Index p = static_cast<Eigen::Index>(rng.below(hw));
            picks[s] = {i, p};
            const int y = static_cast<int>(p / field.width), x = static_cast<int>(p % field.width);
            coords(0, s) = field.width == 1 ? 0.0 : -1.0 + 2.0 * x / (field.width - 1);
            coords(1, s) = field.height == 1 ? 0.0 : -1.0 + 2.0 * y / (field.height - 1);
            coords(2, s) = field.z_to_norm(z_mm[i]);
            target(0, s) = slices[i](y, x);
        }
        in.topRows(gdim) = field.model.enc.encode(coords);
        for (int s = 0; s < batch; ++s)
            in.block(gdim, s, cdim, 1) = field.c2[picks[s].first].data.col(picks[s].second);

        SirenMLP::Cache cache;
        const nn::Mat pred = field.model.f3.forward(in, &cache);
        const nn::Mat diff = pred - target;
        const nn::Mat dout = (2.0 / batch) * diff;
        opt.zero_grad(params);
        field.model.f3.backward(dout, cache);
        opt.step(params);
    }

    if (report) {
        report->per_slice_mse = detail::field_per_slice_mse(field, slices, z_mm);
        report->mean_mse = 0.0;
        for (double m : report->per_slice_mse) report->mean_mse += m;
        report->mean_mse /= report->per_slice_mse.size();
        report->iters_run = iters;
        report->converged = report->mean_mse <= init.cfg.eps_fit;
    }
    return field;
}

// One joint training step over aggregator and head on a full slice stack,
// using a coordinate minibatch. Slice planes normalize to linspace(-1, 1, M).
inline double vcr_train_step(VcrModel& model, nn::Adam& opt, const nn::ParamList& params,
                             const std::vector<RSlice>& slices, int batch, Rng& rng) {
    const int n = static_cast<int>(slices.size());
    const int h = static_cast<int>(slices[0].rows()), w = static_cast<int>(slices[0].cols());
    const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;

    VolumeAggregator::Cache acache;
    const std::vector<nn::FeatureMap> c2 = model.agg.forward(slices, &acache);

    const int gdim = model.enc.out_dim();
    const int cdim = model.cfg.agg.c2_dim;
    nn::Mat in(gdim + cdim, batch), target(1, batch), coords(3, batch);
    std::vector<std::pair<int, Eigen::Index>> picks(batch);
    for (int s = 0; s < batch; ++s) {
        const int i = static_cast<int>(rng.below(n));
        const Eigen::Index p = static_cast<Eigen::Index>(rng.below(hw));
        picks[s] = {i, p};
        const int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
        coords(0, s) = w == 1 ? 0.0 : -1.0 + 2.0 * x / (w - 1);
        coords(1, s) = h == 1 ? 0.0 : -1.0 + 2.0 * y / (h - 1);
        coords(2, s) = n == 1 ? 0.0 : -1.0 + 2.0 * i / (n - 1);
        target(0, s) = slices[i](y, x);
    }
    in.topRows(gdim) = model.enc.encode(coords);
    for (int s = 0; s < batch; ++s)
        in.block(gdim, s, cdim, 1) = c2[picks[s].first].data.col(picks[s].second);

    SirenMLP::Cache cache;
    const nn::Mat pred = model.f3.forward(in, &cache);
    const nn::Mat diff = pred - target;
    const double loss = diff.array().square().mean();
    const nn::Mat dout = (2.0 / batch) * diff;
    opt.zero_grad(params);
    const nn::Mat din = model.f3.backward(dout, cache);

    std::vector<nn::FeatureMap> dc2(n);
    for (int i = 0; i < n; ++i) dc2[i] = nn::FeatureMap(cdim, h, w);
    for (int s = 0; s < batch; ++s)
        dc2[picks[s].first].data.col(picks[s].second) += din.block(gdim, s, cdim, 1);
    model.agg.backward(dc2, acache);
    opt.step(params);
    return loss;
}

// ---------------------------------------------------------------------------
// Dense volume query at an integer upsampling scale: output planes sit at
// z_0 + j * (dz / scale), so plane j*scale coincides with input plane j.

inline ComplexVolume query_volume(const VcrField& field, int scale,
                                  std::array<double, 3> spacing) {
    require(scale >= 1, "query_volume: scale must be >= 1");
    const int m = static_cast<int>(field.z_mm.size());
    const int nz_out = scale * (m - 1) + 1;
    ComplexVolume out =
        make_volume(nz_out, field.height, field.width,
                    {spacing[0], spacing[1], spacing[2] / scale});
    field.clamped_query = false;
    for (int j = 0; j < nz_out; ++j) {
        const int k = j / scale;
        const double f = static_cast<double>(j % scale) / scale;
        const double z = f == 0.0 ? field.z_mm[k]
                                  : field.z_mm[k] + f * (field.z_mm[k + 1] - field.z_mm[k]);
        out.set_slice(j, field.eval_plane(z));
    }
    out.meta["clamped_query"] = field.clamped_query ? "true" : "false";
    out.meta["scale"] = std::to_string(scale);
    return out;
}

inline ComplexVolume query_volume_at_z(const VcrField& field, const std::vector<double>& z_list,
                                       std::array<double, 3> spacing) {
    require(!z_list.empty(), "query_volume_at_z: empty z list");
    ComplexVolume out =
        make_volume(static_cast<int>(z_list.size()), field.height, field.width, spacing);
    field.clamped_query = false;
    for (std::size_t j = 0; j < z_list.size(); ++j)
        out.set_slice(static_cast<int>(j), field.eval_plane(z_list[j]));
    out.meta["clamped_query"] = field.clamped_query ? "true" : "false";
    return out;
}

// ---------------------------------------------------------------------------
// Axial smoothness audit: random probes of |f(x,y,z+dz) - f(x,y,z)|; reports
// the largest raw difference and the corresponding slope bound C.

struct SmoothnessAudit {
    double max_abs_diff = 0.0;
    double estimated_C = 0.0;  // max |difference| / delta_z
};

inline SmoothnessAudit axial_smoothness_audit(
    const std::function<double(double px, double py, double z)>& f, int height, int width,
    double z_lo, double z_hi, int probe_count, double delta_z, std::uint64_t seed) {
    require(probe_count >= 100, "axial_smoothness_audit: need at least 100 probes");
    require(delta_z > 0.0 && z_hi - delta_z >= z_lo, "axial_smoothness_audit: bad z range");
    Rng rng(derive_seed(seed, 0x5A0D));
    SmoothnessAudit out;
    for (int i = 0; i < probe_count; ++i) {
        const double px = rng.uniform(0.0, width - 1.0);
        const double py = rng.uniform(0.0, height - 1.0);
        const double z = rng.uniform(z_lo, z_hi - delta_z);
        const double d = std::abs(f(px, py, z + delta_z) - f(px, py, z));
        if (!std::isfinite(d)) throw NumericError("axial_smoothness_audit: non-finite probe");
        out.max_abs_diff = std::max(out.max_abs_diff, d);
    }
    out.estimated_C = out.max_abs_diff / delta_z;
    return out;
}

inline SmoothnessAudit axial_smoothness_audit(const VcrField& field, int probe_count,
                                              double delta_z, std::uint64_t seed = 0) {
    return axial_smoothness_audit(
        [&](double px, double py, double z) { return field.eval_point(px, py, z); }, field.height,
        field.width, field.z_mm.front(), field.z_mm.back(), probe_count, delta_z, seed);
}

// ---------------------------------------------------------------------------
// Classical z-axis baselines on the same output grid as query_volume.

enum class InterpMethod { Repeat, Trilinear };

inline InterpMethod interp_method_from_name(const std::string& s) {
    if (s == "repeat") return InterpMethod::Repeat;
    if (s == "trilinear") return InterpMethod::Trilinear;
    throw ValidationError("unknown interpolation method: " + s);
}

// Repeat uses nearest-plane rounding (ties round up), so interior source
// slices appear `scale` times and the two boundary slices roughly half that.
inline ComplexVolume baseline_interpolate(const ComplexVolume& v, int scale, InterpMethod method) {
    require(scale >= 1, "baseline_interpolate: scale must be >= 1 and integer");
    const int m = v.nz();
    const int nz_out = scale * (m - 1) + 1;
    ComplexVolume out = make_volume(nz_out, v.ny(), v.nx(),
                                    {v.spacing[0], v.spacing[1], v.spacing[2] / scale});
    out.meta = v.meta;
    for (int j = 0; j < nz_out; ++j) {
        if (method == InterpMethod::Repeat) {
            const int src = std::min(m - 1, (j + scale / 2) / scale);
            for (int y = 0; y < v.ny(); ++y)
                for (int x = 0; x < v.nx(); ++x) out.at(j, y, x) = v.at(src, y, x);
        } else {
            const int k0 = j / scale;
            const double f = static_cast<double>(j % scale) / scale;
            const int k1 = std::min(k0 + 1, m - 1);
            for (int y = 0; y < v.ny(); ++y)
                for (int x = 0; x < v.nx(); ++x) {
                    const std::complex<double> a(v.at(k0, y, x)), b(v.at(k1, y, x));
                    const std::complex<double> c = (1.0 - f) * a + f * b;
                    out.at(j, y, x) = {static_cast<float>(c.real()),
                                       static_cast<float>(c.imag())};
                }
        }
    }
    return out;
}

inline void write_vcr_report(const std::filesystem::path& path,
                             const std::vector<double>& per_slice_mse, double estimated_C,
                             int probe_count, int scale, double psnr_vcr, double psnr_trilinear,
                             double psnr_repeat) {
    nlohmann::json j;
    j["per_slice_mse"] = per_slice_mse;
    j["estimated_C"] = estimated_C;
    j["probe_count"] = probe_count;
    j["scale"] = scale;
    j["psnr_vs_baselines"] = {
        {"vcr", psnr_vcr}, {"trilinear", psnr_trilinear}, {"repeat", psnr_repeat}};
    write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace prinr
