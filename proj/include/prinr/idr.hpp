#pragma once

#include <functional>
#include <vector>

#include "prinr/inr.hpp"
#include "prinr/kspace.hpp"
#include "prinr/nn/adam.hpp"
#include "prinr/parallel.hpp"

namespace prinr {

struct IdrConfig {
    int num_freqs = 64;
    double b_scale = 10.0;
    std::uint64_t b_seed = 0;
    int hidden_layers = 4;   // four hidden layers of 256 units
    int hidden_width = 256;
    double omega_first = 30.0;
    double omega_hidden = 30.0;
    std::vector<int> c1_channels{32, 64, 64};
    double w_min = 0.1;        // frequency-weight floor at DC
    double mu = 1.0;           // measured-fidelity term weight
    bool squared_norms = false;  // squared-norm loss variant
    bool supervise_dc_input = false;  // regress toward x~0 instead of ground truth
    bool post_projection = true;      // re-apply data consistency after the residual

    void validate() const {
        require(num_freqs >= 1 && hidden_layers >= 1 && hidden_width >= 1,
                "IdrConfig: positive dims required");
        require(!c1_channels.empty(), "IdrConfig: c1_channels empty");
        require(w_min >= 0.0 && w_min < 1.0, "IdrConfig: w_min must be in [0, 1)");
        require(mu >= 0.0, "IdrConfig: mu must be >= 0");
    }

    static IdrConfig tiny() {
        IdrConfig c;
        c.num_freqs = 24;
        c.b_scale = 8.0;
        c.hidden_layers = 3;
        c.hidden_width = 96;
        c.c1_channels = {12, 24, 24};
        return c;
    }
};

// Residual coordinate network: r(x, y) = f2([gamma(x, y); c1(x, y)]) where c1
// comes from the slice encoder evaluated on the data-consistent input. The
// residual is evaluated at every pixel center, so feature lookup is exact
// grid indexing.
class IdrModel {
public:
    IdrConfig cfg;
    FrequencyEncoding enc;
    SliceEncoder encoder;
    SirenMLP f2;

    IdrModel() = default;
    IdrModel(const IdrConfig& cfg_, Rng& rng) : cfg(cfg_) {
        cfg.validate();
        enc = FrequencyEncoding(cfg.num_freqs, 2, cfg.b_scale, cfg.b_seed);
        encoder = SliceEncoder("idr.enc", 1, cfg.c1_channels, rng);
        std::vector<int> widths;
        widths.push_back(enc.out_dim() + encoder.out_channels());
        for (int i = 0; i < cfg.hidden_layers; ++i) widths.push_back(cfg.hidden_width);
        widths.push_back(1);
        f2 = SirenMLP("idr.f2", widths, cfg.omega_first, cfg.omega_hidden, rng);
    }

    void params(nn::ParamList& out) {
        encoder.params(out);
        f2.params(out);
    }

    // gamma over the pixel-center grid, cached per shape (B is frozen).
    const nn::Mat& gamma_grid(int h, int w) const {
        std::lock_guard<std::mutex> lock(grid_state_->mtx);
        auto& g = grid_state_->grids[{h, w}];
        if (g.size() == 0) {
            nn::Mat coords(2, static_cast<Eigen::Index>(h) * w);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const Eigen::Index p = static_cast<Eigen::Index>(y) * w + x;
                    coords(0, p) = w == 1 ? 0.0 : -1.0 + 2.0 * x / (w - 1);
                    coords(1, p) = h == 1 ? 0.0 : -1.0 + 2.0 * y / (h - 1);
                }
            g = enc.encode(coords);
        }
        return g;
    }

    struct Cache {
        SliceEncoder::Cache enc;
        SirenMLP::Cache mlp;
        int h = 0, w = 0;
    };

    RSlice residual(const RSlice& cond_image, Cache* cache = nullptr) const {
        const int h = static_cast<int>(cond_image.rows()), w = static_cast<int>(cond_image.cols());
        const nn::FeatureMap c1 = encoder.forward(cond_image, cache ? &cache->enc : nullptr);
        const nn::Mat& gamma = gamma_grid(h, w);
        nn::Mat in(gamma.rows() + c1.channels, gamma.cols());
        in.topRows(gamma.rows()) = gamma;
        in.bottomRows(c1.channels) = c1.data;
        const nn::Mat out = f2.forward(in, cache ? &cache->mlp : nullptr);
        RSlice r(h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) r(y, x) = out(0, static_cast<Eigen::Index>(y) * w + x);
        return r;
    }

    void residual_backward(const RSlice& dres, Cache& cache) {
        const int h = static_cast<int>(dres.rows()), w = static_cast<int>(dres.cols());
        nn::Mat dout(1, static_cast<Eigen::Index>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) dout(0, static_cast<Eigen::Index>(y) * w + x) = dres(y, x);
        const nn::Mat din = f2.backward(dout, cache.mlp);
        nn::FeatureMap dc1(encoder.out_channels(), h, w);
        dc1.data = din.bottomRows(encoder.out_channels());
        encoder.backward(dc1, cache.enc);
    }

private:
    struct GridState {
        std::mutex mtx;
        std::map<std::pair<int, int>, nn::Mat> grids;
    };
    std::shared_ptr<GridState> grid_state_ = std::make_shared<GridState>();
};

// ---------------------------------------------------------------------------
// Refinement output. x_idr is definitionally x_tilde0 + r; x_out additionally
// re-applies data consistency when post-projection mode is on (then measured
// frequencies of x_out match b exactly and the learned residual lives in the
// unmeasured subspace).

struct IdrOutput {
    CSlice x_tilde0;
    RSlice r;
    CSlice x_idr;  // x_tilde0 + r, bit for bit
    CSlice x_out;  // final slice estimate (== x_idr unless post-projected)
    bool post_projected = false;
};

inline IdrOutput idr_refine(const CSlice& x_mad, const CSlice& b, const SamplingMask& mask,
                            const IdrModel& model, IdrModel::Cache* cache = nullptr) {
    IdrOutput out;
    out.x_tilde0 = data_consistency(x_mad, b, mask);
    out.r = model.residual(out.x_tilde0.real(), cache);
    out.x_idr = out.x_tilde0 + out.r.cast<std::complex<double>>();
    out.post_projected = model.cfg.post_projection;
    out.x_out = out.post_projected ? data_consistency(out.x_idr, b, mask) : out.x_idr;
    return out;
}

// ---------------------------------------------------------------------------
// Dual-domain loss: image term toward the target, radially weighted spectral
// term toward the target spectrum, and a measured-data fidelity term.
// Unsquared L2 norms by default; all inputs expected on the [0,1] scale.

struct IdrLossBreakdown {
    double image = 0.0, freq = 0.0, fidelity = 0.0;
    double total() const { return image + freq + fidelity; }
};

inline IdrLossBreakdown idr_loss(const CSlice& x_idr, const CSlice& target, const CSlice& b,
                                 const SamplingMask& mask, const RSlice& w, const IdrConfig& cfg,
                                 RSlice* dloss_dr = nullptr) {
    require(x_idr.rows() == target.rows() && x_idr.cols() == target.cols(),
            "idr_loss: prediction and target shapes differ");
    require(w.rows() == x_idr.rows() && w.cols() == x_idr.cols(),
            "idr_loss: weight mask shape mismatch");
    require(b.rows() == x_idr.rows() && b.cols() == x_idr.cols(),
            "idr_loss: measurement shape mismatch");

    const CSlice u = x_idr - target;
    const CSlice kx = fft2c(x_idr);
    const CSlice v = w.cast<std::complex<double>>() * (kx - fft2c(target));
    const CSlice q = mask.complex() * kx - b;

    const double nu = std::sqrt(u.abs2().sum());
    const double nv = std::sqrt(v.abs2().sum());
    const double nq = std::sqrt(q.abs2().sum());

    IdrLossBreakdown out;
    if (cfg.squared_norms) {
        out.image = nu * nu;
        out.freq = nv * nv;
        out.fidelity = cfg.mu * nq * nq;
    } else {
        out.image = nu;
        out.freq = nv;
        out.fidelity = cfg.mu * nq;
    }

    if (dloss_dr) {
        // gradient w.r.t. a real perturbation of x_idr
        CSlice g = CSlice::Zero(x_idr.rows(), x_idr.cols());
        if (cfg.squared_norms) {
            g += 2.0 * u;
            g += 2.0 * ifft2c(w.cast<std::complex<double>>() * v);
            g += 2.0 * cfg.mu * ifft2c(mask.complex() * q);
        } else {
            if (nu > 0.0) g += u / nu;
            if (nv > 0.0) g += ifft2c(w.cast<std::complex<double>>() * v) / nv;
            if (nq > 0.0) g += cfg.mu * ifft2c(mask.complex() * q) / nq;
        }
        *dloss_dr = g.real();
    }
    return out;
}

// Projects a gradient onto the unmeasured-frequency subspace; the adjoint of
// the post-projection step (an orthogonal projection, hence self-adjoint).
inline RSlice project_unmeasured(const RSlice& g, const SamplingMask& mask) {
    const CSlice one = CSlice::Constant(g.rows(), g.cols(), 1.0);
    return ifft2c((one - mask.complex()) * fft2c(g.cast<std::complex<double>>())).real();
}

// ---------------------------------------------------------------------------
// One supervised refinement step; shared by pretraining and the pipeline.

struct IdrTrainState {
    IdrModel model;
    nn::Adam opt;
    nn::ParamList params;

    IdrTrainState() = default;
    IdrTrainState(const IdrConfig& cfg, std::uint64_t seed, double lr, double weight_decay,
                  double clip)
        : opt(lr, weight_decay, clip) {
        Rng rng(derive_seed(seed, 0x1D2));
        model = IdrModel(cfg, rng);
        model.params(params);
    }

    double step(const CSlice& x_mad, const CSlice& b, const SamplingMask& mask,
                const CSlice& target, const RSlice& w) {
        IdrModel::Cache cache;
        const IdrOutput out = idr_refine(x_mad, b, mask, model, &cache);
        RSlice dr;
        const IdrLossBreakdown loss = idr_loss(out.x_out, target, b, mask, w, model.cfg, &dr);
        if (out.post_projected) dr = project_unmeasured(dr, mask);
        opt.zero_grad(params);
        model.residual_backward(dr, cache);
        opt.step(params);
        return loss.total();
    }
};

// ---------------------------------------------------------------------------
// Mask-randomized pretraining: every step draws a fresh (kind, af, seed)
// triple and refines the zero-filled reconstruction of a random training
// slice toward its ground truth. Exposes the network to the full family of
// aliasing patterns before fine-tuning on the target mask.

struct PretrainData {
    std::vector<RSlice> gt_slices;  // normalized ground-truth slices
    double center_fraction = 0.08;
    double noise_std = 0.0;
};

inline void pretrain_random_masks(IdrTrainState& state, const PretrainData& data,
                                  const std::vector<MaskKind>& mask_kinds,
                                  const std::vector<double>& afs, int steps, std::uint64_t seed,
                                  std::vector<double>* losses = nullptr) {
    require(!mask_kinds.empty(), "pretrain_random_masks: empty mask kind set");
    require(!afs.empty(), "pretrain_random_masks: empty acceleration set");
    require(!data.gt_slices.empty(), "pretrain_random_masks: no training slices");
    Rng rng(derive_seed(seed, 0x93A5));
    for (int it = 0; it < steps; ++it) {
        const MaskKind kind = mask_kinds[rng.below(mask_kinds.size())];
        const double af = afs[rng.below(afs.size())];
        const std::uint64_t mask_seed = rng.raw();
        const RSlice& gt = data.gt_slices[rng.below(data.gt_slices.size())];
        const SamplingMask mask =
            make_mask(kind, static_cast<int>(gt.rows()), static_cast<int>(gt.cols()), af,
                      data.center_fraction, mask_seed);
        CSlice k = fft2c(gt.cast<std::complex<double>>());
        if (data.noise_std > 0.0) {
            Rng nrng(derive_seed(seed, 0xA01E, it));
            const double cs = data.noise_std / std::sqrt(2.0);
            for (Eigen::Index i = 0; i < k.size(); ++i)
                k.data()[i] += std::complex<double>(cs * nrng.normal(), cs * nrng.normal());
        }
        const CSlice b = undersample(k, mask);
        const CSlice zf = zero_filled(b);
        const RSlice w = frequency_weight_mask(static_cast<int>(gt.rows()),
                                               static_cast<int>(gt.cols()), state.model.cfg.w_min);
        const double loss =
            state.step(zf, b, mask, gt.cast<std::complex<double>>(), w);
        if (losses) losses->push_back(loss);
    }
}

// ---------------------------------------------------------------------------
// Empirical per-pixel variance across sampler seeds. Outputs are reduced in
// seed order, so results do not depend on scheduling.

struct VarianceReport {
    RSlice var_map;               // unbiased per-pixel variance of |output|
    double mean_var = 0.0;        // spatial mean of var_map
    double measured_freq_var = 0.0;  // variance restricted to measured k-space
    int num_seeds = 0;
};

inline VarianceReport empirical_variance(
    const std::function<CSlice(const CSlice& y, std::uint64_t seed)>& reconstruct_fn,
    const CSlice& y, const SamplingMask& mask, int num_seeds) {
    require(num_seeds >= 2, "empirical_variance: need at least 2 seeds");
    std::vector<CSlice> outs(num_seeds);
    parallel_for(num_seeds, [&](std::size_t s) {
        outs[s] = reconstruct_fn(y, static_cast<std::uint64_t>(s));
    });

    const Eigen::Index ny = y.rows(), nx = y.cols();
    RSlice mean = RSlice::Zero(ny, nx), m2 = RSlice::Zero(ny, nx);
    CSlice kmean = CSlice::Zero(ny, nx);
    RSlice km2 = RSlice::Zero(ny, nx);
    for (int s = 0; s < num_seeds; ++s) {
        const RSlice mag = outs[s].abs();
        const RSlice delta = mag - mean;
        mean += delta / (s + 1);
        m2 += delta * (mag - mean);

        const CSlice k = fft2c(outs[s]);
        const CSlice kdelta = k - kmean;
        kmean += kdelta / (s + 1);
        km2 += (kdelta * (k - kmean).conjugate()).real();
    }
    VarianceReport rep;
    rep.num_seeds = num_seeds;
    rep.var_map = m2 / (num_seeds - 1);
    rep.mean_var = rep.var_map.mean();
    double acc = 0.0;
    int cnt = 0;
    for (Eigen::Index j = 0; j < ny; ++j)
        for (Eigen::Index i = 0; i < nx; ++i)
            if (mask.pattern(j, i)) {
                acc += km2(j, i) / (num_seeds - 1);
                ++cnt;
            }
    rep.measured_freq_var = cnt > 0 ? acc / cnt : 0.0;
    return rep;
}

inline void write_variance_report(const std::filesystem::path& path, double mean_var_mad,
                                  double mean_var_idr, int num_seeds,
                                  double measured_freq_var) {
    nlohmann::json j;
    j["mean_var_mad"] = mean_var_mad;
    j["mean_var_idr"] = mean_var_idr;
    j["ratio"] = mean_var_mad > 0.0 ? mean_var_idr / mean_var_mad : 0.0;
    j["num_seeds"] = num_seeds;
    j["measured_freq_var"] = measured_freq_var;
    write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace prinr
