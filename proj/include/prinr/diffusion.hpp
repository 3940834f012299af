#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "prinr/errors.hpp"
#include "prinr/fft.hpp"
#include "prinr/kspace.hpp"
#include "prinr/rng.hpp"

namespace prinr {

// ---------------------------------------------------------------------------
// Noise schedule: linear betas, alpha_bar_t = prod_{s<=t} (1 - beta_s) with
// alpha_bar_0 == 1.

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;       // size T, betas[s-1] = beta_s
    std::vector<double> alpha_bars;  // size T+1, alpha_bars[0] = 1

    double alpha_bar(int t) const {
        require(t >= 0 && t <= T, "schedule: t out of range");
        return alpha_bars[static_cast<std::size_t>(t)];
    }
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    require(T >= 1, "make_schedule: T must be >= 1");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alpha_bars.resize(T + 1);
    s.alpha_bars[0] = 1.0;
    for (int i = 0; i < T; ++i) {
        s.betas[i] = T == 1 ? beta_start
                            : beta_start + (beta_end - beta_start) * i / (T - 1.0);
        s.alpha_bars[i + 1] = s.alpha_bars[i] * (1.0 - s.betas[i]);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Conditioning bundle for the motion-aware denoiser.

struct MadConditioning {
    RSlice corrupted_image;        // motion-corrupted zero-filled input
    Eigen::VectorXd motion_hint;   // flattened trace summary; empty = blind mode
};

// Summary of a rigid trace for conditioning: global mean displacement
// magnitude and rotation, then per-band (4 bands along the phase axis) means.
inline Eigen::VectorXd motion_summary(const RigidMotionTrace& trace) {
    const int n = static_cast<int>(trace.lines.size());
    Eigen::VectorXd f = Eigen::VectorXd::Zero(10);
    if (n == 0) return f;
    const int bands = 4;
    Eigen::VectorXd band_disp = Eigen::VectorXd::Zero(bands);
    Eigen::VectorXd band_rot = Eigen::VectorXd::Zero(bands);
    Eigen::VectorXd band_cnt = Eigen::VectorXd::Zero(bands);
    for (int j = 0; j < n; ++j) {
        const auto& l = trace.lines[j];
        const double disp = std::hypot(l.dx_frac, l.dy_frac);
        const double rot = std::abs(l.theta_deg) / 180.0;
        f(0) += disp;
        f(1) += rot;
        const int b = std::min(bands - 1, j * bands / n);
        band_disp(b) += disp;
        band_rot(b) += rot;
        band_cnt(b) += 1.0;
    }
    f(0) /= n;
    f(1) /= n;
    for (int b = 0; b < bands; ++b) {
        f(2 + b) = band_cnt(b) > 0 ? band_disp(b) / band_cnt(b) : 0.0;
        f(6 + b) = band_cnt(b) > 0 ? band_rot(b) / band_cnt(b) : 0.0;
    }
    return f;
}

// Denoiser contract: predict the noise residual from (x_t, t, conditioning).
using DenoiserFn = std::function<RSlice(const RSlice& x_t, int t, const MadConditioning& cond)>;

// ---------------------------------------------------------------------------
// Forward / reverse process

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline RSlice forward_diffuse(const RSlice& x0, int t, const RSlice& eps,
                              const NoiseSchedule& s) {
    require(t >= 0 && t <= s.T, "forward_diffuse: t out of range");
    require(x0.rows() == eps.rows() && x0.cols() == eps.cols(),
            "forward_diffuse: x0 and eps shapes differ");
    const double ab = s.alpha_bar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

// x0 estimate from the noise prediction: (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t).
inline RSlice predict_x0(const RSlice& x_t, const RSlice& eps_hat, int t,
                         const NoiseSchedule& s) {
    require(t >= 1 && t <= s.T, "predict_x0: t must be in [1, T]");
    const double ab = s.alpha_bar(t);
    if (ab <= 0.0) throw NumericError("predict_x0: alpha_bar(t) vanished");
    return (x_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

// One reverse step:
// x_{t_prev} = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - sigma^2) eps_hat + sigma z.
inline RSlice ddim_step(const RSlice& x_t, const RSlice& eps_hat, int t, int t_prev,
                        double sigma_t, const RSlice& z, const NoiseSchedule& s) {
    require(t_prev < t, "ddim_step: t_prev must be < t");
    require(t_prev >= 0, "ddim_step: t_prev must be >= 0");
    const double ab_prev = s.alpha_bar(t_prev);
    const double radicand = 1.0 - ab_prev - sigma_t * sigma_t;
    if (radicand < -1e-12)
        throw ValidationError("ddim_step: sigma_t^2 exceeds 1 - alpha_bar(t_prev)");
    const RSlice x0 = predict_x0(x_t, eps_hat, t, s);
    RSlice out = std::sqrt(ab_prev) * x0 + std::sqrt(std::max(0.0, radicand)) * eps_hat;
    if (sigma_t > 0.0) out += sigma_t * z;
    return out;
}

// DDIM sigma family: eta = 0 is deterministic, eta = 1 matches ancestral
// sampling variance.
inline double ddim_sigma(double eta, int t, int t_prev, const NoiseSchedule& s) {
    if (eta == 0.0) return 0.0;
    const double ab = s.alpha_bar(t), abp = s.alpha_bar(t_prev);
    return eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(1.0 - ab / abp);
}

// Uniformly strided descending timestep subsequence ending at 0.
inline std::vector<int> ddim_timesteps(int T, int num_steps) {
    require(num_steps >= 1 && num_steps <= T, "ddim_timesteps: need 1 <= num_steps <= T");
    std::vector<int> ts(num_steps);
    for (int i = 0; i < num_steps; ++i)
        ts[i] = static_cast<int>(std::llround(static_cast<double>(T) * (num_steps - i) /
                                              num_steps));
    ts.front() = T;
    for (int i = 1; i < num_steps; ++i) ts[i] = std::min(ts[i], ts[i - 1] - 1);
    for (int i = 0; i < num_steps; ++i) require(ts[i] >= 1, "ddim_timesteps: stride collapsed");
    return ts;
}

// Reverse loop from pure noise under the given conditioning. Deterministic
// for a fixed seed; eta = 0 removes the stochastic term entirely (the seed
// then only picks x_T).
inline RSlice sample(const DenoiserFn& denoiser, const MadConditioning& cond,
                     const NoiseSchedule& s, int num_steps, double eta, std::uint64_t seed) {
    require(eta >= 0.0 && eta <= 1.0, "sample: eta must be in [0, 1]");
    const Eigen::Index ny = cond.corrupted_image.rows(), nx = cond.corrupted_image.cols();
    Rng rng(derive_seed(seed, 0xD1FF));
    RSlice x(ny, nx);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();

    const std::vector<int> ts = ddim_timesteps(s.T, num_steps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        const RSlice eps_hat = denoiser(x, t, cond);
        require(eps_hat.rows() == ny && eps_hat.cols() == nx,
                "sample: denoiser output shape mismatch");
        const double sigma = ddim_sigma(eta, t, t_prev, s);
        RSlice z = RSlice::Zero(ny, nx);
        if (sigma > 0.0)
            for (Eigen::Index j = 0; j < z.size(); ++j) z.data()[j] = rng.normal();
        if (t_prev == 0) {
            x = predict_x0(x, eps_hat, t, s);
        } else {
            x = ddim_step(x, eps_hat, t, t_prev, sigma, z, s);
        }
    }
    return x;
}

// Single-sample denoising objective: draw t ~ U[1,T] and eps ~ N(0,I), return
// mean squared error between eps and the prediction.
inline double mad_loss(const DenoiserFn& denoiser, const RSlice& x0, const MadConditioning& cond,
                       const NoiseSchedule& s, Rng& rng) {
    const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T))) + 1;
    RSlice eps(x0.rows(), x0.cols());
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
    const RSlice x_t = forward_diffuse(x0, t, eps, s);
    const RSlice eps_hat = denoiser(x_t, t, cond);
    if (eps_hat.rows() != eps.rows() || eps_hat.cols() != eps.cols())
        throw ValidationError("mad_loss: denoiser output shape mismatch");
    return (eps_hat - eps).square().mean();
}

}  // namespace prinr
