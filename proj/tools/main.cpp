// prinr: motion-robust anisotropic MRI reconstruction toolkit.
//
// Subcommands cover the full experiment cycle: phantom generation, simulated
// motion-corrupted undersampled acquisition, training, reconstruction,
// evaluation, the sampler-variance lab and the spectral-blend sweep.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "prinr/config.hpp"
#include "prinr/io_plot.hpp"
#include "prinr/metrics.hpp"

namespace fs = std::filesystem;
using namespace prinr;

namespace {

constexpr const char* kExitCodeHelp =
    "Exit codes: 0 success, 2 validation error (bad flags, schema violations, "
    "shape mismatches), 3 integrity error (corrupt or inconsistent files), "
    "4 numeric abort (non-finite training loss).";

void emit_error(const std::string& type, const std::string& message) {
    nlohmann::json j;
    j["error"] = {{"type", type}, {"message", message}};
    std::cerr << j.dump() << "\n";
}

std::vector<RigidMotionTrace> load_traces(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("traces: " + std::string(e.what()), e.byte);
    }
    if (!j.is_array() || j.empty()) throw IntegrityError("traces: expected a non-empty array");
    std::vector<RigidMotionTrace> out;
    for (const auto& t : j) out.push_back(trace_from_json(t));
    return out;
}

int cmd_phantom(const std::string& spec_path, std::vector<int> shape, std::uint64_t seed,
                double texture_amp, const std::string& out) {
    PhantomSpec spec;
    if (!spec_path.empty()) {
        const auto bytes = read_file_bytes(spec_path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(bytes.begin(), bytes.end());
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("phantom spec: " + std::string(e.what()), e.byte);
        }
        detail::reject_unknown_keys(
            j, {"shape", "spacing_mm", "texture_amp", "seed", "ellipsoids"}, "phantom spec");
        if (j.contains("shape")) {
            const auto& s = j.at("shape");
            spec.shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
        }
        if (j.contains("spacing_mm")) {
            const auto& s = j.at("spacing_mm");
            spec.spacing = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
        }
        spec.texture_amp = detail::get_or(j, "texture_amp", 0.15);
        spec.seed = detail::get_or<std::uint64_t>(j, "seed", seed);
        if (j.contains("ellipsoids")) {
            for (const auto& e : j.at("ellipsoids")) {
                detail::reject_unknown_keys(e, {"center", "semi", "rot_deg", "intensity"},
                                            "ellipsoid");
                Ellipsoid el;
                for (int i = 0; i < 3; ++i) {
                    el.center[i] = e.at("center").at(i).get<double>();
                    el.semi[i] = e.at("semi").at(i).get<double>();
                }
                el.rot_deg = detail::get_or(e, "rot_deg", 0.0);
                el.intensity = e.at("intensity").get<double>();
                spec.ellipsoids.push_back(el);
            }
        } else {
            spec.ellipsoids = default_phantom_spec(spec.shape, spec.seed, spec.texture_amp)
                                  .ellipsoids;
        }
    } else {
        spec = default_phantom_spec({shape[0], shape[1], shape[2]}, seed, texture_amp);
    }
    const ComplexVolume v = make_phantom(spec);
    save_volume(v, out);
    std::printf("phantom: wrote %dx%dx%d volume to %s\n", v.nz(), v.ny(), v.nx(), out.c_str());
    return 0;
}

int cmd_simulate(const std::string& volume_path, const std::string& kind, double af,
                 double center_fraction, double max_disp, double max_rot, int burst_lines,
                 double noise_std, std::uint64_t seed, const std::string& out) {
    const ComplexVolume gt = load_volume(volume_path);
    const MaskKind mk = mask_kind_from_name(kind);
    const SamplingMask mask =
        make_mask(mk, gt.ny(), gt.nx(), af, center_fraction, derive_seed(seed, 0x3A5C));

    ComplexVolume kvol = make_volume(gt.nz(), gt.ny(), gt.nx(), gt.spacing);
    ComplexVolume zfvol = make_volume(gt.nz(), gt.ny(), gt.nx(), gt.spacing);
    nlohmann::json traces = nlohmann::json::array();
    for (int z = 0; z < gt.nz(); ++z) {
        const RigidMotionTrace trace =
            make_motion_trace(gt.ny(), max_disp, max_rot, derive_seed(seed, z), burst_lines);
        Rng noise_rng(derive_seed(seed, z, 0xA0));
        const CSlice k = simulate_motion_acquisition(gt.slice(z), trace, noise_std, noise_rng);
        const CSlice b = undersample(k, mask);
        kvol.set_slice(z, b);
        zfvol.set_slice(z, zero_filled(b));
        traces.push_back(trace_to_json(trace));
    }
    kvol.meta["content"] = "masked_kspace";
    zfvol.meta["content"] = "zero_filled";

    fs::create_directories(out);
    save_volume(kvol, fs::path(out) / "kspace");
    save_volume(zfvol, fs::path(out) / "zero_filled");
    save_mask(mask, fs::path(out) / "mask");
    write_file_atomic(fs::path(out) / "traces.json", traces.dump(2) + "\n");
    std::printf("simulate: af=%.1f sampled_fraction=%.4f -> %s\n", af, mask.sampled_fraction(),
                out.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_ckpt,
              const std::string& log_path, long long seed_override, int max_epochs_override) {
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    if (seed_override >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed_override);
    if (max_epochs_override >= 0) cfg.train.max_epochs = max_epochs_override;

    TrainResult result = train(cfg.dataset, cfg.train);
    save_checkpoint(out_ckpt, result.model);
    if (!log_path.empty()) write_epoch_log(log_path, result.log);
    if (result.aborted) {
        emit_error("numeric", "training aborted (" + result.abort_reason +
                                  "); last stable checkpoint written to " + out_ckpt);
        return 4;
    }
    std::printf("train: %zu epochs, final val_psnr=%.3f dB, checkpoint -> %s\n",
                result.log.size(), result.model.val_psnr, out_ckpt.c_str());
    return 0;
}

int cmd_reconstruct(const std::string& ckpt, const std::string& kspace_path,
                    const std::string& mask_path, const std::string& trace_path, double rho,
                    int ddim_steps, double eta, int scale, std::uint64_t seed,
                    int vcr_fit_iters, bool no_mad, bool no_idr, bool no_vcr,
                    const std::string& out) {
    PipelineModel model = load_checkpoint(ckpt);
    const ComplexVolume kvol = load_volume(kspace_path);
    const SamplingMask mask = load_mask(mask_path);

    ReconstructOptions opt;
    opt.rho = rho;
    opt.ddim_steps = ddim_steps;
    opt.eta = eta;
    opt.scale = scale;
    opt.seed = seed;
    opt.vcr_fit_iters = vcr_fit_iters;
    opt.enable_mad = !no_mad;
    opt.enable_idr = !no_idr;
    opt.enable_vcr = !no_vcr;
    std::vector<RigidMotionTrace> traces;
    if (!trace_path.empty()) {
        traces = load_traces(trace_path);
        opt.traces = &traces;
    }

    const ReconstructResult res = reconstruct(kvol, mask, model, opt);
    fs::create_directories(out);
    save_volume(res.final, fs::path(out) / "final");
    save_volume(res.x_mad, fs::path(out) / "x_mad");
    save_volume(res.x_tilde0, fs::path(out) / "x_tilde0");
    save_volume(res.x_idr, fs::path(out) / "x_idr");
    if (scale > 1 && opt.enable_vcr && res.field.has_value()) {
        const SmoothnessAudit audit =
            axial_smoothness_audit(*res.field, 1000, kvol.spacing[2] / 2.0, seed);
        nlohmann::json j;
        j["per_slice_mse"] = res.vcr_report.per_slice_mse;
        j["estimated_C"] = audit.estimated_C;
        j["probe_count"] = 1000;
        j["scale"] = scale;
        j["psnr_vs_baselines"] = nullptr;  // needs dense ground truth; see evaluate
        write_file_atomic(fs::path(out) / "vcr_report.json", j.dump(2) + "\n");
    }
    std::printf("reconstruct: wrote final + stage intermediates to %s\n", out.c_str());
    return 0;
}

int cmd_evaluate(const std::string& recon_path, const std::string& gt_path,
                 const std::string& condition, const std::string& out) {
    const ComplexVolume recon = load_volume(recon_path);
    const ComplexVolume gt = load_volume(gt_path);
    require(recon.shape == gt.shape,
            "evaluate: reconstruction and ground-truth shapes differ");
    const SliceMetrics m = volume_metrics(recon, gt);
    fs::create_directories(out);
    write_eval_report(out, condition, m);

    // per-slice error maps on the ground-truth normalization
    double lo = 1e300, hi = -1e300;
    for (const auto& c : gt.data) {
        lo = std::min(lo, static_cast<double>(std::abs(std::complex<double>(c))));
        hi = std::max(hi, static_cast<double>(std::abs(std::complex<double>(c))));
    }
    const double inv = hi > lo ? 1.0 / (hi - lo) : 1.0;
    for (int z = 0; z < gt.nz(); ++z) {
        char name[64];
        std::snprintf(name, sizeof name, "error_%03d.png", z);
        const RSlice a = ((magnitude_slice(recon, z) - lo) * inv).eval();
        const RSlice b = ((magnitude_slice(gt, z) - lo) * inv).eval();
        error_map(a, b, fs::path(out) / name);
    }
    std::printf("evaluate[%s]: psnr=%.3f(%.3f) ssim=%.4f(%.4f) ncc=%.4f(%.4f)\n",
                condition.c_str(), m.psnr_mean, m.psnr_std, m.ssim_mean, m.ssim_std, m.ncc_mean,
                m.ncc_std);
    return 0;
}

int cmd_variance_lab(const std::string& ckpt, const std::string& kspace_path,
                     const std::string& mask_path, int num_seeds, int slice_index, int ddim_steps,
                     double eta, const std::string& out) {
    PipelineModel model = load_checkpoint(ckpt);
    const ComplexVolume kvol = load_volume(kspace_path);
    const SamplingMask mask = load_mask(mask_path);
    const int z = slice_index >= 0 ? slice_index : kvol.nz() / 2;
    require(z >= 0 && z < kvol.nz(), "variance-lab: slice index out of range");

    const CSlice b = kvol.slice(z);
    const CSlice zf = zero_filled(b);
    double s = zf.abs().maxCoeff();
    if (s <= 0.0) s = 1.0;
    const CSlice bn = b / s;
    MadConditioning cond;
    cond.corrupted_image = zf.abs() / s;

    auto mad_fn = [&](const CSlice&, std::uint64_t seed) {
        const RSlice x = sample(model.denoiser.as_fn(), cond, model.schedule, ddim_steps, eta,
                                derive_seed(seed, 0xAB));
        return x.cast<std::complex<double>>().eval();
    };
    auto idr_fn = [&](const CSlice& y, std::uint64_t seed) {
        const RSlice x = sample(model.denoiser.as_fn(), cond, model.schedule, ddim_steps, eta,
                                derive_seed(seed, 0xAB));
        return idr_refine(x.cast<std::complex<double>>(), y, mask, model.idr).x_out;
    };
    const VarianceReport mad_rep = empirical_variance(mad_fn, bn, mask, num_seeds);
    const VarianceReport idr_rep = empirical_variance(idr_fn, bn, mask, num_seeds);

    fs::create_directories(out);
    write_variance_report(fs::path(out) / "variance_report.json", mad_rep.mean_var,
                          idr_rep.mean_var, num_seeds, idr_rep.measured_freq_var);
    std::printf("variance-lab: var(mad)=%.3e var(idr)=%.3e ratio=%.3f measured=%.3e\n",
                mad_rep.mean_var, idr_rep.mean_var,
                mad_rep.mean_var > 0 ? idr_rep.mean_var / mad_rep.mean_var : 0.0,
                idr_rep.measured_freq_var);
    return 0;
}

int cmd_rho_sweep(const std::string& ckpt, const std::string& kspace_path,
                  const std::string& mask_path, const std::string& gt_path,
                  std::vector<double> rhos, int ddim_steps, std::uint64_t seed,
                  const std::string& out) {
    require(!rhos.empty(), "rho-sweep: need at least one rho value");
    PipelineModel model = load_checkpoint(ckpt);
    const ComplexVolume kvol = load_volume(kspace_path);
    const SamplingMask mask = load_mask(mask_path);
    const ComplexVolume gt = load_volume(gt_path);

    fs::create_directories(out);
    std::string csv = "rho,psnr,ssim\n";
    std::vector<double> psnrs;
    for (double rho : rhos) {
        ReconstructOptions opt;
        opt.rho = rho;
        opt.ddim_steps = ddim_steps;
        opt.seed = seed;
        const ReconstructResult res = reconstruct(kvol, mask, model, opt);
        const SliceMetrics m = volume_metrics(res.final, gt);
        char row[128];
        std::snprintf(row, sizeof row, "%.4f,%.6f,%.6f\n", rho, m.psnr_mean, m.ssim_mean);
        csv += row;
        psnrs.push_back(m.psnr_mean);
        std::printf("rho=%.3f psnr=%.3f ssim=%.4f\n", rho, m.psnr_mean, m.ssim_mean);
    }
    write_file_atomic(fs::path(out) / "rho_sweep.csv", csv);
    if (rhos.size() >= 2) write_line_plot(fs::path(out) / "rho_sweep.png", rhos, psnrs);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string("prinr: progressive-refinement MRI reconstruction toolkit.\n") +
                 kExitCodeHelp};
    app.require_subcommand(1);

    // phantom
    std::string p_spec, p_out;
    std::vector<int> p_shape{16, 64, 64};
    std::uint64_t p_seed = 0;
    double p_texture = 0.15;
    auto* sc_phantom = app.add_subcommand("phantom", "Generate a deterministic test volume");
    sc_phantom->add_option("--spec", p_spec, "Phantom spec JSON file");
    sc_phantom->add_option("--shape", p_shape, "Nz Ny Nx")->expected(3);
    sc_phantom->add_option("--seed", p_seed, "Family seed");
    sc_phantom->add_option("--texture-amp", p_texture, "Texture amplitude");
    sc_phantom->add_option("--out", p_out, "Output volume directory")->required();

    // simulate
    std::string s_volume, s_kind = "gauss1d", s_out;
    double s_af = 4.0, s_cf = 0.08, s_disp = 0.03, s_rot = 5.0, s_noise = 0.0;
    int s_burst = 0;
    std::uint64_t s_seed = 0;
    auto* sc_sim = app.add_subcommand("simulate",
                                      "Simulate motion-corrupted undersampled acquisition");
    sc_sim->add_option("--volume", s_volume, "Ground-truth volume directory")->required();
    sc_sim->add_option("--mask-kind", s_kind, "gauss1d|gauss2d|radial|spiral|full");
    sc_sim->add_option("--af", s_af, "Acceleration factor");
    sc_sim->add_option("--center-fraction", s_cf, "Fully sampled central fraction");
    sc_sim->add_option("--motion-max-disp", s_disp, "Max displacement (FOV fraction)");
    sc_sim->add_option("--motion-max-rot", s_rot, "Max rotation (degrees)");
    sc_sim->add_option("--burst-lines", s_burst, "Motion burst length (0 = per line)");
    sc_sim->add_option("--noise-std", s_noise, "k-space complex noise std");
    sc_sim->add_option("--seed", s_seed, "Simulation seed");
    sc_sim->add_option("--out", s_out, "Output directory")->required();

    // train
    std::string t_config, t_ckpt, t_log;
    long long t_seed = -1;
    int t_max_epochs = -1;
    auto* sc_train = app.add_subcommand("train", "Train the three-stage pipeline");
    sc_train->add_option("--config", t_config, "Experiment config JSON")->required();
    sc_train->add_option("--out-ckpt", t_ckpt, "Checkpoint output path")->required();
    sc_train->add_option("--log", t_log, "Epoch log CSV path");
    sc_train->add_option("--seed", t_seed, "Override the config seed");
    sc_train->add_option("--max-epochs", t_max_epochs, "Override the epoch budget");

    // reconstruct
    std::string r_ckpt, r_kspace, r_mask, r_trace, r_out;
    double r_rho = 1.0, r_eta = 0.0;
    int r_ddim = 25, r_scale = 1, r_vcr_iters = -1;
    std::uint64_t r_seed = 0;
    bool r_no_mad = false, r_no_idr = false, r_no_vcr = false;
    auto* sc_recon = app.add_subcommand("reconstruct", "Run the inference pipeline");
    sc_recon->add_option("--ckpt", r_ckpt, "Checkpoint path")->required();
    sc_recon->add_option("--kspace", r_kspace, "Masked k-space volume directory")->required();
    sc_recon->add_option("--mask", r_mask, "Mask directory")->required();
    sc_recon->add_option("--trace", r_trace, "Motion traces JSON (for conditioning hints)");
    sc_recon->add_option("--rho", r_rho, "Spectral blend (0 diffusion .. 1 refined)");
    sc_recon->add_option("--ddim-steps", r_ddim, "Reverse diffusion steps");
    sc_recon->add_option("--eta", r_eta, "DDIM stochasticity");
    sc_recon->add_option("--scale", r_scale, "z upsampling factor");
    sc_recon->add_option("--seed", r_seed, "Sampler seed");
    sc_recon->add_option("--vcr-fit-iters", r_vcr_iters, "Field fit budget (-1 = config)");
    sc_recon->add_flag("--no-mad", r_no_mad, "Ablation: skip the diffusion stage");
    sc_recon->add_flag("--no-idr", r_no_idr, "Ablation: skip the refinement stage");
    sc_recon->add_flag("--no-vcr", r_no_vcr, "Ablation: skip the volumetric stage");
    sc_recon->add_option("--out", r_out, "Output directory")->required();

    // evaluate
    std::string e_recon, e_gt, e_out, e_cond = "default";
    auto* sc_eval = app.add_subcommand("evaluate", "Metrics and error maps vs ground truth");
    sc_eval->add_option("--recon", e_recon, "Reconstruction volume directory")->required();
    sc_eval->add_option("--gt", e_gt, "Ground-truth volume directory")->required();
    sc_eval->add_option("--condition", e_cond, "Condition label for the report");
    sc_eval->add_option("--out", e_out, "Report directory")->required();

    // variance-lab
    std::string v_ckpt, v_kspace, v_mask, v_out;
    int v_seeds = 8, v_slice = -1, v_ddim = 15;
    double v_eta = 1.0;
    auto* sc_var = app.add_subcommand("variance-lab",
                                      "Sampler-seed variance of MAD vs refined outputs");
    sc_var->add_option("--ckpt", v_ckpt, "Checkpoint path")->required();
    sc_var->add_option("--kspace", v_kspace, "Masked k-space volume directory")->required();
    sc_var->add_option("--mask", v_mask, "Mask directory")->required();
    sc_var->add_option("--seeds", v_seeds, "Number of sampler seeds");
    sc_var->add_option("--slice", v_slice, "Slice index (-1 = middle)");
    sc_var->add_option("--ddim-steps", v_ddim, "Reverse diffusion steps");
    sc_var->add_option("--eta", v_eta, "DDIM stochasticity (needs > 0 for spread)");
    sc_var->add_option("--out", v_out, "Report directory")->required();

    // rho-sweep
    std::string h_ckpt, h_kspace, h_mask, h_gt, h_out;
    std::vector<double> h_rhos{0.0, 0.25, 0.5, 0.75, 1.0};
    int h_ddim = 25;
    std::uint64_t h_seed = 0;
    auto* sc_rho = app.add_subcommand("rho-sweep", "Blend-parameter sweep with metrics");
    sc_rho->add_option("--ckpt", h_ckpt, "Checkpoint path")->required();
    sc_rho->add_option("--kspace", h_kspace, "Masked k-space volume directory")->required();
    sc_rho->add_option("--mask", h_mask, "Mask directory")->required();
    sc_rho->add_option("--gt", h_gt, "Ground-truth volume directory")->required();
    sc_rho->add_option("--rhos", h_rhos, "Blend values to sweep")->delimiter(',');
    sc_rho->add_option("--ddim-steps", h_ddim, "Reverse diffusion steps");
    sc_rho->add_option("--seed", h_seed, "Sampler seed");
    sc_rho->add_option("--out", h_out, "Report directory")->required();

    try {
        app.parse(argc, argv);
        if (sc_phantom->parsed())
            return cmd_phantom(p_spec, p_shape, p_seed, p_texture, p_out);
        if (sc_sim->parsed())
            return cmd_simulate(s_volume, s_kind, s_af, s_cf, s_disp, s_rot, s_burst, s_noise,
                                s_seed, s_out);
        if (sc_train->parsed()) return cmd_train(t_config, t_ckpt, t_log, t_seed, t_max_epochs);
        if (sc_recon->parsed())
            return cmd_reconstruct(r_ckpt, r_kspace, r_mask, r_trace, r_rho, r_ddim, r_eta,
                                   r_scale, r_seed, r_vcr_iters, r_no_mad, r_no_idr, r_no_vcr,
                                   r_out);
        if (sc_eval->parsed()) return cmd_evaluate(e_recon, e_gt, e_cond, e_out);
        if (sc_var->parsed())
            return cmd_variance_lab(v_ckpt, v_kspace, v_mask, v_seeds, v_slice, v_ddim, v_eta,
                                    v_out);
        if (sc_rho->parsed())
            return cmd_rho_sweep(h_ckpt, h_kspace, h_mask, h_gt, h_rhos, h_ddim, h_seed, h_out);
        return 0;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        emit_error("validation", e.what());
        return 2;
    } catch (const ValidationError& e) {
        emit_error("validation", e.what());
        return 2;
    } catch (const ParseError& e) {
        emit_error("integrity", e.what());
        return 3;
    } catch (const IntegrityError& e) {
        emit_error("integrity", e.what());
        return 3;
    } catch (const IoError& e) {
        emit_error("integrity", e.what());
        return 3;
    } catch (const NumericError& e) {
        emit_error("numeric", e.what());
        return 4;
    } catch (const std::exception& e) {
        emit_error("internal", e.what());
        return 1;
    }
}
