#pragma once

#include <deque>
#include <optional>

#include "prinr/denoiser.hpp"
#include "prinr/idr.hpp"
#include "prinr/metrics.hpp"
#include "prinr/vcr.hpp"

namespace prinr {

// ---------------------------------------------------------------------------
// Training configuration. The first block mirrors the published recipe; the
// second block is the desk-scale schedule (volume counts, stage budgets).

struct TrainConfig {
    double lr = 2e-3;
    double lr_decay = 0.5;
    int lr_decay_every = 10;  // epochs
    int max_epochs = 100;
    int early_stop_patience = 5;  // on validation PSNR
    double dropout = 0.2;
    int batch_size = 2;
    double weight_decay = 1e-3;
    double grad_clip_norm = 1.0;
    double lambda1 = 0.5, lambda2 = 1.0, lambda3 = 0.3;
    std::uint64_t seed = 0;

    // stage schedule
    int steps_per_epoch = 60;
    int mad_warmup_epochs = 6;    // MAD-only before the joint phase
    int idr_pretrain_steps = 0;   // mask-randomized pretraining before joint
    int vcr_iters_per_epoch = 40;
    int vcr_batch = 1024;
    double idr_t_cap_frac = 0.5;  // timestep cap for the x0 estimate feeding IDR
    int ddim_steps_val = 8;       // reverse steps for validation reconstructions
    int vcr_refresh_ddim_steps = 6;
    bool freeze_mad = false;      // freeze the denoiser once the joint phase starts
    bool strict_joint = false;    // all three losses from epoch 0
    std::string profile = "tiny";  // "tiny" or "paper"

    void validate() const {
        require(lr > 0 && lr_decay > 0 && lr_decay_every > 0, "TrainConfig: bad learning rate");
        require(max_epochs >= 0 && early_stop_patience >= 1, "TrainConfig: bad epoch budget");
        require(batch_size >= 1 && steps_per_epoch >= 1, "TrainConfig: bad batch settings");
        require(dropout >= 0 && dropout < 1, "TrainConfig: dropout must be in [0, 1)");
        require(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0,
                "TrainConfig: loss weights must be >= 0");
        require(weight_decay >= 0 && grad_clip_norm >= 0, "TrainConfig: bad regularization");
        require(profile == "tiny" || profile == "paper", "TrainConfig: unknown profile");
        require(idr_t_cap_frac > 0 && idr_t_cap_frac <= 1, "TrainConfig: bad idr_t_cap_frac");
    }
};

// Weighted total objective. Non-finite components abort training by contract.
inline double total_loss(double l_mad, double l_idr, double l_vcr, const TrainConfig& cfg) {
    if (!std::isfinite(l_mad)) throw NumericError("total_loss: L_MAD is not finite");
    if (!std::isfinite(l_idr)) throw NumericError("total_loss: L_IDR is not finite");
    if (!std::isfinite(l_vcr)) throw NumericError("total_loss: L_VCR is not finite");
    return cfg.lambda1 * l_mad + cfg.lambda2 * l_idr + cfg.lambda3 * l_vcr;
}

// ---------------------------------------------------------------------------
// Dataset specification: a family of phantoms plus acquisition settings.

struct DatasetSpec {
    std::array<int, 3> shape{16, 64, 64};
    std::array<double, 3> spacing{1.0, 1.0, 4.0};
    double texture_amp = 0.15;
    int num_train_volumes = 4;
    std::uint64_t volume_seed_base = 1;
    std::uint64_t val_seed = 100;

    MaskKind mask_kind = MaskKind::Gauss1D;
    double af = 4.0;
    double center_fraction = 0.08;
    std::uint64_t mask_seed_base = 500;

    double motion_max_disp = 0.03;
    double motion_max_rot = 5.0;
    int burst_lines = 0;
    std::uint64_t motion_seed_base = 900;

    double noise_std = 0.0;  // k-space noise std in acquisition units
    bool use_motion_hint = true;

    void validate() const {
        require(num_train_volumes >= 1, "DatasetSpec: need at least one training volume");
        require(af >= 1.0, "DatasetSpec: acceleration factor must be >= 1");
        require(motion_max_disp >= 0 && motion_max_rot >= 0, "DatasetSpec: bad motion bounds");
        require(noise_std >= 0, "DatasetSpec: noise_std must be >= 0");
    }
};

// One simulated acquisition: motion-corrupted, undersampled k-space per slice
// plus everything needed for supervision. All network-facing quantities are
// on the per-volume normalized scale (max |zero-filled| maps to 1).
struct SimulatedVolume {
    ComplexVolume gt;
    SamplingMask mask;                    // one pattern for all slices
    std::vector<RigidMotionTrace> traces;
    std::vector<CSlice> b;                // normalized masked k-space
    std::vector<RSlice> zf_mag;           // normalized |zero-filled|
    std::vector<RSlice> gt_norm;          // normalized ground truth
    std::vector<Eigen::VectorXd> hints;   // per-slice motion summaries
    double scale = 1.0;
};

inline SimulatedVolume simulate_volume(const DatasetSpec& spec, std::uint64_t phantom_seed,
                                       std::uint64_t mask_seed, std::uint64_t motion_seed) {
    spec.validate();
    SimulatedVolume out;
    PhantomSpec pspec = default_phantom_spec(spec.shape, phantom_seed, spec.texture_amp);
    pspec.spacing = spec.spacing;
    out.gt = make_phantom(pspec);
    const int nz = spec.shape[0], ny = spec.shape[1], nx = spec.shape[2];
    out.mask = make_mask(spec.mask_kind, ny, nx, spec.af, spec.center_fraction, mask_seed);

    std::vector<CSlice> raw_b(nz);
    for (int z = 0; z < nz; ++z) {
        out.traces.push_back(make_motion_trace(ny, spec.motion_max_disp, spec.motion_max_rot,
                                               derive_seed(motion_seed, z), spec.burst_lines));
        Rng noise_rng(derive_seed(motion_seed, z, 0xA0));
        const CSlice k =
            simulate_motion_acquisition(out.gt.slice(z), out.traces[z], spec.noise_std, noise_rng);
        raw_b[z] = undersample(k, out.mask);
    }

    double s = 0.0;
    std::vector<CSlice> zf(nz);
    for (int z = 0; z < nz; ++z) {
        zf[z] = zero_filled(raw_b[z]);
        s = std::max(s, zf[z].abs().maxCoeff());
    }
    out.scale = s > 0.0 ? s : 1.0;
    for (int z = 0; z < nz; ++z) {
        out.b.push_back(raw_b[z] / out.scale);
        out.zf_mag.push_back(zf[z].abs() / out.scale);
        out.gt_norm.push_back(out.gt.slice(z).real() / out.scale);
        out.hints.push_back(spec.use_motion_hint ? motion_summary(out.traces[z])
                                                 : Eigen::VectorXd());
    }
    return out;
}

// ---------------------------------------------------------------------------
// The full model bundle.

struct PipelineModel {
    std::string profile = "tiny";
    DenoiserConfig den_cfg;
    IdrConfig idr_cfg;
    VcrConfig vcr_cfg;
    NoiseSchedule schedule;
    double beta_start = 1e-4, beta_end = 0.02;
    double lambda1 = 0.5, lambda2 = 1.0, lambda3 = 0.3;
    int epoch = 0;
    double val_psnr = 0.0;

    CondUnet denoiser;
    IdrModel idr;
    VcrModel vcr;

    void collect_params(nn::ParamList& den, nn::ParamList& idr_p, nn::ParamList& vcr_p) {
        denoiser.params(den);
        idr.params(idr_p);
        vcr.params(vcr_p);
    }
};

inline PipelineModel make_pipeline_model(const std::string& profile, std::uint64_t seed,
                                         int schedule_T = 1000) {
    PipelineModel m;
    m.profile = profile;
    if (profile == "tiny") {
        m.den_cfg = DenoiserConfig::tiny();
        m.idr_cfg = IdrConfig::tiny();
        m.vcr_cfg = VcrConfig::tiny();
    } else if (profile == "paper") {
        m.den_cfg = DenoiserConfig{};
        m.idr_cfg = IdrConfig{};
        m.vcr_cfg = VcrConfig{};
    } else {
        throw ValidationError("make_pipeline_model: unknown profile " + profile);
    }
    m.schedule = make_schedule(schedule_T, m.beta_start, m.beta_end);
    Rng rng_d(derive_seed(seed, 0xDE0));
    m.denoiser = CondUnet(m.den_cfg, rng_d);
    Rng rng_i(derive_seed(seed, 0x1D0));
    m.idr = IdrModel(m.idr_cfg, rng_i);
    Rng rng_v(derive_seed(seed, 0xF7C0));
    m.vcr = VcrModel(m.vcr_cfg, rng_v);
    return m;
}

// ---------------------------------------------------------------------------
// Reconstruction (Algorithm 1 inference path).

struct ReconstructOptions {
    double rho = 1.0;       // spectral blend; 1 = pure refined output
    int ddim_steps = 25;
    double eta = 0.0;
    std::uint64_t seed = 0;
    int scale = 1;          // z upsampling factor; 1 bypasses the field fit
    int vcr_fit_iters = -1;  // -1: use the model's configured budget
    bool enable_mad = true;
    bool enable_idr = true;
    bool enable_vcr = true;
    const std::vector<RigidMotionTrace>* traces = nullptr;  // for motion hints
};

struct ReconstructResult {
    ComplexVolume final;     // slice stack at scale 1; dense field output otherwise
    ComplexVolume x_mad;     // raw diffusion estimates
    ComplexVolume x_tilde0;  // data-consistent estimates
    ComplexVolume x_idr;     // refined slices (post-projected when configured)
    VcrFitReport vcr_report;
    std::optional<VcrField> field;  // populated when the volumetric stage ran
    double scale_factor = 1.0;
};

inline ReconstructResult reconstruct(const ComplexVolume& kspace, const SamplingMask& mask,
                                     const PipelineModel& model, const ReconstructOptions& opt) {
    require(opt.rho >= 0.0 && opt.rho <= 1.0, "reconstruct: rho must be in [0, 1]");
    require(opt.scale >= 1, "reconstruct: scale must be >= 1");
    require(kspace.ny() == mask.ny() && kspace.nx() == mask.nx(),
            "reconstruct: k-space and mask shapes differ");
    const int nz = kspace.nz(), ny = kspace.ny(), nx = kspace.nx();
    if (opt.traces)
        require(static_cast<int>(opt.traces->size()) == nz,
                "reconstruct: trace count does not match slice count");

    std::vector<CSlice> b(nz), zf(nz);
    double s = 0.0;
    for (int z = 0; z < nz; ++z) {
        b[z] = kspace.slice(z);
        zf[z] = zero_filled(b[z]);
        s = std::max(s, zf[z].abs().maxCoeff());
    }
    if (s <= 0.0) s = 1.0;

    std::vector<CSlice> mad(nz), tilde(nz), idr(nz), fin(nz);
    parallel_for(nz, [&](std::size_t zi) {
        const int z = static_cast<int>(zi);
        const CSlice bn = b[z] / s;
        MadConditioning cond;
        cond.corrupted_image = zf[z].abs() / s;
        if (opt.traces) cond.motion_hint = motion_summary((*opt.traces)[z]);

        if (opt.enable_mad) {
            const RSlice x_mad_r = sample(model.denoiser.as_fn(), cond, model.schedule,
                                          opt.ddim_steps, opt.eta, derive_seed(opt.seed, 0x5A, z));
            mad[z] = x_mad_r.cast<std::complex<double>>();
        } else {
            mad[z] = zf[z] / s;  // baseline: the zero-filled reconstruction itself
        }
        const CSlice x_tilde0 = data_consistency(mad[z], bn, mask);
        tilde[z] = x_tilde0;

        CSlice slice_out = x_tilde0;
        if (opt.enable_idr) {
            const IdrOutput refined = idr_refine(mad[z], bn, mask, model.idr);
            idr[z] = refined.x_out;
            slice_out = hybrid_blend(x_tilde0, refined.x_out, opt.rho);
        } else {
            idr[z] = x_tilde0;
        }
        fin[z] = slice_out;
    });

    ReconstructResult res;
    res.scale_factor = s;
    auto stack = [&](const std::vector<CSlice>& slices) {
        ComplexVolume v = make_volume(nz, ny, nx, kspace.spacing);
        for (int z = 0; z < nz; ++z) v.set_slice(z, (slices[z] * s).eval());
        return v;
    };
    res.x_mad = stack(mad);
    res.x_tilde0 = stack(tilde);
    res.x_idr = stack(idr);
    res.final = stack(fin);

    if (opt.scale > 1 && opt.enable_vcr) {
        std::vector<RSlice> planes;
        std::vector<double> z_mm;
        for (int z = 0; z < nz; ++z) {
            planes.push_back(fin[z].abs());  // fit on the normalized magnitudes
            z_mm.push_back(z * kspace.spacing[2]);
        }
        res.field = vcr_fit(planes, z_mm, model.vcr, derive_seed(opt.seed, 0xF17),
                            &res.vcr_report, opt.vcr_fit_iters);
        ComplexVolume dense = query_volume(*res.field, opt.scale, kspace.spacing);
        for (auto& c : dense.data)
            c = {static_cast<float>(c.real() * s), static_cast<float>(c.imag() * s)};
        dense.meta["stage"] = "vcr";
        res.final = std::move(dense);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoint archive: length-prefixed UTF-8 manifest JSON (u64 little-endian
// byte count), then the named float32 tensor blobs concatenated in manifest
// order.

namespace detail {

inline nlohmann::json den_cfg_json(const DenoiserConfig& c) {
    return {{"depth", c.depth},
            {"filters_per_stage", c.filters_per_stage},
            {"base_channels", c.base_channels},
            {"channel_multipliers", c.channel_multipliers},
            {"input_channels", c.input_channels},
            {"cond_embed_dim", c.cond_embed_dim},
            {"time_scale", c.time_scale}};
}

inline DenoiserConfig den_cfg_from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.depth = j.at("depth").get<int>();
    c.filters_per_stage = j.at("filters_per_stage").get<std::vector<int>>();
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    c.input_channels = j.at("input_channels").get<int>();
    c.cond_embed_dim = j.at("cond_embed_dim").get<int>();
    c.time_scale = j.at("time_scale").get<int>();
    return c;
}

inline nlohmann::json idr_cfg_json(const IdrConfig& c) {
    return {{"num_freqs", c.num_freqs},     {"b_scale", c.b_scale},
            {"b_seed", c.b_seed},           {"hidden_layers", c.hidden_layers},
            {"hidden_width", c.hidden_width}, {"omega_first", c.omega_first},
            {"omega_hidden", c.omega_hidden}, {"c1_channels", c.c1_channels},
            {"w_min", c.w_min},             {"mu", c.mu},
            {"squared_norms", c.squared_norms},
            {"supervise_dc_input", c.supervise_dc_input},
            {"post_projection", c.post_projection}};
}

inline IdrConfig idr_cfg_from_json(const nlohmann::json& j) {
    IdrConfig c;
    c.num_freqs = j.at("num_freqs").get<int>();
    c.b_scale = j.at("b_scale").get<double>();
    c.b_seed = j.at("b_seed").get<std::uint64_t>();
    c.hidden_layers = j.at("hidden_layers").get<int>();
    c.hidden_width = j.at("hidden_width").get<int>();
    c.omega_first = j.at("omega_first").get<double>();
    c.omega_hidden = j.at("omega_hidden").get<double>();
    c.c1_channels = j.at("c1_channels").get<std::vector<int>>();
    c.w_min = j.at("w_min").get<double>();
    c.mu = j.at("mu").get<double>();
    c.squared_norms = j.at("squared_norms").get<bool>();
    c.supervise_dc_input = j.at("supervise_dc_input").get<bool>();
    c.post_projection = j.at("post_projection").get<bool>();
    return c;
}

inline nlohmann::json vcr_cfg_json(const VcrConfig& c) {
    return {{"num_freqs", c.num_freqs},
            {"b_scale", c.b_scale},
            {"b_axial_factor", c.b_axial_factor},
            {"b_seed", c.b_seed},
            {"hidden_layers", c.hidden_layers},
            {"hidden_width", c.hidden_width},
            {"omega_first", c.omega_first},
            {"omega_hidden", c.omega_hidden},
            {"feat_channels", c.agg.feat_channels},
            {"lstm_depth", c.agg.lstm_depth},
            {"lstm_hidden", c.agg.lstm_hidden},
            {"kernel", c.agg.kernel},
            {"c2_dim", c.agg.c2_dim},
            {"fit_iters", c.fit_iters},
            {"fit_batch", c.fit_batch},
            {"fit_lr", c.fit_lr},
            {"eps_fit", c.eps_fit}};
}

inline VcrConfig vcr_cfg_from_json(const nlohmann::json& j) {
    VcrConfig c;
    c.num_freqs = j.at("num_freqs").get<int>();
    c.b_scale = j.at("b_scale").get<double>();
    c.b_axial_factor = j.at("b_axial_factor").get<double>();
    c.b_seed = j.at("b_seed").get<std::uint64_t>();
    c.hidden_layers = j.at("hidden_layers").get<int>();
    c.hidden_width = j.at("hidden_width").get<int>();
    c.omega_first = j.at("omega_first").get<double>();
    c.omega_hidden = j.at("omega_hidden").get<double>();
    c.agg.feat_channels = j.at("feat_channels").get<std::vector<int>>();
    c.agg.lstm_depth = j.at("lstm_depth").get<int>();
    c.agg.lstm_hidden = j.at("lstm_hidden").get<int>();
    c.agg.kernel = j.at("kernel").get<int>();
    c.agg.c2_dim = j.at("c2_dim").get<int>();
    c.fit_iters = j.at("fit_iters").get<int>();
    c.fit_batch = j.at("fit_batch").get<int>();
    c.fit_lr = j.at("fit_lr").get<double>();
    c.eps_fit = j.at("eps_fit").get<double>();
    return c;
}

}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, PipelineModel& model) {
    nn::ParamList den, idr_p, vcr_p;
    model.collect_params(den, idr_p, vcr_p);
    nn::ParamList all;
    all.insert(all.end(), den.begin(), den.end());
    all.insert(all.end(), idr_p.begin(), idr_p.end());
    all.insert(all.end(), vcr_p.begin(), vcr_p.end());

    nlohmann::json manifest;
    manifest["format"] = "prinr.ckpt";
    manifest["version"] = kCheckpointVersion;
    manifest["profile"] = model.profile;
    manifest["denoiser"] = detail::den_cfg_json(model.den_cfg);
    manifest["idr"] = detail::idr_cfg_json(model.idr_cfg);
    manifest["vcr"] = detail::vcr_cfg_json(model.vcr_cfg);
    manifest["schedule"] = {{"T", model.schedule.T},
                            {"beta_start", model.beta_start},
                            {"beta_end", model.beta_end},
                            {"betas", model.schedule.betas}};
    manifest["lambdas"] = {model.lambda1, model.lambda2, model.lambda3};
    manifest["epoch"] = model.epoch;
    manifest["metrics"] = {{"val_psnr", model.val_psnr}};
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto* p : all)
        tensors.push_back({{"name", p->name}, {"shape", {p->v.rows(), p->v.cols()}}});
    manifest["tensors"] = tensors;

    const std::string mtext = manifest.dump();
    std::vector<std::uint8_t> out;
    std::uint64_t len = mtext.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    out.insert(out.end(), mtext.begin(), mtext.end());
    for (const auto* p : all)
        for (Eigen::Index i = 0; i < p->v.size(); ++i) {
            const float f = static_cast<float>(p->v.data()[i]);
            const auto* bytes = reinterpret_cast<const std::uint8_t*>(&f);
            out.insert(out.end(), bytes, bytes + 4);
        }
    write_file_atomic(path, out.data(), out.size());
}

inline PipelineModel load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 8) throw ParseError("checkpoint: missing manifest length", bytes.size());
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    if (bytes.size() < 8 + len) throw ParseError("checkpoint: truncated manifest", bytes.size());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("checkpoint manifest: " + std::string(e.what()), 8 + e.byte);
    }

    PipelineModel m;
    try {
        if (manifest.at("format").get<std::string>() != "prinr.ckpt")
            throw IntegrityError("checkpoint: unknown format tag");
        const int version = manifest.at("version").get<int>();
        if (version != kCheckpointVersion)
            throw IntegrityError("checkpoint: unsupported version " + std::to_string(version) +
                                 " (this build reads version " +
                                 std::to_string(kCheckpointVersion) + ")");
        m.profile = manifest.at("profile").get<std::string>();
        m.den_cfg = detail::den_cfg_from_json(manifest.at("denoiser"));
        m.idr_cfg = detail::idr_cfg_from_json(manifest.at("idr"));
        m.vcr_cfg = detail::vcr_cfg_from_json(manifest.at("vcr"));
        const auto& sj = manifest.at("schedule");
        m.beta_start = sj.at("beta_start").get<double>();
        m.beta_end = sj.at("beta_end").get<double>();
        m.schedule.T = sj.at("T").get<int>();
        m.schedule.betas = sj.at("betas").get<std::vector<double>>();
        if (static_cast<int>(m.schedule.betas.size()) != m.schedule.T)
            throw IntegrityError("checkpoint: schedule length does not match T");
        m.schedule.alpha_bars.assign(m.schedule.T + 1, 1.0);
        for (int i = 0; i < m.schedule.T; ++i)
            m.schedule.alpha_bars[i + 1] = m.schedule.alpha_bars[i] * (1.0 - m.schedule.betas[i]);
        const auto& lj = manifest.at("lambdas");
        m.lambda1 = lj.at(0).get<double>();
        m.lambda2 = lj.at(1).get<double>();
        m.lambda3 = lj.at(2).get<double>();
        m.epoch = manifest.at("epoch").get<int>();
        m.val_psnr = manifest.at("metrics").at("val_psnr").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("checkpoint manifest: missing or ill-typed field: " +
                             std::string(e.what()));
    }

    Rng rng_d(derive_seed(0, 0xDE0));
    m.denoiser = CondUnet(m.den_cfg, rng_d);
    Rng rng_i(derive_seed(0, 0x1D0));
    m.idr = IdrModel(m.idr_cfg, rng_i);
    Rng rng_v(derive_seed(0, 0xFC0));
    m.vcr = VcrModel(m.vcr_cfg, rng_v);

    nn::ParamList den, idr_p, vcr_p;
    m.collect_params(den, idr_p, vcr_p);
    nn::ParamList all;
    all.insert(all.end(), den.begin(), den.end());
    all.insert(all.end(), idr_p.begin(), idr_p.end());
    all.insert(all.end(), vcr_p.begin(), vcr_p.end());

    std::map<std::string, nn::Tensor*> by_name;
    for (auto* p : all) by_name[p->name] = p;

    std::size_t offset = 8 + len;
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const Eigen::Index rows = t.at("shape").at(0).get<Eigen::Index>();
        const Eigen::Index cols = t.at("shape").at(1).get<Eigen::Index>();
        const auto it = by_name.find(name);
        if (it == by_name.end())
            throw IntegrityError("checkpoint: unknown tensor '" + name + "'");
        nn::Tensor* p = it->second;
        if (p->v.rows() != rows || p->v.cols() != cols)
            throw IntegrityError("checkpoint: tensor '" + name + "' shape mismatch");
        const std::size_t nbytes = static_cast<std::size_t>(rows) * cols * 4;
        if (offset + nbytes > bytes.size())
            throw IntegrityError("checkpoint: blob truncated at tensor '" + name + "'");
        for (Eigen::Index i = 0; i < p->v.size(); ++i) {
            float f;
            std::memcpy(&f, bytes.data() + offset + static_cast<std::size_t>(i) * 4, 4);
            p->v.data()[i] = static_cast<double>(f);
        }
        offset += nbytes;
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw IntegrityError("checkpoint: missing tensor '" + by_name.begin()->first + "'");
    if (offset != bytes.size())
        throw IntegrityError("checkpoint: trailing bytes after the last tensor blob");
    return m;
}

// ---------------------------------------------------------------------------
// Training (progressive-refinement schedule).

struct EpochLogRow {
    int epoch = 0;
    double l_mad = 0, l_idr = 0, l_vcr = 0, l_total = 0;
    double val_psnr = 0, lr = 0;
};

inline void write_epoch_log(const std::filesystem::path& path,
                            const std::vector<EpochLogRow>& rows) {
    std::string csv = "epoch,l_mad,l_idr,l_vcr,l_total,val_psnr,lr\n";
    for (const auto& r : rows) {
        char line[256];
        std::snprintf(line, sizeof line, "%d,%.8f,%.8f,%.8f,%.8f,%.4f,%.6f\n", r.epoch, r.l_mad,
                      r.l_idr, r.l_vcr, r.l_total, r.val_psnr, r.lr);
        csv += line;
    }
    write_file_atomic(path, csv);
}

struct TrainResult {
    PipelineModel model;
    std::vector<EpochLogRow> log;
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

// Validation PSNR of the slice-level pipeline output on a held-out volume.
inline double validation_psnr(const PipelineModel& model, const SimulatedVolume& val,
                              const TrainConfig& cfg) {
    const int nz = static_cast<int>(val.b.size());
    std::vector<double> psnrs(nz);
    parallel_for(nz, [&](std::size_t z) {
        MadConditioning cond;
        cond.corrupted_image = val.zf_mag[z];
        if (val.hints[z].size() > 0) cond.motion_hint = val.hints[z];
        const RSlice x_mad = sample(model.denoiser.as_fn(), cond, model.schedule,
                                    cfg.ddim_steps_val, 0.0, derive_seed(cfg.seed, 0xEA7, z));
        const IdrOutput out =
            idr_refine(x_mad.cast<std::complex<double>>(), val.b[z], val.mask, model.idr);
        // compare on the ground-truth normalization, like the evaluator does
        double lo = 1e300, hi = -1e300;
        for (Eigen::Index i = 0; i < val.gt_norm[z].size(); ++i) {
            lo = std::min(lo, val.gt_norm[z].data()[i]);
            hi = std::max(hi, val.gt_norm[z].data()[i]);
        }
        const double inv = hi > lo ? 1.0 / (hi - lo) : 1.0;
        const RSlice a = ((out.x_out.abs() - lo) * inv).eval();
        const RSlice b = ((val.gt_norm[z] - lo) * inv).eval();
        psnrs[z] = psnr(a, b);
    });
    double acc = 0.0;
    for (double p : psnrs) acc += p;
    return acc / nz;
}

}  // namespace detail

inline TrainResult train(const DatasetSpec& dataset, const TrainConfig& cfg) {
    cfg.validate();
    dataset.validate();

    TrainResult result;
    result.model = make_pipeline_model(cfg.profile, cfg.seed);
    PipelineModel& model = result.model;
    model.lambda1 = cfg.lambda1;
    model.lambda2 = cfg.lambda2;
    model.lambda3 = cfg.lambda3;

    // simulate the dataset up front; volumes are small by construction
    std::vector<SimulatedVolume> volumes;
    for (int v = 0; v < dataset.num_train_volumes; ++v)
        volumes.push_back(simulate_volume(dataset, dataset.volume_seed_base + v,
                                          derive_seed(dataset.mask_seed_base, v),
                                          derive_seed(dataset.motion_seed_base, v)));
    const SimulatedVolume val = simulate_volume(dataset, dataset.val_seed,
                                                derive_seed(dataset.mask_seed_base, 0xFA1),
                                                derive_seed(dataset.motion_seed_base, 0xFA1));

    nn::ParamList den_params, idr_params, vcr_params;
    model.collect_params(den_params, idr_params, vcr_params);
    nn::Adam opt_den(cfg.lr, cfg.weight_decay, cfg.grad_clip_norm);
    nn::Adam opt_idr(cfg.lr, cfg.weight_decay, cfg.grad_clip_norm);
    nn::Adam opt_vcr(cfg.lr, cfg.weight_decay, cfg.grad_clip_norm);

    const RSlice wmask = frequency_weight_mask(dataset.shape[1], dataset.shape[2],
                                               model.idr_cfg.w_min);

    // optional mask-randomized pretraining of the refinement stage
    if (cfg.idr_pretrain_steps > 0) {
        IdrTrainState pre_state(model.idr_cfg, cfg.seed, cfg.lr, cfg.weight_decay,
                                cfg.grad_clip_norm);
        pre_state.model = model.idr;
        PretrainData data;
        data.center_fraction = dataset.center_fraction;
        for (const auto& v : volumes)
            for (const auto& s : v.gt_norm) data.gt_slices.push_back(s);
        pretrain_random_masks(pre_state, data,
                              {MaskKind::Gauss1D, MaskKind::Gauss2D, MaskKind::Radial,
                               MaskKind::Spiral},
                              {4.0, 8.0}, cfg.idr_pretrain_steps, derive_seed(cfg.seed, 0x9E7));
        model.idr = pre_state.model;
        idr_params.clear();
        model.idr.params(idr_params);
    }

    double best_val = -1e300;
    int since_best = 0;
    PipelineModel snapshot = model;  // last stable state for NaN aborts
    const int nz = dataset.shape[0];

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr_e = cfg.lr * std::pow(cfg.lr_decay, epoch / cfg.lr_decay_every);
        opt_den.lr = opt_idr.lr = opt_vcr.lr = lr_e;
        const bool joint = cfg.strict_joint || epoch >= cfg.mad_warmup_epochs;

        double sum_mad = 0.0, sum_idr = 0.0, sum_vcr = 0.0;
        int n_mad = 0, n_idr = 0, n_vcr = 0;
        try {
            for (int step = 0; step < cfg.steps_per_epoch; ++step) {
                // ---- stage 1: denoising objective over a batch of slices
                struct SampleGrad {
                    CondUnet::Cache cache;
                    RSlice dout;
                    double loss = 0.0;
                    int vol = 0, z = 0;
                };
                std::vector<SampleGrad> batch(cfg.batch_size);
                for (int k = 0; k < cfg.batch_size; ++k) {
                    Rng rng(derive_seed(cfg.seed, epoch, step * 131 + k));
                    auto& sg = batch[k];
                    sg.vol = static_cast<int>(rng.below(volumes.size()));
                    sg.z = static_cast<int>(rng.below(nz));
                    const SimulatedVolume& v = volumes[sg.vol];
                    MadConditioning cond;
                    cond.corrupted_image = v.zf_mag[sg.z];
                    if (v.hints[sg.z].size() > 0) cond.motion_hint = v.hints[sg.z];

                    const int t = static_cast<int>(rng.below(model.schedule.T)) + 1;
                    RSlice eps(v.gt_norm[sg.z].rows(), v.gt_norm[sg.z].cols());
                    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
                    const RSlice x_t = forward_diffuse(v.gt_norm[sg.z], t, eps, model.schedule);
                    Rng drop_rng(derive_seed(cfg.seed, epoch, step * 131 + k, 0xD0));
                    const RSlice eps_hat = model.denoiser.forward(x_t, t, cond, cfg.dropout,
                                                                  &drop_rng, &sg.cache);
                    sg.loss = (eps_hat - eps).square().mean();
                    sg.dout = (2.0 / eps.size()) * (eps_hat - eps);
                }
                const bool update_mad = !joint || !cfg.freeze_mad;
                if (update_mad) opt_den.zero_grad(den_params);
                for (auto& sg : batch) {
                    sum_mad += sg.loss;
                    ++n_mad;
                    if (update_mad) model.denoiser.backward(sg.dout, sg.cache);
                }
                if (update_mad) opt_den.step(den_params);

                // ---- stage 2: refinement objective on the same slices
                if (joint) {
                    opt_idr.zero_grad(idr_params);
                    for (int k = 0; k < cfg.batch_size; ++k) {
                        const auto& sg = batch[k];
                        const SimulatedVolume& v = volumes[sg.vol];
                        Rng rng(derive_seed(cfg.seed, epoch, step * 131 + k, 0x1D8));
                        const int t_cap = std::max(
                            1, static_cast<int>(model.schedule.T * cfg.idr_t_cap_frac));
                        const int t = static_cast<int>(rng.below(t_cap)) + 1;
                        RSlice eps(v.gt_norm[sg.z].rows(), v.gt_norm[sg.z].cols());
                        for (Eigen::Index i = 0; i < eps.size(); ++i)
                            eps.data()[i] = rng.normal();
                        const RSlice x_t =
                            forward_diffuse(v.gt_norm[sg.z], t, eps, model.schedule);
                        MadConditioning cond;
                        cond.corrupted_image = v.zf_mag[sg.z];
                        if (v.hints[sg.z].size() > 0) cond.motion_hint = v.hints[sg.z];
                        const RSlice eps_hat = model.denoiser.forward(x_t, t, cond);
                        const RSlice x0_hat = predict_x0(x_t, eps_hat, t, model.schedule);

                        IdrModel::Cache cache;
                        const IdrOutput out = idr_refine(x0_hat.cast<std::complex<double>>(),
                                                         v.b[sg.z], v.mask, model.idr, &cache);
                        RSlice dr;
                        const CSlice target = v.gt_norm[sg.z].cast<std::complex<double>>();
                        const IdrLossBreakdown lb = idr_loss(out.x_out, target, v.b[sg.z], v.mask,
                                                             wmask, model.idr_cfg, &dr);
                        if (out.post_projected) dr = project_unmeasured(dr, v.mask);
                        model.idr.residual_backward(dr, cache);
                        sum_idr += lb.total();
                        ++n_idr;
                    }
                    opt_idr.step(idr_params);
                }
            }

            // ---- stage 3: volumetric consistency on one refreshed volume
            if (joint && cfg.vcr_iters_per_epoch > 0) {
                const int vidx = epoch % static_cast<int>(volumes.size());
                const SimulatedVolume& v = volumes[vidx];
                std::vector<RSlice> refined(nz);
                parallel_for(nz, [&](std::size_t z) {
                    MadConditioning cond;
                    cond.corrupted_image = v.zf_mag[z];
                    if (v.hints[z].size() > 0) cond.motion_hint = v.hints[z];
                    const RSlice x_mad =
                        sample(model.denoiser.as_fn(), cond, model.schedule,
                               cfg.vcr_refresh_ddim_steps, 0.0,
                               derive_seed(cfg.seed, 0xFE, epoch, z));
                    const IdrOutput out = idr_refine(x_mad.cast<std::complex<double>>(), v.b[z],
                                                     v.mask, model.idr);
                    refined[z] = out.x_out.abs();
                });
                Rng vcr_rng(derive_seed(cfg.seed, 0xFC, epoch));
                for (int it = 0; it < cfg.vcr_iters_per_epoch; ++it) {
                    sum_vcr += vcr_train_step(model.vcr, opt_vcr, vcr_params, refined,
                                              cfg.vcr_batch, vcr_rng);
                    ++n_vcr;
                }
            }
        } catch (const NumericError& e) {
            result.model = snapshot;  // keep the last stable checkpoint
            result.aborted = true;
            result.abort_reason = e.what();
            return result;
        }

        EpochLogRow row;
        row.epoch = epoch;
        row.l_mad = n_mad ? sum_mad / n_mad : 0.0;
        row.l_idr = n_idr ? sum_idr / n_idr : 0.0;
        row.l_vcr = n_vcr ? sum_vcr / n_vcr : 0.0;
        row.l_total = total_loss(row.l_mad, row.l_idr, row.l_vcr, cfg);
        row.lr = lr_e;
        row.val_psnr = detail::validation_psnr(model, val, cfg);
        result.log.push_back(row);

        model.epoch = epoch + 1;
        model.val_psnr = row.val_psnr;
        snapshot = model;

        if (row.val_psnr > best_val + 1e-9) {
            best_val = row.val_psnr;
            since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience) {
            break;
        }
    }
    return result;
}

}  // namespace prinr
