#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "prinr/pipeline.hpp"

namespace prinr {

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
    if (!obj.is_object()) throw ValidationError("config: " + where + " must be a JSON object");
    for (const auto& [key, _] : obj.items())
        if (!allowed.count(key))
            throw ValidationError("config: unknown key '" + key + "' in " + where);
}

template <typename T>
T get_or(const nlohmann::json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError("config: field '" + key + "' has the wrong type");
    }
}

}  // namespace detail

// Single JSON document driving a full experiment: phantom family, acquisition
// settings, training recipe and reconstruction options. Unknown keys are
// rejected everywhere so typos fail loudly before any compute starts.
struct ExperimentConfig {
    DatasetSpec dataset;
    TrainConfig train;
    ReconstructOptions recon;
    std::string output_dir = "out";

    static ExperimentConfig from_json(const nlohmann::json& j) {
        detail::reject_unknown_keys(j, {"phantom", "dataset", "mask", "motion", "noise_std",
                                        "use_motion_hint", "train", "reconstruct", "output_dir"},
                                    "top level");
        ExperimentConfig cfg;

        if (j.contains("phantom")) {
            const auto& p = j.at("phantom");
            detail::reject_unknown_keys(p, {"shape", "spacing_mm", "texture_amp"}, "phantom");
            if (p.contains("shape")) {
                const auto s = p.at("shape");
                cfg.dataset.shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
            }
            if (p.contains("spacing_mm")) {
                const auto s = p.at("spacing_mm");
                cfg.dataset.spacing = {s.at(0).get<double>(), s.at(1).get<double>(),
                                       s.at(2).get<double>()};
            }
            cfg.dataset.texture_amp =
                detail::get_or(p, "texture_amp", cfg.dataset.texture_amp);
        }
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            detail::reject_unknown_keys(d, {"num_train_volumes", "volume_seed_base", "val_seed"},
                                        "dataset");
            cfg.dataset.num_train_volumes =
                detail::get_or(d, "num_train_volumes", cfg.dataset.num_train_volumes);
            cfg.dataset.volume_seed_base =
                detail::get_or(d, "volume_seed_base", cfg.dataset.volume_seed_base);
            cfg.dataset.val_seed = detail::get_or(d, "val_seed", cfg.dataset.val_seed);
        }
        if (j.contains("mask")) {
            const auto& m = j.at("mask");
            detail::reject_unknown_keys(m, {"kind", "af", "center_fraction", "seed_base"}, "mask");
            if (m.contains("kind"))
                cfg.dataset.mask_kind = mask_kind_from_name(m.at("kind").get<std::string>());
            cfg.dataset.af = detail::get_or(m, "af", cfg.dataset.af);
            cfg.dataset.center_fraction =
                detail::get_or(m, "center_fraction", cfg.dataset.center_fraction);
            cfg.dataset.mask_seed_base =
                detail::get_or(m, "seed_base", cfg.dataset.mask_seed_base);
        }
        if (j.contains("motion")) {
            const auto& m = j.at("motion");
            detail::reject_unknown_keys(
                m, {"max_disp_frac", "max_rot_deg", "burst_lines", "seed_base"}, "motion");
            cfg.dataset.motion_max_disp =
                detail::get_or(m, "max_disp_frac", cfg.dataset.motion_max_disp);
            cfg.dataset.motion_max_rot =
                detail::get_or(m, "max_rot_deg", cfg.dataset.motion_max_rot);
            cfg.dataset.burst_lines = detail::get_or(m, "burst_lines", cfg.dataset.burst_lines);
            cfg.dataset.motion_seed_base =
                detail::get_or(m, "seed_base", cfg.dataset.motion_seed_base);
        }
        cfg.dataset.noise_std = detail::get_or(j, "noise_std", cfg.dataset.noise_std);
        cfg.dataset.use_motion_hint =
            detail::get_or(j, "use_motion_hint", cfg.dataset.use_motion_hint);

        if (j.contains("train")) {
            const auto& t = j.at("train");
            detail::reject_unknown_keys(
                t,
                {"lr", "lr_decay", "lr_decay_every", "max_epochs", "early_stop_patience",
                 "dropout", "batch_size", "weight_decay", "grad_clip_norm", "lambda1", "lambda2",
                 "lambda3", "seed", "steps_per_epoch", "mad_warmup_epochs", "idr_pretrain_steps",
                 "vcr_iters_per_epoch", "vcr_batch", "idr_t_cap_frac", "ddim_steps_val",
                 "vcr_refresh_ddim_steps", "freeze_mad", "strict_joint", "profile"},
                "train");
            auto& c = cfg.train;
            c.lr = detail::get_or(t, "lr", c.lr);
            c.lr_decay = detail::get_or(t, "lr_decay", c.lr_decay);
            c.lr_decay_every = detail::get_or(t, "lr_decay_every", c.lr_decay_every);
            c.max_epochs = detail::get_or(t, "max_epochs", c.max_epochs);
            c.early_stop_patience = detail::get_or(t, "early_stop_patience", c.early_stop_patience);
            c.dropout = detail::get_or(t, "dropout", c.dropout);
            c.batch_size = detail::get_or(t, "batch_size", c.batch_size);
            c.weight_decay = detail::get_or(t, "weight_decay", c.weight_decay);
            c.grad_clip_norm = detail::get_or(t, "grad_clip_norm", c.grad_clip_norm);
            c.lambda1 = detail::get_or(t, "lambda1", c.lambda1);
            c.lambda2 = detail::get_or(t, "lambda2", c.lambda2);
            c.lambda3 = detail::get_or(t, "lambda3", c.lambda3);
            c.seed = detail::get_or(t, "seed", c.seed);
            c.steps_per_epoch = detail::get_or(t, "steps_per_epoch", c.steps_per_epoch);
            c.mad_warmup_epochs = detail::get_or(t, "mad_warmup_epochs", c.mad_warmup_epochs);
            c.idr_pretrain_steps = detail::get_or(t, "idr_pretrain_steps", c.idr_pretrain_steps);
            c.vcr_iters_per_epoch =
                detail::get_or(t, "vcr_iters_per_epoch", c.vcr_iters_per_epoch);
            c.vcr_batch = detail::get_or(t, "vcr_batch", c.vcr_batch);
            c.idr_t_cap_frac = detail::get_or(t, "idr_t_cap_frac", c.idr_t_cap_frac);
            c.ddim_steps_val = detail::get_or(t, "ddim_steps_val", c.ddim_steps_val);
            c.vcr_refresh_ddim_steps =
                detail::get_or(t, "vcr_refresh_ddim_steps", c.vcr_refresh_ddim_steps);
            c.freeze_mad = detail::get_or(t, "freeze_mad", c.freeze_mad);
            c.strict_joint = detail::get_or(t, "strict_joint", c.strict_joint);
            c.profile = detail::get_or<std::string>(t, "profile", c.profile);
        }
        if (j.contains("reconstruct")) {
            const auto& r = j.at("reconstruct");
            detail::reject_unknown_keys(
                r, {"rho", "ddim_steps", "eta", "seed", "scale", "vcr_fit_iters"}, "reconstruct");
            cfg.recon.rho = detail::get_or(r, "rho", cfg.recon.rho);
            cfg.recon.ddim_steps = detail::get_or(r, "ddim_steps", cfg.recon.ddim_steps);
            cfg.recon.eta = detail::get_or(r, "eta", cfg.recon.eta);
            cfg.recon.seed = detail::get_or(r, "seed", cfg.recon.seed);
            cfg.recon.scale = detail::get_or(r, "scale", cfg.recon.scale);
            cfg.recon.vcr_fit_iters = detail::get_or(r, "vcr_fit_iters", cfg.recon.vcr_fit_iters);
        }
        cfg.output_dir = detail::get_or<std::string>(j, "output_dir", cfg.output_dir);
        cfg.train.validate();
        cfg.dataset.validate();
        return cfg;
    }

    static ExperimentConfig load(const std::filesystem::path& path) {
        const auto bytes = read_file_bytes(path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(bytes.begin(), bytes.end());
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("config: " + std::string(e.what()), e.byte);
        }
        return from_json(j);
    }
};

}  // namespace prinr
