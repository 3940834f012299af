#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>

#include "prinr/metrics.hpp"
#include "prinr/pipeline.hpp"

using namespace prinr;
namespace fs = std::filesystem;

namespace {

const fs::path kBin = PRINR_BIN;

int run(const std::string& args) {
    const std::string cmd = kBin.string() + " " + args + " > /dev/null 2> /tmp/prinr_cli_err.json";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

fs::path work_dir() {
    const fs::path p = fs::temp_directory_path() / "prinr_cli";
    return p;
}

}  // namespace

TEST_CASE("cli: phantom + identity simulate reproduces the phantom via zero fill") {
    const fs::path w = work_dir();
    fs::remove_all(w);
    fs::create_directories(w);

    REQUIRE(run("phantom --shape 4 16 16 --seed 5 --out " + (w / "gt").string()) == 0);
    REQUIRE(run("simulate --volume " + (w / "gt").string() +
                " --af 1 --center-fraction 1.0 --motion-max-disp 0 --motion-max-rot 0 "
                "--noise-std 0 --seed 1 --out " +
                (w / "sim").string()) == 0);

    const ComplexVolume gt = load_volume(w / "gt");
    const ComplexVolume zf = load_volume(w / "sim" / "zero_filled");
    REQUIRE(gt.shape == zf.shape);
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        REQUIRE_THAT(zf.data[i].real(),
                     Catch::Matchers::WithinAbs(gt.data[i].real(), 1e-6));
        REQUIRE_THAT(zf.data[i].imag(), Catch::Matchers::WithinAbs(0.0, 1e-6));
    }
    // traces serialized as arrays of [dx, dy, theta]
    const auto traces = nlohmann::json::parse(read_file_bytes(w / "sim" / "traces.json"));
    REQUIRE(traces.is_array());
    REQUIRE(traces.size() == 4);
    REQUIRE(traces[0][0].size() == 3);
}

TEST_CASE("cli: identical invocations produce identical bytes (idempotent outputs)") {
    const fs::path w = work_dir();
    REQUIRE(run("phantom --shape 4 16 16 --seed 5 --out " + (w / "gt_b").string()) == 0);
    const auto a = read_file_bytes(w / "gt" / "data.bin");
    const auto b = read_file_bytes(w / "gt_b" / "data.bin");
    REQUIRE(a == b);
}

TEST_CASE("cli: exit codes distinguish validation, integrity and usage errors") {
    const fs::path w = work_dir();
    // unknown mask kind -> validation (2)
    REQUIRE(run("simulate --volume " + (w / "gt").string() +
                " --mask-kind gaussian --out " + (w / "x").string()) == 2);
    // af < 1 -> validation (2)
    REQUIRE(run("simulate --volume " + (w / "gt").string() + " --af 0.5 --out " +
                (w / "x").string()) == 2);
    // missing volume -> integrity/io (3)
    REQUIRE(run("simulate --volume " + (w / "missing").string() + " --out " +
                (w / "x").string()) == 3);
    // bad flags -> validation (2)
    REQUIRE(run("phantom --no-such-flag") == 2);
    // the error channel carries machine-readable JSON
    const auto err = read_file_bytes("/tmp/prinr_cli_err.json");
    const auto j = nlohmann::json::parse(err.begin(), err.end());
    REQUIRE(j.contains("error"));
    REQUIRE(j.at("error").contains("type"));
}

TEST_CASE("cli: corrupt volume container yields exit 3") {
    const fs::path w = work_dir();
    fs::create_directories(w / "broken");
    write_file_atomic(w / "broken" / "meta.json", std::string("{ not json"));
    write_file_atomic(w / "broken" / "data.bin", std::string(""));
    REQUIRE(run("simulate --volume " + (w / "broken").string() + " --out " +
                (w / "x").string()) == 3);
}

TEST_CASE("cli: train on a toy config, then reconstruct and evaluate end to end") {
    const fs::path w = work_dir();
    const std::string config = R"({
  "phantom": {"shape": [4, 16, 16], "spacing_mm": [1.0, 1.0, 4.0], "texture_amp": 0.15},
  "dataset": {"num_train_volumes": 2, "volume_seed_base": 1, "val_seed": 100},
  "mask": {"kind": "gauss1d", "af": 4, "center_fraction": 0.1, "seed_base": 500},
  "motion": {"max_disp_frac": 0.03, "max_rot_deg": 5.0, "seed_base": 900},
  "noise_std": 0.0,
  "train": {"max_epochs": 2, "steps_per_epoch": 2, "mad_warmup_epochs": 1,
            "vcr_iters_per_epoch": 2, "vcr_batch": 64, "ddim_steps_val": 2,
            "vcr_refresh_ddim_steps": 2, "seed": 3, "profile": "tiny"},
  "output_dir": "unused"
})";
    write_file_atomic(w / "config.json", config);
    REQUIRE(run("train --config " + (w / "config.json").string() + " --out-ckpt " +
                (w / "ckpt.bin").string() + " --log " + (w / "log.csv").string()) == 0);
    REQUIRE(fs::exists(w / "ckpt.bin"));
    REQUIRE(fs::exists(w / "log.csv"));

    REQUIRE(run("simulate --volume " + (w / "gt").string() +
                " --af 4 --center-fraction 0.1 --motion-max-disp 0.03 --motion-max-rot 5 "
                "--seed 2 --out " +
                (w / "sim4").string()) == 0);
    REQUIRE(run("reconstruct --ckpt " + (w / "ckpt.bin").string() + " --kspace " +
                (w / "sim4" / "kspace").string() + " --mask " + (w / "sim4" / "mask").string() +
                " --trace " + (w / "sim4" / "traces.json").string() +
                " --ddim-steps 2 --seed 1 --out " + (w / "recon").string()) == 0);
    REQUIRE(fs::exists(w / "recon" / "final" / "data.bin"));
    REQUIRE(fs::exists(w / "recon" / "x_mad" / "data.bin"));
    REQUIRE(fs::exists(w / "recon" / "x_tilde0" / "data.bin"));
    REQUIRE(fs::exists(w / "recon" / "x_idr" / "data.bin"));

    REQUIRE(run("evaluate --recon " + (w / "recon" / "final").string() + " --gt " +
                (w / "gt").string() + " --condition smoke --out " + (w / "eval").string()) == 0);
    REQUIRE(fs::exists(w / "eval" / "eval_report.json"));
    REQUIRE(fs::exists(w / "eval" / "eval_report.csv"));
    REQUIRE(fs::exists(w / "eval" / "error_000.png"));

    // unknown config keys are rejected before any compute
    write_file_atomic(w / "bad.json", std::string(R"({"trian": {}})"));
    REQUIRE(run("train --config " + (w / "bad.json").string() + " --out-ckpt " +
                (w / "c2.bin").string()) == 2);

    // identical flags (including the trace hint) are bit-identical
    REQUIRE(run("reconstruct --ckpt " + (w / "ckpt.bin").string() + " --kspace " +
                (w / "sim4" / "kspace").string() + " --mask " + (w / "sim4" / "mask").string() +
                " --trace " + (w / "sim4" / "traces.json").string() +
                " --ddim-steps 2 --seed 1 --out " + (w / "recon_b").string()) == 0);
    const auto r1 = read_file_bytes(w / "recon" / "x_mad" / "data.bin");
    const auto r2 = read_file_bytes(w / "recon_b" / "x_mad" / "data.bin");
    REQUIRE(r1.size() == r2.size());
    REQUIRE(std::equal(r1.begin(), r1.end(), r2.begin()));
}
