#include <catch2/catch_amalgamated.hpp>

#include "prinr/idr.hpp"
#include "prinr/volume.hpp"

using namespace prinr;
using Catch::Matchers::WithinAbs;

namespace {

IdrConfig test_cfg() {
    IdrConfig cfg = IdrConfig::tiny();
    cfg.num_freqs = 6;
    cfg.hidden_layers = 2;
    cfg.hidden_width = 16;
    cfg.c1_channels = {4, 6};
    return cfg;
}

RSlice phantom_slice(int n, std::uint64_t seed) {
    PhantomSpec spec = default_phantom_spec({3, n, n}, seed);
    const ComplexVolume v = make_phantom(spec);
    RSlice s(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) s(y, x) = v.at(1, y, x).real();
    return s;
}

}  // namespace

TEST_CASE("idr_refine: zero final layer means x_idr equals the DC input exactly") {
    Rng rng(1);
    IdrModel model(test_cfg(), rng);
    model.f2.W.back().v.setZero();
    model.f2.b.back().v.setZero();

    const RSlice gt = phantom_slice(32, 2);
    const SamplingMask mask = make_mask(MaskKind::Gauss1D, 32, 32, 4.0, 0.1, 3);
    const CSlice b = undersample(fft2c(gt.cast<std::complex<double>>()), mask);
    const CSlice x_mad = CSlice::Zero(32, 32);

    const IdrOutput out = idr_refine(x_mad, b, mask, model);
    REQUIRE((out.r.abs() == 0.0).all());
    REQUIRE((out.x_idr == out.x_tilde0).all());
    // residual decomposition identity holds bit for bit
    const CSlice sum = out.x_tilde0 + out.r.cast<std::complex<double>>();
    REQUIRE((out.x_idr == sum).all());
}

TEST_CASE("idr_refine: full mask + zero residual reproduces the ground truth") {
    Rng rng(4);
    IdrModel model(test_cfg(), rng);
    model.f2.W.back().v.setZero();
    model.f2.b.back().v.setZero();

    const RSlice gt = phantom_slice(32, 5);
    const SamplingMask full = make_mask(MaskKind::Full, 32, 32, 1.0, 1.0, 0);
    const CSlice b = fft2c(gt.cast<std::complex<double>>());
    const IdrOutput out = idr_refine(CSlice::Zero(32, 32), b, full, model);
    REQUIRE((out.x_out - gt.cast<std::complex<double>>()).abs().maxCoeff() < 1e-6);
}

TEST_CASE("idr_refine: post-projection pins measured frequencies to b") {
    Rng rng(7);
    IdrModel model(test_cfg(), rng);  // random residual net, nonzero r

    const RSlice gt = phantom_slice(32, 8);
    const SamplingMask mask = make_mask(MaskKind::Gauss1D, 32, 32, 4.0, 0.1, 9);
    const CSlice b = undersample(fft2c(gt.cast<std::complex<double>>()), mask);
    const IdrOutput out = idr_refine(CSlice::Zero(32, 32), b, mask, model);
    REQUIRE(out.post_projected);
    const CSlice k = fft2c(out.x_out);
    REQUIRE(((k * mask.complex() - b * mask.complex()).abs()).maxCoeff() < 1e-5);
    REQUIRE((out.r.abs() > 0.0).any());
}

TEST_CASE("idr_loss: zero at the truth, non-negative, w scales only the freq term") {
    const RSlice gt = phantom_slice(32, 11);
    const CSlice gtc = gt.cast<std::complex<double>>();
    const SamplingMask mask = make_mask(MaskKind::Gauss1D, 32, 32, 4.0, 0.1, 12);
    const CSlice b = undersample(fft2c(gtc), mask);
    const RSlice w = frequency_weight_mask(32, 32, 0.1);
    IdrConfig cfg = test_cfg();

    const IdrLossBreakdown zero = idr_loss(gtc, gtc, b, mask, w, cfg);
    REQUIRE_THAT(zero.total(), WithinAbs(0.0, 1e-10));

    Rng rng(13);
    CSlice x = gtc;
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += 0.05 * rng.normal();
    const IdrLossBreakdown l1 = idr_loss(x, gtc, b, mask, w, cfg);
    REQUIRE(l1.total() >= 0.0);

    const RSlice w2 = (2.0 * w).eval();
    const IdrLossBreakdown l2 = idr_loss(x, gtc, b, mask, w2, cfg);
    REQUIRE_THAT(l2.freq, WithinAbs(2.0 * l1.freq, 1e-9));
    REQUIRE_THAT(l2.image, WithinAbs(l1.image, 1e-12));
    REQUIRE_THAT(l2.fidelity, WithinAbs(l1.fidelity, 1e-12));
}

TEST_CASE("idr_loss: w=0 and mu=0 reduce to the image term") {
    const RSlice gt = phantom_slice(32, 14);
    const CSlice gtc = gt.cast<std::complex<double>>();
    const SamplingMask mask = make_mask(MaskKind::Gauss1D, 32, 32, 4.0, 0.1, 15);
    const CSlice b = undersample(fft2c(gtc), mask);
    IdrConfig cfg = test_cfg();
    cfg.mu = 0.0;

    Rng rng(16);
    CSlice x = gtc;
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += 0.1 * rng.normal();
    const IdrLossBreakdown l = idr_loss(x, gtc, b, mask, RSlice::Zero(32, 32), cfg);
    REQUIRE(l.freq == 0.0);
    REQUIRE(l.fidelity == 0.0);
    REQUIRE_THAT(l.total(), WithinAbs(std::sqrt((x - gtc).abs2().sum()), 1e-12));
}

TEST_CASE("idr_loss gradient matches finite differences (both norm variants)") {
    const int n = 16;
    const RSlice gt = phantom_slice(n, 21);
    const CSlice gtc = gt.cast<std::complex<double>>();
    const SamplingMask mask = make_mask(MaskKind::Gauss1D, n, n, 2.0, 0.1, 22);
    const CSlice b = undersample(fft2c(gtc), mask);
    const RSlice w = frequency_weight_mask(n, n, 0.1);

    for (bool squared : {false, true}) {
        IdrConfig cfg = test_cfg();
        cfg.squared_norms = squared;
        Rng rng(23);
        RSlice r(n, n);
        for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = 0.1 * rng.normal();
        const CSlice x0 = 0.7 * gtc;

        auto loss_at = [&](const RSlice& rr) {
            const CSlice x = x0 + rr.cast<std::complex<double>>();
            return idr_loss(x, gtc, b, mask, w, cfg).total();
        };
        RSlice grad;
        idr_loss(x0 + r.cast<std::complex<double>>(), gtc, b, mask, w, cfg, &grad);

        Rng pick(24);
        for (int probe = 0; probe < 6; ++probe) {
            const int y = static_cast<int>(pick.below(n)), x = static_cast<int>(pick.below(n));
            RSlice rp = r, rm = r;
            const double h = 1e-6;
            rp(y, x) += h;
            rm(y, x) -= h;
            const double num = (loss_at(rp) - loss_at(rm)) / (2 * h);
            REQUIRE_THAT(grad(y, x), WithinAbs(num, 1e-4 * std::max(1.0, std::abs(num))));
        }
    }
}

TEST_CASE("IdrTrainState: full training-step gradient matches finite differences") {
    IdrConfig cfg = test_cfg();
    cfg.post_projection = true;
    IdrTrainState state(cfg, 31, 1e-3, 0.0, 0.0);

    const int n = 16;
    const RSlice gt = phantom_slice(n, 32);
    const CSlice gtc = gt.cast<std::complex<double>>();
    const SamplingMask mask = make_mask(MaskKind::Gauss1D, n, n, 2.0, 0.1, 33);
    const CSlice b = undersample(fft2c(gtc), mask);
    const RSlice w = frequency_weight_mask(n, n, 0.1);
    const CSlice x_mad = 0.5 * gtc;

    auto full_loss = [&] {
        const IdrOutput out = idr_refine(x_mad, b, mask, state.model);
        return idr_loss(out.x_out, gtc, b, mask, w, cfg).total();
    };

    IdrModel::Cache cache;
    const IdrOutput out = idr_refine(x_mad, b, mask, state.model, &cache);
    RSlice dr;
    idr_loss(out.x_out, gtc, b, mask, w, cfg, &dr);
    dr = project_unmeasured(dr, mask);
    for (auto* p : state.params) p->zero_grad();
    state.model.residual_backward(dr, cache);

    auto fd = [&](double& slot) {
        const double keep = slot, h = 1e-6;
        slot = keep + h;
        const double fp = full_loss();
        slot = keep - h;
        const double fm = full_loss();
        slot = keep;
        return (fp - fm) / (2 * h);
    };
    auto& wmid = state.model.f2.W[1];
    REQUIRE_THAT(wmid.g(3, 5), WithinAbs(fd(wmid.v(3, 5)), 2e-4));
    auto& enc0 = state.model.encoder.convs[0];
    REQUIRE_THAT(enc0.W.g(1, 4), WithinAbs(fd(enc0.W.v(1, 4)), 2e-4));
}

TEST_CASE("pretrain_random_masks: zero steps is a no-op; fixed seed reproduces runs") {
    IdrConfig cfg = test_cfg();
    PretrainData data;
    data.gt_slices = {phantom_slice(32, 41), phantom_slice(32, 42)};

    IdrTrainState a(cfg, 50, 1e-3, 0.0, 1.0);
    const nn::Mat before = a.model.f2.W[0].v;
    pretrain_random_masks(a, data, {MaskKind::Gauss1D}, {4.0}, 0, 7);
    REQUIRE(a.model.f2.W[0].v == before);

    IdrTrainState s1(cfg, 50, 1e-3, 0.0, 1.0), s2(cfg, 50, 1e-3, 0.0, 1.0);
    std::vector<double> l1, l2;
    pretrain_random_masks(s1, data, {MaskKind::Gauss1D, MaskKind::Radial}, {4.0, 8.0}, 5, 7, &l1);
    pretrain_random_masks(s2, data, {MaskKind::Gauss1D, MaskKind::Radial}, {4.0, 8.0}, 5, 7, &l2);
    REQUIRE(l1 == l2);
    REQUIRE(s1.model.f2.W[0].v == s2.model.f2.W[0].v);

    REQUIRE_THROWS_AS(pretrain_random_masks(s1, data, {}, {4.0}, 1, 7), ValidationError);
    REQUIRE_THROWS_AS(pretrain_random_masks(s1, data, {MaskKind::Gauss1D}, {}, 1, 7),
                      ValidationError);
}

TEST_CASE("empirical_variance: constant function gives the zero map") {
    const int n = 16;
    const SamplingMask mask = make_mask(MaskKind::Gauss1D, n, n, 2.0, 0.1, 51);
    const CSlice y = CSlice::Constant(n, n, std::complex<double>(0.3, 0.1));
    auto fn = [&](const CSlice& yy, std::uint64_t) { return yy; };
    const VarianceReport rep = empirical_variance(fn, y, mask, 4);
    REQUIRE(rep.mean_var == 0.0);
    REQUIRE((rep.var_map == 0.0).all());
    REQUIRE(rep.measured_freq_var == 0.0);
    REQUIRE_THROWS_AS(empirical_variance(fn, y, mask, 1), ValidationError);
}

TEST_CASE("empirical_variance: data-consistent stochastic outputs have no measured-freq variance") {
    const int n = 32;
    const RSlice gt = phantom_slice(n, 52);
    const SamplingMask mask = make_mask(MaskKind::Gauss1D, n, n, 4.0, 0.1, 53);
    const CSlice b = undersample(fft2c(gt.cast<std::complex<double>>()), mask);

    auto fn = [&](const CSlice& y, std::uint64_t seed) {
        Rng rng(derive_seed(seed, 99));
        CSlice guess(n, n);
        for (Eigen::Index i = 0; i < guess.size(); ++i)
            guess.data()[i] = std::complex<double>(rng.normal(), 0.0);
        return data_consistency(guess, y, mask);
    };
    const VarianceReport rep = empirical_variance(fn, b, mask, 6);
    REQUIRE(rep.measured_freq_var < 1e-8);
    REQUIRE(rep.mean_var > 1e-4);  // unmeasured content varies across seeds
}

TEST_CASE("variance report file carries the ratio") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "prinr_var";
    fs::create_directories(dir);
    write_variance_report(dir / "variance_report.json", 0.02, 0.01, 8, 1e-10);
    const auto j = nlohmann::json::parse(read_file_bytes(dir / "variance_report.json"));
    REQUIRE_THAT(j.at("ratio").get<double>(), WithinAbs(0.5, 1e-12));
    REQUIRE(j.at("num_seeds").get<int>() == 8);
}
