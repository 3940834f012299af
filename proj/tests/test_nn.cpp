#include <catch2/catch_amalgamated.hpp>

#include "prinr/denoiser.hpp"
#include "prinr/nn/adam.hpp"
#include "prinr/nn/layers.hpp"

using namespace prinr;
using nn::Mat;

namespace {

// Central finite difference of a scalar function w.r.t. one entry.
template <typename F>
double fd(F&& f, double& slot, double h = 1e-5) {
    const double keep = slot;
    slot = keep + h;
    const double fp = f();
    slot = keep - h;
    const double fm = f();
    slot = keep;
    return (fp - fm) / (2.0 * h);
}

void check_close(double analytic, double numeric, double tol = 2e-4) {
    const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    INFO("analytic=" << analytic << " numeric=" << numeric);
    REQUIRE(std::abs(analytic - numeric) / scale < tol);
}

Mat random_mat(int r, int c, std::uint64_t seed) {
    Rng rng(seed);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

nn::FeatureMap random_fm(int c, int h, int w, std::uint64_t seed) {
    nn::FeatureMap f(c, h, w);
    f.data = random_mat(c, h * w, seed);
    return f;
}

}  // namespace

TEST_CASE("Dense: gradients match finite differences") {
    Rng rng(1);
    nn::Dense layer("d", 5, 3, rng);
    Mat x = random_mat(5, 4, 2);
    const Mat R = random_mat(3, 4, 3);  // fixed projection defines scalar loss

    auto loss = [&] {
        return (layer.forward(x).cwiseProduct(R)).sum();
    };

    nn::Dense::Cache cache;
    layer.forward(x, &cache);
    layer.W.zero_grad();
    layer.b.zero_grad();
    const Mat dx = layer.backward(R, cache);

    for (auto [r, c] : {std::pair{0, 0}, {2, 4}, {1, 2}})
        check_close(layer.W.g(r, c), fd(loss, layer.W.v(r, c)));
    check_close(layer.b.g(1, 0), fd(loss, layer.b.v(1, 0)));
    check_close(dx(3, 1), fd(loss, x(3, 1)));
}

TEST_CASE("Conv2d: gradients match finite differences (zero and reflect pad)") {
    for (auto pad : {nn::Pad::Zero, nn::Pad::Reflect}) {
        Rng rng(7);
        nn::Conv2d conv("c", 2, 3, 3, pad, rng);
        nn::FeatureMap x = random_fm(2, 5, 6, 11);
        nn::FeatureMap R = random_fm(3, 5, 6, 12);

        auto loss = [&] {
            return conv.forward(x).data.cwiseProduct(R.data).sum();
        };

        nn::Conv2d::Cache cache;
        conv.forward(x, &cache);
        conv.W.zero_grad();
        conv.b.zero_grad();
        const nn::FeatureMap dx = conv.backward(R, cache);

        for (auto [r, c] : {std::pair{0, 0}, {2, 17}, {1, 9}})
            check_close(conv.W.g(r, c), fd(loss, conv.W.v(r, c)));
        check_close(conv.b.g(2, 0), fd(loss, conv.b.v(2, 0)));
        // input gradient probes, including border pixels where padding acts
        for (auto [ch, p] : {std::pair{0, 0}, {1, 29}, {0, 13}})
            check_close(dx.data(ch, p), fd(loss, x.data(ch, p)));
    }
}

TEST_CASE("GroupNorm: gradients match finite differences") {
    nn::GroupNorm gn("g", 4, 2);
    gn.gamma.v << 1.1, 0.9, 1.3, 0.7;
    gn.beta.v << 0.1, -0.2, 0.0, 0.3;
    nn::FeatureMap x = random_fm(4, 3, 3, 21);
    nn::FeatureMap R = random_fm(4, 3, 3, 22);

    auto loss = [&] {
        return gn.forward(x).data.cwiseProduct(R.data).sum();
    };

    nn::GroupNorm::Cache cache;
    gn.forward(x, &cache);
    gn.gamma.zero_grad();
    gn.beta.zero_grad();
    const nn::FeatureMap dx = gn.backward(R, cache);

    check_close(gn.gamma.g(2, 0), fd(loss, gn.gamma.v(2, 0)));
    check_close(gn.beta.g(0, 0), fd(loss, gn.beta.v(0, 0)));
    for (auto [ch, p] : {std::pair{0, 0}, {3, 8}, {1, 4}})
        check_close(dx.data(ch, p), fd(loss, x.data(ch, p)));
}

TEST_CASE("silu backward matches finite differences") {
    Mat x = random_mat(3, 3, 31);
    const Mat R = random_mat(3, 3, 32);
    auto loss = [&] { return nn::silu(x).cwiseProduct(R).sum(); };
    const Mat dx = nn::silu_backward(x, R);
    check_close(dx(1, 1), fd(loss, x(1, 1)));
    check_close(dx(0, 2), fd(loss, x(0, 2)));
}

TEST_CASE("pooling and upsampling are adjoint pairs") {
    const nn::FeatureMap x = random_fm(2, 4, 6, 41);
    const nn::FeatureMap y = random_fm(2, 2, 3, 42);
    // <avgpool(x), y> == <x, avgpool_backward(y)>
    const double lhs = nn::avgpool2(x).data.cwiseProduct(y.data).sum();
    const double rhs = x.data.cwiseProduct(nn::avgpool2_backward(y).data).sum();
    REQUIRE_THAT(lhs, Catch::Matchers::WithinRel(rhs, 1e-12));

    const double lhs2 = nn::upnearest2(y).data.cwiseProduct(x.data).sum();
    const double rhs2 = y.data.cwiseProduct(nn::upnearest2_backward(x).data).sum();
    REQUIRE_THAT(lhs2, Catch::Matchers::WithinRel(rhs2, 1e-12));
}

TEST_CASE("dropout is seeded and inverse-scaled") {
    Mat x = Mat::Ones(100, 100);
    Rng a(5), b(5);
    nn::DropoutMask ma, mb;
    const Mat ya = nn::dropout(x, 0.3, a, &ma);
    const Mat yb = nn::dropout(x, 0.3, b, &mb);
    REQUIRE(ya == yb);
    const double mean = ya.mean();
    REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(1.0, 0.02));
}

TEST_CASE("Adam drives a quadratic to its minimum and clips gradients") {
    nn::Tensor p("p", 3, 1);
    p.v << 5.0, -4.0, 2.0;
    nn::Adam opt(0.1, 0.0, 1.0);
    for (int it = 0; it < 400; ++it) {
        p.zero_grad();
        p.g = 2.0 * p.v;  // d/dp ||p||^2
        const double gnorm = opt.step({&p});
        REQUIRE(std::isfinite(gnorm));
    }
    REQUIRE(p.v.norm() < 1e-2);
}

TEST_CASE("ResBlock: parameter and input gradients match finite differences") {
    Rng rng(51);
    ResBlock block("rb", 3, 5, 8, rng);
    nn::FeatureMap x = random_fm(3, 4, 4, 52);
    Eigen::VectorXd e = random_mat(8, 1, 53).col(0);
    nn::FeatureMap R = random_fm(5, 4, 4, 54);

    auto loss = [&] {
        return block.forward(x, e, 0.0, nullptr, nullptr).data.cwiseProduct(R.data).sum();
    };

    ResBlock::Cache cache;
    block.forward(x, e, 0.0, nullptr, &cache);
    nn::ParamList params;
    block.params(params);
    for (auto* t : params) t->zero_grad();
    Eigen::VectorXd dembed = Eigen::VectorXd::Zero(8);
    const nn::FeatureMap dx = block.backward(R, cache, &dembed, false);

    check_close(block.conv1.W.g(2, 10), fd(loss, block.conv1.W.v(2, 10)));
    check_close(block.conv2.W.g(1, 20), fd(loss, block.conv2.W.v(1, 20)));
    check_close(block.film.W.g(3, 2), fd(loss, block.film.W.v(3, 2)));
    check_close(block.gn1.gamma.g(1, 0), fd(loss, block.gn1.gamma.v(1, 0)));
    check_close(block.skip.W.g(4, 1), fd(loss, block.skip.W.v(4, 1)));
    check_close(dembed(5), fd(loss, e(5)));
    check_close(dx.data(2, 7), fd(loss, x.data(2, 7)));
}

TEST_CASE("CondUnet: end-to-end gradients match finite differences") {
    DenoiserConfig cfg;
    cfg.depth = 2;
    cfg.filters_per_stage = {6, 8};
    cfg.channel_multipliers = {1, 2};
    cfg.base_channels = 6;
    cfg.cond_embed_dim = 12;
    Rng rng(61);
    CondUnet net(cfg, rng);

    const int n = 8;
    RSlice x_t(n, n), R(n, n);
    Rng data_rng(62);
    for (Eigen::Index i = 0; i < x_t.size(); ++i) x_t.data()[i] = data_rng.normal();
    for (Eigen::Index i = 0; i < R.size(); ++i) R.data()[i] = data_rng.normal();
    MadConditioning cond;
    cond.corrupted_image = RSlice::Zero(n, n);
    for (Eigen::Index i = 0; i < cond.corrupted_image.size(); ++i)
        cond.corrupted_image.data()[i] = data_rng.uniform();
    cond.motion_hint = Eigen::VectorXd::Zero(10);
    cond.motion_hint(0) = 0.03;
    cond.motion_hint(4) = 0.02;

    const int t = 7;
    auto loss = [&] {
        return (net.forward(x_t, t, cond) * R).sum();
    };

    CondUnet::Cache cache;
    net.forward(x_t, t, cond, 0.0, nullptr, &cache);
    nn::ParamList params;
    net.params(params);
    for (auto* p : params) p->zero_grad();
    net.backward(R, cache);

    // probe a spread of parameters across the architecture
    Rng pick(63);
    int checked = 0;
    for (auto* p : params) {
        if (pick.uniform() < 0.35 || p->v.size() < 4) continue;
        const Eigen::Index i = static_cast<Eigen::Index>(pick.below(p->v.size()));
        check_close(p->g.data()[i], fd(loss, p->v.data()[i], 1e-5));
        if (++checked >= 14) break;
    }
    REQUIRE(checked >= 10);
}

TEST_CASE("CondUnet forward is deterministic and shape-checked") {
    DenoiserConfig cfg = DenoiserConfig::tiny();
    Rng rng(71);
    CondUnet net(cfg, rng);
    MadConditioning cond;
    cond.corrupted_image = RSlice::Zero(16, 16);
    RSlice x = RSlice::Zero(16, 16);
    const RSlice a = net.forward(x, 10, cond);
    const RSlice b = net.forward(x, 10, cond);
    REQUIRE((a == b).all());

    MadConditioning bad;
    bad.corrupted_image = RSlice::Zero(8, 16);
    REQUIRE_THROWS_AS(net.forward(x, 10, bad), ValidationError);
    RSlice odd = RSlice::Zero(12, 12);  // not divisible by 8
    MadConditioning codd;
    codd.corrupted_image = RSlice::Zero(12, 12);
    REQUIRE_THROWS_AS(net.forward(odd, 10, codd), ValidationError);
}
