#include <catch2/catch_amalgamated.hpp>

#include "prinr/inr.hpp"

using namespace prinr;
using Catch::Matchers::WithinAbs;
using nn::Mat;

namespace {

Mat random_mat(int r, int c, std::uint64_t seed) {
    Rng rng(seed);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("encode_coords: zero input, parity, bounds, pinned values") {
    FrequencyEncoding enc(8, 2, 10.0, 0);

    SECTION("x = 0 gives sines 0 and cosines 1") {
        const Mat g = enc.encode(Mat::Zero(2, 1));
        for (int i = 0; i < 8; ++i) {
            REQUIRE(g(i, 0) == 0.0);
            REQUIRE(g(8 + i, 0) == 1.0);
        }
    }
    SECTION("negating x negates sines, keeps cosines") {
        Mat x = random_mat(2, 5, 3);
        const Mat gp = enc.encode(x), gn = enc.encode((-x).eval());
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 5; ++j) {
                REQUIRE_THAT(gn(i, j), WithinAbs(-gp(i, j), 1e-12));
                REQUIRE_THAT(gn(8 + i, j), WithinAbs(gp(8 + i, j), 1e-12));
            }
    }
    SECTION("output bounded in [-1, 1] everywhere") {
        const Mat g = enc.encode(random_mat(2, 100, 4));
        REQUIRE(g.maxCoeff() <= 1.0);
        REQUIRE(g.minCoeff() >= -1.0);
    }
    SECTION("pinned regression for seed-0 encoding of (0.5, -0.25)") {
        Mat x(2, 1);
        x << 0.5, -0.25;
        const Mat g = enc.encode(x);
        // frozen from the first run of this configuration
        REQUIRE_THAT(g(0, 0), WithinAbs(-0.88353767074562639, 1e-9));
        REQUIRE_THAT(g(8, 0), WithinAbs(0.46836010117578664, 1e-9));
    }
    SECTION("dimension mismatch rejected") {
        REQUIRE_THROWS_AS(enc.encode(Mat::Zero(3, 1)), ValidationError);
    }
    SECTION("axis factors rescale B columns") {
        FrequencyEncoding iso(8, 3, 10.0, 1);
        FrequencyEncoding aniso(8, 3, 10.0, 1, {1.0, 1.0, 0.5});
        REQUIRE(aniso.B.col(2).norm() < iso.B.col(2).norm());
        REQUIRE(aniso.B.col(0) == iso.B.col(0));
    }
}

TEST_CASE("SirenMLP: zero weights give zero output; trivial single layer") {
    Rng rng(5);
    SirenMLP net("s", {3, 8, 1}, 30.0, 30.0, rng);
    for (auto& t : net.W) t.v.setZero();
    for (auto& t : net.b) t.v.setZero();
    const Mat out = net.forward(random_mat(3, 7, 6));
    REQUIRE((out.array() == 0.0).all());

    SirenMLP one("o", {1, 1, 1}, 30.0, 30.0, rng);
    one.W[0].v(0, 0) = 1.0;
    one.b[0].v.setZero();
    one.W[1].v(0, 0) = 1.0;
    one.b[1].v.setZero();
    // sin(30 * 1 * 0 + 0) = 0 through the head
    REQUIRE(one.forward(Mat::Zero(1, 1))(0, 0) == 0.0);

    REQUIRE_THROWS_AS(net.forward(Mat::Constant(3, 1, std::nan(""))), ValidationError);
}

TEST_CASE("SirenMLP: analytic input gradient matches central differences on 100 probes") {
    Rng rng(17);
    SirenMLP net("s", {4, 32, 32, 1}, 30.0, 30.0, rng);
    Rng probe_rng(18);
    double worst = 0.0;
    for (int p = 0; p < 100; ++p) {
        Eigen::VectorXd x(4);
        for (int i = 0; i < 4; ++i) x(i) = probe_rng.uniform(-1.0, 1.0);
        const Eigen::VectorXd g = net.input_gradient(x);
        Eigen::VectorXd num(4);
        const double h = 1e-4;
        for (int i = 0; i < 4; ++i) {
            Eigen::VectorXd xp = x, xm = x;
            xp(i) += h;
            xm(i) -= h;
            num(i) = (net.forward(xp)(0, 0) - net.forward(xm)(0, 0)) / (2 * h);
        }
        const double rel = (g - num).norm() / std::max({g.norm(), num.norm(), 1e-12});
        worst = std::max(worst, rel);
    }
    REQUIRE(worst < 1e-4);
}

TEST_CASE("SirenMLP: parameter gradients match finite differences") {
    Rng rng(21);
    SirenMLP net("s", {3, 10, 10, 2}, 30.0, 30.0, rng);
    Mat x = random_mat(3, 6, 22);
    const Mat R = random_mat(2, 6, 23);

    auto loss = [&] { return net.forward(x).cwiseProduct(R).sum(); };

    SirenMLP::Cache cache;
    net.forward(x, &cache);
    nn::ParamList params;
    net.params(params);
    for (auto* p : params) p->zero_grad();
    const Mat dx = net.backward(R, cache);

    auto fd = [&](double& slot) {
        const double keep = slot, h = 1e-6;
        slot = keep + h;
        const double fp = loss();
        slot = keep - h;
        const double fm = loss();
        slot = keep;
        return (fp - fm) / (2 * h);
    };
    for (auto* p : params) {
        const double an = p->g.data()[p->g.size() / 2];
        const double nu = fd(p->v.data()[p->v.size() / 2]);
        REQUIRE_THAT(an, WithinAbs(nu, 5e-4 * std::max(1.0, std::abs(nu))));
    }
    REQUIRE_THAT(dx(1, 2), WithinAbs(fd(x(1, 2)), 5e-4));
}

TEST_CASE("SliceEncoder: zero input with zero biases gives zero features") {
    Rng rng(31);
    SliceEncoder enc("e", 1, {4, 6, 6}, rng);
    for (auto& c : enc.convs) c.b.v.setZero();
    const nn::FeatureMap f = enc.forward(RSlice::Zero(10, 10));
    REQUIRE(f.channels == 6);
    REQUIRE((f.data.array() == 0.0).all());
}

TEST_CASE("SliceEncoder: integer translation equivariance in the interior") {
    Rng rng(32);
    SliceEncoder enc("e", 1, {4, 6, 6}, rng);
    const int n = 24, shift = 3;
    RSlice img(n, n);
    Rng drng(33);
    for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = drng.uniform();
    RSlice moved = RSlice::Zero(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x + shift < n; ++x) moved(y, x + shift) = img(y, x);

    const nn::FeatureMap fa = enc.forward(img);
    const nn::FeatureMap fb = enc.forward(moved);
    // receptive field is 7 px (three 3x3 layers); stay well inside
    const int margin = 8;
    for (int c = 0; c < fa.channels; ++c)
        for (int y = margin; y < n - margin; ++y)
            for (int x = margin; x + shift < n - margin; ++x)
                REQUIRE_THAT(fb.at(c, y, x + shift), WithinAbs(fa.at(c, y, x), 1e-9));
}

TEST_CASE("bilinear sampling returns node values at grid nodes") {
    Rng rng(41);
    nn::FeatureMap f(3, 5, 7);
    f.data = random_mat(3, 35, 42);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 7; ++x) {
            const Eigen::VectorXd v = sample_bilinear(f, x, y);
            for (int c = 0; c < 3; ++c) REQUIRE(v(c) == f.at(c, y, x));
        }
    // midpoint between two nodes is their average
    const Eigen::VectorXd mid = sample_bilinear(f, 1.5, 2.0);
    for (int c = 0; c < 3; ++c)
        REQUIRE_THAT(mid(c), WithinAbs(0.5 * (f.at(c, 2, 1) + f.at(c, 2, 2)), 1e-12));
}

TEST_CASE("ConvLstmCell: gradients match finite differences") {
    Rng rng(51);
    ConvLstmCell cell("c", 2, 3, 3, rng);
    nn::FeatureMap x(2, 4, 4);
    x.data = random_mat(2, 16, 52);
    ConvLstmCell::State prev;
    prev.h = random_mat(3, 16, 53);
    prev.c = random_mat(3, 16, 54);
    const Mat Rh = random_mat(3, 16, 55), Rc = random_mat(3, 16, 56);

    auto loss = [&] {
        const auto s = cell.forward(x, prev, nullptr);
        return s.h.cwiseProduct(Rh).sum() + s.c.cwiseProduct(Rc).sum();
    };

    ConvLstmCell::Cache cache;
    cell.forward(x, prev, &cache);
    nn::ParamList params;
    cell.params(params);
    for (auto* p : params) p->zero_grad();
    Mat dh_prev, dc_prev;
    const nn::FeatureMap dx = cell.backward(Rh, Rc, cache, &dh_prev, &dc_prev);

    auto fd = [&](double& slot) {
        const double keep = slot, h = 1e-6;
        slot = keep + h;
        const double fp = loss();
        slot = keep - h;
        const double fm = loss();
        slot = keep;
        return (fp - fm) / (2 * h);
    };
    REQUIRE_THAT(cell.conv_x.W.g(4, 7), WithinAbs(fd(cell.conv_x.W.v(4, 7)), 2e-4));
    REQUIRE_THAT(cell.conv_h.W.g(2, 11), WithinAbs(fd(cell.conv_h.W.v(2, 11)), 2e-4));
    REQUIRE_THAT(dx.data(1, 6), WithinAbs(fd(x.data(1, 6)), 2e-4));
    REQUIRE_THAT(dh_prev(2, 3), WithinAbs(fd(prev.h(2, 3)), 2e-4));
    REQUIRE_THAT(dc_prev(1, 9), WithinAbs(fd(prev.c(1, 9)), 2e-4));
}

TEST_CASE("VolumeAggregator: repeated identical slices give a z-constant field") {
    AggregatorConfig cfg;
    cfg.feat_channels = {4, 6};
    cfg.lstm_depth = 2;
    cfg.lstm_hidden = 5;
    cfg.c2_dim = 4;
    Rng rng(61);
    VolumeAggregator agg(cfg, rng);

    RSlice s(8, 8);
    Rng drng(62);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = drng.uniform();
    const int m = 8;
    const std::vector<RSlice> slices(m, s);
    const auto c2 = agg.forward(slices);
    REQUIRE(static_cast<int>(c2.size()) == m);

    // steady state after 2 slices of burn-in at both ends
    double zvar = 0.0;
    for (int i = 3; i < m - 2; ++i)
        zvar = std::max(zvar, (c2[i].data - c2[2].data).array().abs().maxCoeff());
    REQUIRE(zvar < 1e-5);
}

TEST_CASE("VolumeAggregator: bidirectional symmetry of hidden states") {
    AggregatorConfig cfg;
    cfg.feat_channels = {4};
    cfg.lstm_depth = 1;
    cfg.lstm_hidden = 4;
    cfg.c2_dim = 3;
    Rng rng(63);
    VolumeAggregator agg(cfg, rng);
    // make both directions share weights so the symmetry is exact
    for (int l = 0; l < cfg.lstm_depth; ++l) {
        agg.bwd_cells[l].conv_x.W.v = agg.fwd_cells[l].conv_x.W.v;
        agg.bwd_cells[l].conv_x.b.v = agg.fwd_cells[l].conv_x.b.v;
        agg.bwd_cells[l].conv_h.W.v = agg.fwd_cells[l].conv_h.W.v;
        agg.bwd_cells[l].conv_h.b.v = agg.fwd_cells[l].conv_h.b.v;
    }

    std::vector<RSlice> slices;
    Rng drng(64);
    for (int i = 0; i < 5; ++i) {
        RSlice s(6, 6);
        for (Eigen::Index k = 0; k < s.size(); ++k) s.data()[k] = drng.uniform();
        slices.push_back(s);
    }
    std::vector<RSlice> reversed(slices.rbegin(), slices.rend());

    VolumeAggregator::Hidden ha, hb;
    agg.forward(slices, nullptr, &ha);
    agg.forward(reversed, nullptr, &hb);
    // forward pass over reversed slices equals the backward pass over the
    // original order, slice for slice
    for (int i = 0; i < 5; ++i) {
        REQUIRE((hb.fwd[i] - ha.bwd[4 - i]).cwiseAbs().maxCoeff() < 1e-12);
        REQUIRE((hb.bwd[i] - ha.fwd[4 - i]).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("VolumeAggregator: zero slices with zero biases give a zero field") {
    AggregatorConfig cfg;
    cfg.feat_channels = {3};
    cfg.lstm_depth = 1;
    cfg.lstm_hidden = 3;
    cfg.c2_dim = 2;
    Rng rng(65);
    VolumeAggregator agg(cfg, rng);
    for (auto& c : agg.encoder.convs) c.b.v.setZero();
    for (auto* cell : {&agg.fwd_cells[0], &agg.bwd_cells[0]}) {
        cell->conv_x.b.v.setZero();
        cell->conv_h.b.v.setZero();
    }
    agg.fuse.b.v.setZero();

    const std::vector<RSlice> slices(3, RSlice::Zero(6, 6));
    const auto c2 = agg.forward(slices);
    for (const auto& f : c2) REQUIRE((f.data.array() == 0.0).all());
}

TEST_CASE("VolumeAggregator: minimal two-slice input and single-slice rejection") {
    AggregatorConfig cfg;
    cfg.feat_channels = {3};
    cfg.lstm_depth = 1;
    cfg.lstm_hidden = 3;
    cfg.c2_dim = 2;
    Rng rng(66);
    VolumeAggregator agg(cfg, rng);
    const auto c2 = agg.forward({RSlice::Zero(6, 6), RSlice::Zero(6, 6)});
    REQUIRE(c2.size() == 2);
    REQUIRE_THROWS_AS(agg.forward({RSlice::Zero(6, 6)}), ValidationError);
}

TEST_CASE("VolumeAggregator: gradients match finite differences") {
    AggregatorConfig cfg;
    cfg.feat_channels = {3};
    cfg.lstm_depth = 2;
    cfg.lstm_hidden = 3;
    cfg.c2_dim = 2;
    Rng rng(67);
    VolumeAggregator agg(cfg, rng);

    std::vector<RSlice> slices;
    Rng drng(68);
    for (int i = 0; i < 3; ++i) {
        RSlice s(4, 4);
        for (Eigen::Index k = 0; k < s.size(); ++k) s.data()[k] = drng.normal();
        slices.push_back(s);
    }
    std::vector<nn::FeatureMap> R;
    for (int i = 0; i < 3; ++i) {
        nn::FeatureMap r(2, 4, 4);
        r.data = random_mat(2, 16, 70 + i);
        R.push_back(r);
    }

    auto loss = [&] {
        const auto c2 = agg.forward(slices);
        double acc = 0.0;
        for (int i = 0; i < 3; ++i) acc += c2[i].data.cwiseProduct(R[i].data).sum();
        return acc;
    };

    VolumeAggregator::Cache cache;
    agg.forward(slices, &cache);
    nn::ParamList params;
    agg.params(params);
    for (auto* p : params) p->zero_grad();
    agg.backward(R, cache);

    auto fd = [&](double& slot) {
        const double keep = slot, h = 1e-6;
        slot = keep + h;
        const double fp = loss();
        slot = keep - h;
        const double fm = loss();
        slot = keep;
        return (fp - fm) / (2 * h);
    };
    REQUIRE_THAT(agg.encoder.convs[0].W.g(1, 3),
                 WithinAbs(fd(agg.encoder.convs[0].W.v(1, 3)), 3e-4));
    REQUIRE_THAT(agg.fwd_cells[0].conv_x.W.g(2, 5),
                 WithinAbs(fd(agg.fwd_cells[0].conv_x.W.v(2, 5)), 3e-4));
    REQUIRE_THAT(agg.fwd_cells[1].conv_h.W.g(3, 8),
                 WithinAbs(fd(agg.fwd_cells[1].conv_h.W.v(3, 8)), 3e-4));
    REQUIRE_THAT(agg.bwd_cells[0].conv_h.W.g(1, 2),
                 WithinAbs(fd(agg.bwd_cells[0].conv_h.W.v(1, 2)), 3e-4));
    REQUIRE_THAT(agg.fuse.W.g(1, 4), WithinAbs(fd(agg.fuse.W.v(1, 4)), 3e-4));
}
