#pragma once

#include <string>
#include <vector>

#include "prinr/diffusion.hpp"
#include "prinr/nn/adam.hpp"
#include "prinr/nn/layers.hpp"

namespace prinr {

struct DenoiserConfig {
    int depth = 4;
    std::vector<int> filters_per_stage{64, 128, 256, 512};
    int base_channels = 32;
    std::vector<int> channel_multipliers{2, 4, 8, 16};  // filters / base
    int input_channels = 4;
    int cond_embed_dim = 128;
    int time_scale = 1000;  // normalizer for the broadcast timestep plane

    void validate() const {
        require(depth >= 1, "DenoiserConfig: depth must be >= 1");
        require(static_cast<int>(filters_per_stage.size()) == depth,
                "DenoiserConfig: filters_per_stage length must equal depth");
        require(static_cast<int>(channel_multipliers.size()) == depth,
                "DenoiserConfig: channel_multipliers length must equal depth");
        for (int f : filters_per_stage) require(f > 0, "DenoiserConfig: filters must be positive");
        require(base_channels > 0 && input_channels > 0 && cond_embed_dim > 0,
                "DenoiserConfig: all dimensions must be positive");
    }

    // CI-scale profile; same topology, narrower stages.
    static DenoiserConfig tiny() {
        DenoiserConfig c;
        c.filters_per_stage = {16, 32, 64, 128};
        c.base_channels = 16;
        c.channel_multipliers = {1, 2, 4, 8};
        return c;
    }
};

namespace detail {
inline int norm_groups(int channels) {
    for (int g = std::min(8, channels); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}
}  // namespace detail

// Pre-activation residual block with FiLM-style additive conditioning from
// the embedding vector.
class ResBlock {
public:
    nn::GroupNorm gn1, gn2;
    nn::Conv2d conv1, conv2, skip;
    nn::Dense film;
    int cin = 0, cout = 0;
    bool has_skip_proj = false;

    ResBlock() = default;
    ResBlock(const std::string& name, int cin_, int cout_, int embed_dim, Rng& rng)
        : gn1(name + ".gn1", cin_, detail::norm_groups(cin_)),
          gn2(name + ".gn2", cout_, detail::norm_groups(cout_)),
          conv1(name + ".conv1", cin_, cout_, 3, nn::Pad::Zero, rng),
          conv2(name + ".conv2", cout_, cout_, 3, nn::Pad::Zero, rng),
          film(name + ".film", embed_dim, cout_, rng),
          cin(cin_),
          cout(cout_),
          has_skip_proj(cin_ != cout_) {
        if (has_skip_proj) skip = nn::Conv2d(name + ".skip", cin_, cout_, 1, nn::Pad::Zero, rng);
    }

    struct Cache {
        nn::GroupNorm::Cache gn1c, gn2c;
        nn::Conv2d::Cache c1c, c2c, skc;
        nn::Dense::Cache filmc;
        nn::Mat pre1, pre2;  // silu pre-activations
        nn::DropoutMask drop;
        int h = 0, w = 0;
    };

    nn::FeatureMap forward(const nn::FeatureMap& x, const Eigen::VectorXd& embed, double drop_rate,
                           Rng* drop_rng, Cache* cache) const {
        nn::GroupNorm::Cache g1c;
        nn::FeatureMap h = gn1.forward(x, cache ? &cache->gn1c : &g1c);
        if (cache) {
            cache->pre1 = h.data;
            cache->h = x.height;
            cache->w = x.width;
        }
        h.data = nn::silu(h.data);
        nn::FeatureMap a = conv1.forward(h, cache ? &cache->c1c : nullptr);

        nn::Dense::Cache fc;
        const nn::Mat e = film.forward(embed, cache ? &cache->filmc : &fc);
        a.data.colwise() += Eigen::VectorXd(e.col(0));

        nn::GroupNorm::Cache g2c;
        nn::FeatureMap h2 = gn2.forward(a, cache ? &cache->gn2c : &g2c);
        if (cache) cache->pre2 = h2.data;
        h2.data = nn::silu(h2.data);
        if (drop_rate > 0.0 && drop_rng)
            h2.data = nn::dropout(h2.data, drop_rate, *drop_rng, cache ? &cache->drop : nullptr);
        nn::FeatureMap out = conv2.forward(h2, cache ? &cache->c2c : nullptr);

        if (has_skip_proj) {
            nn::FeatureMap s = skip.forward(x, cache ? &cache->skc : nullptr);
            out.data += s.data;
        } else {
            out.data += x.data;
        }
        return out;
    }

    nn::FeatureMap backward(const nn::FeatureMap& dout, Cache& cache, Eigen::VectorXd* dembed,
                            bool used_dropout) {
        nn::FeatureMap dh2 = conv2.backward(dout, cache.c2c);
        if (used_dropout) dh2.data = nn::dropout_backward(dh2.data, cache.drop);
        dh2.data = nn::silu_backward(cache.pre2, dh2.data);
        nn::FeatureMap da = gn2.backward(dh2, cache.gn2c);

        // FiLM bias: gradient is the spatial sum per channel
        const nn::Mat de = da.data.rowwise().sum();
        nn::Mat dembed_local = film.backward(de, cache.filmc);
        if (dembed) *dembed += dembed_local.col(0);

        nn::FeatureMap dh = conv1.backward(da, cache.c1c);
        dh.data = nn::silu_backward(cache.pre1, dh.data);
        nn::FeatureMap dx = gn1.backward(dh, cache.gn1c);

        if (has_skip_proj) {
            nn::FeatureMap ds = skip.backward(dout, cache.skc);
            dx.data += ds.data;
        } else {
            dx.data += dout.data;
        }
        return dx;
    }

    void params(nn::ParamList& out) {
        gn1.params(out);
        gn2.params(out);
        conv1.params(out);
        conv2.params(out);
        film.params(out);
        if (has_skip_proj) skip.params(out);
    }
};

// Conditional U-Net noise predictor. Input is a 4-channel stack
// [x_t, corrupted conditioning image, broadcast motion magnitude, broadcast
// normalized timestep]; a learned embedding of (timestep, motion summary)
// additionally modulates every residual block.
class CondUnet {
public:
    DenoiserConfig cfg;
    nn::Conv2d stem;
    std::vector<ResBlock> down;  // depth blocks, coarsening after each but the last
    ResBlock mid;
    std::vector<nn::Conv2d> up_proj;  // upsample projections, coarse to fine
    std::vector<ResBlock> up;
    nn::GroupNorm head_norm;
    nn::Conv2d head;
    nn::Dense embed_motion, embed1, embed2;
    int motion_dim = 10;

    CondUnet() = default;
    CondUnet(const DenoiserConfig& cfg_, Rng& rng) : cfg(cfg_) {
        cfg.validate();
        const int E = cfg.cond_embed_dim;
        const auto& F = cfg.filters_per_stage;
        stem = nn::Conv2d("den.stem", cfg.input_channels, cfg.base_channels, 3, nn::Pad::Zero,
                          rng);
        int prev = cfg.base_channels;
        for (int i = 0; i < cfg.depth; ++i) {
            down.emplace_back("den.down" + std::to_string(i), prev, F[i], E, rng);
            prev = F[i];
        }
        mid = ResBlock("den.mid", F.back(), F.back(), E, rng);
        for (int i = cfg.depth - 2; i >= 0; --i) {
            up_proj.emplace_back("den.upproj" + std::to_string(i), F[i + 1], F[i], 3,
                                 nn::Pad::Zero, rng);
            up.emplace_back("den.up" + std::to_string(i), 2 * F[i], F[i], E, rng);
        }
        head_norm = nn::GroupNorm("den.headnorm", F[0], detail::norm_groups(F[0]));
        head = nn::Conv2d("den.head", F[0], 1, 3, nn::Pad::Zero, rng);
        const int half = E / 2;
        embed_motion = nn::Dense("den.embmot", motion_dim, E - half, rng);
        embed1 = nn::Dense("den.emb1", E, E, rng);
        embed2 = nn::Dense("den.emb2", E, E, rng);
    }

    void params(nn::ParamList& out) {
        stem.params(out);
        for (auto& b : down) b.params(out);
        mid.params(out);
        for (auto& c : up_proj) c.params(out);
        for (auto& b : up) b.params(out);
        head_norm.params(out);
        head.params(out);
        embed_motion.params(out);
        embed1.params(out);
        embed2.params(out);
    }

    struct Cache {
        nn::Conv2d::Cache stemc;
        std::vector<ResBlock::Cache> downc;
        std::vector<nn::FeatureMap> skips;  // post-block activations per stage
        ResBlock::Cache midc;
        std::vector<nn::Conv2d::Cache> upprojc;
        std::vector<ResBlock::Cache> upc;
        nn::GroupNorm::Cache headnc;
        nn::Conv2d::Cache headc;
        nn::Mat head_pre;
        nn::Dense::Cache embmc, emb1c, emb2c;
        nn::Mat emb_pre;                           // silu pre-activation in the embed MLP
        Eigen::VectorXd tfeat, mfeat;
        bool used_dropout = false;
        int ny = 0, nx = 0;
    };

    Eigen::VectorXd time_features(int t) const {
        const int half = cfg.cond_embed_dim / 2;
        Eigen::VectorXd f(half);
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * (i / 2) / std::max(1, half / 2));
            f(i) = i % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq);
        }
        return f;
    }

    // Embedding of (t, motion hint) shared across blocks.
    Eigen::VectorXd embed(int t, const Eigen::VectorXd& motion, Cache* cache) const {
        const Eigen::VectorXd tf = time_features(t);
        Eigen::VectorXd mh = Eigen::VectorXd::Zero(motion_dim);
        if (motion.size() > 0) {
            require(static_cast<int>(motion.size()) == motion_dim,
                    "CondUnet: motion hint dimension mismatch");
            mh = motion;
        }
        nn::Dense::Cache mc, c1, c2;
        const nn::Mat mf = embed_motion.forward(mh, cache ? &cache->embmc : &mc);
        Eigen::VectorXd joint(cfg.cond_embed_dim);
        joint << tf, mf.col(0);
        const nn::Mat pre = embed1.forward(joint, cache ? &cache->emb1c : &c1);
        if (cache) {
            cache->emb_pre = pre;
            cache->tfeat = tf;
            cache->mfeat = mh;
        }
        const nn::Mat act = nn::silu(pre);
        return embed2.forward(act, cache ? &cache->emb2c : &c2).col(0);
    }

    RSlice forward(const RSlice& x_t, int t, const MadConditioning& cond, double drop_rate = 0.0,
                   Rng* drop_rng = nullptr, Cache* cache = nullptr) const {
        const int ny = static_cast<int>(x_t.rows()), nx = static_cast<int>(x_t.cols());
        require(cond.corrupted_image.rows() == ny && cond.corrupted_image.cols() == nx,
                "CondUnet: conditioning image shape mismatch");
        const int down_factor = 1 << (cfg.depth - 1);
        require(ny % down_factor == 0 && nx % down_factor == 0,
                "CondUnet: spatial dims must be divisible by 2^(depth-1)");
        if (cache) {
            cache->ny = ny;
            cache->nx = nx;
            cache->used_dropout = drop_rate > 0.0 && drop_rng != nullptr;
            cache->downc.resize(cfg.depth);
            cache->upprojc.resize(cfg.depth - 1);
            cache->upc.resize(cfg.depth - 1);
            cache->skips.clear();
        }

        const Eigen::VectorXd e = embed(t, cond.motion_hint, cache);

        nn::FeatureMap in(cfg.input_channels, ny, nx);
        const double motion_mag = cond.motion_hint.size() > 0 ? cond.motion_hint(0) : 0.0;
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const Eigen::Index p = static_cast<Eigen::Index>(y) * nx + x;
                in.data(0, p) = x_t(y, x);
                in.data(1, p) = cond.corrupted_image(y, x);
                in.data(2, p) = motion_mag;
                in.data(3, p) = static_cast<double>(t) / cfg.time_scale;
            }

        nn::FeatureMap h = stem.forward(in, cache ? &cache->stemc : nullptr);
        std::vector<nn::FeatureMap> skips;
        for (int i = 0; i < cfg.depth; ++i) {
            h = down[i].forward(h, e, drop_rate, drop_rng, cache ? &cache->downc[i] : nullptr);
            if (i < cfg.depth - 1) {
                skips.push_back(h);
                h = nn::avgpool2(h);
            }
        }
        h = mid.forward(h, e, drop_rate, drop_rng, cache ? &cache->midc : nullptr);
        for (int j = 0; j < cfg.depth - 1; ++j) {
            nn::FeatureMap u = nn::upnearest2(h);
            u = up_proj[j].forward(u, cache ? &cache->upprojc[j] : nullptr);
            nn::FeatureMap cat = nn::concat_channels(u, skips[skips.size() - 1 - j]);
            h = up[j].forward(cat, e, drop_rate, drop_rng, cache ? &cache->upc[j] : nullptr);
        }
        if (cache) cache->skips = std::move(skips);

        nn::GroupNorm::Cache hnc;
        nn::FeatureMap hn = head_norm.forward(h, cache ? &cache->headnc : &hnc);
        if (cache) cache->head_pre = hn.data;
        hn.data = nn::silu(hn.data);
        nn::FeatureMap out = head.forward(hn, cache ? &cache->headc : nullptr);

        RSlice eps(ny, nx);
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x)
                eps(y, x) = out.data(0, static_cast<Eigen::Index>(y) * nx + x);
        return eps;
    }

    // Accumulates parameter gradients for d(loss)/d(eps_hat) = dout.
    void backward(const RSlice& dout, Cache& cache) {
        const int ny = cache.ny, nx = cache.nx;
        nn::FeatureMap d(1, ny, nx);
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x)
                d.data(0, static_cast<Eigen::Index>(y) * nx + x) = dout(y, x);

        nn::FeatureMap dh = head.backward(d, cache.headc);
        dh.data = nn::silu_backward(cache.head_pre, dh.data);
        dh = head_norm.backward(dh, cache.headnc);

        Eigen::VectorXd dembed = Eigen::VectorXd::Zero(cfg.cond_embed_dim);
        std::vector<nn::FeatureMap> dskips(cache.skips.size());
        for (int j = cfg.depth - 2; j >= 0; --j) {
            nn::FeatureMap dcat = up[j].backward(dh, cache.upc[j], &dembed, cache.used_dropout);
            const int uc = up_proj[j].cout;
            nn::FeatureMap du(uc, dcat.height, dcat.width);
            du.data = dcat.data.topRows(uc);
            const std::size_t skip_idx = cache.skips.size() - 1 - j;
            nn::FeatureMap dskip(dcat.channels - uc, dcat.height, dcat.width);
            dskip.data = dcat.data.bottomRows(dcat.channels - uc);
            dskips[skip_idx] = std::move(dskip);
            nn::FeatureMap dup = up_proj[j].backward(du, cache.upprojc[j]);
            dh = nn::upnearest2_backward(dup);
        }
        dh = mid.backward(dh, cache.midc, &dembed, cache.used_dropout);
        for (int i = cfg.depth - 1; i >= 0; --i) {
            if (i < cfg.depth - 1) {
                dh = nn::avgpool2_backward(dh);
                dh.data += dskips[i].data;
            }
            dh = down[i].backward(dh, cache.downc[i], &dembed, cache.used_dropout);
        }
        stem.backward(dh, cache.stemc);

        // embedding MLP
        nn::Mat de2 = embed2.backward(dembed, cache.emb2c);
        de2 = nn::silu_backward(cache.emb_pre, de2);
        const nn::Mat djoint = embed1.backward(de2, cache.emb1c);
        const int half = cfg.cond_embed_dim / 2;
        embed_motion.backward(djoint.bottomRows(cfg.cond_embed_dim - half), cache.embmc);
    }

    DenoiserFn as_fn() const {
        return [this](const RSlice& x_t, int t, const MadConditioning& cond) {
            return forward(x_t, t, cond);
        };
    }
};

}  // namespace prinr
