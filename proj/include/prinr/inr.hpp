#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "prinr/fft.hpp"
#include "prinr/nn/layers.hpp"

namespace prinr {

// ---------------------------------------------------------------------------
// Fourier feature encoding: gamma(x) = [sin(Bx), cos(Bx)], B ~ N(0, scale^2)
// with a fixed seed. Per-axis factors rescale columns of B, which is how the
// axial bandwidth is kept below the slice Nyquist rate.

class FrequencyEncoding {
public:
    nn::Mat B;  // num_freqs x coord_dim
    double scale = 10.0;
    std::uint64_t seed = 0;

    FrequencyEncoding() = default;
    FrequencyEncoding(int num_freqs, int coord_dim, double scale_, std::uint64_t seed_,
                      const std::vector<double>& axis_factors = {})
        : scale(scale_), seed(seed_) {
        require(num_freqs >= 1 && coord_dim >= 1, "FrequencyEncoding: positive dims required");
        B.resize(num_freqs, coord_dim);
        Rng rng(derive_seed(seed_, 0xFE47));
        for (Eigen::Index i = 0; i < B.size(); ++i) B.data()[i] = scale_ * rng.normal();
        if (!axis_factors.empty()) {
            require(static_cast<int>(axis_factors.size()) == coord_dim,
                    "FrequencyEncoding: axis factor count must equal coord_dim");
            for (int c = 0; c < coord_dim; ++c) B.col(c) *= axis_factors[c];
        }
        nn::quantize_f32(B);
    }

    int out_dim() const { return 2 * static_cast<int>(B.rows()); }
    int coord_dim() const { return static_cast<int>(B.cols()); }

    // coords: (coord_dim x n) -> (2*num_freqs x n), rows [sin; cos].
    nn::Mat encode(const nn::Mat& coords) const {
        require(coords.rows() == B.cols(), "encode_coords: coordinate dimension mismatch");
        const nn::Mat z = B * coords;
        nn::Mat out(2 * z.rows(), z.cols());
        out.topRows(z.rows()) = z.array().sin().matrix();
        out.bottomRows(z.rows()) = z.array().cos().matrix();
        return out;
    }
};

// ---------------------------------------------------------------------------
// SIREN MLP: sin(omega * W a + b) hidden layers, final affine head.
// First layer weights U(-1/fan_in, 1/fan_in); hidden and output weights
// U(+-sqrt(6/fan_in)/omega).

class SirenMLP {
public:
    std::vector<nn::Tensor> W, b;
    std::vector<int> widths;  // [in, hidden..., out]
    double omega_first = 30.0, omega_hidden = 30.0;

    SirenMLP() = default;
    SirenMLP(const std::string& name, const std::vector<int>& widths_, double omega_first_,
             double omega_hidden_, Rng& rng)
        : widths(widths_), omega_first(omega_first_), omega_hidden(omega_hidden_) {
        require(widths.size() >= 2, "SirenMLP: need at least input and output widths");
        const int L = static_cast<int>(widths.size()) - 1;
        for (int l = 0; l < L; ++l) {
            W.emplace_back(name + ".w" + std::to_string(l), widths[l + 1], widths[l]);
            b.emplace_back(name + ".b" + std::to_string(l), widths[l + 1], 1);
            const int fan_in = widths[l];
            const double bound = l == 0 ? 1.0 / fan_in
                                        : std::sqrt(6.0 / fan_in) / omega_hidden;
            nn::init_uniform(W[l].v, rng, -bound, bound);
            const double bbound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            nn::init_uniform(b[l].v, rng, -bbound, bbound);
            nn::quantize_f32(W[l].v);
            nn::quantize_f32(b[l].v);
        }
    }

    int layer_count() const { return static_cast<int>(W.size()); }
    int in_dim() const { return widths.front(); }
    int out_dim() const { return widths.back(); }
    double omega(int l) const { return l == 0 ? omega_first : omega_hidden; }

    struct Cache {
        std::vector<nn::Mat> inputs;  // a_l per layer
        std::vector<nn::Mat> pre;     // u_l = omega * W a + b (sine layers only)
    };

    // x: (in x n) -> (out x n).
    nn::Mat forward(const nn::Mat& x, Cache* cache = nullptr) const {
        require(x.rows() == widths.front(), "SirenMLP: input dimension mismatch");
        if (!x.allFinite()) throw ValidationError("SirenMLP: non-finite input");
        const int L = layer_count();
        if (cache) {
            cache->inputs.assign(L, nn::Mat());
            cache->pre.assign(L, nn::Mat());
        }
        // sine layers: a_{l+1} = sin(omega_l * (W_l a_l) + b_l)
        nn::Mat a = x;
        for (int l = 0; l < L; ++l) {
            if (cache) cache->inputs[l] = a;
            nn::Mat u = W[l].v * a;
            if (l + 1 < L) {
                u *= omega(l);
                u.colwise() += Eigen::VectorXd(b[l].v.col(0));
                if (cache) cache->pre[l] = u;
                a = u.array().sin().matrix();
            } else {
                u.colwise() += Eigen::VectorXd(b[l].v.col(0));
                a = u;
            }
        }
        return a;
    }

    // Accumulates parameter gradients; returns d(loss)/d(input).
    nn::Mat backward(const nn::Mat& dout, const Cache& cache) {
        const int L = layer_count();
        nn::Mat d = dout;
        for (int l = L - 1; l >= 0; --l) {
            if (l + 1 < L) {
                d = (d.array() * cache.pre[l].array().cos()).matrix();
                W[l].g.noalias() += omega(l) * (d * cache.inputs[l].transpose());
                b[l].g.col(0).noalias() += d.rowwise().sum();
                d = omega(l) * (W[l].v.transpose() * d);
            } else {
                W[l].g.noalias() += d * cache.inputs[l].transpose();
                b[l].g.col(0).noalias() += d.rowwise().sum();
                d = W[l].v.transpose() * d;
            }
        }
        return d;
    }

    // Analytic gradient of a scalar-output network w.r.t. its input vector.
    Eigen::VectorXd input_gradient(const Eigen::VectorXd& x) const {
        require(out_dim() == 1, "input_gradient: scalar output required");
        Cache cache;
        forward(x, &cache);
        const int L = layer_count();
        nn::Mat d = nn::Mat::Ones(1, 1);
        for (int l = L - 1; l >= 0; --l) {
            if (l + 1 < L) {
                d = (d.array() * cache.pre[l].array().cos()).matrix();
                d = omega(l) * (W[l].v.transpose() * d);
            } else {
                d = W[l].v.transpose() * d;
            }
        }
        return d.col(0);
    }

    void params(nn::ParamList& out) {
        for (auto& t : W) out.push_back(&t);
        for (auto& t : b) out.push_back(&t);
    }
};

// ---------------------------------------------------------------------------
// 2D slice feature encoder (the c1 conditcolumn): 3x3 convs with reflection
// padding and ReLU between layers. Stride 1 everywhere keeps the receptive
// field small so the conditioning stays local.

class SliceEncoder {
public:
    std::vector<nn::Conv2d> convs;
    std::vector<int> channels;

    SliceEncoder() = default;
    SliceEncoder(const std::string& name, int in_channels, const std::vector<int>& channels_,
                 Rng& rng)
        : channels(channels_) {
        require(!channels.empty(), "SliceEncoder: need at least one conv layer");
        int prev = in_channels;
        for (std::size_t i = 0; i < channels.size(); ++i) {
            convs.emplace_back(name + ".conv" + std::to_string(i), prev, channels[i], 3,
                               nn::Pad::Reflect, rng);
            prev = channels[i];
        }
    }

    int out_channels() const { return channels.back(); }

    struct Cache {
        std::vector<nn::Conv2d::Cache> conv;
        std::vector<nn::Mat> pre;  // relu pre-activations
    };

    nn::FeatureMap forward(const RSlice& slice, Cache* cache = nullptr) const {
        nn::FeatureMap x(1, static_cast<int>(slice.rows()), static_cast<int>(slice.cols()));
        for (int y = 0; y < x.height; ++y)
            for (int xx = 0; xx < x.width; ++xx) x.at(0, y, xx) = slice(y, xx);
        return forward(x, cache);
    }

    nn::FeatureMap forward(const nn::FeatureMap& in, Cache* cache = nullptr) const {
        if (cache) {
            cache->conv.resize(convs.size());
            cache->pre.assign(convs.size(), nn::Mat());
        }
        nn::FeatureMap h = in;
        for (std::size_t i = 0; i < convs.size(); ++i) {
            h = convs[i].forward(h, cache ? &cache->conv[i] : nullptr);
            if (i + 1 < convs.size()) {
                if (cache) cache->pre[i] = h.data;
                h.data = nn::relu(h.data);
            }
        }
        return h;
    }

    nn::FeatureMap backward(const nn::FeatureMap& dout, Cache& cache) {
        nn::FeatureMap d = dout;
        for (int i = static_cast<int>(convs.size()) - 1; i >= 0; --i) {
            if (i + 1 < static_cast<int>(convs.size()))
                d.data = nn::relu_backward(cache.pre[i], d.data);
            d = convs[i].backward(d, cache.conv[i]);
        }
        return d;
    }

    void params(nn::ParamList& out) {
        for (auto& c : convs) c.params(out);
    }
};

// ---------------------------------------------------------------------------
// Bilinear sampling of a feature map at a continuous in-plane position
// (pixel-index coordinates; clamped at the borders).

inline Eigen::VectorXd sample_bilinear(const nn::FeatureMap& fm, double x, double y) {
    const int h = fm.height, w = fm.width;
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
    const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = x - x0, fy = y - y0;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(fm.channels);
    for (int c = 0; c < fm.channels; ++c)
        out(c) = (1 - fx) * (1 - fy) * fm.at(c, y0, x0) + fx * (1 - fy) * fm.at(c, y0, x1) +
                 (1 - fx) * fy * fm.at(c, y1, x0) + fx * fy * fm.at(c, y1, x1);
    return out;
}

// ---------------------------------------------------------------------------
// ConvLSTM cell and the bidirectional volumetric aggregator (the c2 column).

class ConvLstmCell {
public:
    nn::Conv2d conv_x, conv_h;  // each -> 4 * hidden channels, gate order [i f o g]
    int in_channels = 0, hidden = 0;

    // Fast-mixing initialization: forget gates start nearly closed and the
    // recurrent convolutions start at zero, so with constant input the state
    // settles within two slices. Training raises the forget bias / recurrent
    // weights when longer memory helps.
    static constexpr double kForgetBiasInit = -8.0;

    ConvLstmCell() = default;
    ConvLstmCell(const std::string& name, int in_channels_, int hidden_, int kernel, Rng& rng)
        : conv_x(name + ".wx", in_channels_, 4 * hidden_, kernel, nn::Pad::Reflect, rng),
          conv_h(name + ".wh", hidden_, 4 * hidden_, kernel, nn::Pad::Reflect, rng),
          in_channels(in_channels_),
          hidden(hidden_) {
        for (int c = hidden; c < 2 * hidden; ++c) conv_x.b.v(c, 0) = kForgetBiasInit;
        nn::quantize_f32(conv_x.b.v);
        conv_h.W.v.setZero();
    }

    struct Cache {
        nn::Conv2d::Cache xc, hc;
        nn::Mat pre;             // 4*hidden x hw
        nn::Mat c_prev, c_new;   // hidden x hw
        int h = 0, w = 0;
    };

    struct State {
        nn::Mat h, c;  // hidden x hw
    };

    State forward(const nn::FeatureMap& x, const State& prev, Cache* cache) const {
        nn::FeatureMap gx = conv_x.forward(x, cache ? &cache->xc : nullptr);
        nn::FeatureMap hp(hidden, x.height, x.width);
        hp.data = prev.h;
        nn::FeatureMap gh = conv_h.forward(hp, cache ? &cache->hc : nullptr);
        nn::Mat pre = gx.data + gh.data;

        const auto i = nn::sigmoid(pre.middleRows(0, hidden));
        const auto f = nn::sigmoid(pre.middleRows(hidden, hidden));
        const auto o = nn::sigmoid(pre.middleRows(2 * hidden, hidden));
        const auto g = nn::tanh_m(pre.middleRows(3 * hidden, hidden));
        State s;
        s.c = f.cwiseProduct(prev.c) + i.cwiseProduct(g);
        s.h = o.cwiseProduct(s.c.array().tanh().matrix());
        if (cache) {
            cache->pre = std::move(pre);
            cache->c_prev = prev.c;
            cache->c_new = s.c;
            cache->h = x.height;
            cache->w = x.width;
        }
        return s;
    }

    // dh, dc: gradients w.r.t. this step's outputs. Returns gradient w.r.t.
    // the input feature map; writes gradients w.r.t. the previous state.
    nn::FeatureMap backward(const nn::Mat& dh, const nn::Mat& dc_in, Cache& cache,
                            nn::Mat* dh_prev, nn::Mat* dc_prev) {
        const nn::Mat i = nn::sigmoid(cache.pre.middleRows(0, hidden));
        const nn::Mat f = nn::sigmoid(cache.pre.middleRows(hidden, hidden));
        const nn::Mat o = nn::sigmoid(cache.pre.middleRows(2 * hidden, hidden));
        const nn::Mat g = nn::tanh_m(cache.pre.middleRows(3 * hidden, hidden));
        const nn::Mat tc = cache.c_new.array().tanh().matrix();

        const nn::Mat d_o = dh.cwiseProduct(tc);
        const nn::Mat dc =
            dc_in + dh.cwiseProduct(o).cwiseProduct((1.0 - tc.array().square()).matrix());
        const nn::Mat di = dc.cwiseProduct(g);
        const nn::Mat df = dc.cwiseProduct(cache.c_prev);
        const nn::Mat dg = dc.cwiseProduct(i);
        *dc_prev = dc.cwiseProduct(f);

        nn::Mat dpre(4 * hidden, dh.cols());
        dpre.middleRows(0, hidden) = di.cwiseProduct(i).cwiseProduct((1.0 - i.array()).matrix());
        dpre.middleRows(hidden, hidden) =
            df.cwiseProduct(f).cwiseProduct((1.0 - f.array()).matrix());
        dpre.middleRows(2 * hidden, hidden) =
            d_o.cwiseProduct(o).cwiseProduct((1.0 - o.array()).matrix());
        dpre.middleRows(3 * hidden, hidden) = dg.cwiseProduct((1.0 - g.array().square()).matrix());

        nn::FeatureMap dpre_fm(4 * hidden, cache.h, cache.w);
        dpre_fm.data = dpre;
        nn::FeatureMap dx = conv_x.backward(dpre_fm, cache.xc);
        nn::FeatureMap dhp = conv_h.backward(dpre_fm, cache.hc);
        *dh_prev = dhp.data;
        return dx;
    }

    void params(nn::ParamList& out) {
        conv_x.params(out);
        conv_h.params(out);
    }
};

struct AggregatorConfig {
    std::vector<int> feat_channels{32, 64, 64};  // per-slice encoder
    int lstm_depth = 4;
    int lstm_hidden = 128;
    int kernel = 3;
    int c2_dim = 128;

    void validate() const {
        require(!feat_channels.empty(), "AggregatorConfig: feat_channels empty");
        require(lstm_depth >= 1 && lstm_hidden >= 1 && c2_dim >= 1,
                "AggregatorConfig: positive dims required");
    }
};

// Per-slice features -> stacked bidirectional ConvLSTM -> fused volumetric
// feature maps, one per input slice. Queries between slices interpolate these
// maps linearly in z.
class VolumeAggregator {
public:
    AggregatorConfig cfg;
    SliceEncoder encoder;
    std::vector<ConvLstmCell> fwd_cells, bwd_cells;  // one per depth level
    nn::Conv2d fuse;                                 // 1x1: 2*hidden -> c2_dim

    VolumeAggregator() = default;
    VolumeAggregator(const AggregatorConfig& cfg_, Rng& rng) : cfg(cfg_) {
        cfg.validate();
        encoder = SliceEncoder("agg.enc", 1, cfg.feat_channels, rng);
        int in_ch = cfg.feat_channels.back();
        for (int l = 0; l < cfg.lstm_depth; ++l) {
            fwd_cells.emplace_back("agg.fwd" + std::to_string(l), in_ch, cfg.lstm_hidden,
                                   cfg.kernel, rng);
            bwd_cells.emplace_back("agg.bwd" + std::to_string(l), in_ch, cfg.lstm_hidden,
                                   cfg.kernel, rng);
            in_ch = cfg.lstm_hidden;
        }
        fuse = nn::Conv2d("agg.fuse", 2 * cfg.lstm_hidden, cfg.c2_dim, 1, nn::Pad::Zero, rng);
    }

    void params(nn::ParamList& out) {
        encoder.params(out);
        for (auto& c : fwd_cells) c.params(out);
        for (auto& c : bwd_cells) c.params(out);
        fuse.params(out);
    }

    struct Cache {
        std::vector<SliceEncoder::Cache> enc;                    // per slice
        std::vector<std::vector<ConvLstmCell::Cache>> fwd, bwd;  // [slice][layer]
        std::vector<nn::Conv2d::Cache> fusec;                    // per slice
        int h = 0, w = 0, n = 0;
    };

    struct Hidden {
        std::vector<nn::Mat> fwd, bwd;  // final-layer hidden state per slice
    };

    // Runs the full aggregation. c2 output has one feature map per slice.
    std::vector<nn::FeatureMap> forward(const std::vector<RSlice>& slices, Cache* cache = nullptr,
                                        Hidden* hidden = nullptr) const {
        require(slices.size() >= 2, "aggregate_volume_features: need at least 2 slices");
        const int n = static_cast<int>(slices.size());
        const int h = static_cast<int>(slices[0].rows()), w = static_cast<int>(slices[0].cols());
        for (const auto& s : slices)
            require(s.rows() == h && s.cols() == w,
                    "aggregate_volume_features: slice shapes differ");
        if (cache) {
            cache->enc.resize(n);
            cache->fwd.assign(n, std::vector<ConvLstmCell::Cache>(cfg.lstm_depth));
            cache->bwd.assign(n, std::vector<ConvLstmCell::Cache>(cfg.lstm_depth));
            cache->fusec.resize(n);
            cache->h = h;
            cache->w = w;
            cache->n = n;
        }

        std::vector<nn::FeatureMap> feats(n);
        for (int i = 0; i < n; ++i)
            feats[i] = encoder.forward(slices[i], cache ? &cache->enc[i] : nullptr);

        const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
        auto run_direction = [&](const std::vector<ConvLstmCell>& cells, bool reverse,
                                 std::vector<std::vector<ConvLstmCell::Cache>>* dir_cache) {
            std::vector<nn::Mat> outputs(n);
            std::vector<ConvLstmCell::State> state(cfg.lstm_depth);
            for (int l = 0; l < cfg.lstm_depth; ++l) {
                state[l].h = nn::Mat::Zero(cfg.lstm_hidden, hw);
                state[l].c = nn::Mat::Zero(cfg.lstm_hidden, hw);
            }
            for (int step = 0; step < n; ++step) {
                const int i = reverse ? n - 1 - step : step;
                nn::FeatureMap x = feats[i];
                for (int l = 0; l < cfg.lstm_depth; ++l) {
                    ConvLstmCell::Cache* cc = dir_cache ? &(*dir_cache)[i][l] : nullptr;
                    state[l] = cells[l].forward(x, state[l], cc);
                    x = nn::FeatureMap(cfg.lstm_hidden, h, w);
                    x.data = state[l].h;
                }
                outputs[i] = state[cfg.lstm_depth - 1].h;
            }
            return outputs;
        };

        const std::vector<nn::Mat> hf =
            run_direction(fwd_cells, false, cache ? &cache->fwd : nullptr);
        const std::vector<nn::Mat> hb =
            run_direction(bwd_cells, true, cache ? &cache->bwd : nullptr);
        if (hidden) {
            hidden->fwd = hf;
            hidden->bwd = hb;
        }

        std::vector<nn::FeatureMap> c2(n);
        for (int i = 0; i < n; ++i) {
            nn::FeatureMap cat(2 * cfg.lstm_hidden, h, w);
            cat.data.topRows(cfg.lstm_hidden) = hf[i];
            cat.data.bottomRows(cfg.lstm_hidden) = hb[i];
            c2[i] = fuse.forward(cat, cache ? &cache->fusec[i] : nullptr);
        }
        return c2;
    }

    // Backpropagates per-slice gradients through fusion, both recurrent
    // stacks and the slice encoder.
    void backward(const std::vector<nn::FeatureMap>& dc2, Cache& cache) {
        const int n = cache.n;
        const Eigen::Index hw = static_cast<Eigen::Index>(cache.h) * cache.w;
        std::vector<nn::Mat> dhf(n), dhb(n);
        for (int i = 0; i < n; ++i) {
            nn::FeatureMap dcat = fuse.backward(dc2[i], cache.fusec[i]);
            dhf[i] = dcat.data.topRows(cfg.lstm_hidden);
            dhb[i] = dcat.data.bottomRows(cfg.lstm_hidden);
        }

        std::vector<nn::FeatureMap> dfeats(n);
        for (int i = 0; i < n; ++i) {
            dfeats[i] = nn::FeatureMap(cfg.feat_channels.back(), cache.h, cache.w);
        }

        auto run_bptt = [&](std::vector<ConvLstmCell>& cells, bool reverse,
                            std::vector<std::vector<ConvLstmCell::Cache>>& dir_cache,
                            const std::vector<nn::Mat>& dtop) {
            std::vector<nn::Mat> dh_carry(cfg.lstm_depth, nn::Mat::Zero(cfg.lstm_hidden, hw));
            std::vector<nn::Mat> dc_carry(cfg.lstm_depth, nn::Mat::Zero(cfg.lstm_hidden, hw));
            for (int step = n - 1; step >= 0; --step) {
                const int i = reverse ? n - 1 - step : step;
                nn::Mat from_above = dtop[i];
                for (int l = cfg.lstm_depth - 1; l >= 0; --l) {
                    const nn::Mat dh_total = from_above + dh_carry[l];
                    nn::Mat dh_prev, dc_prev;
                    nn::FeatureMap dx = cells[l].backward(dh_total, dc_carry[l], dir_cache[i][l],
                                                          &dh_prev, &dc_prev);
                    dh_carry[l] = std::move(dh_prev);
                    dc_carry[l] = std::move(dc_prev);
                    from_above = dx.data;
                }
                dfeats[i].data += from_above;
            }
        };
        run_bptt(fwd_cells, false, cache.fwd, dhf);
        run_bptt(bwd_cells, true, cache.bwd, dhb);

        for (int i = 0; i < n; ++i) encoder.backward(dfeats[i], cache.enc[i]);
    }
};

}  // namespace prinr
