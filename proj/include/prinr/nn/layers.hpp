#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include "prinr/nn/core.hpp"

namespace prinr::nn {

// ---------------------------------------------------------------------------
// Activations. Forward variants cache the pre-activation input; backward
// consumes it. All elementwise ops work on raw matrices.

inline Mat silu(const Mat& x) {
    return x.array() / (1.0 + (-x.array()).exp());
}
inline Mat silu_backward(const Mat& x, const Mat& dout) {
    const auto s = 1.0 / (1.0 + (-x.array()).exp());
    return (dout.array() * s * (1.0 + x.array() * (1.0 - s))).matrix();
}

inline Mat relu(const Mat& x) {
    return x.cwiseMax(0.0);
}
inline Mat relu_backward(const Mat& x, const Mat& dout) {
    return (x.array() > 0.0).select(dout, Mat::Zero(dout.rows(), dout.cols()));
}

inline Mat sigmoid(const Mat& x) {
    return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}
inline Mat tanh_m(const Mat& x) {
    return x.array().tanh().matrix();
}

// ---------------------------------------------------------------------------
// Dense layer on column batches: x is (in x n), output (out x n).

class Dense {
public:
    Tensor W, b;

    Dense() = default;
    Dense(const std::string& name, int in, int out, Rng& rng)
        : W(name + ".w", out, in), b(name + ".b", out, 1) {
        init_kaiming(W, rng, in);
    }

    struct Cache {
        Mat x;
    };

    int in_dim() const { return static_cast<int>(W.v.cols()); }
    int out_dim() const { return static_cast<int>(W.v.rows()); }

    Mat forward(const Mat& x, Cache* cache = nullptr) const {
        if (cache) cache->x = x;
        return (W.v * x).colwise() + Eigen::VectorXd(b.v.col(0));
    }

    Mat backward(const Mat& dout, const Cache& cache) {
        W.g.noalias() += dout * cache.x.transpose();
        b.g.col(0).noalias() += dout.rowwise().sum();
        return W.v.transpose() * dout;
    }

    void params(ParamList& out) {
        out.push_back(&W);
        out.push_back(&b);
    }
};

// ---------------------------------------------------------------------------
// 3x3 (or kxk) convolution on FeatureMaps via im2col + GEMM.

enum class Pad { Zero, Reflect };

class Conv2d {
public:
    Tensor W, b;  // W: (cout) x (k*k * cin), column index kk * cin + c
    int cin = 0, cout = 0, k = 3;
    Pad pad = Pad::Zero;

    Conv2d() = default;
    Conv2d(const std::string& name, int cin_, int cout_, int k_, Pad pad_, Rng& rng)
        : W(name + ".w", cout_, cin_ * k_ * k_),
          b(name + ".b", cout_, 1),
          cin(cin_),
          cout(cout_),
          k(k_),
          pad(pad_) {
        init_kaiming(W, rng, cin * k * k);
    }

    // One gather segment: pixels [p, p + len) read channels from source
    // pixels [src, src + len) (contiguous), or are zero padding (src < 0).
    struct Segment {
        int p, src, len;
    };

    struct Cache {
        Mat patches;  // (k*k*cin) x (h*w)
        int h = 0, w = 0;
    };

    Mat im2col(const FeatureMap& x) const {
        const auto& segs = segments(x.height, x.width);
        const Eigen::Index hw = x.pixels();
        Mat P(static_cast<Eigen::Index>(k) * k * cin, hw);
        for (int kk = 0; kk < k * k; ++kk) {
            const Eigen::Index row0 = static_cast<Eigen::Index>(kk) * cin;
            for (const Segment& s : segs[kk]) {
                if (s.src < 0)
                    P.block(row0, s.p, cin, s.len).setZero();
                else
                    P.block(row0, s.p, cin, s.len) = x.data.block(0, s.src, cin, s.len);
            }
        }
        return P;
    }

    FeatureMap forward(const FeatureMap& x, Cache* cache = nullptr) const {
        require(x.channels == cin, "Conv2d: input channel mismatch");
        Mat P = im2col(x);
        FeatureMap out(cout, x.height, x.width);
        out.data.noalias() = W.v * P;
        out.data.colwise() += Eigen::VectorXd(b.v.col(0));
        if (cache) {
            cache->patches = std::move(P);
            cache->h = x.height;
            cache->w = x.width;
        }
        return out;
    }

    FeatureMap backward(const FeatureMap& dout, const Cache& cache) {
        W.g.noalias() += dout.data * cache.patches.transpose();
        b.g.col(0).noalias() += dout.data.rowwise().sum();
        const Mat dP = W.v.transpose() * dout.data;
        FeatureMap dx(cin, cache.h, cache.w);
        const auto& segs = segments(cache.h, cache.w);
        for (int kk = 0; kk < k * k; ++kk) {
            const Eigen::Index row0 = static_cast<Eigen::Index>(kk) * cin;
            for (const Segment& s : segs[kk]) {
                if (s.src < 0) continue;
                dx.data.block(0, s.src, cin, s.len) += dP.block(row0, s.p, cin, s.len);
            }
        }
        return dx;
    }

    void params(ParamList& out) {
        out.push_back(&W);
        out.push_back(&b);
    }

private:
    struct MapsState {
        std::mutex mtx;
        std::map<std::pair<int, int>, std::vector<std::vector<Segment>>> maps;
    };

    // Contiguous copy spans per kernel offset, built once per spatial shape.
    // Interior rows collapse to one long segment; borders fall back to
    // per-pixel segments (where reflection or zero padding breaks stride).
    const std::vector<std::vector<Segment>>& segments(int h, int w) const {
        std::lock_guard<std::mutex> lock(maps_->mtx);
        auto& m = maps_->maps[{h, w}];
        if (!m.empty()) return m;
        const int r = k / 2;
        auto reflect = [](int i, int n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - i - 1;
            return i;
        };
        m.resize(static_cast<std::size_t>(k) * k);
        for (int kk = 0; kk < k * k; ++kk) {
            const int dy = kk / k - r, dx = kk % k - r;
            auto& out = m[kk];
            for (int y = 0; y < h; ++y) {
                int sy = y + dy;
                bool row_pad = sy < 0 || sy >= h;
                if (row_pad && pad == Pad::Reflect) {
                    sy = reflect(sy, h);
                    row_pad = false;
                }
                if (row_pad) {
                    out.push_back({y * w, -1, w});
                    continue;
                }
                int x = 0;
                while (x < w) {
                    int sx = x + dx;
                    if (sx >= 0 && sx < w) {
                        const int len = std::min(w, w - dx) - x;
                        out.push_back({y * w + x, sy * w + sx, len});
                        x += len;
                    } else {
                        const int src = pad == Pad::Reflect ? sy * w + reflect(sx, w) : -1;
                        out.push_back({y * w + x, src, 1});
                        ++x;
                    }
                }
            }
        }
        return m;
    }

    std::shared_ptr<MapsState> maps_ = std::make_shared<MapsState>();
};

// ---------------------------------------------------------------------------
// Group normalization over (channels/groups, h*w) blocks.

class GroupNorm {
public:
    Tensor gamma, beta;
    int channels = 0, groups = 1;
    static constexpr double kEps = 1e-5;

    GroupNorm() = default;
    GroupNorm(const std::string& name, int channels_, int groups_)
        : gamma(name + ".gamma", channels_, 1),
          beta(name + ".beta", channels_, 1),
          channels(channels_),
          groups(groups_) {
        require(channels_ % groups_ == 0, "GroupNorm: channels must divide into groups");
        gamma.v.setOnes();
    }

    struct Cache {
        Mat xhat;
        Vec inv_std;  // per group
    };

    FeatureMap forward(const FeatureMap& x, Cache* cache = nullptr) const {
        require(x.channels == channels, "GroupNorm: channel mismatch");
        const int cg = channels / groups;
        const Eigen::Index hw = x.pixels();
        FeatureMap out(channels, x.height, x.width);
        Mat xhat(channels, hw);
        Vec inv_std(groups);
        for (int g = 0; g < groups; ++g) {
            auto blk = x.data.middleRows(static_cast<Eigen::Index>(g) * cg, cg);
            const double mean = blk.mean();
            const double var = (blk.array() - mean).square().mean();
            const double is = 1.0 / std::sqrt(var + kEps);
            inv_std(g) = is;
            xhat.middleRows(static_cast<Eigen::Index>(g) * cg, cg) =
                ((blk.array() - mean) * is).matrix();
        }
        out.data = xhat.array().colwise() * gamma.v.col(0).array();
        out.data.colwise() += Eigen::VectorXd(beta.v.col(0));
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->inv_std = inv_std;
        }
        return out;
    }

    FeatureMap backward(const FeatureMap& dout, const Cache& cache) {
        const int cg = channels / groups;
        const Eigen::Index hw = dout.pixels();
        gamma.g.col(0).noalias() +=
            (dout.data.array() * cache.xhat.array()).rowwise().sum().matrix();
        beta.g.col(0).noalias() += dout.data.rowwise().sum();

        FeatureMap dx(channels, dout.height, dout.width);
        for (int g = 0; g < groups; ++g) {
            const Eigen::Index off = static_cast<Eigen::Index>(g) * cg;
            const Mat dxhat = dout.data.middleRows(off, cg).array().colwise() *
                              gamma.v.col(0).middleRows(off, cg).array();
            const auto xh = cache.xhat.middleRows(off, cg);
            const double n = static_cast<double>(cg) * hw;
            const double sum_d = dxhat.sum();
            const double sum_dx = (dxhat.array() * xh.array()).sum();
            dx.data.middleRows(off, cg) =
                (cache.inv_std(g) *
                 (dxhat.array() - sum_d / n - xh.array() * (sum_dx / n)))
                    .matrix();
        }
        return dx;
    }

    void params(ParamList& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

// ---------------------------------------------------------------------------
// 2x2 average pooling and nearest-neighbor doubling.

inline FeatureMap avgpool2(const FeatureMap& x) {
    require(x.height % 2 == 0 && x.width % 2 == 0, "avgpool2: spatial dims must be even");
    FeatureMap out(x.channels, x.height / 2, x.width / 2);
    for (int c = 0; c < x.channels; ++c)
        for (int y = 0; y < out.height; ++y)
            for (int xg = 0; xg < out.width; ++xg)
                out.at(c, y, xg) = 0.25 * (x.at(c, 2 * y, 2 * xg) + x.at(c, 2 * y, 2 * xg + 1) +
                                           x.at(c, 2 * y + 1, 2 * xg) +
                                           x.at(c, 2 * y + 1, 2 * xg + 1));
    return out;
}

inline FeatureMap avgpool2_backward(const FeatureMap& dout) {
    FeatureMap dx(dout.channels, dout.height * 2, dout.width * 2);
    for (int c = 0; c < dout.channels; ++c)
        for (int y = 0; y < dout.height; ++y)
            for (int xg = 0; xg < dout.width; ++xg) {
                const double v = 0.25 * dout.at(c, y, xg);
                dx.at(c, 2 * y, 2 * xg) = v;
                dx.at(c, 2 * y, 2 * xg + 1) = v;
                dx.at(c, 2 * y + 1, 2 * xg) = v;
                dx.at(c, 2 * y + 1, 2 * xg + 1) = v;
            }
    return dx;
}

inline FeatureMap upnearest2(const FeatureMap& x) {
    FeatureMap out(x.channels, x.height * 2, x.width * 2);
    for (int c = 0; c < x.channels; ++c)
        for (int y = 0; y < out.height; ++y)
            for (int xg = 0; xg < out.width; ++xg) out.at(c, y, xg) = x.at(c, y / 2, xg / 2);
    return out;
}

inline FeatureMap upnearest2_backward(const FeatureMap& dout) {
    FeatureMap dx(dout.channels, dout.height / 2, dout.width / 2);
    for (int c = 0; c < dout.channels; ++c)
        for (int y = 0; y < dout.height; ++y)
            for (int xg = 0; xg < dout.width; ++xg)
                dx.at(c, y / 2, xg / 2) += dout.at(c, y, xg);
    return dx;
}

// ---------------------------------------------------------------------------
// Seeded dropout; scaling by 1/(1-p) at train time, identity at inference.

struct DropoutMask {
    Mat mask;
};

inline Mat dropout(const Mat& x, double rate, Rng& rng, DropoutMask* cache) {
    if (rate <= 0.0) {
        if (cache) cache->mask = Mat::Ones(x.rows(), x.cols());
        return x;
    }
    Mat m(x.rows(), x.cols());
    const double keep = 1.0 - rate;
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    if (cache) cache->mask = m;
    return x.cwiseProduct(m);
}

inline Mat dropout_backward(const Mat& dout, const DropoutMask& cache) {
    return dout.cwiseProduct(cache.mask);
}

}  // namespace prinr::nn
