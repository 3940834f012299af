#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "prinr/errors.hpp"
#include "prinr/rng.hpp"

namespace prinr::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Snaps every entry onto the float32 grid. Parameters live on that grid at
// all times (applied at init and after every optimizer step), which makes the
// float32 checkpoint blobs lossless: save followed by load reproduces forward
// outputs bit for bit.
inline void quantize_f32(Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

// A learnable tensor: value, gradient accumulator and Adam state, all the
// same shape. Stored as a matrix; vectors use one column.
struct Tensor {
    std::string name;
    Mat v, g, m_state, v_state;

    Tensor() = default;
    Tensor(std::string n, Eigen::Index rows, Eigen::Index cols) : name(std::move(n)) {
        v = Mat::Zero(rows, cols);
        g = Mat::Zero(rows, cols);
        m_state = Mat::Zero(rows, cols);
        v_state = Mat::Zero(rows, cols);
    }
    void zero_grad() { g.setZero(); }
};

using ParamList = std::vector<Tensor*>;

// Channel-major 2D feature map: data(row = channel, col = y * width + x).
struct FeatureMap {
    int channels = 0, height = 0, width = 0;
    Mat data;

    FeatureMap() = default;
    FeatureMap(int c, int h, int w) : channels(c), height(h), width(w) {
        data = Mat::Zero(c, static_cast<Eigen::Index>(h) * w);
    }
    double& at(int c, int y, int x) { return data(c, static_cast<Eigen::Index>(y) * width + x); }
    double at(int c, int y, int x) const {
        return data(c, static_cast<Eigen::Index>(y) * width + x);
    }
    Eigen::Index pixels() const { return static_cast<Eigen::Index>(height) * width; }
};

inline FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b) {
    require(a.height == b.height && a.width == b.width, "concat_channels: spatial dims differ");
    FeatureMap out(a.channels + b.channels, a.height, a.width);
    out.data.topRows(a.channels) = a.data;
    out.data.bottomRows(b.channels) = b.data;
    return out;
}

inline void init_uniform(Mat& m, Rng& rng, double lo, double hi) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
}

// Kaiming-style fan-in scaling for conv / dense weights.
inline void init_kaiming(Tensor& t, Rng& rng, int fan_in) {
    const double bound = std::sqrt(3.0) * std::sqrt(2.0 / fan_in);
    init_uniform(t.v, rng, -bound, bound);
    quantize_f32(t.v);
}

}  // namespace prinr::nn
