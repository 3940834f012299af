#pragma once

#include <fftw3.h>

#include <Eigen/Dense>
#include <complex>
#include <map>
#include <mutex>
#include <tuple>

#include "prinr/errors.hpp"

namespace prinr {

// Row-major 2D arrays indexed (row = y / ky, col = x / kx).
using CSlice = Eigen::Array<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RSlice = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Frequency origin convention: after fft2c the DC bin sits at index
// (rows/2, cols/2) (floor division). All masks and weight maps follow it.

// out[(i + n/2) % n] = in[i] per axis: moves DC from index 0 to n/2.
inline CSlice fftshift2(const CSlice& a) {
    const Eigen::Index r = a.rows(), c = a.cols();
    CSlice out(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) out((i + r / 2) % r, (j + c / 2) % c) = a(i, j);
    return out;
}

// Inverse of fftshift2: out[i] = in[(i + n/2) % n].
inline CSlice ifftshift2(const CSlice& a) {
    const Eigen::Index r = a.rows(), c = a.cols();
    CSlice out(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) out(i, j) = a((i + r / 2) % r, (j + c / 2) % c);
    return out;
}

namespace detail {

// FFTW plans are not thread-safe to create; execution with explicit arrays
// is. Plans use FFTW_ESTIMATE (deterministic) and FFTW_UNALIGNED so they can
// run on any buffer.
inline fftw_plan get_plan(int rows, int cols, int sign) {
    static std::mutex mtx;
    static std::map<std::tuple<int, int, int>, fftw_plan> cache;
    std::lock_guard<std::mutex> lock(mtx);
    const auto key = std::make_tuple(rows, cols, sign);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    std::vector<std::complex<double>> tmp(static_cast<std::size_t>(rows) * cols);
    fftw_plan p = fftw_plan_dft_2d(rows, cols, reinterpret_cast<fftw_complex*>(tmp.data()),
                                   reinterpret_cast<fftw_complex*>(tmp.data()), sign,
                                   FFTW_ESTIMATE | FFTW_UNALIGNED);
    cache.emplace(key, p);
    return p;
}

inline CSlice fft_raw(const CSlice& a, int sign) {
    if (a.rows() < 1 || a.cols() < 1) throw ValidationError("fft2c: empty input");
    CSlice in = a;  // fftw may scribble on input for some algorithms; copy
    CSlice out(a.rows(), a.cols());
    fftw_plan p = get_plan(static_cast<int>(a.rows()), static_cast<int>(a.cols()), sign);
    fftw_execute_dft(p, reinterpret_cast<fftw_complex*>(in.data()),
                     reinterpret_cast<fftw_complex*>(out.data()));
    return out;
}

}  // namespace detail

// Centered orthonormal 2D DFT: fftshift(FFT(ifftshift(x))) / sqrt(N).
// Unitary, so ifft2c(fft2c(x)) == x and norms are preserved.
inline CSlice fft2c(const CSlice& img) {
    const double s = 1.0 / std::sqrt(static_cast<double>(img.rows()) * img.cols());
    return fftshift2(detail::fft_raw(ifftshift2(img), FFTW_FORWARD)) * s;
}

inline CSlice ifft2c(const CSlice& k) {
    const double s = 1.0 / std::sqrt(static_cast<double>(k.rows()) * k.cols());
    return fftshift2(detail::fft_raw(ifftshift2(k), FFTW_BACKWARD)) * s;
}

inline CSlice to_complex(const RSlice& r) {
    return r.cast<std::complex<double>>();
}

inline RSlice real_part(const CSlice& c) {
    return c.real();
}

inline RSlice magnitude(const CSlice& c) {
    return c.abs();
}

}  // namespace prinr
