#pragma once

#include <algorithm>
#include <vector>

#include "prinr/io_png.hpp"

namespace prinr {

// Bare-bones line chart: one curve on a white canvas with axis ticks, enough
// for the sweep reports. Not a plotting library.
inline void write_line_plot(const std::filesystem::path& path, const std::vector<double>& xs,
                            const std::vector<double>& ys, int width = 640, int height = 480) {
    require(xs.size() == ys.size() && xs.size() >= 2, "write_line_plot: need >= 2 points");
    std::vector<std::uint8_t> img(static_cast<std::size_t>(width) * height * 3, 255);
    auto put = [&](int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        if (x < 0 || x >= width || y < 0 || y >= height) return;
        auto* px = &img[(static_cast<std::size_t>(y) * width + x) * 3];
        px[0] = r;
        px[1] = g;
        px[2] = b;
    };
    const int ml = 50, mr = 15, mt = 15, mb = 35;
    double xlo = *std::min_element(xs.begin(), xs.end());
    double xhi = *std::max_element(xs.begin(), xs.end());
    double ylo = *std::min_element(ys.begin(), ys.end());
    double yhi = *std::max_element(ys.begin(), ys.end());
    if (xhi == xlo) xhi = xlo + 1;
    if (yhi == ylo) yhi = ylo + 1;
    const double ypad = 0.05 * (yhi - ylo);
    ylo -= ypad;
    yhi += ypad;

    auto px_of = [&](double x) {
        return ml + static_cast<int>((x - xlo) / (xhi - xlo) * (width - ml - mr));
    };
    auto py_of = [&](double y) {
        return height - mb - static_cast<int>((y - ylo) / (yhi - ylo) * (height - mt - mb));
    };

    for (int x = ml; x < width - mr; ++x) put(x, height - mb, 0, 0, 0);
    for (int y = mt; y < height - mb; ++y) put(ml, y, 0, 0, 0);
    for (int t = 0; t <= 4; ++t) {
        const int gx = ml + t * (width - ml - mr) / 4;
        const int gy = mt + t * (height - mt - mb) / 4;
        for (int y = mt; y < height - mb; y += 3) put(gx, y, 210, 210, 210);
        for (int x = ml; x < width - mr; x += 3) put(x, gy, 210, 210, 210);
    }

    auto line = [&](int x0, int y0, int x1, int y1) {
        const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            for (int oy = -1; oy <= 1; ++oy) put(x0, y0 + oy, 30, 60, 180);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    };
    for (std::size_t i = 0; i + 1 < xs.size(); ++i)
        line(px_of(xs[i]), py_of(ys[i]), px_of(xs[i + 1]), py_of(ys[i + 1]));
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const int cx = px_of(xs[i]), cy = py_of(ys[i]);
        for (int oy = -2; oy <= 2; ++oy)
            for (int ox = -2; ox <= 2; ++ox)
                if (ox * ox + oy * oy <= 4) put(cx + ox, cy + oy, 180, 40, 40);
    }
    write_png_rgb8(path, img.data(), width, height);
}

}  // namespace prinr
