#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace refine {

// Grayscale image, row-major, (row, col) = (y, x), values typically in [0,1].
template <class S>
using Image = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ImageF = Image<float>;
using ImageD = Image<double>;

// out[j,k] = in[j, W-1-k]
template <class S>
Image<S> horizontal_flip(const Image<S>& in) {
    return in.rowwise().reverse();
}

// Bilinear resize with half-pixel alignment (align_corners = false).
template <class S>
Image<S> resize_bilinear(const Image<S>& in, int out_h, int out_w) {
    const int h = static_cast<int>(in.rows());
    const int w = static_cast<int>(in.cols());
    Image<S> out(out_h, out_w);
    const S sy = static_cast<S>(h) / out_h;
    const S sx = static_cast<S>(w) / out_w;
    for (int j = 0; j < out_h; ++j) {
        S yc = (S(j) + S(0.5)) * sy - S(0.5);
        int y0 = static_cast<int>(std::floor(yc));
        S fy = yc - y0;
        int y0c = std::clamp(y0, 0, h - 1);
        int y1c = std::clamp(y0 + 1, 0, h - 1);
        for (int k = 0; k < out_w; ++k) {
            S xc = (S(k) + S(0.5)) * sx - S(0.5);
            int x0 = static_cast<int>(std::floor(xc));
            S fx = xc - x0;
            int x0c = std::clamp(x0, 0, w - 1);
            int x1c = std::clamp(x0 + 1, 0, w - 1);
            out(j, k) = (S(1) - fy) * ((S(1) - fx) * in(y0c, x0c) + fx * in(y0c, x1c)) +
                        fy * ((S(1) - fx) * in(y1c, x0c) + fx * in(y1c, x1c));
        }
    }
    return out;
}

// 8-bit grayscale PNG, values mapped by round(255*p). When the source image
// has an alpha channel, alpha is the mask; color is converted by luminance.
ImageF read_png(const std::string& path);
void write_png(const std::string& path, const ImageF& image);

}  // namespace refine
