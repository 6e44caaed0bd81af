#pragma once

/// @file field.hpp
/// Dense 2-D multi-channel fields, centered cross-correlation with periodic or
/// zero-padded boundaries, 2x resampling, channel concatenation, and the exact
/// adjoint of each linear operation.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dwn/common.hpp"

namespace dwn {

enum class BoundaryMode { Periodic, ZeroPad };

/// A height x width x channels grid of doubles, row-major with channels
/// innermost: index (i, j, c) -> (i*width + j)*channels + c.
class Field {
public:
    Field() = default;

    Field(int height, int width, int channels, double fill = 0.0)
        : height_(height), width_(width), channels_(channels),
          data_(check_dims(height, width, channels), fill) {}

    Field(int height, int width, int channels, std::vector<double> data)
        : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
        if (data_.size() != check_dims(height, width, channels))
            throw config_error("Field: data length does not match height*width*channels");
    }

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& at(int i, int j, int c) { return data_[idx(i, j, c)]; }
    double at(int i, int j, int c) const { return data_[idx(i, j, c)]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool same_shape(const Field& o) const {
        return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
    }

    void fill(double v) { data_.assign(data_.size(), v); }

private:
    static std::size_t check_dims(int h, int w, int c) {
        if (h < 1 || w < 1 || c < 1)
            throw config_error("Field: dimensions must be at least 1x1x1");
        return static_cast<std::size_t>(h) * w * c;
    }
    std::size_t idx(int i, int j, int c) const {
        return (static_cast<std::size_t>(i) * width_ + j) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<double> data_;
};

/// Convolution weights with per-output-channel bias. Odd spatial extents so a
/// center pixel exists. Weight layout: ((o*k_h + di)*k_w + dj)*in_ch + ci.
struct Kernel {
    int k_h = 0;
    int k_w = 0;
    int in_channels = 0;
    int out_channels = 0;
    std::vector<double> weights;
    std::vector<double> bias;

    Kernel() = default;

    Kernel(int kh, int kw, int in_ch, int out_ch)
        : k_h(kh), k_w(kw), in_channels(in_ch), out_channels(out_ch) {
        if (kh < 1 || kw < 1 || kh % 2 == 0 || kw % 2 == 0)
            throw config_error("Kernel: spatial extents must be odd and positive");
        if (in_ch < 1 || out_ch < 1)
            throw config_error("Kernel: channel counts must be positive");
        weights.assign(static_cast<std::size_t>(kh) * kw * in_ch * out_ch, 0.0);
        bias.assign(out_ch, 0.0);
    }

    double& w(int o, int di, int dj, int ci) {
        return weights[((static_cast<std::size_t>(o) * k_h + di) * k_w + dj) * in_channels + ci];
    }
    double w(int o, int di, int dj, int ci) const {
        return weights[((static_cast<std::size_t>(o) * k_h + di) * k_w + dj) * in_channels + ci];
    }
};

/// Named view of one parameter tensor; the unit of serialization, gradient
/// bookkeeping and optimizer state.
struct TensorView {
    std::string name;
    double* data = nullptr;
    std::size_t size = 0;
    std::vector<int> shape;
};

inline double dot(const Field& a, const Field& b) {
    if (!a.same_shape(b)) throw config_error("dot: shape mismatch");
    double s = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t k = 0; k < a.size(); ++k) s += pa[k] * pb[k];
    return s;
}

namespace detail {
inline int wrap(int i, int n) {
    i %= n;
    return i < 0 ? i + n : i;
}
} // namespace detail

/// Centered cross-correlation (the CNN convention): out(i,j,o) = bias(o) +
/// sum_{di,dj,ci} in(i+di-kh/2, j+dj-kw/2, ci) * w(o,di,dj,ci). Out-of-range
/// reads wrap (Periodic) or are zero (ZeroPad). Output keeps the input's
/// spatial size.
inline Field conv2d(const Field& input, const Kernel& k, BoundaryMode mode) {
    if (k.in_channels != input.channels())
        throw config_error("conv2d: kernel expects " + std::to_string(k.in_channels) +
                           " input channels, field has " + std::to_string(input.channels()));
    const int H = input.height(), W = input.width();
    const int Ci = k.in_channels, Co = k.out_channels;
    const int ch = k.k_h / 2, cw = k.k_w / 2;
    Field out(H, W, Co);
    const double* x = input.data();
    double* y = out.data();
    const double* wts = k.weights.data();

    for (int i = 0; i < H; ++i) {
        for (int di = 0; di < k.k_h; ++di) {
            int ii = i + di - ch;
            if (mode == BoundaryMode::Periodic) ii = detail::wrap(ii, H);
            else if (ii < 0 || ii >= H) continue;
            const double* xrow = x + static_cast<std::size_t>(ii) * W * Ci;
            for (int dj = 0; dj < k.k_w; ++dj) {
                for (int j = 0; j < W; ++j) {
                    int jj = j + dj - cw;
                    if (mode == BoundaryMode::Periodic) jj = detail::wrap(jj, W);
                    else if (jj < 0 || jj >= W) continue;
                    const double* xp = xrow + static_cast<std::size_t>(jj) * Ci;
                    double* yp = y + (static_cast<std::size_t>(i) * W + j) * Co;
                    const double* wp = wts + (static_cast<std::size_t>(di) * k.k_w + dj) * Ci;
                    const std::size_t ostride = static_cast<std::size_t>(k.k_h) * k.k_w * Ci;
                    for (int o = 0; o < Co; ++o) {
                        double acc = 0.0;
                        const double* wo = wp + o * ostride;
                        for (int ci = 0; ci < Ci; ++ci) acc += xp[ci] * wo[ci];
                        yp[o] += acc;
                    }
                }
            }
        }
        double* yrow = y + static_cast<std::size_t>(i) * W * Co;
        for (int j = 0; j < W; ++j)
            for (int o = 0; o < Co; ++o) yrow[static_cast<std::size_t>(j) * Co + o] += k.bias[o];
    }
    return out;
}

struct ConvGrads {
    Kernel kernel; // weight gradients; .bias holds the bias gradient
    Field input;
};

/// Gradients of s = <conv2d(input, k), upstream> with respect to the kernel
/// (weights and bias) and the input. <conv2d(x,K,m), y> == <x, grad_input>
/// whenever the bias is zero; the bias gradient is the per-channel sum of
/// upstream.
inline ConvGrads conv2d_adjoint(const Field& upstream, const Field& input, const Kernel& k,
                                BoundaryMode mode) {
    if (k.in_channels != input.channels())
        throw config_error("conv2d_adjoint: kernel/input channel mismatch");
    if (upstream.channels() != k.out_channels || upstream.height() != input.height() ||
        upstream.width() != input.width())
        throw config_error("conv2d_adjoint: upstream shape mismatch");

    const int H = input.height(), W = input.width();
    const int Ci = k.in_channels, Co = k.out_channels;
    const int ch = k.k_h / 2, cw = k.k_w / 2;
    ConvGrads g{Kernel(k.k_h, k.k_w, Ci, Co), Field(H, W, Ci)};
    const double* x = input.data();
    const double* y = upstream.data();
    double* gx = g.input.data();
    double* gw = g.kernel.weights.data();
    const double* wts = k.weights.data();
    const std::size_t ostride = static_cast<std::size_t>(k.k_h) * k.k_w * Ci;

    for (int i = 0; i < H; ++i) {
        for (int di = 0; di < k.k_h; ++di) {
            int ii = i + di - ch;
            if (mode == BoundaryMode::Periodic) ii = detail::wrap(ii, H);
            else if (ii < 0 || ii >= H) continue;
            for (int dj = 0; dj < k.k_w; ++dj) {
                for (int j = 0; j < W; ++j) {
                    int jj = j + dj - cw;
                    if (mode == BoundaryMode::Periodic) jj = detail::wrap(jj, W);
                    else if (jj < 0 || jj >= W) continue;
                    const double* xp = x + (static_cast<std::size_t>(ii) * W + jj) * Ci;
                    double* gxp = gx + (static_cast<std::size_t>(ii) * W + jj) * Ci;
                    const double* yp = y + (static_cast<std::size_t>(i) * W + j) * Co;
                    const std::size_t woff = (static_cast<std::size_t>(di) * k.k_w + dj) * Ci;
                    for (int o = 0; o < Co; ++o) {
                        const double u = yp[o];
                        if (u == 0.0) continue;
                        const double* wo = wts + woff + o * ostride;
                        double* gwo = gw + woff + o * ostride;
                        for (int ci = 0; ci < Ci; ++ci) {
                            gwo[ci] += u * xp[ci];
                            gxp[ci] += u * wo[ci];
                        }
                    }
                }
            }
        }
    }
    for (int o = 0; o < Co; ++o) {
        double s = 0.0;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) s += upstream.at(i, j, o);
        g.kernel.bias[o] = s;
    }
    return g;
}

/// 3x3 five-point Laplacian stencil (1/h^2)[[0,1,0],[1,-4,1],[0,1,0]], zero bias.
inline Kernel laplacian_stencil(double h) {
    if (!(h > 0.0)) throw config_error("laplacian_stencil: grid spacing must be positive");
    Kernel k(3, 3, 1, 1);
    const double s = 1.0 / (h * h);
    k.w(0, 0, 1, 0) = s;
    k.w(0, 1, 0, 0) = s;
    k.w(0, 1, 1, 0) = -4.0 * s;
    k.w(0, 1, 2, 0) = s;
    k.w(0, 2, 1, 0) = s;
    return k;
}

/// 2x2 mean pooling; halves both spatial dims, keeps channels.
inline Field downsample_avg2(const Field& input) {
    const int H = input.height(), W = input.width(), C = input.channels();
    if (H % 2 != 0 || W % 2 != 0)
        throw config_error("downsample_avg2: spatial dims must be even, got " +
                           std::to_string(H) + "x" + std::to_string(W));
    Field out(H / 2, W / 2, C);
    for (int i = 0; i < H / 2; ++i)
        for (int j = 0; j < W / 2; ++j)
            for (int c = 0; c < C; ++c)
                out.at(i, j, c) = 0.25 * (input.at(2 * i, 2 * j, c) + input.at(2 * i, 2 * j + 1, c) +
                                          input.at(2 * i + 1, 2 * j, c) + input.at(2 * i + 1, 2 * j + 1, c));
    return out;
}

/// Adjoint of downsample_avg2: spreads each upstream value as 1/4 into its block.
inline Field downsample_avg2_adjoint(const Field& upstream) {
    const int H = upstream.height(), W = upstream.width(), C = upstream.channels();
    Field out(2 * H, 2 * W, C);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            for (int c = 0; c < C; ++c) {
                const double v = 0.25 * upstream.at(i, j, c);
                out.at(2 * i, 2 * j, c) = v;
                out.at(2 * i, 2 * j + 1, c) = v;
                out.at(2 * i + 1, 2 * j, c) = v;
                out.at(2 * i + 1, 2 * j + 1, c) = v;
            }
    return out;
}

/// Nearest-neighbor x2 upsampling: each pixel replicated into a 2x2 block.
inline Field upsample_nn2(const Field& input) {
    const int H = input.height(), W = input.width(), C = input.channels();
    Field out(2 * H, 2 * W, C);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            for (int c = 0; c < C; ++c) {
                const double v = input.at(i, j, c);
                out.at(2 * i, 2 * j, c) = v;
                out.at(2 * i, 2 * j + 1, c) = v;
                out.at(2 * i + 1, 2 * j, c) = v;
                out.at(2 * i + 1, 2 * j + 1, c) = v;
            }
    return out;
}

/// Adjoint of upsample_nn2: 2x2 block sums.
inline Field upsample_nn2_adjoint(const Field& upstream) {
    const int H = upstream.height(), W = upstream.width(), C = upstream.channels();
    if (H % 2 != 0 || W % 2 != 0)
        throw config_error("upsample_nn2_adjoint: spatial dims must be even");
    Field out(H / 2, W / 2, C);
    for (int i = 0; i < H / 2; ++i)
        for (int j = 0; j < W / 2; ++j)
            for (int c = 0; c < C; ++c)
                out.at(i, j, c) = upstream.at(2 * i, 2 * j, c) + upstream.at(2 * i, 2 * j + 1, c) +
                                  upstream.at(2 * i + 1, 2 * j, c) + upstream.at(2 * i + 1, 2 * j + 1, c);
    return out;
}

/// Channel stacking, a's channels first.
inline Field concat_channels(const Field& a, const Field& b) {
    if (a.height() != b.height() || a.width() != b.width())
        throw config_error("concat_channels: spatial dims differ");
    const int H = a.height(), W = a.width();
    const int Ca = a.channels(), Cb = b.channels();
    Field out(H, W, Ca + Cb);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            for (int c = 0; c < Ca; ++c) out.at(i, j, c) = a.at(i, j, c);
            for (int c = 0; c < Cb; ++c) out.at(i, j, Ca + c) = b.at(i, j, c);
        }
    return out;
}

/// Adjoint of concat_channels: splits upstream back into the two channel groups.
inline std::pair<Field, Field> split_channels(const Field& x, int first_channels) {
    if (first_channels < 1 || first_channels >= x.channels())
        throw config_error("split_channels: split point outside channel range");
    const int H = x.height(), W = x.width();
    const int Ca = first_channels, Cb = x.channels() - first_channels;
    Field a(H, W, Ca), b(H, W, Cb);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            for (int c = 0; c < Ca; ++c) a.at(i, j, c) = x.at(i, j, c);
            for (int c = 0; c < Cb; ++c) b.at(i, j, c) = x.at(i, j, Ca + c);
        }
    return {std::move(a), std::move(b)};
}

/// Per-pixel channel mean; collapses to one channel (image luminance).
inline Field channel_mean(const Field& f) {
    if (f.channels() == 1) return f;
    Field out(f.height(), f.width(), 1);
    for (int i = 0; i < f.height(); ++i)
        for (int j = 0; j < f.width(); ++j) {
            double s = 0.0;
            for (int c = 0; c < f.channels(); ++c) s += f.at(i, j, c);
            out.at(i, j, 0) = s / f.channels();
        }
    return out;
}

// Small arithmetic helpers used throughout the solver and training code.

inline Field& axpy(Field& y, double a, const Field& x) {
    if (!y.same_shape(x)) throw config_error("axpy: shape mismatch");
    double* py = y.data();
    const double* px = x.data();
    for (std::size_t k = 0; k < y.size(); ++k) py[k] += a * px[k];
    return y;
}

inline Field scaled(const Field& x, double a) {
    Field y = x;
    for (double& v : y.raw()) v *= a;
    return y;
}

} // namespace dwn
