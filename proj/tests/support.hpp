#pragma once

// Shared helpers for the test suites: seeded random fields/kernels, a
// brute-force convolution oracle kept deliberately independent of the library
// implementation (plain quadruple loops, its own boundary handling), and a
// subprocess runner for exercising the CLI.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include "dwn/field.hpp"
#include "dwn/rng.hpp"

namespace dwntest {

inline dwn::Field random_field(int h, int w, int c, std::uint64_t seed, double lo = -1.0,
                               double hi = 1.0) {
    dwn::Rng rng(dwn::substream(seed, 0xf1e1d));
    dwn::Field f(h, w, c);
    for (double& v : f.raw()) v = rng.uniform(lo, hi);
    return f;
}

inline dwn::Kernel random_kernel(int kh, int kw, int in_ch, int out_ch, std::uint64_t seed,
                                 bool with_bias = true) {
    dwn::Rng rng(dwn::substream(seed, 0x6b65726e));
    dwn::Kernel k(kh, kw, in_ch, out_ch);
    for (double& w : k.weights) w = rng.uniform(-1.0, 1.0);
    if (with_bias)
        for (double& b : k.bias) b = rng.uniform(-1.0, 1.0);
    return k;
}

/// Direct quadruple-loop summation over every output pixel, output channel,
/// kernel tap and input channel.
inline dwn::Field conv_direct(const dwn::Field& x, const dwn::Kernel& k, dwn::BoundaryMode mode) {
    const int H = x.height(), W = x.width();
    dwn::Field y(H, W, k.out_channels);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            for (int o = 0; o < k.out_channels; ++o) {
                double acc = k.bias[o];
                for (int di = 0; di < k.k_h; ++di)
                    for (int dj = 0; dj < k.k_w; ++dj)
                        for (int ci = 0; ci < k.in_channels; ++ci) {
                            int ii = i + di - k.k_h / 2;
                            int jj = j + dj - k.k_w / 2;
                            if (mode == dwn::BoundaryMode::Periodic) {
                                ii = ((ii % H) + H) % H;
                                jj = ((jj % W) + W) % W;
                            } else if (ii < 0 || ii >= H || jj < 0 || jj >= W) {
                                continue;
                            }
                            acc += x.at(ii, jj, ci) * k.w(o, di, dj, ci);
                        }
                y.at(i, j, o) = acc;
            }
    return y;
}

inline double max_abs_diff(const dwn::Field& a, const dwn::Field& b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k)
        m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
    return m;
}

/// Relative error with a floor so near-zero gradients compare absolutely.
inline double rel_err(double a, double b, double floor = 1e-4) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Moves every bias off zero. Freshly built models have zero biases, which
/// leaves some ReLU pre-activations exactly at the kink (whole patches of the
/// previous activation clip to zero); central differences straddle the kink
/// there and disagree with any one-sided subgradient choice. Gradient checks
/// therefore evaluate at a generic point.
inline void randomize_biases(std::vector<dwn::TensorView> views, std::uint64_t seed,
                             double scale = 0.1) {
    dwn::Rng rng(dwn::substream(seed, 0xb1a5));
    for (auto& t : views)
        if (t.name.size() >= 4 && t.name.substr(t.name.size() - 4) == "bias")
            for (std::size_t e = 0; e < t.size; ++e) t.data[e] = rng.uniform(-scale, scale);
}

/// Runs a shell command, returns its exit status (-1 if it did not exit
/// normally).
inline int run_command(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

} // namespace dwntest
