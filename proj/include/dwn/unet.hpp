#pragma once

/// @file unet.hpp
/// Configurable encoder-decoder convolutional operator: per level two 3x3
/// convs + 2x average pooling on the way down, nearest-neighbor upsampling +
/// skip concatenation on the way up, twice the coarsest channel count in the
/// bottleneck, and a linear 1x1 head. Forward evaluation records an activation
/// tape; the backward pass replays it in reverse for exact gradients.

#include <cstdint>
#include <vector>

#include "dwn/field.hpp"
#include "dwn/rng.hpp"

namespace dwn {

struct UNetConfig {
    std::vector<int> channels; // c_1..c_S, finest to coarsest
    int in_channels = 1;
    int out_channels = 1;
    int kernel_size = 3;

    int levels() const { return static_cast<int>(channels.size()); }

    void validate() const {
        if (channels.empty()) throw config_error("UNetConfig: channel vector must be non-empty");
        for (int c : channels)
            if (c < 1) throw config_error("UNetConfig: channel counts must be positive");
        if (in_channels < 1 || out_channels < 1)
            throw config_error("UNetConfig: in/out channels must be positive");
        if (kernel_size < 1 || kernel_size % 2 == 0)
            throw config_error("UNetConfig: kernel size must be odd and positive");
    }
};

struct LayerShape {
    std::string name;
    int k_h, k_w, in_channels, out_channels;
};

/// Canonical layer enumeration: encoder top-down, bottleneck, decoder
/// bottom-up, head. Serialization, initialization and gradient layout all
/// follow this order.
inline std::vector<LayerShape> unet_layer_shapes(const UNetConfig& cfg) {
    cfg.validate();
    const int S = cfg.levels();
    const int k = cfg.kernel_size;
    std::vector<LayerShape> shapes;
    for (int s = 1; s <= S; ++s) {
        const int in = s == 1 ? cfg.in_channels : cfg.channels[s - 2];
        const int out = cfg.channels[s - 1];
        shapes.push_back({"enc" + std::to_string(s) + ".conv1", k, k, in, out});
        shapes.push_back({"enc" + std::to_string(s) + ".conv2", k, k, out, out});
    }
    const int cS = cfg.channels[S - 1];
    shapes.push_back({"bott.conv1", k, k, cS, 2 * cS});
    shapes.push_back({"bott.conv2", k, k, 2 * cS, 2 * cS});
    for (int s = S; s >= 1; --s) {
        const int below = s == S ? 2 * cS : cfg.channels[s];
        const int out = cfg.channels[s - 1];
        shapes.push_back({"dec" + std::to_string(s) + ".conv1", k, k, below + out, out});
        shapes.push_back({"dec" + std::to_string(s) + ".conv2", k, k, out, out});
    }
    shapes.push_back({"head", 1, 1, cfg.channels[0], cfg.out_channels});
    return shapes;
}

inline std::int64_t param_count(const UNetConfig& cfg) {
    std::int64_t n = 0;
    for (const auto& s : unet_layer_shapes(cfg))
        n += static_cast<std::int64_t>(s.k_h) * s.k_w * s.in_channels * s.out_channels +
             s.out_channels;
    return n;
}

struct UNetParams {
    UNetConfig config;
    std::vector<Kernel> layers; // unet_layer_shapes order

    std::vector<TensorView> manifest(const std::string& prefix = "") {
        const auto shapes = unet_layer_shapes(config);
        std::vector<TensorView> views;
        views.reserve(2 * layers.size());
        for (std::size_t l = 0; l < layers.size(); ++l) {
            Kernel& k = layers[l];
            views.push_back({prefix + shapes[l].name + ".weight", k.weights.data(),
                             k.weights.size(),
                             {k.out_channels, k.k_h, k.k_w, k.in_channels}});
            views.push_back({prefix + shapes[l].name + ".bias", k.bias.data(), k.bias.size(),
                             {k.out_channels}});
        }
        return views;
    }
};

namespace detail {
/// Weights uniform on [-b, b] with fan-in bound b = sqrt(6/(k_h*k_w*in)),
/// biases zero.
inline void init_kernel(Kernel& k, Rng& rng) {
    const double bound = std::sqrt(6.0 / (static_cast<double>(k.k_h) * k.k_w * k.in_channels));
    for (double& w : k.weights) w = rng.uniform(-bound, bound);
}
} // namespace detail

/// Deterministic per (config, seed); draws in manifest order from one stream.
inline UNetParams build_unet(const UNetConfig& cfg, std::uint64_t seed) {
    UNetParams p;
    p.config = cfg;
    Rng rng(substream(seed, 0x756e6574)); // "unet" stream tag
    for (const auto& s : unet_layer_shapes(cfg)) {
        Kernel k(s.k_h, s.k_w, s.in_channels, s.out_channels);
        detail::init_kernel(k, rng);
        p.layers.push_back(std::move(k));
    }
    return p;
}

inline UNetParams zeros_like(const UNetParams& p) {
    UNetParams z;
    z.config = p.config;
    z.layers.reserve(p.layers.size());
    for (const Kernel& k : p.layers) z.layers.emplace_back(k.k_h, k.k_w, k.in_channels, k.out_channels);
    return z;
}

namespace detail {
inline Field relu(const Field& x) {
    Field y = x;
    for (double& v : y.raw()) v = v > 0.0 ? v : 0.0;
    return y;
}

/// upstream masked by relu'(pre); the derivative at exactly 0 is 0.
inline Field relu_backward(const Field& upstream, const Field& pre) {
    Field y = upstream;
    double* py = y.data();
    const double* pz = pre.data();
    for (std::size_t k = 0; k < y.size(); ++k)
        if (!(pz[k] > 0.0)) py[k] = 0.0;
    return y;
}
} // namespace detail

/// Per stage: the first conv's input and both pre-activations. Everything else
/// the backward pass needs is recomputed from these.
struct UNetTape {
    struct Stage {
        Field x;  // conv1 input (encoder: level input; decoder: concat)
        Field z1; // conv1 pre-activation
        Field z2; // conv2 pre-activation
    };
    std::vector<Stage> enc;
    Stage bott;
    std::vector<Stage> dec; // coarse to fine, matching evaluation order
};

struct UNetForward {
    Field output;
    UNetTape tape;
};

inline UNetForward unet_forward(const UNetParams& p, const Field& input) {
    const UNetConfig& cfg = p.config;
    const int S = cfg.levels();
    if (input.channels() != cfg.in_channels)
        throw config_error("unet_forward: input has " + std::to_string(input.channels()) +
                           " channels, config expects " + std::to_string(cfg.in_channels));
    for (int s = 1, div = 2; s <= S; ++s, div *= 2)
        if (input.height() % div != 0 || input.width() % div != 0)
            throw config_error("unet_forward: spatial dims " + std::to_string(input.height()) +
                               "x" + std::to_string(input.width()) +
                               " not divisible by 2^" + std::to_string(s) +
                               " required at level " + std::to_string(s));

    UNetForward r;
    UNetTape& t = r.tape;
    const std::vector<Kernel>& L = p.layers;
    std::size_t li = 0;

    Field x = input;
    t.enc.resize(S);
    for (int s = 0; s < S; ++s) {
        UNetTape::Stage& st = t.enc[s];
        st.x = std::move(x);
        st.z1 = conv2d(st.x, L[li++], BoundaryMode::ZeroPad);
        st.z2 = conv2d(detail::relu(st.z1), L[li++], BoundaryMode::ZeroPad);
        x = downsample_avg2(detail::relu(st.z2));
    }
    t.bott.x = std::move(x);
    t.bott.z1 = conv2d(t.bott.x, L[li++], BoundaryMode::ZeroPad);
    t.bott.z2 = conv2d(detail::relu(t.bott.z1), L[li++], BoundaryMode::ZeroPad);
    Field a = detail::relu(t.bott.z2);

    t.dec.resize(S);
    for (int d = 0; d < S; ++d) { // d=0 handles level S, d=S-1 handles level 1
        const int s = S - 1 - d;
        UNetTape::Stage& st = t.dec[d];
        st.x = concat_channels(upsample_nn2(a), detail::relu(t.enc[s].z2));
        st.z1 = conv2d(st.x, L[li++], BoundaryMode::ZeroPad);
        st.z2 = conv2d(detail::relu(st.z1), L[li++], BoundaryMode::ZeroPad);
        a = detail::relu(st.z2);
    }
    r.output = conv2d(a, L[li++], BoundaryMode::ZeroPad); // 1x1 linear head
    return r;
}

struct UNetGrads {
    UNetParams params; // gradient in parameter layout
    Field input;       // gradient with respect to the network input
};

/// Gradients of <output, upstream> with respect to every parameter and the
/// input, replaying the tape in reverse.
inline UNetGrads unet_backward(const UNetParams& p, const UNetTape& tape, const Field& upstream) {
    const UNetConfig& cfg = p.config;
    const int S = cfg.levels();
    if (static_cast<int>(tape.enc.size()) != S || static_cast<int>(tape.dec.size()) != S)
        throw config_error("unet_backward: tape does not match this configuration");

    UNetGrads g{zeros_like(p), Field()};
    const std::vector<Kernel>& L = p.layers;
    std::vector<Kernel>& G = g.params.layers;
    int li = static_cast<int>(L.size()) - 1;

    // head
    const Field head_in = detail::relu(tape.dec.back().z2);
    if (upstream.height() != head_in.height() || upstream.width() != head_in.width() ||
        upstream.channels() != cfg.out_channels)
        throw config_error("unet_backward: upstream shape mismatch");
    ConvGrads hg = conv2d_adjoint(upstream, head_in, L[li], BoundaryMode::ZeroPad);
    G[li--] = std::move(hg.kernel);
    Field d_a = std::move(hg.input);

    // decoder, fine back to coarse
    std::vector<Field> d_skip(S);
    for (int d = S - 1; d >= 0; --d) {
        const int s = S - 1 - d;
        const UNetTape::Stage& st = tape.dec[d];
        Field dz2 = detail::relu_backward(d_a, st.z2);
        ConvGrads c2 = conv2d_adjoint(dz2, detail::relu(st.z1), L[li], BoundaryMode::ZeroPad);
        G[li--] = std::move(c2.kernel);
        Field dz1 = detail::relu_backward(c2.input, st.z1);
        ConvGrads c1 = conv2d_adjoint(dz1, st.x, L[li], BoundaryMode::ZeroPad);
        G[li--] = std::move(c1.kernel);
        const int below = st.x.channels() - cfg.channels[s];
        auto [d_up, ds] = split_channels(c1.input, below);
        d_skip[s] = std::move(ds);
        d_a = upsample_nn2_adjoint(d_up);
    }

    // bottleneck
    {
        const UNetTape::Stage& st = tape.bott;
        Field dz2 = detail::relu_backward(d_a, st.z2);
        ConvGrads c2 = conv2d_adjoint(dz2, detail::relu(st.z1), L[li], BoundaryMode::ZeroPad);
        G[li--] = std::move(c2.kernel);
        Field dz1 = detail::relu_backward(c2.input, st.z1);
        ConvGrads c1 = conv2d_adjoint(dz1, st.x, L[li], BoundaryMode::ZeroPad);
        G[li--] = std::move(c1.kernel);
        d_a = std::move(c1.input);
    }

    // encoder, coarse back to fine; d_a arrives as the pooled-output gradient
    for (int s = S - 1; s >= 0; --s) {
        const UNetTape::Stage& st = tape.enc[s];
        Field d_a2 = downsample_avg2_adjoint(d_a);
        axpy(d_a2, 1.0, d_skip[s]);
        Field dz2 = detail::relu_backward(d_a2, st.z2);
        ConvGrads c2 = conv2d_adjoint(dz2, detail::relu(st.z1), L[li], BoundaryMode::ZeroPad);
        G[li--] = std::move(c2.kernel);
        Field dz1 = detail::relu_backward(c2.input, st.z1);
        ConvGrads c1 = conv2d_adjoint(dz1, st.x, L[li], BoundaryMode::ZeroPad);
        G[li--] = std::move(c1.kernel);
        d_a = std::move(c1.input);
    }
    g.input = std::move(d_a);
    return g;
}

} // namespace dwn
