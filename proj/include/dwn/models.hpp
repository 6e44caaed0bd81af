#pragma once

/// @file models.hpp
/// Region forces, the splitting blocks and full forward/backward passes of the
/// two double-well networks, and the classical (non-learned) solver driven by
/// a Chan-Vese force.

#include <cstdint>
#include <optional>
#include <vector>

#include "dwn/doublewell.hpp"
#include "dwn/field.hpp"
#include "dwn/unet.hpp"

namespace dwn {

// ---------------------------------------------------------------------------
// Chan-Vese region force
// ---------------------------------------------------------------------------

struct ChanVeseParams {
    enum class EmptyRegion { GlobalMean, Error };
    // Contrast scaling in the quadratic data terms. The default keeps the
    // force strong enough that the splitting iteration settles onto the
    // contrast edge within a few steps instead of drifting on the interface.
    double alpha_cv = 0.25;
    int max_outer = 1 << 30;          // cap on mean re-estimations in iterative drivers
    EmptyRegion empty_region_fallback = EmptyRegion::GlobalMean;

    void validate() const {
        if (!(alpha_cv > 0.0)) throw config_error("ChanVeseParams: alpha_cv must be positive");
        if (max_outer < 1) throw config_error("ChanVeseParams: max_outer must be >= 1");
    }
};

/// ((f - r1)^2 - (f - r0)^2) / alpha_cv with r1 the mean of f over {u >= 0.5}
/// and r0 the mean over {u < 0.5}. Multi-channel images are reduced to their
/// channel mean first. An empty region either takes the global mean of f or
/// raises, per the fallback policy.
inline Field chan_vese_force(const Field& f, const Field& u, const ChanVeseParams& cv) {
    cv.validate();
    if (u.channels() != 1) throw config_error("chan_vese_force: u must be single-channel");
    const Field lum = channel_mean(f);
    if (lum.height() != u.height() || lum.width() != u.width())
        throw config_error("chan_vese_force: image and segmentation dims differ");

    double sum1 = 0.0, sum0 = 0.0, total = 0.0;
    std::size_t n1 = 0, n0 = 0;
    const double* pf = lum.data();
    const double* pu = u.data();
    const std::size_t n = lum.size();
    for (std::size_t k = 0; k < n; ++k) {
        total += pf[k];
        if (pu[k] >= 0.5) { sum1 += pf[k]; ++n1; }
        else { sum0 += pf[k]; ++n0; }
    }
    if ((n1 == 0 || n0 == 0) && cv.empty_region_fallback == ChanVeseParams::EmptyRegion::Error)
        throw divergence_error("chan_vese_force: degenerate partition (one region is empty)");
    const double global = total / static_cast<double>(n);
    const double r1 = n1 > 0 ? sum1 / static_cast<double>(n1) : global;
    const double r0 = n0 > 0 ? sum0 / static_cast<double>(n0) : global;

    Field force(lum.height(), lum.width(), 1);
    double* pF = force.data();
    for (std::size_t k = 0; k < n; ++k) {
        const double d1 = pf[k] - r1;
        const double d0 = pf[k] - r0;
        pF[k] = (d1 * d1 - d0 * d0) / cv.alpha_cv;
    }
    return force;
}

// ---------------------------------------------------------------------------
// Splitting blocks
// ---------------------------------------------------------------------------

namespace detail {
/// Linear half of a Model-I block:
/// u - tau*force + tau*lambda_eps*(W_lap * u) + tau*(W^n * u + b^n).
inline Field dbi_half_step(const Field& u, const Field& force, const Kernel& block,
                           const DoubleWellParams& p) {
    if (!u.same_shape(force)) throw config_error("dbi_step: u and force shapes differ");
    Field u_half = u;
    axpy(u_half, -p.tau, force);
    if (p.lambda_eps != 0.0)
        axpy(u_half, p.tau * p.lambda_eps, conv2d(u, laplacian_stencil(1.0), BoundaryMode::Periodic));
    axpy(u_half, p.tau, conv2d(u, block, BoundaryMode::Periodic));
    return u_half;
}

/// Linear half of a Model-II block:
/// u + tau*lambda_eps*(W_lap * u) + tau * G(concat(u, f)).
inline Field dbii_half_step(const Field& u, const Field& g_out, const DoubleWellParams& p) {
    Field u_half = u;
    if (p.lambda_eps != 0.0)
        axpy(u_half, p.tau * p.lambda_eps, conv2d(u, laplacian_stencil(1.0), BoundaryMode::Periodic));
    axpy(u_half, p.tau, g_out);
    return u_half;
}
} // namespace detail

/// One Model-I block: forward-Euler linear substep with control kernel W^n and
/// bias b^n (carried on the kernel), then the double-well activation.
inline Field dbi_step(const Field& u, const Field& force, const Kernel& block,
                      const DoubleWellParams& p) {
    return activate(detail::dbi_half_step(u, force, block, p), p);
}

/// One Model-II block: the learned operator consumes (u, f) stacked.
inline Field dbii_step(const Field& u, const Field& f, const UNetParams& g_params,
                       const DoubleWellParams& p) {
    if (g_params.config.in_channels != 1 + f.channels())
        throw config_error("dbii_step: block operator expects " +
                           std::to_string(g_params.config.in_channels) + " channels, got " +
                           std::to_string(1 + f.channels()));
    const Field g_out = unet_forward(g_params, concat_channels(u, f)).output;
    return activate(detail::dbii_half_step(u, g_out, p), p);
}

/// Initial segmentation from the input layer: Q_gamma(Sig(W^0 * f + b^0)).
/// Always the sigmoid form, regardless of the block activation.
inline Field init_u0(const Field& f, const Kernel& input_layer, const DoubleWellParams& p) {
    Field z = conv2d(f, input_layer, BoundaryMode::Periodic);
    for (double& v : z.raw()) v = q_gamma(sigmoid(v), p.alpha, p.gamma);
    return z;
}

// ---------------------------------------------------------------------------
// Double-well nets
// ---------------------------------------------------------------------------

struct DNIParams {
    Kernel input_layer;         // D -> 1
    UNetParams region_net;      // F(f), shared by every block
    std::vector<Kernel> blocks; // per block: 1 -> 1 kernel, scalar bias
    Kernel output_layer;        // 1 -> 1
    DoubleWellParams scheme;

    int block_count() const { return static_cast<int>(blocks.size()); }
    int image_channels() const { return input_layer.in_channels; }

    std::vector<TensorView> manifest() {
        std::vector<TensorView> v;
        v.push_back({"input.weight", input_layer.weights.data(), input_layer.weights.size(),
                     {input_layer.out_channels, input_layer.k_h, input_layer.k_w, input_layer.in_channels}});
        v.push_back({"input.bias", input_layer.bias.data(), input_layer.bias.size(),
                     {input_layer.out_channels}});
        for (auto& t : region_net.manifest("force.")) v.push_back(std::move(t));
        for (std::size_t n = 0; n < blocks.size(); ++n) {
            Kernel& k = blocks[n];
            const std::string base = "block" + std::to_string(n);
            v.push_back({base + ".weight", k.weights.data(), k.weights.size(),
                         {k.out_channels, k.k_h, k.k_w, k.in_channels}});
            v.push_back({base + ".bias", k.bias.data(), k.bias.size(), {k.out_channels}});
        }
        v.push_back({"output.weight", output_layer.weights.data(), output_layer.weights.size(),
                     {output_layer.out_channels, output_layer.k_h, output_layer.k_w,
                      output_layer.in_channels}});
        v.push_back({"output.bias", output_layer.bias.data(), output_layer.bias.size(),
                     {output_layer.out_channels}});
        return v;
    }
};

struct DNIIParams {
    Kernel input_layer;            // D -> 1
    std::vector<UNetParams> blocks; // per block: independent operator on (u, f)
    Kernel output_layer;           // 1 -> 1
    DoubleWellParams scheme;

    int block_count() const { return static_cast<int>(blocks.size()); }
    int image_channels() const { return input_layer.in_channels; }

    std::vector<TensorView> manifest() {
        std::vector<TensorView> v;
        v.push_back({"input.weight", input_layer.weights.data(), input_layer.weights.size(),
                     {input_layer.out_channels, input_layer.k_h, input_layer.k_w, input_layer.in_channels}});
        v.push_back({"input.bias", input_layer.bias.data(), input_layer.bias.size(),
                     {input_layer.out_channels}});
        for (std::size_t n = 0; n < blocks.size(); ++n)
            for (auto& t : blocks[n].manifest("block" + std::to_string(n) + "."))
                v.push_back(std::move(t));
        v.push_back({"output.weight", output_layer.weights.data(), output_layer.weights.size(),
                     {output_layer.out_channels, output_layer.k_h, output_layer.k_w,
                      output_layer.in_channels}});
        v.push_back({"output.bias", output_layer.bias.data(), output_layer.bias.size(),
                     {output_layer.out_channels}});
        return v;
    }
};

struct DN1Config {
    int image_channels = 1;
    std::vector<int> channels;  // region-net channel vector
    int blocks = 10;
    int kernel_size = 3;        // support of W^0, W^n, W^M
    DoubleWellParams scheme;

    UNetConfig unet_config() const {
        return UNetConfig{channels, image_channels, 1, 3};
    }
    void validate() const {
        if (image_channels < 1) throw config_error("DN1Config: image channels must be positive");
        if (blocks < 1) throw config_error("DN1Config: at least one block required");
        if (kernel_size < 1 || kernel_size % 2 == 0)
            throw config_error("DN1Config: kernel size must be odd and positive");
        unet_config().validate();
        scheme.validate();
    }
};

struct DN2Config {
    int image_channels = 1;
    std::vector<int> channels;  // per-block operator channel vector
    int blocks = 3;
    int kernel_size = 3;
    DoubleWellParams scheme{0.5, 1.0, 15.0, 3, Activation::QgammaSig};

    UNetConfig unet_config() const {
        return UNetConfig{channels, image_channels + 1, 1, 3};
    }
    void validate() const {
        if (image_channels < 1) throw config_error("DN2Config: image channels must be positive");
        if (blocks < 1) throw config_error("DN2Config: at least one block required");
        if (kernel_size < 1 || kernel_size % 2 == 0)
            throw config_error("DN2Config: kernel size must be odd and positive");
        unet_config().validate();
        scheme.validate();
    }
};

inline DNIParams build_dn1(const DN1Config& cfg, std::uint64_t seed) {
    cfg.validate();
    DNIParams p;
    p.scheme = cfg.scheme;
    Rng rng(substream(seed, 0x646e31)); // "dn1" stream tag
    p.input_layer = Kernel(cfg.kernel_size, cfg.kernel_size, cfg.image_channels, 1);
    detail::init_kernel(p.input_layer, rng);
    p.region_net = build_unet(cfg.unet_config(), seed);
    p.blocks.reserve(cfg.blocks);
    for (int n = 0; n < cfg.blocks; ++n) {
        Kernel k(cfg.kernel_size, cfg.kernel_size, 1, 1);
        detail::init_kernel(k, rng);
        p.blocks.push_back(std::move(k));
    }
    p.output_layer = Kernel(cfg.kernel_size, cfg.kernel_size, 1, 1);
    detail::init_kernel(p.output_layer, rng);
    return p;
}

inline DNIIParams build_dn2(const DN2Config& cfg, std::uint64_t seed) {
    cfg.validate();
    DNIIParams p;
    p.scheme = cfg.scheme;
    Rng rng(substream(seed, 0x646e32)); // "dn2" stream tag
    p.input_layer = Kernel(cfg.kernel_size, cfg.kernel_size, cfg.image_channels, 1);
    detail::init_kernel(p.input_layer, rng);
    p.blocks.reserve(cfg.blocks);
    for (int n = 0; n < cfg.blocks; ++n)
        p.blocks.push_back(build_unet(cfg.unet_config(), substream(seed, 0x100 + n)));
    p.output_layer = Kernel(cfg.kernel_size, cfg.kernel_size, 1, 1);
    detail::init_kernel(p.output_layer, rng);
    return p;
}

inline DNIParams zeros_like(const DNIParams& p) {
    DNIParams z;
    z.scheme = p.scheme;
    z.input_layer = Kernel(p.input_layer.k_h, p.input_layer.k_w, p.input_layer.in_channels, 1);
    z.region_net = zeros_like(p.region_net);
    for (const Kernel& k : p.blocks) z.blocks.emplace_back(k.k_h, k.k_w, 1, 1);
    z.output_layer = Kernel(p.output_layer.k_h, p.output_layer.k_w, 1, 1);
    return z;
}

inline DNIIParams zeros_like(const DNIIParams& p) {
    DNIIParams z;
    z.scheme = p.scheme;
    z.input_layer = Kernel(p.input_layer.k_h, p.input_layer.k_w, p.input_layer.in_channels, 1);
    for (const UNetParams& b : p.blocks) z.blocks.push_back(zeros_like(b));
    z.output_layer = Kernel(p.output_layer.k_h, p.output_layer.k_w, 1, 1);
    return z;
}

/// Total trainable scalars of a DN-I model.
inline std::int64_t dn1_param_count(const DN1Config& cfg) {
    const std::int64_t k2 = static_cast<std::int64_t>(cfg.kernel_size) * cfg.kernel_size;
    return param_count(cfg.unet_config()) + (k2 * cfg.image_channels + 1) +
           static_cast<std::int64_t>(cfg.blocks) * (k2 + 1) + (k2 + 1);
}

inline std::int64_t dn2_param_count(const DN2Config& cfg) {
    const std::int64_t k2 = static_cast<std::int64_t>(cfg.kernel_size) * cfg.kernel_size;
    return static_cast<std::int64_t>(cfg.blocks) * param_count(cfg.unet_config()) +
           (k2 * cfg.image_channels + 1) + (k2 + 1);
}

// ---------------------------------------------------------------------------
// Forward passes with activation tapes
// ---------------------------------------------------------------------------

struct DN1Tape {
    Field f;
    Field z0;                  // input-layer pre-sigmoid
    Field force;               // F(f), evaluated once
    UNetTape force_tape;
    std::vector<Field> u;      // u^0..u^M
    std::vector<Field> u_half; // per-block pre-activation
    Field pred;                // final sigmoid output
};

struct DN1Forward {
    Field pred;
    DN1Tape tape;
};

inline DN1Forward dn1_forward(const Field& f, const DNIParams& p) {
    if (f.channels() != p.image_channels())
        throw config_error("dn1_forward: image has " + std::to_string(f.channels()) +
                           " channels, model expects " + std::to_string(p.image_channels()));
    DN1Forward r;
    DN1Tape& t = r.tape;
    t.f = f;
    t.z0 = conv2d(f, p.input_layer, BoundaryMode::Periodic);
    Field u = t.z0;
    for (double& v : u.raw()) v = q_gamma(sigmoid(v), p.scheme.alpha, p.scheme.gamma);

    UNetForward fw = unet_forward(p.region_net, f);
    t.force = std::move(fw.output);
    t.force_tape = std::move(fw.tape);

    const int M = p.block_count();
    t.u.reserve(M + 1);
    t.u_half.reserve(M);
    t.u.push_back(std::move(u));
    for (int n = 0; n < M; ++n) {
        Field u_half = detail::dbi_half_step(t.u.back(), t.force, p.blocks[n], p.scheme);
        t.u.push_back(activate(u_half, p.scheme));
        t.u_half.push_back(std::move(u_half));
    }
    Field z = conv2d(t.u.back(), p.output_layer, BoundaryMode::Periodic);
    for (double& v : z.raw()) v = sigmoid(v);
    t.pred = z;
    r.pred = std::move(z);
    return r;
}

struct DN2Tape {
    Field f;
    Field z0;
    std::vector<Field> u;
    std::vector<Field> u_half;
    std::vector<Field> g_out;     // per-block operator output
    std::vector<UNetTape> g_tape;
    Field pred;
};

struct DN2Forward {
    Field pred;
    DN2Tape tape;
};

inline DN2Forward dn2_forward(const Field& f, const DNIIParams& p) {
    if (f.channels() != p.image_channels())
        throw config_error("dn2_forward: image has " + std::to_string(f.channels()) +
                           " channels, model expects " + std::to_string(p.image_channels()));
    DN2Forward r;
    DN2Tape& t = r.tape;
    t.f = f;
    t.z0 = conv2d(f, p.input_layer, BoundaryMode::Periodic);
    Field u = t.z0;
    for (double& v : u.raw()) v = q_gamma(sigmoid(v), p.scheme.alpha, p.scheme.gamma);

    const int M = p.block_count();
    t.u.push_back(std::move(u));
    for (int n = 0; n < M; ++n) {
        UNetForward fw = unet_forward(p.blocks[n], concat_channels(t.u.back(), f));
        Field u_half = detail::dbii_half_step(t.u.back(), fw.output, p.scheme);
        t.g_out.push_back(std::move(fw.output));
        t.g_tape.push_back(std::move(fw.tape));
        t.u.push_back(activate(u_half, p.scheme));
        t.u_half.push_back(std::move(u_half));
    }
    Field z = conv2d(t.u.back(), p.output_layer, BoundaryMode::Periodic);
    for (double& v : z.raw()) v = sigmoid(v);
    t.pred = z;
    r.pred = std::move(z);
    return r;
}

// ---------------------------------------------------------------------------
// Backward passes
// ---------------------------------------------------------------------------

namespace detail {
/// d/dz of Q_gamma(Sig(z)) — the input-layer chain.
inline double init_derivative(double z, double alpha, int gamma) {
    DoubleWellParams p;
    p.alpha = alpha;
    p.gamma = gamma;
    p.activation = Activation::QgammaSig;
    return activate_derivative(z, p);
}

inline Field sigmoid_backward_from_output(const Field& upstream, const Field& sig_out) {
    Field d = upstream;
    double* pd = d.data();
    const double* ps = sig_out.data();
    for (std::size_t k = 0; k < d.size(); ++k) pd[k] *= ps[k] * (1.0 - ps[k]);
    return d;
}
} // namespace detail

/// Gradients of <pred-path, upstream> for every trainable tensor of DN-I. The
/// shared region net receives the sum of all per-block contributions.
inline DNIParams dn_backward(const DNIParams& p, const DN1Tape& t, const Field& upstream) {
    if (static_cast<int>(t.u.size()) != p.block_count() + 1 || t.f.empty())
        throw config_error("dn_backward: tape does not match this DN-I model");
    DNIParams g = zeros_like(p);
    const double tau = p.scheme.tau;
    const Kernel lap = laplacian_stencil(1.0);

    // final layer: pred = Sig(W^M * u^M + b^M)
    Field dz = detail::sigmoid_backward_from_output(upstream, t.pred);
    ConvGrads out_g = conv2d_adjoint(dz, t.u.back(), p.output_layer, BoundaryMode::Periodic);
    g.output_layer = std::move(out_g.kernel);
    Field du = std::move(out_g.input);

    Field dforce(t.force.height(), t.force.width(), 1);
    for (int n = p.block_count() - 1; n >= 0; --n) {
        Field dh = activate_adjoint(du, t.u_half[n], p.scheme);
        // u_half = u - tau*force + tau*lambda_eps*(lap*u) + tau*(W^n*u + b^n)
        ConvGrads bg = conv2d_adjoint(dh, t.u[n], p.blocks[n], BoundaryMode::Periodic);
        for (double& w : bg.kernel.weights) w *= tau;
        for (double& b : bg.kernel.bias) b *= tau;
        g.blocks[n] = std::move(bg.kernel);
        axpy(dforce, -tau, dh);

        // d u_half / d u^n = identity + tau*lambda_eps*lap + tau*W^n; the
        // five-point stencil is reflection-symmetric, so its adjoint is itself.
        du = std::move(bg.input);
        for (double& v : du.raw()) v *= tau;
        axpy(du, 1.0, dh);
        if (p.scheme.lambda_eps != 0.0)
            axpy(du, tau * p.scheme.lambda_eps, conv2d(dh, lap, BoundaryMode::Periodic));
    }

    UNetGrads fg = unet_backward(p.region_net, t.force_tape, dforce);
    g.region_net = std::move(fg.params);

    // initial layer: u^0 = Q_gamma(Sig(z0))
    Field dz0 = du;
    {
        double* pd = dz0.data();
        const double* pz = t.z0.data();
        for (std::size_t k = 0; k < dz0.size(); ++k)
            pd[k] *= detail::init_derivative(pz[k], p.scheme.alpha, p.scheme.gamma);
    }
    ConvGrads ig = conv2d_adjoint(dz0, t.f, p.input_layer, BoundaryMode::Periodic);
    g.input_layer = std::move(ig.kernel);
    return g;
}

inline DNIIParams dn_backward(const DNIIParams& p, const DN2Tape& t, const Field& upstream) {
    if (static_cast<int>(t.u.size()) != p.block_count() + 1 || t.f.empty())
        throw config_error("dn_backward: tape does not match this DN-II model");
    DNIIParams g = zeros_like(p);
    const double tau = p.scheme.tau;
    const Kernel lap = laplacian_stencil(1.0);

    Field dz = detail::sigmoid_backward_from_output(upstream, t.pred);
    ConvGrads out_g = conv2d_adjoint(dz, t.u.back(), p.output_layer, BoundaryMode::Periodic);
    g.output_layer = std::move(out_g.kernel);
    Field du = std::move(out_g.input);

    for (int n = p.block_count() - 1; n >= 0; --n) {
        Field dh = activate_adjoint(du, t.u_half[n], p.scheme);
        // u_half = u + tau*lambda_eps*(lap*u) + tau*G^n(concat(u, f))
        UNetGrads ug = unet_backward(p.blocks[n], t.g_tape[n], scaled(dh, tau));
        g.blocks[n] = std::move(ug.params);
        Field d_cat_u = split_channels(ug.input, 1).first;

        du = dh;
        axpy(du, 1.0, d_cat_u);
        if (p.scheme.lambda_eps != 0.0)
            axpy(du, tau * p.scheme.lambda_eps, conv2d(dh, lap, BoundaryMode::Periodic));
    }

    Field dz0 = du;
    {
        double* pd = dz0.data();
        const double* pz = t.z0.data();
        for (std::size_t k = 0; k < dz0.size(); ++k)
            pd[k] *= detail::init_derivative(pz[k], p.scheme.alpha, p.scheme.gamma);
    }
    ConvGrads ig = conv2d_adjoint(dz0, t.f, p.input_layer, BoundaryMode::Periodic);
    g.input_layer = std::move(ig.kernel);
    return g;
}

// ---------------------------------------------------------------------------
// Classical solver
// ---------------------------------------------------------------------------

struct ClassicalConfig {
    DoubleWellParams scheme{0.2, 1.0, 15.0, 3, Activation::QgammaProj};
    ChanVeseParams cv;
    int steps = 100;

    void validate() const {
        scheme.validate();
        cv.validate();
        if (steps < 1) throw config_error("ClassicalConfig: at least one step required");
    }
};

struct ClassicalResult {
    Field u;
    std::vector<EnergyReport> energy_trace; // initial state plus one entry per step
};

/// Splitting iteration with no learned control: the Chan-Vese means are
/// re-estimated from the current u before each step (at most cv.max_outer
/// times), the linear substep applies only the diffusion term, and the
/// activation is the projection form. u starts from the image itself,
/// u0 = proj01(luminance(f)).
inline ClassicalResult classical_solve(const Field& f, const ClassicalConfig& cfg) {
    cfg.validate();
    DoubleWellParams scheme = cfg.scheme;
    scheme.activation = Activation::QgammaProj;

    // The energy only needs the two products the scheme carries:
    // lambda*eps for the gradient term and lambda/eps = alpha/(2 tau) for the well.
    const double grad_coef = 0.5 * scheme.lambda_eps;
    const double well_coef = scheme.alpha / (2.0 * scheme.tau);

    Field u = channel_mean(f);
    for (double& v : u.raw()) v = proj01(v);

    const Kernel zero_control(3, 3, 1, 1);
    ClassicalResult res;
    res.energy_trace.reserve(cfg.steps + 1);

    Field force = chan_vese_force(f, u, cfg.cv);
    int estimations = 1;
    res.energy_trace.push_back(detail::potts_energy_terms(u, force, grad_coef, well_coef, 1.0));
    for (int step = 0; step < cfg.steps; ++step) {
        u = dbi_step(u, force, zero_control, scheme);
        res.energy_trace.push_back(detail::potts_energy_terms(u, force, grad_coef, well_coef, 1.0));
        if (step + 1 < cfg.steps && estimations < cfg.cv.max_outer) {
            force = chan_vese_force(f, u, cfg.cv);
            ++estimations;
        }
    }
    res.u = std::move(u);
    return res;
}

/// Binary decision at 0.5; ties go to the foreground.
inline Field threshold(const Field& pred) {
    Field out = pred;
    for (double& v : out.raw()) v = v >= 0.5 ? 1.0 : 0.0;
    return out;
}

} // namespace dwn
