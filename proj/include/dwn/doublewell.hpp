#pragma once

/// @file doublewell.hpp
/// Double-well potential, Ginzburg-Landau and relaxed Potts energies, and the
/// backward-Euler fixed-point activation family built from them.

#include <cmath>
#include <string>

#include "dwn/field.hpp"

namespace dwn {

enum class Activation { QgammaSig, QgammaProj };

/// Splitting/activation configuration. `alpha`, `tau` and `lambda_eps` are
/// independent inputs: no formula in this library ever needs lambda or eps
/// on their own.
struct DoubleWellParams {
    double tau = 0.2;        // time step
    double lambda_eps = 1.0; // diffusion coefficient (lambda * eps)
    double alpha = 15.0;     // proximal weight 2*tau*lambda/eps
    int gamma = 3;           // fixed-point iteration count
    Activation activation = Activation::QgammaSig;

    void validate() const {
        if (!(tau > 0.0)) throw config_error("DoubleWellParams: tau must be positive");
        if (lambda_eps < 0.0) throw config_error("DoubleWellParams: lambda_eps must be >= 0");
        if (alpha < 0.0) throw config_error("DoubleWellParams: alpha must be >= 0");
        if (gamma < 0) throw config_error("DoubleWellParams: gamma must be >= 0");
    }
};

struct EnergyReport {
    double region_term = 0.0;      // integral of force * u
    double gl_gradient_term = 0.0; // lambda * (eps/2) * sum |grad u|^2
    double double_well_term = 0.0; // lambda * (1/eps) * sum u^2 (1-u)^2
    double total = 0.0;
};

/// W(v) = v^2 (1-v)^2, minimized exactly at the binary values 0 and 1.
inline double double_well(double v) {
    const double a = v * (1.0 - v);
    return a * a;
}

/// Discrete Ginzburg-Landau energy with forward differences and periodic wrap:
/// (eps/2) sum |grad u|^2 h^2 + (1/eps) sum u^2(1-u)^2 h^2.
inline double gl_energy(const Field& u, double eps, double h = 1.0) {
    if (u.channels() != 1) throw config_error("gl_energy: field must be single-channel");
    if (!(eps > 0.0)) throw config_error("gl_energy: eps must be positive");
    const int H = u.height(), W = u.width();
    double grad = 0.0, well = 0.0;
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const double v = u.at(i, j, 0);
            const double dx = (u.at((i + 1) % H, j, 0) - v) / h;
            const double dy = (u.at(i, (j + 1) % W, 0) - v) / h;
            grad += dx * dx + dy * dy;
            well += double_well(v);
        }
    const double cell = h * h;
    return 0.5 * eps * grad * cell + well * cell / eps;
}

namespace detail {
/// Shared assembly: region + grad_coef * sum|grad u|^2 + well_coef * sum W(u),
/// each sum weighted by the cell area h^2.
inline EnergyReport potts_energy_terms(const Field& u, const Field& force, double grad_coef,
                                       double well_coef, double h) {
    if (!u.same_shape(force) || u.channels() != 1)
        throw config_error("potts energy: u and force must be matching single-channel fields");
    const int H = u.height(), W = u.width();
    const double cell = h * h;
    EnergyReport r;
    double grad = 0.0, well = 0.0;
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const double v = u.at(i, j, 0);
            r.region_term += force.at(i, j, 0) * v * cell;
            const double dx = (u.at((i + 1) % H, j, 0) - v) / h;
            const double dy = (u.at(i, (j + 1) % W, 0) - v) / h;
            grad += dx * dx + dy * dy;
            well += double_well(v);
        }
    r.gl_gradient_term = grad_coef * grad * cell;
    r.double_well_term = well_coef * well * cell;
    r.total = r.region_term + r.gl_gradient_term + r.double_well_term;
    return r;
}
} // namespace detail

/// Relaxed Potts energy: sum force*u h^2 + lambda * L_eps(u).
inline EnergyReport potts_relaxed_energy(const Field& u, const Field& force, double lambda,
                                         double eps, double h = 1.0) {
    if (!(eps > 0.0)) throw config_error("potts_relaxed_energy: eps must be positive");
    return detail::potts_energy_terms(u, force, 0.5 * lambda * eps, lambda / eps, h);
}

/// One backward-Euler fixed-point update for the double-well proximal problem:
/// v <- (u_half - alpha(2v^3 - 3v^2)) / (1 + alpha).
inline double fixed_point_step(double v, double u_half, double alpha) {
    return (u_half - alpha * (2.0 * v * v * v - 3.0 * v * v)) / (1.0 + alpha);
}

/// gamma fixed-point iterations anchored at u_half, starting from v0 = u_half.
inline double q_gamma(double u_half, double alpha, int gamma) {
    double v = u_half;
    for (int m = 0; m < gamma; ++m) v = fixed_point_step(v, u_half, alpha);
    return v;
}

inline Field q_gamma(const Field& u_half, double alpha, int gamma) {
    Field out = u_half;
    for (double& v : out.raw()) v = q_gamma(v, alpha, gamma);
    return out;
}

/// Clamp to [0,1]; identical to ReLU(1 - ReLU(1 - a)).
inline double proj01(double a) { return a <= 0.0 ? 0.0 : (a >= 1.0 ? 1.0 : a); }

inline double sigmoid(double a) {
    if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
    const double e = std::exp(a);
    return e / (1.0 + e);
}

/// The block activation: Q_gamma composed with the restriction map. The Sig
/// variant applies sigmoid(u_half) directly; the conventional 0.5 shift is
/// absorbed into the preceding trainable bias.
inline double activate(double u_half, const DoubleWellParams& p) {
    const double restricted =
        p.activation == Activation::QgammaProj ? proj01(u_half) : sigmoid(u_half);
    return q_gamma(restricted, p.alpha, p.gamma);
}

inline Field activate(const Field& u_half, const DoubleWellParams& p) {
    Field out = u_half;
    for (double& v : out.raw()) v = activate(v, p);
    return out;
}

/// d activate / d u_half. proj01's derivative is 1 on (0,1) and 0 elsewhere,
/// including the boundary points. Q_gamma is differentiated exactly as the
/// gamma-fold composition v^{m+1} = (p - alpha(2v^3-3v^2))/(1+alpha) with both
/// the anchor p and the start v^0 equal to the restricted input.
inline double activate_derivative(double u_half, const DoubleWellParams& p) {
    double restricted, d_restrict;
    if (p.activation == Activation::QgammaProj) {
        restricted = proj01(u_half);
        d_restrict = (u_half > 0.0 && u_half < 1.0) ? 1.0 : 0.0;
    } else {
        restricted = sigmoid(u_half);
        d_restrict = restricted * (1.0 - restricted);
    }
    double v = restricted;
    double jac = 1.0; // d v^m / d p
    const double inv = 1.0 / (1.0 + p.alpha);
    for (int m = 0; m < p.gamma; ++m) {
        const double dv = -p.alpha * (6.0 * v * v - 6.0 * v) * inv; // dg/dv at v^m
        jac = dv * jac + inv;
        v = fixed_point_step(v, restricted, p.alpha);
    }
    return jac * d_restrict;
}

/// Pointwise chain rule through activate: upstream * activate'(u_half).
inline Field activate_adjoint(const Field& upstream, const Field& u_half,
                              const DoubleWellParams& p) {
    if (!upstream.same_shape(u_half)) throw config_error("activate_adjoint: shape mismatch");
    Field out = upstream;
    double* po = out.data();
    const double* ph = u_half.data();
    for (std::size_t k = 0; k < out.size(); ++k) po[k] *= activate_derivative(ph[k], p);
    return out;
}

} // namespace dwn
