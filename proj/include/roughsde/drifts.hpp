#pragma once

// Analytic drift families used by the bundled scenarios and the tests.

#include "roughsde/holder_space.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace roughsde {

struct DriftParams {
    std::string family = "zero";  // zero | smooth | lacunary | growing | divfree | rotation
    double amplitude = 0.5;
    double frequency = 1.0;  // smooth family
    int levels = 4;          // lacunary: j = 0..levels
    double growth = 0.5;     // growing: coefficient c of x (x²+ε²)^{(γ'−1)/2}
    double epsilon = 0.1;    // growing: smoothing radius at the origin
    double time_beta = 0.0;  // optional factor (t + t_reg)^{-β}
    double time_reg = 0.05;
    double phase_seed = 0.0;
};

namespace detail {

/// Deterministic phases spread by the golden ratio.
inline double lacunary_phase(int j, int axis, double seed)
{
    const double g = 0.6180339887498949;
    const double u = std::fmod(seed + (j + 1) * g + axis * 0.37, 1.0);
    return 2.0 * std::numbers::pi * u;
}

/// Σ_{j=0}^{J} 2^{-jα} cos(2^j s + φ_j).
inline double lacunary_sum(double s, double alpha, int levels, int axis, double seed)
{
    double v = 0.0;
    for (int j = 0; j <= levels; ++j) {
        const double k = std::ldexp(1.0, j);
        v += std::pow(k, -alpha) * std::cos(k * s + lacunary_phase(j, axis, seed));
    }
    return v;
}

}  // namespace detail

template <int D>
DriftSpec<D> make_drift(const DriftParams& p, const HolderExponents& ex)
{
    check_dimension<D>();
    DriftSpec<D> b;
    b.name = p.family;
    b.exponents = ex;
    const double A = p.amplitude;
    const double beta = p.time_beta;
    const double treg = p.time_reg;
    const auto profile = [beta, treg](double t) { return beta == 0.0 ? 1.0 : std::pow(t + treg, -beta); };
    if (p.family == "zero") {
        b.identically_zero = true;
        b.divergence_free = true;
        b.field = [](double, const Vec<D>&) { return Vec<D>::Zero().eval(); };
        b.divergence = [](double, const Vec<D>&) { return 0.0; };
    } else if (p.family == "smooth") {
        const double w = p.frequency;
        b.field = [A, w, profile](double t, const Vec<D>& x) {
            Vec<D> v;
            for (int a = 0; a < D; ++a) {
                v[a] = A * std::cos(w * x[a] + a);
            }
            return (profile(t) * v).eval();
        };
        b.divergence = [A, w, profile](double t, const Vec<D>& x) {
            double s = 0.0;
            for (int a = 0; a < D; ++a) {
                s -= A * w * std::sin(w * x[a] + a);
            }
            return profile(t) * s;
        };
    } else if (p.family == "lacunary" || p.family == "growing") {
        const double alpha = ex.alpha;
        const int J = p.levels;
        const double seed = p.phase_seed;
        const bool grow = p.family == "growing";
        const double c = p.growth;
        const double eps = p.epsilon;
        const double gl = ex.gamma_low();
        b.field = [=](double t, const Vec<D>& x) {
            Vec<D> v;
            for (int a = 0; a < D; ++a) {
                v[a] = A * detail::lacunary_sum(x[a], alpha, J, a, seed);
                if (grow) {
                    v[a] += c * x[a] * std::pow(x[a] * x[a] + eps * eps, 0.5 * (gl - 1.0));
                }
            }
            return (profile(t) * v).eval();
        };
    } else if (p.family == "divfree") {
        if constexpr (D != 2) {
            throw Error("the divergence-free family is two-dimensional");
        } else {
            // b = ∇^⊥ψ with ψ = A Σ 2^{-j(1+α)} [sin(2^j x₁ + φ_j) − sin(2^j x₂ + φ'_j)].
            const double alpha = ex.alpha;
            const int J = p.levels;
            const double seed = p.phase_seed;
            b.divergence_free = true;
            b.field = [=](double t, const Vec<2>& x) {
                Vec<2> v;
                v[0] = A * detail::lacunary_sum(x[1], alpha, J, 1, seed);
                v[1] = A * detail::lacunary_sum(x[0], alpha, J, 0, seed);
                return (profile(t) * v).eval();
            };
            b.divergence = [](double, const Vec<2>&) { return 0.0; };
        }
    } else if (p.family == "rotation") {
        if constexpr (D != 2) {
            throw Error("the rotation family is two-dimensional");
        } else {
            b.divergence_free = true;
            b.field = [A](double, const Vec<2>& x) { return Vec<2>(-A * x[1], A * x[0]); };
            b.divergence = [](double, const Vec<2>&) { return 0.0; };
        }
    } else {
        throw Error("unknown drift family '" + p.family + "'");
    }
    return b;
}

}  // namespace roughsde
