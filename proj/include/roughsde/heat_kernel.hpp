#pragma once

// Gaussian kernels with time-dependent covariance and their grid convolution.

#include "roughsde/core.hpp"
#include "roughsde/grid.hpp"
#include "roughsde/quadrature.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

namespace roughsde {

/// sigma(t) with the uniform ellipticity constant Θ of a = σσᵀ.
template <int D>
struct DiffusionCoefficient {
    std::function<Mat<D>(double)> sigma = [](double) -> Mat<D> { return Mat<D>::Identity(); };
    double theta = 1.5;
    bool constant = true;  // sigma does not depend on t

    static DiffusionCoefficient identity(double theta = 1.5)
    {
        DiffusionCoefficient c;
        c.theta = theta;
        return c;
    }

    Mat<D> operator()(double t) const { return sigma(t); }
    Mat<D> a(double t) const
    {
        const Mat<D> s = sigma(t);
        return s * s.transpose();
    }

    bool is_identity(double T, int samples = 9) const
    {
        for (int i = 0; i < samples; ++i) {
            const double t = T * i / std::max(1, samples - 1);
            if ((sigma(t) - Mat<D>::Identity()).norm() != 0.0) {
                return false;
            }
        }
        return true;
    }

    /// Checks Θ⁻¹|v|² <= vᵀ a(t) v <= Θ|v|² at sampled times.
    void validate(double T, int samples = 33) const
    {
        if (!(theta > 1.0)) {
            throw HypothesisError("ellipticity constant Theta must exceed 1");
        }
        for (int i = 0; i < samples; ++i) {
            const double t = T * i / std::max(1, samples - 1);
            const Mat<D> at = a(t);
            if (!at.allFinite()) {
                throw HypothesisError("diffusion coefficient is not finite");
            }
            Eigen::SelfAdjointEigenSolver<Mat<D>> es(0.5 * (at + at.transpose()));
            const auto ev = es.eigenvalues();
            if (ev.minCoeff() < 1.0 / theta * (1.0 - 1e-12) || ev.maxCoeff() > theta * (1.0 + 1e-12)) {
                throw HypothesisError("a(t) = sigma sigma^T violates the ellipticity bounds with Theta = " +
                                      fmt17(theta) + " at t = " + fmt17(t));
            }
        }
    }
};

/// A_{s,t} = ∫_s^t a(τ) dτ and B = A⁻¹.
template <int D>
struct CovarianceWindow {
    double s = 0.0;
    double t = 0.0;
    Mat<D> A = Mat<D>::Identity();
    Mat<D> B = Mat<D>::Identity();
    double sqrt_det_B = 1.0;

    bool diagonal() const
    {
        for (int i = 0; i < D; ++i) {
            for (int j = 0; j < D; ++j) {
                if (i != j && A(i, j) != 0.0) {
                    return false;
                }
            }
        }
        return true;
    }
};

template <int D>
CovarianceWindow<D> covariance_from_matrix(double s, double t, const Mat<D>& A, double theta)
{
    if (!(t > s)) {
        throw Error("covariance window needs s < t");
    }
    CovarianceWindow<D> w;
    w.s = s;
    w.t = t;
    w.A = 0.5 * (A + A.transpose());
    const double det = w.A.determinant();
    if (!(det > 0.0) || !std::isfinite(det)) {
        throw Error("covariance matrix is singular");
    }
    Eigen::SelfAdjointEigenSolver<Mat<D>> es(w.A);
    const auto ev = es.eigenvalues();
    const double len = t - s;
    if (ev.minCoeff() < len / theta * (1.0 - 1e-9) || ev.maxCoeff() > theta * len * (1.0 + 1e-9)) {
        throw HypothesisError("covariance window violates the ellipticity sandwich");
    }
    w.B = w.A.inverse();
    w.sqrt_det_B = 1.0 / std::sqrt(det);
    return w;
}

/// Composite Simpson quadrature of a(τ) over [s, t].
template <int D>
CovarianceWindow<D> covariance(const DiffusionCoefficient<D>& sigma, double s, double t, int panels = 64)
{
    if (!(t > s)) {
        throw Error("covariance window needs s < t");
    }
    Mat<D> A = Mat<D>::Zero();
    if (sigma.constant) {
        A = (t - s) * sigma.a(s);
    } else {
        const auto rule = composite_simpson(s, t, panels);
        for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
            A += rule.weights[i] * sigma.a(rule.nodes[i]);
        }
    }
    return covariance_from_matrix<D>(s, t, A, sigma.theta);
}

/// K̂(s,t,x) = (2π)^{-d/2} det(B)^{1/2} exp(-(Bx,x)/2).
template <int D>
double gauss_kernel(const CovarianceWindow<D>& w, const Vec<D>& x)
{
    const double norm = std::pow(2.0 * std::numbers::pi, -0.5 * D) * w.sqrt_det_B;
    return norm * std::exp(-0.5 * x.dot(w.B * x));
}

template <int D>
Vec<D> gauss_kernel_grad(const CovarianceWindow<D>& w, const Vec<D>& x)
{
    return -gauss_kernel(w, x) * (w.B * x);
}

template <int D>
Mat<D> gauss_kernel_hess(const CovarianceWindow<D>& w, const Vec<D>& x)
{
    const Vec<D> bx = w.B * x;
    return gauss_kernel(w, x) * (bx * bx.transpose() - w.B);
}

/// Grid convolution with K̂ and its derivatives. The stencil covers the box
/// |y_a| <= z sqrt(A_aa) with D·erfc(z/√2) <= tail_tol; the integral is the
/// midpoint sum over grid nodes with clamped extension beyond the box.
template <int D>
class GaussianStencil {
public:
    GaussianStencil(const CovarianceWindow<D>& w, const Grid<D>& grid, double tail_tol = 1e-10)
        : window_(w), grid_(grid)
    {
        check_dimension<D>();
        double z = 1.0;
        while (D * std::erfc(z / std::numbers::sqrt2) > tail_tol) {
            z += 0.05;
        }
        const double h = grid.spacing();
        for (int a = 0; a < D; ++a) {
            reach_[a] = static_cast<int>(std::ceil(z * std::sqrt(w.A(a, a)) / h));
        }
        separable_ = w.diagonal();
        if (separable_) {
            for (int a = 0; a < D; ++a) {
                const int n = 2 * reach_[a] + 1;
                const double var = w.A(a, a);
                const double c = h / std::sqrt(2.0 * std::numbers::pi * var);
                w0_[a].resize(n);
                w1_[a].resize(n);
                w2_[a].resize(n);
                for (int j = -reach_[a]; j <= reach_[a]; ++j) {
                    const double y = j * h;
                    const double k = c * std::exp(-0.5 * y * y / var);
                    w0_[a][j + reach_[a]] = k;
                    w1_[a][j + reach_[a]] = -y / var * k;
                    w2_[a][j + reach_[a]] = (y * y / (var * var) - 1.0 / var) * k;
                }
            }
        } else {
            // Full tensor stencil (d = 2 with correlated covariance).
            const double cell = grid.cell_volume();
            for (int j1 = -reach_[1 % D]; j1 <= reach_[1 % D]; ++j1) {
                for (int j0 = -reach_[0]; j0 <= reach_[0]; ++j0) {
                    Vec<D> y;
                    y[0] = j0 * grid.spacing();
                    if constexpr (D == 2) {
                        y[1] = j1 * grid.spacing();
                    }
                    Entry e;
                    e.offset[0] = j0;
                    if constexpr (D == 2) {
                        e.offset[1] = j1;
                    }
                    e.value = cell * gauss_kernel(w, y);
                    e.grad = cell * gauss_kernel_grad(w, y);
                    e.hess = cell * gauss_kernel_hess(w, y);
                    full_.push_back(e);
                }
                if constexpr (D == 1) {
                    break;
                }
            }
        }
    }

    const CovarianceWindow<D>& window() const { return window_; }
    int reach(int a) const { return reach_[a]; }

    /// out = ∇^order (K̂ ∗ in). `in` has `comps` values per node. Output layout
    /// per node: order 0 -> comps, order 1 -> comps·D (c·D + a), order 2 ->
    /// comps·D·D (c·D·D + a·D + b).
    void apply(std::span<const double> in, int comps, int order, std::span<double> out) const
    {
        if (order < 0 || order > 2) {
            throw Error("derivative order must be 0, 1 or 2");
        }
        int per_out = comps;
        for (int i = 0; i < order; ++i) {
            per_out *= D;
        }
        if (in.size() != grid_.size() * comps || out.size() != grid_.size() * per_out) {
            throw Error("convolution buffer size mismatch");
        }
        if (!separable_) {
            apply_full(in, comps, order, out);
            return;
        }
        if constexpr (D == 1) {
            const auto& wt = order == 0 ? w0_[0] : (order == 1 ? w1_[0] : w2_[0]);
            line_pass(in, comps, 0, wt, out, comps, 0);
        } else {
            // Separable passes: axis 0 into a scratch buffer, then axis 1.
            std::vector<double> tmp(grid_.size() * comps);
            for (int a = 0; a < (order == 0 ? 1 : D); ++a) {
                for (int b = 0; b < (order == 2 ? D : 1); ++b) {
                    int k0 = 0;
                    int k1 = 0;
                    if (order >= 1) {
                        (a == 0 ? k0 : k1) += 1;
                    }
                    if (order == 2) {
                        (b == 0 ? k0 : k1) += 1;
                    }
                    const int slot = order == 0 ? 0 : (order == 1 ? a : a * D + b);
                    line_pass(in, comps, 0, weights(0, k0), std::span<double>(tmp), comps, 0);
                    line_pass(std::span<const double>(tmp), comps, 1, weights(1, k1), out, per_out, slot);
                }
            }
        }
    }

private:
    struct Entry {
        std::array<int, D> offset{};
        double value = 0.0;
        Vec<D> grad;
        Mat<D> hess;
    };

    const std::vector<double>& weights(int axis, int deriv) const
    {
        return deriv == 0 ? w0_[axis] : (deriv == 1 ? w1_[axis] : w2_[axis]);
    }

    /// One 1D convolution along `axis`, writing component c of `in` into
    /// out[node * out_stride + c * (out_stride / comps) + slot].
    void line_pass(std::span<const double> in, int comps, int axis, const std::vector<double>& wt,
                   std::span<double> out, int out_stride, int slot) const
    {
        const int r = reach_[axis];
        const int n = grid_.per_axis();
        const std::size_t stride_axis = axis == 0 ? 1 : static_cast<std::size_t>(n);
        const std::size_t lines = grid_.size() / n;
        parallel_for(lines, [&](std::size_t line) {
            // Base node of this line and its step along the axis.
            std::size_t base;
            if (axis == 0) {
                base = line * n;
            } else {
                base = line;  // D == 2, axis 1: line indexes x0
            }
            std::vector<double> acc(comps);
            for (int i = 0; i < n; ++i) {
                std::fill(acc.begin(), acc.end(), 0.0);
                for (int j = -r; j <= r; ++j) {
                    // Output at i sums in(i - j) K(j h).
                    const int src = std::clamp(i - j, 0, n - 1);
                    const double w = wt[j + r];
                    const double* p = in.data() + (base + src * stride_axis) * comps;
                    for (int c = 0; c < comps; ++c) {
                        acc[c] += w * p[c];
                    }
                }
                double* q = out.data() + (base + i * stride_axis) * out_stride + slot;
                const int slots = out_stride / comps;
                for (int c = 0; c < comps; ++c) {
                    q[c * slots] = acc[c];
                }
            }
        });
    }

    void apply_full(std::span<const double> in, int comps, int order, std::span<double> out) const
    {
        int per_out = comps;
        for (int i = 0; i < order; ++i) {
            per_out *= D;
        }
        parallel_for(grid_.size(), [&](std::size_t node) {
            const auto idx = grid_.multi_index(node);
            double* q = out.data() + node * per_out;
            std::fill(q, q + per_out, 0.0);
            for (const auto& e : full_) {
                std::array<int, D> src{};
                for (int a = 0; a < D; ++a) {
                    src[a] = idx[a] - e.offset[a];
                }
                const double* p = in.data() + grid_.clamped_index(src) * comps;
                for (int c = 0; c < comps; ++c) {
                    if (order == 0) {
                        q[c] += e.value * p[c];
                    } else if (order == 1) {
                        for (int a = 0; a < D; ++a) {
                            q[c * D + a] += e.grad[a] * p[c];
                        }
                    } else {
                        for (int a = 0; a < D; ++a) {
                            for (int b = 0; b < D; ++b) {
                                q[c * D * D + a * D + b] += e.hess(a, b) * p[c];
                            }
                        }
                    }
                }
            }
        });
    }

    CovarianceWindow<D> window_;
    Grid<D> grid_;
    std::array<int, D> reach_{};
    bool separable_ = true;
    std::array<std::vector<double>, D> w0_, w1_, w2_;
    std::vector<Entry> full_;
};

/// Convenience wrapper: ∇^order (K̂(s,t) ∗ field slice).
template <int D>
std::vector<double> convolve(const CovarianceWindow<D>& w, const Grid<D>& grid, std::span<const double> in,
                             int comps, int order, double tail_tol = 1e-10)
{
    if (!(w.t > w.s)) {
        throw Error("convolution window needs t - s > 0");
    }
    int per_out = comps;
    for (int i = 0; i < order; ++i) {
        per_out *= D;
    }
    std::vector<double> out(grid.size() * per_out);
    GaussianStencil<D>(w, grid, tail_tol).apply(in, comps, order, std::span<double>(out));
    return out;
}

}  // namespace roughsde
