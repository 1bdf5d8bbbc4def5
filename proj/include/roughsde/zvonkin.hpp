#pragma once

// Zvonkin change of variables Φ(t, x) = x + U(t, x) built from the backward
// vector problem, its inverse Ψ, and the transformed SDE coefficients
//   dY = λ U(t, Ψ(t, Y)) dt + (I + ∇U(t, Ψ(t, Y))) σ(t) dW.

#include "roughsde/kolmogorov.hpp"

#include <array>
#include <cmath>
#include <memory>

namespace roughsde {

/// How path coefficients obtain their spatial derivatives.
///  tables:  interpolated ∇U and ∇²U tables.
///  tangent: exact derivatives of the multilinear interpolants, so the
///           variational scheme is the derivative of the discrete flow.
enum class JetMode { tables, tangent };

/// U and its derivatives at one space-time point.
template <int D>
struct LocalJet {
    Vec<D> u;                    // U_i
    Mat<D> grad;                 // (∇U)_{ij} = ∂_j U_i, used in σ̃
    Mat<D> slope;                // Jacobian of the U used in Φ; equals grad in table mode
    std::array<Mat<D>, D> hess;  // hess[i](j, m) = ∂_m (∇U)_{ij}
};

struct InversionResult {
    int iterations = 0;
    double residual = 0.0;
};

/// Grid-sampled Jacobian bounds of Φ, Ψ and inversion diagnostics.
struct TransformChecks {
    double grad_phi_min = INFINITY;  // min over t of sup_x ||∇Φ(t,x)|| (spectral)
    double grad_phi_max = 0.0;       // max over t of sup_x ||∇Φ(t,x)||
    double grad_psi_min = INFINITY;
    double grad_psi_max = 0.0;
    double det_min = INFINITY;       // min det ∇Φ over all nodes
    double round_trip = 0.0;         // max |Ψ(Φ(x)) − x| / (1 + |x|)
    bool bounds_ok() const
    {
        return grad_phi_min > 0.5 && grad_phi_max < 1.5 && grad_psi_min > 2.0 / 3.0 && grad_psi_max < 2.0 &&
               det_min > 0.0;
    }
};

template <int D>
class ZvonkinTransform {
public:
    ZvonkinTransform() = default;

    ZvonkinTransform(std::shared_ptr<const PdeSolution<D>> sol, DiffusionCoefficient<D> sigma,
                     std::vector<LadderEntry> ladder = {})
        : sol_(std::move(sol)), sigma_(std::move(sigma)), ladder_(std::move(ladder))
    {
        if (!sol_ || sol_->u.components() != D) {
            throw Error("Zvonkin transform needs a d-component backward solution");
        }
        if (sol_->hess.values().empty()) {
            throw Error("Zvonkin transform needs the Hessian table");
        }
        lambda_ = sol_->lambda;
        grad_bound_ = sol_->norms.grad_holder;
        grad_sup_ = sol_->norms.grad_sup;
        build_anchors();
    }

    const PdeSolution<D>& solution() const { return *sol_; }
    const Grid<D>& grid() const { return sol_->u.grid(); }
    const TimeGrid& time() const { return sol_->u.time(); }
    const DiffusionCoefficient<D>& sigma() const { return sigma_; }
    double lambda() const { return lambda_; }
    double grad_bound() const { return grad_bound_; }
    double grad_sup() const { return grad_sup_; }
    const std::vector<LadderEntry>& ladder() const { return ladder_; }

    LocalJet<D> jet(double t, const Vec<D>& x, JetMode mode = JetMode::tables) const
    {
        const auto sg = grid().locate_with_gradient(x);
        const auto& st = sg.s;
        const auto [k, th] = time().locate(t);
        const int k1 = k + 1;
        const bool tangent = mode == JetMode::tangent;
        LocalJet<D> j;
        j.u.setZero();
        j.grad.setZero();
        j.slope.setZero();
        for (auto& h : j.hess) {
            h.setZero();
        }
        for (int corner = 0; corner < (1 << D); ++corner) {
            const double w = st.weight[corner];
            const std::size_t n = st.index[corner];
            const auto u0 = sol_->u.at(k, n), u1 = sol_->u.at(k1, n);
            const auto g0 = sol_->grad.at(k, n), g1 = sol_->grad.at(k1, n);
            for (int i = 0; i < D; ++i) {
                const double ui = (1.0 - th) * u0[i] + th * u1[i];
                j.u[i] += w * ui;
                for (int a = 0; a < D; ++a) {
                    const double gia = (1.0 - th) * g0[i * D + a] + th * g1[i * D + a];
                    j.grad(i, a) += w * gia;
                    if (tangent) {
                        j.slope(i, a) += sg.dweight[a][corner] * ui;
                        for (int m = 0; m < D; ++m) {
                            j.hess[i](a, m) += sg.dweight[m][corner] * gia;
                        }
                    }
                }
            }
            if (!tangent && w != 0.0) {
                const auto h0 = sol_->hess.at(k, n), h1 = sol_->hess.at(k1, n);
                for (int i = 0; i < D; ++i) {
                    for (int a = 0; a < D; ++a) {
                        for (int b = 0; b < D; ++b) {
                            const int idx = i * D * D + a * D + b;
                            j.hess[i](a, b) += w * ((1.0 - th) * h0[idx] + th * h1[idx]);
                        }
                    }
                }
            }
        }
        if (!tangent) {
            j.slope = j.grad;
        }
        return j;
    }

    Vec<D> u(double t, const Vec<D>& x) const
    {
        Vec<D> v;
        sol_->u.interpolate(t, x, std::span<double>(v.data(), D));
        return v;
    }

    Mat<D> grad_u(double t, const Vec<D>& x) const
    {
        std::array<double, D * D> g{};
        sol_->grad.interpolate(t, x, std::span<double>(g));
        Mat<D> m;
        for (int i = 0; i < D; ++i) {
            for (int a = 0; a < D; ++a) {
                m(i, a) = g[i * D + a];
            }
        }
        return m;
    }

    Vec<D> phi(double t, const Vec<D>& x) const { return x + u(t, x); }
    Mat<D> grad_phi(double t, const Vec<D>& x) const { return Mat<D>::Identity() + grad_u(t, x); }

    /// Solves Φ(t, y) = x by y_{k+1} = x − U(t, y_k) from y_0 = `start`
    /// (default x). Stops when |Φ(t, y) − x| <= tol, default 1e-10 (1 + |x|).
    Vec<D> invert_phi(double t, const Vec<D>& x, std::optional<Vec<D>> start = {}, double tol = -1.0,
                      int max_iter = 60, InversionResult* info = nullptr) const
    {
        const double eps = tol > 0.0 ? tol : 1e-10 * (1.0 + x.norm());
        Vec<D> y = start ? *start : x;
        for (int it = 1; it <= max_iter; ++it) {
            const Vec<D> uy = u(t, y);
            const double res = (y + uy - x).norm();
            if (res <= eps) {
                if (info) {
                    info->iterations = it;
                    info->residual = res;
                }
                return y;
            }
            y = x - uy;
        }
        throw Error("inversion of Phi did not converge within " + std::to_string(max_iter) + " iterations at t = " +
                    fmt17(t));
    }

    /// Ψ(t, x): Newton iteration on the interpolated Φ from the anchor-table
    /// guess, falling back to the contraction if a step fails to reduce the
    /// residual. Same tolerance as invert_phi.
    Vec<D> psi(double t, const Vec<D>& x, InversionResult* info = nullptr) const
    {
        Vec<D> disp;
        anchors_.interpolate(t, x, std::span<double>(disp.data(), D));
        Vec<D> y = x - disp;
        const double eps = 1e-10 * (1.0 + x.norm());
        double res = INFINITY;
        for (int it = 1; it <= 8; ++it) {
            const auto j = jet(t, y, JetMode::tangent);
            const Vec<D> r = y + j.u - x;
            const double rn = r.norm();
            if (rn <= eps) {
                if (info) {
                    info->iterations = it;
                    info->residual = rn;
                }
                return y;
            }
            if (!(rn < res)) {
                break;
            }
            res = rn;
            y -= (Mat<D>::Identity() + j.slope).partialPivLu().solve(r);
        }
        return invert_phi(t, x, y, -1.0, 60, info);
    }

    /// ∇Ψ(t, x) = [∇Φ(t, Ψ(t, x))]^{-1}.
    Mat<D> grad_psi(double t, const Vec<D>& x) const { return grad_phi(t, psi(t, x)).inverse(); }

    /// b̃(t, y) = λ U(t, Ψ(t, y)).
    Vec<D> b_tilde(double t, const Vec<D>& y) const { return lambda_ * u(t, psi(t, y)); }

    /// σ̃(t, y) = (I + ∇U(t, Ψ(t, y))) σ(t).
    Mat<D> sigma_tilde(double t, const Vec<D>& y) const { return grad_phi(t, psi(t, y)) * sigma_(t); }

    /// ∇Φ(t, x) under the given derivative convention.
    Mat<D> grad_phi(double t, const Vec<D>& x, JetMode mode) const
    {
        return Mat<D>::Identity() + (mode == JetMode::tables ? grad_u(t, x) : jet(t, x, mode).slope);
    }

    /// Everything the path simulators need at (t, y) from one inversion.
    struct Coefficients {
        Vec<D> x;          // Ψ(t, y)
        Vec<D> b;          // b̃
        Mat<D> s;          // σ̃
        Mat<D> grad_psi;   // ∇Ψ(t, y)
        Mat<D> grad_b;     // ∇b̃ = λ ∇U(Ψ) ∇Ψ
        std::array<Mat<D>, D> grad_s;  // grad_s[k](i, l) = ∂_l σ̃_{ik}
    };

    Coefficients coefficients(double t, const Vec<D>& y, bool derivatives, JetMode mode = JetMode::tables) const
    {
        Coefficients c;
        c.x = psi(t, y);
        const auto j = jet(t, c.x, mode);
        const Mat<D> sig = sigma_(t);
        c.b = lambda_ * j.u;
        c.s = (Mat<D>::Identity() + j.grad) * sig;
        c.grad_psi = (Mat<D>::Identity() + j.slope).inverse();
        if (derivatives) {
            c.grad_b = lambda_ * j.slope * c.grad_psi;
            for (int k = 0; k < D; ++k) {
                // ∂_l σ̃_{ik} = Σ_{j,m} ∂_m(∇U)_{ij} (∇Ψ)_{ml} σ_{jk}
                for (int i = 0; i < D; ++i) {
                    c.grad_s[k].row(i) = sig.col(k).transpose() * j.hess[i] * c.grad_psi;
                }
            }
        }
        return c;
    }

    /// Grid-sampled Jacobian bounds and the inversion round trip.
    TransformChecks checks() const
    {
        TransformChecks c;
        const auto& g = grid();
        const auto& tg = time();
        std::vector<TransformChecks> per(tg.slices());
        parallel_for(static_cast<std::size_t>(tg.slices()), [&](std::size_t kk) {
            const int k = static_cast<int>(kk);
            const double t = tg.time(k);
            auto& pc = per[k];
            double sup_phi = 0.0, sup_psi = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                Mat<D> G = Mat<D>::Identity();
                for (int r = 0; r < D; ++r) {
                    for (int a = 0; a < D; ++a) {
                        G(r, a) += sol_->grad(k, i, r * D + a);
                    }
                }
                Eigen::JacobiSVD<Mat<D>> svd(G);
                const auto sv = svd.singularValues();
                sup_phi = std::max(sup_phi, sv.maxCoeff());
                sup_psi = std::max(sup_psi, 1.0 / sv.minCoeff());
                pc.det_min = std::min(pc.det_min, G.determinant());
                const Vec<D> x = g.node(i);
                const Vec<D> back = psi(t, phi(t, x));
                pc.round_trip = std::max(pc.round_trip, (back - x).norm() / (1.0 + x.norm()));
            }
            pc.grad_phi_min = pc.grad_phi_max = sup_phi;
            pc.grad_psi_min = pc.grad_psi_max = sup_psi;
        });
        for (const auto& pc : per) {
            c.grad_phi_min = std::min(c.grad_phi_min, pc.grad_phi_min);
            c.grad_phi_max = std::max(c.grad_phi_max, pc.grad_phi_max);
            c.grad_psi_min = std::min(c.grad_psi_min, pc.grad_psi_min);
            c.grad_psi_max = std::max(c.grad_psi_max, pc.grad_psi_max);
            c.det_min = std::min(c.det_min, pc.det_min);
            c.round_trip = std::max(c.round_trip, pc.round_trip);
        }
        return c;
    }

private:
    /// x − Ψ(t_k, x) at every node and slice, solved from y_0 = x.
    void build_anchors()
    {
        const auto& g = grid();
        const auto& tg = time();
        anchors_ = SampledField<D>(g, tg, D);
        parallel_for(static_cast<std::size_t>(tg.slices()), [&](std::size_t kk) {
            const int k = static_cast<int>(kk);
            const double t = tg.time(k);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const Vec<D> x = g.node(i);
                const Vec<D> y = invert_phi(t, x);
                for (int a = 0; a < D; ++a) {
                    anchors_(k, i, a) = x[a] - y[a];
                }
            }
        });
    }

    std::shared_ptr<const PdeSolution<D>> sol_;
    DiffusionCoefficient<D> sigma_;
    std::vector<LadderEntry> ladder_;
    SampledField<D> anchors_;
    double lambda_ = 0.0;
    double grad_bound_ = 0.0;
    double grad_sup_ = 0.0;
};

struct TransformOptions {
    TuningOptions tuning{};
    std::optional<double> fixed_lambda;  // skip tuning and solve at this λ
};

/// Tunes λ on the backward problem until sup_t ||∇U||_{C_b^θ} < target and
/// materializes Φ = id + U.
template <int D>
ZvonkinTransform<D> build_transform(const DriftSpec<D>& b, const Grid<D>& grid, const TimeGrid& time,
                                    const DiffusionCoefficient<D>& sigma, const TransformOptions& opt = {})
{
    b.exponents.validate(false);
    const auto deg = degree_classify(HolderSpace{b.exponents.alpha}, b.exponents.q, D);
    if (deg.cls != DegreeClass::subcritical) {
        throw HypothesisError(std::string("drift degree is ") + to_string(deg.cls) + "; the transform needs a subcritical drift");
    }
    sigma.validate(time.horizon());
    auto problem = PdeProblem<D>::zvonkin(b, grid, time, sigma, opt.tuning.lambda0);
    if (opt.fixed_lambda) {
        problem.lambda = *opt.fixed_lambda;
        auto sol = std::make_shared<PdeSolution<D>>(solve_mild(problem, opt.tuning.solver));
        if (!(sol->norms.grad_holder < opt.tuning.target)) {
            throw Error("gradient bound " + fmt17(sol->norms.grad_holder) + " at fixed lambda " +
                        fmt17(*opt.fixed_lambda) + " is not below the target " + fmt17(opt.tuning.target));
        }
        return ZvonkinTransform<D>(std::move(sol), sigma);
    }
    auto tuned = tune_lambda(problem, opt.tuning);
    auto sol = std::make_shared<PdeSolution<D>>(std::move(tuned.solution));
    return ZvonkinTransform<D>(std::move(sol), sigma, std::move(tuned.ladder));
}

}  // namespace roughsde
