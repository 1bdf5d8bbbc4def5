#pragma once

// Mild-formulation solver for the damped Kolmogorov equation
//   ∂ₜu = ½ Σ a_ij ∂²_ij u + b·∇u − λu + f,  u(0) = 0,
// and its backward vector form with terminal value zero.

#include "roughsde/core.hpp"
#include "roughsde/grid.hpp"
#include "roughsde/heat_kernel.hpp"
#include "roughsde/holder_space.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace roughsde {

enum class Direction { forward, backward };

/// Raised when the Picard iteration fails to contract (λ too small).
class NonContraction : public Error {
public:
    NonContraction(const std::string& msg, double factor) : Error(msg), factor_(factor) {}
    double factor() const { return factor_; }

private:
    double factor_;
};

/// Linear problem on a space-time grid. For Direction::backward the equation
/// is ∂ₜU + ½ Σ a_ij ∂²_ij U + b·∇U = λU + f with U(T) = 0 (f = −b for the
/// Zvonkin problem); drift and source are always indexed in forward time.
template <int D>
struct PdeProblem {
    SampledField<D> drift;   // D components
    SampledField<D> source;  // m components
    DiffusionCoefficient<D> sigma;
    double lambda = 4.0;
    HolderExponents exponents = HolderExponents::make(1.8, 0.5);
    Direction direction = Direction::forward;
    bool zero_drift = false;

    const Grid<D>& grid() const { return source.grid(); }
    const TimeGrid& time() const { return source.time(); }
    int components() const { return source.components(); }

    static PdeProblem make(const DriftSpec<D>& b, SampledField<D> f, const DiffusionCoefficient<D>& sigma,
                           double lambda, Direction dir = Direction::forward)
    {
        PdeProblem p;
        p.drift = sample_drift(b, f.grid(), f.time());
        p.source = std::move(f);
        p.sigma = sigma;
        p.lambda = lambda;
        p.exponents = b.exponents;
        p.direction = dir;
        p.zero_drift = b.identically_zero;
        p.validate();
        return p;
    }

    /// Zvonkin problem: U(T) = 0, source f = −b, vector-valued.
    static PdeProblem zvonkin(const DriftSpec<D>& b, const Grid<D>& grid, const TimeGrid& time,
                              const DiffusionCoefficient<D>& sigma, double lambda)
    {
        auto drift = sample_drift(b, grid, time);
        auto f = drift;
        for (double& v : f.values()) {
            v = -v;
        }
        PdeProblem p;
        p.drift = std::move(drift);
        p.source = std::move(f);
        p.sigma = sigma;
        p.lambda = lambda;
        p.exponents = b.exponents;
        p.direction = Direction::backward;
        p.zero_drift = b.identically_zero;
        p.validate();
        return p;
    }

    void validate() const
    {
        if (!(lambda > 0.0) || !std::isfinite(lambda)) {
            throw Error("damping lambda must be positive");
        }
        if (!(drift.grid() == source.grid()) || !(drift.time() == source.time())) {
            throw Error("drift and source must share grids");
        }
        if (drift.components() != D) {
            throw Error("drift must have d components");
        }
        if (time().steps() < 1) {
            throw Error("PDE solve needs at least one time step");
        }
        drift.require_finite();
        source.require_finite();
    }
};

struct SolverOptions {
    double tol = 1e-10;  // sup-norm update threshold, relative to 1 + sup|w|
    int max_iter = 200;
    double tail_tol = 1e-10;
    std::size_t pair_budget = 20000;
    bool certificates = true;
};

/// Norms certifying membership of U in the ℋ^{2,θ}_{q,T} class.
struct NormCertificates {
    double grad_sup = 0.0;         // sup_t ||∇U(t)||_0
    double grad_holder = 0.0;      // sup_t ||∇U(t)||_{C_b^θ}
    double hess_l2_holder = 0.0;   // ||∇²U||_{L²(0,T;C_b^θ)}
    double weighted_sup_u = 0.0;   // sup_t ||(1+|x|^{2/q-1})^{-1} U(t)||_0
    double weighted_dt_u = 0.0;    // ||(1+|x|^{2/q-1})^{-1} ∂ₜU||_{L^q(0,T;L^∞)}
};

template <int D>
struct PdeSolution {
    SampledField<D> u;     // m components
    SampledField<D> grad;  // m·D components, c·D + a
    SampledField<D> hess;  // m·D·D components, c·D·D + a·D + b
    SampledField<D> dt_u;  // m components
    NormCertificates norms;
    int iterations = 0;
    double contraction = 0.0;
    std::vector<double> updates;
    double lambda = 0.0;
    double theta = 0.0;
    Direction direction = Direction::forward;
};

// ---------------------------------------------------------------------------
// Finite differences

/// Compact second differences (cross differences off the diagonal) at every
/// node; face nodes copy the nearest interior stencil.
template <int D>
void fd_hessian(const Grid<D>& grid, std::span<const double> v, int comps, std::span<double> out)
{
    const double h = grid.spacing();
    const int n = grid.per_axis();
    const int per = comps * D * D;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        auto idx = grid.multi_index(i);
        for (int a = 0; a < D; ++a) {
            idx[a] = std::clamp(idx[a], 1, n - 2);
        }
        const auto at = [&](std::array<int, D> o, int c) { return v[grid.flat_index(o) * comps + c]; };
        for (int c = 0; c < comps; ++c) {
            for (int a = 0; a < D; ++a) {
                auto p = idx;
                auto m = idx;
                p[a] += 1;
                m[a] -= 1;
                out[i * per + c * D * D + a * D + a] = (at(p, c) - 2.0 * at(idx, c) + at(m, c)) / (h * h);
                for (int b = a + 1; b < D; ++b) {
                    auto pp = idx, pm = idx, mp = idx, mm = idx;
                    pp[a] += 1, pp[b] += 1;
                    pm[a] += 1, pm[b] -= 1;
                    mp[a] -= 1, mp[b] += 1;
                    mm[a] -= 1, mm[b] -= 1;
                    const double x = (at(pp, c) - at(pm, c) - at(mp, c) + at(mm, c)) / (4.0 * h * h);
                    out[i * per + c * D * D + a * D + b] = x;
                    out[i * per + c * D * D + b * D + a] = x;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Picard map

/// 𝒯w on a forward problem. Over each step [t_k, t_{k+1}] the Duhamel integral
/// is advanced by the semigroup identity
///   H_{k+1} = K̂(t_k, t_{k+1}) ∗ [ e^{−λΔt} H_k + (1 − e^{−λΔt})/λ · g_k ],
/// with g_k = b(t_k)·∇w(t_k) + f(t_k) and ∇w by centered differences.
template <int D>
class PicardMap {
public:
    PicardMap(const PdeProblem<D>& problem, double tail_tol = 1e-10) : problem_(&problem)
    {
        if (problem.direction != Direction::forward) {
            throw Error("Picard map acts on forward problems; reverse time first");
        }
        const auto& tg = problem.time();
        if (problem.sigma.constant) {
            stencils_.push_back(std::make_shared<GaussianStencil<D>>(covariance(problem.sigma, 0.0, tg.step()),
                                                                     problem.grid(), tail_tol));
        } else {
            for (int k = 0; k < tg.steps(); ++k) {
                stencils_.push_back(std::make_shared<GaussianStencil<D>>(
                    covariance(problem.sigma, tg.time(k), tg.time(k + 1)), problem.grid(), tail_tol));
            }
        }
        const double l = problem.lambda;
        const double dt = tg.step();
        decay_ = std::exp(-l * dt);
        weight_ = -std::expm1(-l * dt) / l;
    }

    SampledField<D> operator()(const SampledField<D>& w) const
    {
        const auto& p = *problem_;
        const auto& grid = p.grid();
        const int m = p.components();
        const std::size_t nodes = grid.size();
        SampledField<D> out(grid, p.time(), m);
        std::vector<double> grad(nodes * m * D);
        std::vector<double> bracket(nodes * m);
        for (int k = 0; k < p.time().steps(); ++k) {
            if (!p.zero_drift) {
                fd_gradient(grid, w.slice(k), m, std::span<double>(grad));
            }
            const auto hk = out.slice(k);
            const auto fk = p.source.slice(k);
            const auto bk = p.drift.slice(k);
            for (std::size_t i = 0; i < nodes; ++i) {
                for (int c = 0; c < m; ++c) {
                    double g = fk[i * m + c];
                    if (!p.zero_drift) {
                        for (int a = 0; a < D; ++a) {
                            g += bk[i * D + a] * grad[i * m * D + c * D + a];
                        }
                    }
                    bracket[i * m + c] = decay_ * hk[i * m + c] + weight_ * g;
                }
            }
            const auto& st = stencils_.size() == 1 ? *stencils_[0] : *stencils_[k];
            st.apply(std::span<const double>(bracket), m, 0, out.slice(k + 1));
        }
        return out;
    }

private:
    const PdeProblem<D>* problem_;
    std::vector<std::shared_ptr<GaussianStencil<D>>> stencils_;
    double decay_ = 1.0;
    double weight_ = 0.0;
};

template <int D>
SampledField<D> picard_step(const PdeProblem<D>& problem, const SampledField<D>& w, double tail_tol = 1e-10)
{
    return PicardMap<D>(problem, tail_tol)(w);
}

// ---------------------------------------------------------------------------
// Certificates and derived tables

namespace detail {

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d = std::max(d, std::abs(a[i] - b[i]));
    }
    return d;
}

inline double max_abs(const std::vector<double>& a)
{
    double d = 0.0;
    for (double v : a) {
        d = std::max(d, std::abs(v));
    }
    return d;
}

inline double median(std::vector<double> v)
{
    if (v.empty()) {
        return 0.0;
    }
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median of the two-step geometric means √(r_i r_{i+1}) of successive
/// update ratios; the raw ratios alternate with period two.
inline double contraction_factor(const std::vector<double>& ratios)
{
    if (ratios.size() < 2) {
        return median(ratios);
    }
    std::vector<double> pairs(ratios.size() - 1);
    for (std::size_t i = 0; i + 1 < ratios.size(); ++i) {
        pairs[i] = std::sqrt(ratios[i] * ratios[i + 1]);
    }
    return median(pairs);
}

}  // namespace detail

/// Fills grad, hess and ∂ₜU (PDE identity) from the U table of a forward problem.
template <int D>
void populate_tables(const PdeProblem<D>& p, PdeSolution<D>& s)
{
    const auto& grid = p.grid();
    const auto& tg = p.time();
    const int m = p.components();
    s.grad = SampledField<D>(grid, tg, m * D);
    s.hess = SampledField<D>(grid, tg, m * D * D);
    s.dt_u = SampledField<D>(grid, tg, m);
    parallel_for(static_cast<std::size_t>(tg.slices()), [&](std::size_t kk) {
        const int k = static_cast<int>(kk);
        fd_gradient(grid, s.u.slice(k), m, s.grad.slice(k));
        fd_hessian(grid, s.u.slice(k), m, s.hess.slice(k));
        const Mat<D> a = p.sigma.a(tg.time(k));
        for (std::size_t i = 0; i < grid.size(); ++i) {
            for (int c = 0; c < m; ++c) {
                double v = -p.lambda * s.u(k, i, c) + p.source(k, i, c);
                for (int x = 0; x < D; ++x) {
                    v += p.drift(k, i, x) * s.grad(k, i, c * D + x);
                    for (int y = 0; y < D; ++y) {
                        v += 0.5 * a(x, y) * s.hess(k, i, c * D * D + x * D + y);
                    }
                }
                s.dt_u(k, i, c) = v;
            }
        }
    });
}

template <int D>
NormCertificates compute_certificates(const PdeSolution<D>& s, const HolderExponents& ex, double theta,
                                      std::size_t pair_budget)
{
    NormCertificates c;
    const auto& grid = s.u.grid();
    const auto& tg = s.u.time();
    const int slices = tg.slices();
    std::vector<double> grad_h(slices), grad_0(slices), hess_h(slices), wu(slices), wdt(slices);
    const double glow = ex.gamma_low();
    parallel_for(static_cast<std::size_t>(slices), [&](std::size_t kk) {
        const int k = static_cast<int>(kk);
        grad_0[k] = sup_norm<D>(s.grad.slice(k), s.grad.components());
        grad_h[k] = grad_0[k] + holder_seminorm(grid, s.grad.slice(k), s.grad.components(), theta, pair_budget);
        hess_h[k] = sup_norm<D>(s.hess.slice(k), s.hess.components()) +
                    holder_seminorm(grid, s.hess.slice(k), s.hess.components(), theta, pair_budget);
        wu[k] = weighted_sup_norm(grid, s.u.slice(k), s.u.components(), glow);
        wdt[k] = weighted_sup_norm(grid, s.dt_u.slice(k), s.dt_u.components(), glow);
    });
    c.grad_sup = *std::max_element(grad_0.begin(), grad_0.end());
    c.grad_holder = *std::max_element(grad_h.begin(), grad_h.end());
    c.weighted_sup_u = *std::max_element(wu.begin(), wu.end());
    for (double& v : hess_h) {
        v *= v;
    }
    c.hess_l2_holder = std::sqrt(trapezoid(hess_h, tg.step()));
    for (double& v : wdt) {
        v = std::pow(v, ex.q);
    }
    c.weighted_dt_u = std::pow(trapezoid(wdt, tg.step()), 1.0 / ex.q);
    return c;
}

// ---------------------------------------------------------------------------
// Solvers

namespace detail {

template <int D>
PdeSolution<D> solve_forward(const PdeProblem<D>& p, const SolverOptions& opt,
                             const SampledField<D>* initial = nullptr)
{
    p.validate();
    PicardMap<D> map(p, opt.tail_tol);
    SampledField<D> w = initial ? *initial : SampledField<D>(p.grid(), p.time(), p.components());
    if (!(w.grid() == p.grid()) || !(w.time() == p.time()) || w.components() != p.components()) {
        throw Error("initial iterate does not match the problem grids");
    }
    PdeSolution<D> s;
    s.lambda = p.lambda;
    s.theta = p.exponents.theta;
    std::vector<double> ratios;
    int applications = 0;
    while (true) {
        SampledField<D> next = map(w);
        ++applications;
        const double upd = max_abs_diff(next.values(), w.values());
        if (!std::isfinite(upd)) {
            throw NonContraction("Picard iteration produced non-finite values; increase lambda", INFINITY);
        }
        if (!s.updates.empty() && s.updates.back() > 0.0) {
            ratios.push_back(upd / s.updates.back());
        }
        s.updates.push_back(upd);
        w = std::move(next);
        const double scale = 1.0 + max_abs(w.values());
        if (upd <= opt.tol * scale) {
            break;
        }
        const double factor = contraction_factor(ratios);
        const bool diverging = ratios.size() >= 4 && factor >= 1.0;
        if (diverging || applications >= opt.max_iter) {
            throw NonContraction("Picard iteration does not contract (observed factor " + fmt17(factor) +
                                     "); lambda = " + fmt17(p.lambda) + " is too small",
                                 factor);
        }
    }
    s.iterations = applications - 1;
    s.contraction = contraction_factor(ratios);
    s.u = std::move(w);
    populate_tables(p, s);
    if (opt.certificates) {
        s.norms = compute_certificates(s, p.exponents, p.exponents.theta, opt.pair_budget);
    }
    return s;
}

/// t -> T - t for drift, source (negated) and diffusion.
template <int D>
PdeProblem<D> reverse_problem(const PdeProblem<D>& p)
{
    PdeProblem<D> r = p;
    const int M = p.time().steps();
    for (int k = 0; k <= M; ++k) {
        std::copy(p.drift.slice(M - k).begin(), p.drift.slice(M - k).end(), r.drift.slice(k).begin());
        const auto src = p.source.slice(M - k);
        auto dst = r.source.slice(k);
        for (std::size_t j = 0; j < src.size(); ++j) {
            dst[j] = -src[j];
        }
    }
    const double T = p.time().horizon();
    auto sig = p.sigma.sigma;
    r.sigma.sigma = [sig, T](double t) { return sig(T - t); };
    r.direction = p.direction == Direction::forward ? Direction::backward : Direction::forward;
    return r;
}

template <int D>
SampledField<D> reverse_field(const SampledField<D>& f, double sign)
{
    SampledField<D> r(f.grid(), f.time(), f.components());
    const int M = f.time().steps();
    for (int k = 0; k <= M; ++k) {
        const auto src = f.slice(M - k);
        auto dst = r.slice(k);
        for (std::size_t j = 0; j < src.size(); ++j) {
            dst[j] = sign * src[j];
        }
    }
    return r;
}

}  // namespace detail

/// Iterates w_{k+1} = 𝒯w_k from w_0 = 0 (or `initial`) until the sup-norm
/// update drops below tol·(1 + sup|w|). `iterations` counts applications
/// beyond the first; `contraction` is the median ratio of successive updates.
template <int D>
PdeSolution<D> solve_mild(const PdeProblem<D>& p, const SolverOptions& opt = {},
                          const SampledField<D>* initial = nullptr)
{
    if (p.direction == Direction::forward) {
        return detail::solve_forward(p, opt, initial);
    }
    const auto fwd = detail::reverse_problem(p);
    std::optional<SampledField<D>> init_rev;
    if (initial) {
        init_rev = detail::reverse_field(*initial, 1.0);
    }
    auto s = detail::solve_forward(fwd, opt, init_rev ? &*init_rev : nullptr);
    s.u = detail::reverse_field(s.u, 1.0);
    s.grad = detail::reverse_field(s.grad, 1.0);
    s.hess = detail::reverse_field(s.hess, 1.0);
    s.dt_u = detail::reverse_field(s.dt_u, -1.0);
    s.direction = Direction::backward;
    return s;
}

/// U for ∂ₜU + ½ Σ a_ij ∂²_ij U + b·∇U = λU − b, U(T) = 0, one component per axis.
template <int D>
PdeSolution<D> solve_backward_vector(const DriftSpec<D>& b, const Grid<D>& grid, const TimeGrid& time,
                                     const DiffusionCoefficient<D>& sigma, double lambda,
                                     const SolverOptions& opt = {})
{
    return solve_mild(PdeProblem<D>::zvonkin(b, grid, time, sigma, lambda), opt);
}

/// max over interior nodes (|x_a| <= L − margin) and all time slices of the PDE
/// defect with centered spatial differences and centered (one-sided at the
/// ends) time differences.
template <int D>
double residual(const PdeProblem<D>& p, const PdeSolution<D>& s, std::optional<double> margin = {})
{
    const auto& grid = p.grid();
    const auto& tg = p.time();
    const int m = p.components();
    const double L = grid.half_width();
    const double mg = margin ? *margin : 0.25 * L;
    const double dt = tg.step();
    const int M = tg.steps();
    const double sign = p.direction == Direction::forward ? 1.0 : -1.0;
    std::vector<double> worst(tg.slices(), 0.0);
    parallel_for(static_cast<std::size_t>(tg.slices()), [&](std::size_t kk) {
        const int k = static_cast<int>(kk);
        std::vector<double> g(grid.size() * m * D), H(grid.size() * m * D * D);
        fd_gradient(grid, s.u.slice(k), m, std::span<double>(g));
        fd_hessian(grid, s.u.slice(k), m, std::span<double>(H));
        const Mat<D> a = p.sigma.a(tg.time(k));
        const int k0 = k == 0 ? 0 : (k == M ? M - 1 : k - 1);
        const int k1 = k == 0 ? 1 : (k == M ? M : k + 1);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const Vec<D> x = grid.node(i);
            if (x.cwiseAbs().maxCoeff() > L - mg + 1e-12) {
                continue;
            }
            for (int c = 0; c < m; ++c) {
                const double ut = (s.u(k1, i, c) - s.u(k0, i, c)) / ((k1 - k0) * dt);
                double op = 0.0;
                for (int x1 = 0; x1 < D; ++x1) {
                    op += p.drift(k, i, x1) * g[i * m * D + c * D + x1];
                    for (int x2 = 0; x2 < D; ++x2) {
                        op += 0.5 * a(x1, x2) * H[i * m * D * D + c * D * D + x1 * D + x2];
                    }
                }
                // forward: ut = op − λu + f;  backward: ut + op = λu + f.
                const double r = sign * ut - op + p.lambda * s.u(k, i, c) -
                                 (p.direction == Direction::forward ? 1.0 : -1.0) * p.source(k, i, c);
                worst[k] = std::max(worst[k], std::abs(r));
            }
        }
    });
    return *std::max_element(worst.begin(), worst.end());
}

// ---------------------------------------------------------------------------
// λ tuning

struct LadderEntry {
    double lambda = 0.0;
    bool converged = false;
    double grad_bound = INFINITY;  // sup_t ||∇U(t)||_{C_b^θ}
    double contraction = INFINITY;
    int iterations = 0;
};

/// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y)
{
    const std::size_t n = x.size();
    if (n < 2) {
        return 0.0;
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return sxx > 0.0 ? sxy / sxx : 0.0;
}

template <int D>
struct TuningResult {
    double lambda = 0.0;
    PdeSolution<D> solution;
    std::vector<LadderEntry> ladder;
    double grad_slope = 0.0;         // fitted d log(grad_bound) / d log λ
    double contraction_slope = 0.0;  // same for the contraction factor
    bool monotone = true;            // grad_bound nonincreasing along the ladder
};

struct TuningOptions {
    double target = 0.5;
    double lambda0 = 4.0;
    double lambda_max = 65536.0;
    SolverOptions solver{};
};

namespace detail {

template <int D>
void fit_ladder(TuningResult<D>& r)
{
    std::vector<double> lx, gy, cx, cy;
    double prev = INFINITY;
    for (const auto& e : r.ladder) {
        if (!e.converged) {
            continue;
        }
        if (e.grad_bound > 0.0) {
            lx.push_back(e.lambda);
            gy.push_back(e.grad_bound);
        }
        if (e.contraction > 0.0) {
            cx.push_back(e.lambda);
            cy.push_back(e.contraction);
        }
        if (e.grad_bound > prev * (1.0 + 1e-12)) {
            r.monotone = false;
        }
        prev = e.grad_bound;
    }
    r.grad_slope = loglog_slope(lx, gy);
    r.contraction_slope = loglog_slope(cx, cy);
}

}  // namespace detail

/// Doubles λ from λ₀ until the solve converges and sup_t ||∇U||_{C_b^θ} < target.
/// The problem's own λ is ignored.
template <int D>
TuningResult<D> tune_lambda(PdeProblem<D> p, const TuningOptions& opt = {})
{
    if (!(opt.target > 0.0 && opt.target < 1.0)) {
        throw Error("tuning target must lie in (0, 1)");
    }
    TuningResult<D> r;
    for (double l = opt.lambda0; l <= opt.lambda_max; l *= 2.0) {
        p.lambda = l;
        LadderEntry e;
        e.lambda = l;
        try {
            auto s = solve_mild(p, opt.solver);
            e.converged = true;
            e.grad_bound = s.norms.grad_holder;
            e.contraction = s.contraction;
            e.iterations = s.iterations;
            r.ladder.push_back(e);
            if (e.grad_bound < opt.target) {
                r.lambda = l;
                r.solution = std::move(s);
                detail::fit_ladder(r);
                return r;
            }
        } catch (const NonContraction& nc) {
            e.contraction = nc.factor();
            r.ladder.push_back(e);
        }
    }
    throw Error("lambda tuning exceeded lambda_max = " + fmt17(opt.lambda_max) +
                " without reaching the gradient target; the drift norm is too large for this grid");
}

/// Solves at each λ of a fixed ladder (no early stop) for trend studies.
template <int D>
TuningResult<D> lambda_ladder(PdeProblem<D> p, const std::vector<double>& lambdas, const SolverOptions& opt = {})
{
    TuningResult<D> r;
    for (double l : lambdas) {
        p.lambda = l;
        LadderEntry e;
        e.lambda = l;
        try {
            auto s = solve_mild(p, opt);
            e.converged = true;
            e.grad_bound = s.norms.grad_holder;
            e.contraction = s.contraction;
            e.iterations = s.iterations;
        } catch (const NonContraction& nc) {
            e.contraction = nc.factor();
        }
        r.ladder.push_back(e);
    }
    detail::fit_ladder(r);
    return r;
}

// ---------------------------------------------------------------------------
// Mollifier stability

struct StabilityRow {
    int n = 0;
    double c1theta_distance = 0.0;  // sup_t ||u_n(t) − u(t)||_{C_b^{1,θ}}
    double hess_l2_distance = 0.0;  // ||∇²u_n − ∇²u||_{L²(C_b^θ)}
    double grad_bound = 0.0;        // sup_t ||∇u_n(t)||_{C_b^θ}
};

template <int D>
struct StabilityReport {
    std::vector<StabilityRow> rows;
    double base_grad_bound = 0.0;
    bool nonincreasing = true;
};

/// Difference norms between two solutions on the same grids.
template <int D>
std::pair<double, double> solution_distance(const PdeSolution<D>& a, const PdeSolution<D>& b, double theta,
                                            std::size_t pair_budget = 20000)
{
    const auto& grid = a.u.grid();
    const auto& tg = a.u.time();
    std::vector<double> c1(tg.slices()), h2(tg.slices());
    parallel_for(static_cast<std::size_t>(tg.slices()), [&](std::size_t kk) {
        const int k = static_cast<int>(kk);
        const auto diff = [&](const SampledField<D>& x, const SampledField<D>& y) {
            std::vector<double> d(x.slice_size());
            for (std::size_t j = 0; j < d.size(); ++j) {
                d[j] = x.slice(k)[j] - y.slice(k)[j];
            }
            return d;
        };
        const auto du = diff(a.u, b.u);
        const auto dg = diff(a.grad, b.grad);
        const auto dh = diff(a.hess, b.hess);
        c1[k] = sup_norm<D>(du, a.u.components()) + sup_norm<D>(dg, a.grad.components()) +
                holder_seminorm(grid, std::span<const double>(dg), a.grad.components(), theta, pair_budget);
        const double hn = sup_norm<D>(dh, a.hess.components()) +
                          holder_seminorm(grid, std::span<const double>(dh), a.hess.components(), theta, pair_budget);
        h2[k] = hn * hn;
    });
    return {*std::max_element(c1.begin(), c1.end()), std::sqrt(trapezoid(h2, tg.step()))};
}

/// Solves with b_n = b ∗ ρ_n, f_n = f ∗ ρ_n (closure quadrature) for every n
/// and compares with the unmollified solution. A null `f` selects the
/// backward Zvonkin problem (source −b).
template <int D>
StabilityReport<D> stability_sweep(const DriftSpec<D>& b, const ScalarClosure<D>& f, const Grid<D>& grid,
                                   const TimeGrid& time, const DiffusionCoefficient<D>& sigma, double lambda,
                                   const std::vector<int>& n_list, const SolverOptions& opt = {})
{
    b.exponents.validate(true);
    const auto make = [&](const DriftSpec<D>& bb, const ScalarClosure<D>& ff) {
        if (!ff) {
            return PdeProblem<D>::zvonkin(bb, grid, time, sigma, lambda);
        }
        auto src = SampledField<D>::from_function(grid, time, 1, [&](double t, const Vec<D>& x, std::span<double> o) {
            o[0] = ff(t, x);
        });
        return PdeProblem<D>::make(bb, std::move(src), sigma, lambda);
    };
    const auto base = solve_mild(make(b, f), opt);
    StabilityReport<D> rep;
    rep.base_grad_bound = base.norms.grad_holder;
    double prev = INFINITY;
    for (int n : n_list) {
        const auto bn = mollify_drift(b, n);
        ScalarClosure<D> fn;
        if (f) {
            fn = mollify_scalar(f, n);
        }
        const auto sn = solve_mild(make(bn, fn), opt);
        StabilityRow row;
        row.n = n;
        std::tie(row.c1theta_distance, row.hess_l2_distance) =
            solution_distance(sn, base, b.exponents.theta, opt.pair_budget);
        row.grad_bound = sn.norms.grad_holder;
        if (row.c1theta_distance > prev) {
            rep.nonincreasing = false;
        }
        prev = row.c1theta_distance;
        rep.rows.push_back(row);
    }
    return rep;
}

}  // namespace roughsde
