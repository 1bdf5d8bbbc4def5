#pragma once

// Function-space toolkit: Hölder seminorms, weighted growth norms, the
// Lebesgue-Hölder time norms, the Poisson-integral equivalent norm, the
// degree classifier, mollifiers and the spatial cutoff.

#include "roughsde/core.hpp"
#include "roughsde/grid.hpp"
#include "roughsde/noise.hpp"
#include "roughsde/quadrature.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace roughsde {

// ---------------------------------------------------------------------------
// Exponents and drift specifications

struct HolderExponents {
    double q = 1.8;
    double alpha = 0.5;
    double theta = 0.0;

    /// theta defaults to the midpoint of (0, 1 + alpha - 2/q).
    static HolderExponents make(double q, double alpha, std::optional<double> theta = {})
    {
        HolderExponents e{q, alpha, 0.0};
        e.theta = theta ? *theta : 0.5 * e.theta_max();
        return e;
    }

    double gamma_low() const { return 2.0 / q - 1.0; }
    double theta_max() const { return 1.0 + alpha - 2.0 / q; }
    double sde_q_min() const { return 2.0 / (1.0 + alpha); }
    double transport_q_min() const { return 4.0 / (2.0 + alpha); }

    /// Throws HypothesisError naming the violated inequality.
    void validate(bool transport_features) const
    {
        std::ostringstream msg;
        if (!(alpha > 0.0 && alpha < 1.0)) {
            msg << "alpha = " << alpha << " violates 0 < alpha < 1";
            throw HypothesisError(msg.str());
        }
        if (q >= 2.0) {
            msg << "q = " << q
                << " is outside the subcritical window: q must satisfy q < 2 "
                   "(q = 2 with p = infinity is the critical case, a long-standing open problem)";
            throw HypothesisError(msg.str());
        }
        if (!(q > sde_q_min())) {
            msg << "q = " << q << " violates q > 2/(1+alpha) = " << sde_q_min();
            throw HypothesisError(msg.str());
        }
        if (transport_features && !(q > transport_q_min())) {
            msg << "q = " << q << " violates q > 4/(2+alpha) = " << transport_q_min()
                << " required by the transport and stability features";
            throw HypothesisError(msg.str());
        }
        if (!(theta > 0.0 && theta < theta_max())) {
            msg << "theta = " << theta << " violates 0 < theta < 1 + alpha - 2/q = " << theta_max();
            throw HypothesisError(msg.str());
        }
    }
};

template <int D>
using VectorClosure = std::function<Vec<D>(double, const Vec<D>&)>;

template <int D>
using ScalarClosure = std::function<double(double, const Vec<D>&)>;

/// A time-space drift b(t, x) with its regularity metadata.
template <int D>
struct DriftSpec {
    std::string name = "drift";
    VectorClosure<D> field;
    HolderExponents exponents;
    bool divergence_free = false;
    ScalarClosure<D> divergence;  // optional analytic div b
    bool identically_zero = false;

    Vec<D> operator()(double t, const Vec<D>& x) const { return field(t, x); }

    /// Verifies a declared divergence-free drift against its analytic
    /// divergence at the given sample points.
    void check_divergence(std::span<const Vec<D>> points, std::span<const double> times,
                          double tol = 1e-9) const
    {
        if (!divergence_free || !divergence) {
            return;
        }
        for (double t : times) {
            for (const auto& x : points) {
                const double dv = divergence(t, x);
                if (!(std::abs(dv) <= tol)) {
                    throw HypothesisError("drift '" + name +
                                          "' is flagged divergence-free but div b = " +
                                          std::to_string(dv));
                }
            }
        }
    }
};

template <int D>
SampledField<D> sample_drift(const DriftSpec<D>& b, const Grid<D>& grid, const TimeGrid& time)
{
    return SampledField<D>::from_function(grid, time, D, [&](double t, const Vec<D>& x, std::span<double> out) {
        const Vec<D> v = b(t, x);
        for (int a = 0; a < D; ++a) {
            out[a] = v[a];
        }
    });
}

// ---------------------------------------------------------------------------
// Seminorms and norms

namespace detail {

inline double component_distance(std::span<const double> v, std::size_t i, std::size_t j, int comps)
{
    if (comps == 1) {
        return std::abs(v[i] - v[j]);
    }
    double s = 0.0;
    for (int c = 0; c < comps; ++c) {
        const double d = v[i * comps + c] - v[j * comps + c];
        s += d * d;
    }
    return std::sqrt(s);
}

inline void require_finite(std::span<const double> v)
{
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw Error("field contains non-finite values");
        }
    }
}

}  // namespace detail

/// Node-count threshold below which the seminorm visits every pair.
inline constexpr std::size_t kAllPairsLimit = 4096;

/// Sampled Hölder seminorm max |h(x)-h(y)| / |x-y|^gamma of one slice
/// (Euclidean norm across components). All pairs for grids up to
/// kAllPairsLimit nodes; larger grids use axis-aligned dyadic ladders plus
/// `pair_budget` pseudo-random pairs whose sequence is prefix-stable, so the
/// result is nondecreasing in the budget.
template <int D>
double holder_seminorm(const Grid<D>& grid, std::span<const double> values, int comps, double gamma,
                       std::size_t pair_budget = 0, std::uint64_t pair_seed = 0x9e3779b97f4a7c15ull)
{
    if (!(gamma > 0.0 && gamma <= 1.0)) {
        throw Error("Hölder exponent must lie in (0, 1]");
    }
    if (grid.size() < 2) {
        throw Error("Hölder seminorm needs at least two nodes");
    }
    if (values.size() != grid.size() * static_cast<std::size_t>(comps)) {
        throw Error("slice size does not match the grid");
    }
    detail::require_finite(values);

    const double h = grid.spacing();
    const int n = grid.per_axis();
    double best = 0.0;

    if (grid.size() <= kAllPairsLimit) {
        if constexpr (D == 1) {
            for (int o = 1; o < n; ++o) {
                const double w = std::pow(o * h, -gamma);
                for (int i = 0; i + o < n; ++i) {
                    best = std::max(best, w * detail::component_distance(values, i, i + o, comps));
                }
            }
        } else {
            for (int oy = 0; oy < n; ++oy) {
                for (int ox = (oy == 0 ? 1 : -(n - 1)); ox < n; ++ox) {
                    const double w = std::pow(h * std::hypot(double(ox), double(oy)), -gamma);
                    for (int y = 0; y + oy < n; ++y) {
                        for (int x = std::max(0, -ox); x < n && x + ox < n; ++x) {
                            const std::size_t i = grid.flat_index({x, y});
                            const std::size_t j = grid.flat_index({x + ox, y + oy});
                            best = std::max(best, w * detail::component_distance(values, i, j, comps));
                        }
                    }
                }
            }
        }
        return best;
    }

    // Dyadic ladders along each axis.
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto idx = grid.multi_index(i);
        for (int a = 0; a < D; ++a) {
            for (int step = 1; idx[a] + step < n; step *= 2) {
                auto nb = idx;
                nb[a] += step;
                const double w = std::pow(step * h, -gamma);
                best = std::max(best, w * detail::component_distance(values, i, grid.flat_index(nb), comps));
            }
        }
    }
    for (std::size_t r = 0; r < pair_budget; ++r) {
        const std::size_t i = counter_bits(pair_seed, r, 0) % grid.size();
        const std::size_t j = counter_bits(pair_seed, r, 1) % grid.size();
        if (i == j) {
            continue;
        }
        const double dist = (grid.node(i) - grid.node(j)).norm();
        best = std::max(best, detail::component_distance(values, i, j, comps) / std::pow(dist, gamma));
    }
    return best;
}

/// All-pairs seminorm over scattered points.
template <int D>
double holder_seminorm_points(std::span<const Vec<D>> points, std::span<const double> values, int comps,
                              double gamma)
{
    if (points.size() < 2) {
        throw Error("Hölder seminorm needs at least two nodes");
    }
    if (!(gamma > 0.0 && gamma <= 1.0)) {
        throw Error("Hölder exponent must lie in (0, 1]");
    }
    detail::require_finite(values);
    double best = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (std::size_t j = i + 1; j < points.size(); ++j) {
            const double dist = (points[i] - points[j]).norm();
            if (dist == 0.0) {
                continue;
            }
            best = std::max(best, detail::component_distance(values, i, j, comps) / std::pow(dist, gamma));
        }
    }
    return best;
}

/// max over nodes of |h(x)| / (1 + |x|^gamma).
template <int D>
double weighted_sup_norm(const Grid<D>& grid, std::span<const double> values, int comps, double gamma)
{
    if (gamma < 0.0) {
        throw Error("growth exponent must be nonnegative");
    }
    detail::require_finite(values);
    double best = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        double s = 0.0;
        for (int c = 0; c < comps; ++c) {
            s += values[i * comps + c] * values[i * comps + c];
        }
        const double r = grid.node(i).norm();
        best = std::max(best, std::sqrt(s) / (1.0 + std::pow(r, gamma)));
    }
    return best;
}

template <int D>
double sup_norm(std::span<const double> values, int comps)
{
    double best = 0.0;
    const std::size_t nodes = values.size() / comps;
    for (std::size_t i = 0; i < nodes; ++i) {
        double s = 0.0;
        for (int c = 0; c < comps; ++c) {
            s += values[i * comps + c] * values[i * comps + c];
        }
        best = std::max(best, std::sqrt(s));
    }
    return best;
}

enum class NormKind {
    intersection,   // ||(1+|x|^{2/q-1})^{-1} f||_0 + [f]_{2/q-1} + [f]_alpha
    bounded_holder  // sum_{i<=k} ||grad^i f||_0 + [grad^k f]_gamma
};

struct NormSpec {
    NormKind kind = NormKind::intersection;
    int derivatives = 0;
    double gamma = 0.5;
};

/// Spatial norm of slice k of `f`.
template <int D>
double slice_norm(const SampledField<D>& f, int k, const HolderExponents& ex, const NormSpec& which,
                  std::size_t pair_budget = 20000)
{
    const auto& grid = f.grid();
    const auto v = f.slice(k);
    const int comps = f.components();
    if (which.kind == NormKind::intersection) {
        const double glow = ex.gamma_low();
        return weighted_sup_norm(grid, v, comps, glow) + holder_seminorm(grid, v, comps, glow, pair_budget) +
               holder_seminorm(grid, v, comps, ex.alpha, pair_budget);
    }
    if (which.derivatives < 0 || which.derivatives > 2) {
        throw Error("bounded Hölder norm supports 0, 1 or 2 derivatives");
    }
    std::vector<double> current(v.begin(), v.end());
    int cur_comps = comps;
    double total = sup_norm<D>(current, cur_comps);
    for (int i = 0; i < which.derivatives; ++i) {
        std::vector<double> next(current.size() * D);
        fd_gradient(grid, std::span<const double>(current), cur_comps, std::span<double>(next));
        current = std::move(next);
        cur_comps *= D;
        total += sup_norm<D>(current, cur_comps);
    }
    return total + holder_seminorm(grid, std::span<const double>(current), cur_comps, which.gamma, pair_budget);
}

/// (∫_0^T ||f(t)||^q dt)^{1/q} by composite trapezoid over the time grid; max
/// over time nodes when q is infinite.
template <int D>
double lebesgue_holder_norm(const SampledField<D>& f, const HolderExponents& ex, const NormSpec& which,
                            std::size_t pair_budget = 20000)
{
    const auto& tg = f.time();
    if (tg.steps() < 1) {
        throw Error("time-integrated norm needs a nonempty time grid");
    }
    std::vector<double> slice_norms(tg.slices());
    for (int k = 0; k < tg.slices(); ++k) {
        slice_norms[k] = slice_norm(f, k, ex, which, pair_budget);
    }
    if (std::isinf(ex.q)) {
        return *std::max_element(slice_norms.begin(), slice_norms.end());
    }
    for (double& s : slice_norms) {
        s = std::pow(s, ex.q);
    }
    return std::pow(trapezoid(slice_norms, tg.step()), 1.0 / ex.q);
}

// ---------------------------------------------------------------------------
// Poisson integral and the equivalent norm

struct PoissonQuadrature {
    double cutoff = 0.0;      // quadrature radius; 0 selects 1000 (d = 1) or 100 (d = 2)
    double max_panel = 0.25;  // panel length far from the origin
    int angular = 32;         // angular nodes (d = 2)
};

/// 40 logarithmically spaced scales in [1e-3, 1e1].
inline std::vector<double> default_xi_grid()
{
    std::vector<double> xi(40);
    for (int i = 0; i < 40; ++i) {
        xi[i] = std::pow(10.0, -3.0 + 4.0 * i / 39.0);
    }
    return xi;
}

namespace detail {

/// Graded radial panels on [0, cutoff]: width ~ xi/4 near the origin,
/// growing geometrically up to max_panel.
inline QuadratureRule radial_rule(double xi, const PoissonQuadrature& pq)
{
    QuadratureRule rule;
    double a = 0.0;
    while (a < pq.cutoff) {
        double len = std::min(pq.max_panel, std::max(xi / 4.0, 0.5 * a));
        len = std::min(len, pq.cutoff - a);
        const auto gl = gauss_legendre<8>(a, a + len);
        rule.nodes.insert(rule.nodes.end(), gl.nodes.begin(), gl.nodes.end());
        rule.weights.insert(rule.weights.end(), gl.weights.begin(), gl.weights.end());
        a += len;
    }
    return rule;
}

}  // namespace detail

/// P_xi h(x): convolution with the Poisson kernel
/// Γ((d+1)/2) π^{-(d+1)/2} ξ / (ξ² + |z|²)^{(d+1)/2}. Quadrature covers |z| <= cutoff;
/// the exact kernel mass beyond the cutoff is charged at the uniform mean of h
/// over the covered ball, which keeps constants exact.
template <int D>
double poisson_integral(const std::function<double(const Vec<D>&)>& h, const Vec<D>& x, double xi,
                        const PoissonQuadrature& pq = {})
{
    check_dimension<D>();
    if (!(xi > 0.0)) {
        throw Error("Poisson scale must be positive");
    }
    PoissonQuadrature eff = pq;
    if (eff.cutoff <= 0.0) {
        eff.cutoff = D == 1 ? 1000.0 : 100.0;
    }
    const auto rule = detail::radial_rule(xi, eff);
    const double Z = eff.cutoff;
    double acc = 0.0;
    double mean = 0.0;
    double tail = 0.0;
    if constexpr (D == 1) {
        for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
            const double z = rule.nodes[i];
            const double k = xi / (std::numbers::pi * (xi * xi + z * z));
            Vec<1> lo, hi;
            lo[0] = x[0] - z;
            hi[0] = x[0] + z;
            const double pair = h(lo) + h(hi);
            acc += rule.weights[i] * k * pair;
            mean += rule.weights[i] * pair;
        }
        mean /= 2.0 * Z;
        tail = 1.0 - 2.0 / std::numbers::pi * std::atan(Z / xi);
    } else {
        const double dtheta = 2.0 * std::numbers::pi / eff.angular;
        for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
            const double r = rule.nodes[i];
            const double k = xi / (2.0 * std::numbers::pi * std::pow(xi * xi + r * r, 1.5));
            double ring = 0.0;
            for (int j = 0; j < eff.angular; ++j) {
                const double th = j * dtheta;
                Vec<2> y;
                y << x[0] - r * std::cos(th), x[1] - r * std::sin(th);
                ring += h(y);
            }
            ring *= r * dtheta * rule.weights[i];
            acc += k * ring;
            mean += ring;
        }
        mean /= std::numbers::pi * Z * Z;
        tail = xi / std::sqrt(xi * xi + Z * Z);
    }
    return acc + tail * mean;
}

template <int D>
struct PoissonNormReport {
    std::vector<double> xi;
    std::vector<double> profile;  // ξ^{1-γ} sup_x |∂_ξ P_ξ h(x)|
    double sup_term = 0.0;        // sup over ξ of the profile
    double sup_h = 0.0;           // ||h||_0 over the evaluation points
    double equivalent = 0.0;      // ||h||_0 + sup_term
    double holder = 0.0;          // ||h||_0 + [h]_γ over the evaluation points
    double ratio = 0.0;           // equivalent / holder
};

/// sup_ξ ξ^{1-γ} ||∂_ξ P_ξ h||_0 with ∂_ξ by centered differences of step ξ/100,
/// sup over `points`; also reports the direct C_b^γ norm for comparison.
template <int D>
PoissonNormReport<D> poisson_equivalent_norm(const std::function<double(const Vec<D>&)>& h,
                                             std::span<const Vec<D>> points, double gamma,
                                             std::vector<double> xi_grid = default_xi_grid(),
                                             const PoissonQuadrature& pq = {})
{
    for (double xi : xi_grid) {
        if (!(xi > 0.0)) {
            throw Error("xi grid entries must be positive");
        }
    }
    if (points.empty()) {
        throw Error("Poisson norm needs evaluation points");
    }
    PoissonNormReport<D> rep;
    rep.xi = xi_grid;
    rep.profile.resize(xi_grid.size());
    parallel_for(xi_grid.size(), [&](std::size_t i) {
        const double xi = xi_grid[i];
        const double dxi = xi / 100.0;
        double best = 0.0;
        for (const auto& x : points) {
            const double dp =
                (poisson_integral<D>(h, x, xi + dxi, pq) - poisson_integral<D>(h, x, xi - dxi, pq)) /
                (2.0 * dxi);
            best = std::max(best, std::abs(dp));
        }
        rep.profile[i] = std::pow(xi, 1.0 - gamma) * best;
    });
    for (double p : rep.profile) {
        rep.sup_term = std::max(rep.sup_term, p);
    }
    std::vector<double> vals(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        vals[i] = h(points[i]);
        rep.sup_h = std::max(rep.sup_h, std::abs(vals[i]));
    }
    rep.equivalent = rep.sup_h + rep.sup_term;
    rep.holder = rep.sup_h + (points.size() >= 2 ? holder_seminorm_points<D>(points, vals, 1, gamma) : 0.0);
    rep.ratio = rep.holder > 0.0 ? rep.equivalent / rep.holder : 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Degree classifier

struct SobolevSpace {
    int k = 0;
    double p = 2.0;  // may be +infinity
};

struct HolderSpace {
    double gamma = 0.5;
};

enum class DegreeClass { subcritical, critical, supercritical };

inline const char* to_string(DegreeClass c)
{
    switch (c) {
    case DegreeClass::subcritical:
        return "subcritical";
    case DegreeClass::critical:
        return "critical";
    default:
        return "supercritical";
    }
}

struct Degree {
    double value = 0.0;
    DegreeClass cls = DegreeClass::subcritical;
};

/// Scaling degree k - 2/q - d/p (Sobolev) or gamma - 2/q (Hölder); the drift
/// is subcritical iff the degree exceeds -1.
inline Degree degree_classify(const std::variant<SobolevSpace, HolderSpace>& space, double q, int d)
{
    if (!(q >= 1.0)) {
        throw Error("time exponent q must lie in [1, infinity]");
    }
    const double time_part = std::isinf(q) ? 0.0 : 2.0 / q;
    Degree deg;
    if (const auto* s = std::get_if<SobolevSpace>(&space)) {
        if (s->k < 0 || !(s->p >= 1.0)) {
            throw Error("Sobolev space needs k >= 0 and p in [1, infinity]");
        }
        const double space_part = std::isinf(s->p) ? 0.0 : d / s->p;
        deg.value = s->k - time_part - space_part;
    } else {
        const auto& hs = std::get<HolderSpace>(space);
        if (!(hs.gamma > 0.0 && hs.gamma < 1.0)) {
            throw Error("Hölder exponent must lie in (0, 1)");
        }
        deg.value = hs.gamma - time_part;
    }
    constexpr double tie = 1e-12;
    if (std::abs(deg.value + 1.0) <= tie) {
        deg.cls = DegreeClass::critical;
    } else {
        deg.cls = deg.value > -1.0 ? DegreeClass::subcritical : DegreeClass::supercritical;
    }
    return deg;
}

// ---------------------------------------------------------------------------
// Mollifiers

/// Unnormalized bump exp(-1/(1-r²)) on the unit ball.
inline double bump_profile(double r2)
{
    return r2 < 1.0 ? std::exp(-1.0 / (1.0 - r2)) : 0.0;
}

/// Quadrature rule for ∫ g(y) ρ(y) dy over the unit ball, weights summing to 1.
/// Symmetric under y -> -y, so it reproduces constants and linear functions.
template <int D>
struct MollifierRule {
    std::vector<Vec<D>> points;
    std::vector<double> weights;

    static const MollifierRule& instance()
    {
        static const MollifierRule rule = build();
        return rule;
    }

private:
    static MollifierRule build()
    {
        MollifierRule r;
        if constexpr (D == 1) {
            // Eight panels so that a kink at the centre sits on a panel edge.
            for (int panel = 0; panel < 8; ++panel) {
                const auto gl = gauss_legendre<12>(-1.0 + 0.25 * panel, -0.75 + 0.25 * panel);
                for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
                    Vec<1> p;
                    p[0] = gl.nodes[i];
                    r.points.push_back(p);
                    r.weights.push_back(gl.weights[i] * bump_profile(gl.nodes[i] * gl.nodes[i]));
                }
            }
        } else {
            const auto gl = gauss_legendre<32>(0.0, 1.0);
            constexpr int kAngles = 24;
            for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
                const double rad = gl.nodes[i];
                for (int j = 0; j < kAngles; ++j) {
                    const double th = 2.0 * std::numbers::pi * j / kAngles;
                    Vec<2> p;
                    p << rad * std::cos(th), rad * std::sin(th);
                    r.points.push_back(p);
                    r.weights.push_back(gl.weights[i] * rad * bump_profile(rad * rad));
                }
            }
        }
        double total = 0.0;
        for (double w : r.weights) {
            total += w;
        }
        for (double& w : r.weights) {
            w /= total;
        }
        return r;
    }
};

/// ∫ bump over the unit ball (normalizing constant of ρ).
template <int D>
double bump_mass()
{
    if constexpr (D == 1) {
        const auto gl = gauss_legendre<128>(-1.0, 1.0);
        double s = 0.0;
        for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
            s += gl.weights[i] * bump_profile(gl.nodes[i] * gl.nodes[i]);
        }
        return s;
    } else {
        const auto gl = gauss_legendre<128>(0.0, 1.0);
        double s = 0.0;
        for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
            s += gl.weights[i] * gl.nodes[i] * bump_profile(gl.nodes[i] * gl.nodes[i]);
        }
        return 2.0 * std::numbers::pi * s;
    }
}

/// ρ_n(x) = n^d ρ(n x) with ρ the normalized bump.
template <int D>
double mollifier(const Vec<D>& x, double n)
{
    static const double mass = bump_mass<D>();
    return std::pow(n, D) * bump_profile((n * x).squaredNorm()) / mass;
}

/// Time kernel ϱ: the bump profile shifted onto [0, 1], as a normalized rule.
inline const QuadratureRule& time_mollifier_rule()
{
    static const QuadratureRule rule = [] {
        auto gl = gauss_legendre<48>(0.0, 1.0);
        double total = 0.0;
        for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
            const double u = 2.0 * gl.nodes[i] - 1.0;
            gl.weights[i] *= bump_profile(u * u);
            total += gl.weights[i];
        }
        for (double& w : gl.weights) {
            w /= total;
        }
        return gl;
    }();
    return rule;
}

/// b * ρ_n in space, evaluated by quadrature of the closure.
template <int D>
DriftSpec<D> mollify_drift(const DriftSpec<D>& b, int n)
{
    if (n < 1) {
        throw Error("mollification index must be >= 1");
    }
    DriftSpec<D> out = b;
    out.name = b.name + "*rho_" + std::to_string(n);
    const auto& rule = MollifierRule<D>::instance();
    const double scale = 1.0 / n;
    auto inner = b.field;
    out.field = [inner, &rule, scale](double t, const Vec<D>& x) {
        Vec<D> acc = Vec<D>::Zero();
        for (std::size_t i = 0; i < rule.points.size(); ++i) {
            acc += rule.weights[i] * inner(t, x - scale * rule.points[i]);
        }
        return acc;
    };
    if (b.divergence) {
        auto div = b.divergence;
        out.divergence = [div, &rule, scale](double t, const Vec<D>& x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < rule.points.size(); ++i) {
                acc += rule.weights[i] * div(t, x - scale * rule.points[i]);
            }
            return acc;
        };
    }
    return out;
}

template <int D>
ScalarClosure<D> mollify_scalar(const ScalarClosure<D>& f, int n)
{
    if (n < 1) {
        throw Error("mollification index must be >= 1");
    }
    const auto& rule = MollifierRule<D>::instance();
    const double scale = 1.0 / n;
    return [f, &rule, scale](double t, const Vec<D>& x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < rule.points.size(); ++i) {
            acc += rule.weights[i] * f(t, x - scale * rule.points[i]);
        }
        return acc;
    };
}

/// b * ϱ_m in time: ∫_0^{1/m} ϱ_m(s) b(t - s) ds with b(t, .) = b(0, .) for t < 0.
template <int D>
DriftSpec<D> mollify_drift_time(const DriftSpec<D>& b, int m)
{
    if (m < 1) {
        throw Error("mollification index must be >= 1");
    }
    DriftSpec<D> out = b;
    out.name = b.name + "*varrho_" + std::to_string(m);
    const auto& rule = time_mollifier_rule();
    const double scale = 1.0 / m;
    auto inner = b.field;
    out.field = [inner, &rule, scale](double t, const Vec<D>& x) {
        Vec<D> acc = Vec<D>::Zero();
        for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
            acc += rule.weights[i] * inner(std::max(0.0, t - scale * rule.nodes[i]), x);
        }
        return acc;
    };
    return out;
}

/// Grid version of spatial mollification: discrete kernel on the lattice
/// offsets inside B_{1/n}, renormalized to unit mass; clamped extension.
template <int D>
SampledField<D> mollify_space(const SampledField<D>& f, int n)
{
    if (n < 1) {
        throw Error("mollification index must be >= 1");
    }
    const auto& grid = f.grid();
    const double h = grid.spacing();
    const int reach = static_cast<int>(std::floor(1.0 / (n * h)));
    std::vector<std::array<int, D>> offsets;
    std::vector<double> weights;
    double total = 0.0;
    std::array<int, D> o{};
    const int width = 2 * reach + 1;
    int count = 1;
    for (int a = 0; a < D; ++a) {
        count *= width;
    }
    for (int lin = 0; lin < count; ++lin) {
        int rem = lin;
        Vec<D> y;
        for (int a = 0; a < D; ++a) {
            o[a] = rem % width - reach;
            rem /= width;
            y[a] = o[a] * h;
        }
        const double w = bump_profile((n * y).squaredNorm());
        if (w > 0.0) {
            offsets.push_back(o);
            weights.push_back(w);
            total += w;
        }
    }
    for (double& w : weights) {
        w /= total;
    }
    SampledField<D> out(grid, f.time(), f.components());
    const int comps = f.components();
    for (int k = 0; k < f.time().slices(); ++k) {
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const auto idx = grid.multi_index(i);
            auto dst = out.at(k, i);
            for (std::size_t j = 0; j < offsets.size(); ++j) {
                std::array<int, D> src{};
                for (int a = 0; a < D; ++a) {
                    src[a] = idx[a] - offsets[j][a];
                }
                const auto sv = f.at(k, grid.clamped_index(src));
                for (int c = 0; c < comps; ++c) {
                    dst[c] += weights[j] * sv[c];
                }
            }
        }
    }
    return out;
}

/// Grid version of time mollification with the backward-constant extension.
template <int D>
SampledField<D> mollify_time(const SampledField<D>& f, int m)
{
    if (m < 1) {
        throw Error("mollification index must be >= 1");
    }
    const auto& rule = time_mollifier_rule();
    SampledField<D> out(f.grid(), f.time(), f.components());
    std::vector<double> buf(f.components());
    for (int k = 0; k < f.time().slices(); ++k) {
        const double t = f.time().time(k);
        for (std::size_t i = 0; i < f.grid().size(); ++i) {
            auto dst = out.at(k, i);
            for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
                const double s = std::max(0.0, t - rule.nodes[q] / m);
                const auto [kk, th] = f.time().locate(s);
                const int k1 = f.time().steps() == 0 ? kk : kk + 1;
                const auto a = f.at(kk, i);
                const auto b = f.at(k1, i);
                for (int c = 0; c < f.components(); ++c) {
                    dst[c] += rule.weights[q] * ((1.0 - th) * a[c] + th * b[c]);
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spatial cutoff

/// Smooth radial profile: 1 on [0, 1], 0 on [2, inf), |χ'| <= 2.
inline double cutoff_profile(double r)
{
    if (r <= 1.0) {
        return 1.0;
    }
    if (r >= 2.0) {
        return 0.0;
    }
    const auto psi = [](double s) { return s > 0.0 ? std::exp(-1.0 / s) : 0.0; };
    const double a = psi(2.0 - r);
    const double b = psi(r - 1.0);
    return a / (a + b);
}

/// x -> x χ(|x| / R).
template <int D>
Vec<D> cutoff_point(const Vec<D>& x, double R)
{
    return x * cutoff_profile(x.norm() / R);
}

/// b_R(t, x) = b(t, x χ_R(x)).
template <int D>
DriftSpec<D> cutoff_drift(const DriftSpec<D>& b, double R)
{
    if (!(R > 0.0)) {
        throw Error("cutoff radius must be positive");
    }
    DriftSpec<D> out = b;
    out.name = b.name + "_R" + fmt17(R);
    auto inner = b.field;
    out.field = [inner, R](double t, const Vec<D>& x) { return inner(t, cutoff_point(x, R)); };
    out.divergence = nullptr;
    out.divergence_free = false;
    return out;
}

/// Grid version: samples the field's interpolant at x χ_R(x).
template <int D>
SampledField<D> cutoff(const SampledField<D>& f, double R)
{
    if (!(R > 0.0)) {
        throw Error("cutoff radius must be positive");
    }
    SampledField<D> out(f.grid(), f.time(), f.components());
    for (int k = 0; k < f.time().slices(); ++k) {
        const double t = f.time().time(k);
        for (std::size_t i = 0; i < f.grid().size(); ++i) {
            f.interpolate(t, cutoff_point(f.grid().node(i), R), out.at(k, i));
        }
    }
    return out;
}

}  // namespace roughsde
