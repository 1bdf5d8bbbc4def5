#pragma once

// Stochastic transport du + b·∇u dt + ∇u ∘ dW = 0 solved pathwise by
// u(t, x) = u0(X_t^{-1}(x)), with conservation, Euler-identity, weak-form
// and gradient diagnostics.

#include "roughsde/sde_flow.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

namespace roughsde {

/// Initial datum with optional gradient and its integrability exponent r.
template <int D>
struct InitialDatum {
    std::function<double(const Vec<D>&)> value;
    std::function<Vec<D>(const Vec<D>&)> gradient;  // optional
    double r = 2.0;
    double lower = -INFINITY;  // inf u0, when known
    double upper = INFINITY;   // sup u0, when known

    static InitialDatum gaussian(const Vec<D>& center, double width, double height = 1.0)
    {
        InitialDatum u;
        u.value = [=](const Vec<D>& x) { return height * std::exp(-0.5 * (x - center).squaredNorm() / (width * width)); };
        u.gradient = [=](const Vec<D>& x) {
            const double v = height * std::exp(-0.5 * (x - center).squaredNorm() / (width * width));
            return (-v / (width * width) * (x - center)).eval();
        };
        u.lower = std::min(0.0, height);
        u.upper = std::max(0.0, height);
        return u;
    }

    static InitialDatum constant(double c)
    {
        InitialDatum u;
        u.value = [c](const Vec<D>&) { return c; };
        u.gradient = [](const Vec<D>&) { return Vec<D>::Zero().eval(); };
        u.lower = u.upper = c;
        return u;
    }
};

/// Radial bump φ(x) = (1 − |x − c|²/ρ²)_+^6 with analytic ∇φ and Δφ.
template <int D>
struct TestFunction {
    // C^5 across the sphere, so grid sums of Δφ stay accurate at coarse spacing.
    static constexpr int kPower = 6;

    Vec<D> center = Vec<D>::Zero();
    double radius = 1.0;

    double value(const Vec<D>& x) const
    {
        const double m = 1.0 - (x - center).squaredNorm() / (radius * radius);
        return m > 0.0 ? std::pow(m, kPower) : 0.0;
    }

    Vec<D> gradient(const Vec<D>& x) const
    {
        const double m = 1.0 - (x - center).squaredNorm() / (radius * radius);
        if (!(m > 0.0)) {
            return Vec<D>::Zero();
        }
        return (-2.0 * kPower * std::pow(m, kPower - 1) / (radius * radius) * (x - center)).eval();
    }

    double laplacian(const Vec<D>& x) const
    {
        const double m = 1.0 - (x - center).squaredNorm() / (radius * radius);
        if (!(m > 0.0)) {
            return 0.0;
        }
        const double r2 = radius * radius;
        return kPower * (kPower - 1) * std::pow(m, kPower - 2) * 4.0 * (x - center).squaredNorm() / (r2 * r2) -
               kPower * std::pow(m, kPower - 1) * 2.0 * D / r2;
    }

    bool inside(const Grid<D>& grid) const
    {
        return center.cwiseAbs().maxCoeff() + radius < grid.half_width();
    }
};

/// Three centers on the diagonal × radii {1/2, 1}.
template <int D>
std::vector<TestFunction<D>> default_test_functions()
{
    std::vector<TestFunction<D>> v;
    for (double c : {-0.75, 0.0, 0.75}) {
        for (double r : {0.5, 1.0}) {
            v.push_back({Vec<D>::Constant(c), r});
        }
    }
    return v;
}

/// u(t_j, x_i) per path on a set of grid nodes.
template <int D>
struct TransportField {
    Grid<D> grid;
    std::vector<std::size_t> nodes;  // grid nodes carried by the field
    std::vector<double> times;
    NoiseStream<D> stream;
    double dt = 0.0;
    int n_paths = 0;
    std::uint64_t path_offset = 0;
    InitialDatum<D> u0;
    bool divergence_free = false;
    std::vector<double> values;  // [(path * times + j) * nodes + n]
    std::vector<double> inverse; // X^{-1}_{0,t_j}(x_n), D per entry, same order
    std::vector<unsigned char> failed;  // per path
    double excursion_fraction = 0.0;

    double& at(int p, int j, std::size_t n)
    {
        return values[(static_cast<std::size_t>(p) * times.size() + j) * nodes.size() + n];
    }
    double at(int p, int j, std::size_t n) const
    {
        return values[(static_cast<std::size_t>(p) * times.size() + j) * nodes.size() + n];
    }
    Vec<D> preimage(int p, int j, std::size_t n) const
    {
        return Eigen::Map<const Vec<D>>(
            inverse.data() + ((static_cast<std::size_t>(p) * times.size() + j) * nodes.size() + n) * D);
    }
};

/// Nodes of `grid` inside the union of the test functions' supports.
template <int D>
std::vector<std::size_t> support_nodes(const Grid<D>& grid, const std::vector<TestFunction<D>>& phis)
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const Vec<D> x = grid.node(i);
        for (const auto& f : phis) {
            if ((x - f.center).norm() < f.radius) {
                out.push_back(i);
                break;
            }
        }
    }
    return out;
}

/// u(t, x) = u0(X^{-1}_{0,t}(x)) at every requested time and node, each
/// inverse integrated backward with step dt.
template <int D>
TransportField<D> solve_transport(const InitialDatum<D>& u0, const DriftSpec<D>& b, const ZvonkinTransform<D>& z,
                                  const NoiseStream<D>& ns, const Grid<D>& grid, const std::vector<double>& times,
                                  double dt, int n_paths, std::uint64_t path_offset = 0,
                                  std::optional<std::vector<std::size_t>> nodes = {})
{
    if (!b.divergence_free) {
        throw HypothesisError("transport requires a divergence-free drift");
    }
    if (!z.sigma().is_identity(z.time().horizon())) {
        throw HypothesisError("transport requires sigma = I");
    }
    if (!u0.value) {
        throw Error("initial datum has no value closure");
    }
    TransportField<D> f;
    f.grid = grid;
    if (nodes) {
        f.nodes = *nodes;
    } else {
        f.nodes.resize(grid.size());
        for (std::size_t i = 0; i < grid.size(); ++i) {
            f.nodes[i] = i;
        }
    }
    f.times = times;
    f.stream = ns;
    f.dt = dt;
    f.n_paths = n_paths;
    f.path_offset = path_offset;
    f.u0 = u0;
    f.divergence_free = true;
    const std::size_t nn = f.nodes.size();
    const std::size_t nt = times.size();
    f.values.assign(static_cast<std::size_t>(n_paths) * nt * nn, 0.0);
    f.inverse.assign(f.values.size() * D, 0.0);
    f.failed.assign(n_paths, 0);
    std::vector<FlowWindow> windows;
    std::vector<NoiseIndex<D>> idx;
    for (double t : times) {
        const int steps = std::max(1, static_cast<int>(std::lround(t / dt)));
        if (std::abs(steps * dt - t) > 1e-9 * std::max(1.0, t) && t != 0.0) {
            throw Error("transport times must be multiples of dt");
        }
        windows.push_back({0.0, t, steps});
        idx.push_back(noise_index(ns, windows.back()));
    }
    const std::size_t work = static_cast<std::size_t>(n_paths) * nt * nn;
    std::vector<unsigned char> bad(work, 0), out(work, 0);
    parallel_for(work, [&](std::size_t w) {
        const std::size_t n = w % nn;
        const std::size_t j = (w / nn) % nt;
        const std::size_t p = w / (nn * nt);
        const Vec<D> x = grid.node(f.nodes[n]);
        const auto r = inverse_walk(z, idx[j], path_offset + p, windows[j], x);
        if (!r.ok) {
            bad[w] = 1;
            return;
        }
        out[w] = r.left_box ? 1 : 0;
        f.values[w] = u0.value(r.x);
        for (int a = 0; a < D; ++a) {
            f.inverse[w * D + a] = r.x[a];
        }
    });
    std::size_t excursions = 0;
    for (std::size_t w = 0; w < work; ++w) {
        if (bad[w]) {
            f.failed[w / (nn * nt)] = 1;
        }
        excursions += out[w];
    }
    f.excursion_fraction = work ? static_cast<double>(excursions) / work : 0.0;
    return f;
}

// ---------------------------------------------------------------------------
// Conservation and the Euler identity

struct ConservationReport {
    double mass_defect = 0.0;   // max_{path,t} |∫u(t) − ∫u0| / |∫u0|
    double lr_defect = 0.0;     // max_{path,t} |∫|u(t)|^r − ∫|u0|^r| / ∫|u0|^r (r < ∞)
    double sup_defect = 0.0;    // max_{path,t} |sup|u(t)| − sup|u0|| / sup|u0|
    double max_principle_violation = 0.0;  // max amount by which u leaves [inf u0, sup u0]
    double u0_min = 0.0;
    double u0_max = 0.0;
};

/// Grid quadrature of mass, |u|^r and the sup norm against u0 sampled on
/// the same nodes. r = ∞ reports only the sup norm.
template <int D>
ConservationReport conservation_checks(const TransportField<D>& f, double r)
{
    if (!(r > 0.0)) {
        throw Error("conservation checks need r > 0");
    }
    const std::size_t nn = f.nodes.size();
    const double vol = f.grid.cell_volume();
    std::vector<double> u0v(nn);
    for (std::size_t n = 0; n < nn; ++n) {
        u0v[n] = f.u0.value(f.grid.node(f.nodes[n]));
    }
    const bool finite_r = std::isfinite(r);
    double m0 = 0.0, l0 = 0.0, s0 = 0.0;
    ConservationReport rep;
    rep.u0_min = INFINITY;
    rep.u0_max = -INFINITY;
    for (double v : u0v) {
        m0 += v * vol;
        if (finite_r) {
            l0 += std::pow(std::abs(v), r) * vol;
        }
        s0 = std::max(s0, std::abs(v));
        rep.u0_min = std::min(rep.u0_min, v);
        rep.u0_max = std::max(rep.u0_max, v);
    }
    if (std::isfinite(f.u0.lower) && std::isfinite(f.u0.upper)) {
        rep.u0_min = f.u0.lower;
        rep.u0_max = f.u0.upper;
    }
    for (int p = 0; p < f.n_paths; ++p) {
        if (f.failed[p]) {
            continue;
        }
        for (std::size_t j = 0; j < f.times.size(); ++j) {
            double m = 0.0, l = 0.0, s = 0.0;
            for (std::size_t n = 0; n < nn; ++n) {
                const double v = f.at(p, static_cast<int>(j), n);
                m += v * vol;
                if (finite_r) {
                    l += std::pow(std::abs(v), r) * vol;
                }
                s = std::max(s, std::abs(v));
                rep.max_principle_violation =
                    std::max({rep.max_principle_violation, v - rep.u0_max, rep.u0_min - v});
            }
            if (m0 != 0.0) {
                rep.mass_defect = std::max(rep.mass_defect, std::abs(m - m0) / std::abs(m0));
            }
            if (finite_r && l0 > 0.0) {
                rep.lr_defect = std::max(rep.lr_defect, std::abs(l - l0) / l0);
            }
            if (s0 > 0.0) {
                rep.sup_defect = std::max(rep.sup_defect, std::abs(s - s0) / s0);
            }
        }
    }
    return rep;
}

struct EulerIdentityReport {
    double rms = 0.0;  // RMS over paths and points of |det ∇X_t − exp(∫ div b)|
    double max = 0.0;
    std::size_t samples = 0;
    bool skipped = false;  // no analytic divergence available
};

/// Euler's identity det ∇X_{0,t}(x) = exp(∫_0^t div b(τ, X_τ(x)) dτ) along
/// variational paths; the exponent is accumulated with left-point sums.
template <int D>
EulerIdentityReport euler_identity(const ZvonkinTransform<D>& z, const DriftSpec<D>& b, const NoiseStream<D>& ns,
                                   const std::vector<Vec<D>>& x0s, const FlowWindow& w, int n_paths,
                                   std::uint64_t path_offset = 0, JetMode mode = JetMode::tables)
{
    EulerIdentityReport rep;
    if (!b.divergence_free && !b.divergence) {
        rep.skipped = true;
        return rep;
    }
    const auto ix = noise_index(ns, w);
    const std::size_t units = x0s.size() * static_cast<std::size_t>(n_paths);
    std::vector<double> defect(units, std::numeric_limits<double>::quiet_NaN());
    parallel_for(units, [&](std::size_t u) {
        double integral = 0.0;
        const double dt = w.dt();
        const auto r = transformed_walk(z, ix, path_offset + u % n_paths, w, x0s[u / n_paths], {true, mode},
                                        [&](int k, const Vec<D>&, const Vec<D>& x, const Mat<D>&, const Mat<D>&) {
                                            if (k < w.n_steps && b.divergence) {
                                                integral += b.divergence(w.time(k), x) * dt;
                                            }
                                        });
        if (r.ok) {
            defect[u] = std::abs(r.grad_x.determinant() - std::exp(integral));
        }
    });
    double s2 = 0.0;
    for (double d : defect) {
        if (std::isfinite(d)) {
            s2 += d * d;
            rep.max = std::max(rep.max, d);
            ++rep.samples;
        }
    }
    rep.rms = rep.samples ? std::sqrt(s2 / rep.samples) : 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Weak form

/// Itô form of the weak equation on the field's time partition t_0 = 0 < t_1 < …:
///   R(t_J) = ∫u φ|_0^{t_J} − Σ_j [∫u b·∇φ + ½∫u Δφ](t_j) Δt_j − Σ_j Σ_i (∫u ∂_iφ)(t_j) ΔW_i,j.
/// Returns max over paths and partition points of |R|.
template <int D>
double weak_residual(const TransportField<D>& f, const DriftSpec<D>& b, const TestFunction<D>& phi)
{
    if (!phi.inside(f.grid)) {
        throw Error("test function support leaves the grid box");
    }
    if (f.times.empty() || f.times.front() != 0.0) {
        throw Error("weak residual needs the field at t = 0");
    }
    const std::size_t nn = f.nodes.size();
    std::vector<bool> carried(f.grid.size(), false);
    for (std::size_t n : f.nodes) {
        carried[n] = true;
    }
    for (std::size_t i = 0; i < f.grid.size(); ++i) {
        if (!carried[i] && phi.value(f.grid.node(i)) != 0.0) {
            throw Error("field does not cover the test function's support");
        }
    }
    const double vol = f.grid.cell_volume();
    std::vector<double> ph(nn), lap(nn);
    std::vector<Vec<D>> grad(nn);
    for (std::size_t n = 0; n < nn; ++n) {
        const Vec<D> x = f.grid.node(f.nodes[n]);
        ph[n] = phi.value(x);
        grad[n] = phi.gradient(x);
        lap[n] = phi.laplacian(x);
    }
    const int nt = static_cast<int>(f.times.size());
    std::vector<double> worst(f.n_paths, 0.0);
    parallel_for(static_cast<std::size_t>(f.n_paths), [&](std::size_t pp) {
        const int p = static_cast<int>(pp);
        if (f.failed[p]) {
            return;
        }
        const std::uint64_t path = f.path_offset + p;
        double pair0 = 0.0;
        for (std::size_t n = 0; n < nn; ++n) {
            pair0 += f.at(p, 0, n) * ph[n] * vol;
        }
        double acc = 0.0;
        for (int j = 0; j + 1 < nt; ++j) {
            const double t = f.times[j];
            const double h = f.times[j + 1] - t;
            const Vec<D> dw = f.stream.increment(path, f.stream.index_of(t), f.stream.stride_for(h));
            double drift = 0.0;
            Vec<D> noise = Vec<D>::Zero();
            for (std::size_t n = 0; n < nn; ++n) {
                const double u = f.at(p, j, n);
                if (u == 0.0) {
                    continue;
                }
                const Vec<D> x = f.grid.node(f.nodes[n]);
                drift += u * (b(t, x).dot(grad[n]) + 0.5 * lap[n]) * vol;
                noise += u * grad[n] * vol;
            }
            acc += drift * h + noise.dot(dw);
            double pair = 0.0;
            for (std::size_t n = 0; n < nn; ++n) {
                pair += f.at(p, j + 1, n) * ph[n] * vol;
            }
            worst[p] = std::max(worst[p], std::abs(pair - pair0 - acc));
        }
    });
    return *std::max_element(worst.begin(), worst.end());
}

/// The same residual with every spatial integral taken through the change
/// of variables x = X_t(z): ∫u(t, x) g(x) dx = ∫u0(z) g(X_t(z)) det ∇X_t(z) dz,
/// quadrature over the nodes of `zgrid`. One forward pass per node serves
/// all partition times, so the partition can be as fine as the flow step.
/// Per test function: max over paths of sup_k |R(t_k)| and the RMS over
/// paths of the same per-path sup.
struct WeakResidual {
    double max = 0.0;
    double rms = 0.0;
};

template <int D>
std::vector<WeakResidual> weak_residual_lagrangian(const InitialDatum<D>& u0, const DriftSpec<D>& b,
                                             const ZvonkinTransform<D>& z, const NoiseStream<D>& ns,
                                             const Grid<D>& zgrid, const std::vector<TestFunction<D>>& phis,
                                             const FlowWindow& w, int n_paths, std::uint64_t path_offset = 0)
{
    for (const auto& phi : phis) {
        if (!phi.inside(z.grid())) {
            throw Error("test function support leaves the grid box");
        }
    }
    const auto ix = noise_index(ns, w);
    const std::size_t nphi = phis.size();
    const int n = w.n_steps;
    const double vol = zgrid.cell_volume();
    std::vector<std::size_t> nodes;
    for (std::size_t i = 0; i < zgrid.size(); ++i) {
        if (u0.value(zgrid.node(i)) != 0.0) {
            nodes.push_back(i);
        }
    }
    std::vector<std::vector<double>> worst(n_paths, std::vector<double>(nphi, 0.0));
    parallel_for(static_cast<std::size_t>(n_paths), [&](std::size_t q) {
        const std::uint64_t path = path_offset + q;
        // pair[k][φ], drift[k][φ], noise[k][φ]
        std::vector<double> pair((n + 1) * nphi, 0.0), drift((n + 1) * nphi, 0.0);
        std::vector<Vec<D>> noise((n + 1) * nphi, Vec<D>::Zero());
        for (std::size_t node : nodes) {
            const Vec<D> x0 = zgrid.node(node);
            const double mass = u0.value(x0) * vol;
            transformed_walk(z, ix, path, w, x0, {true, JetMode::tangent},
                             [&](int k, const Vec<D>&, const Vec<D>& x, const Mat<D>& g, const Mat<D>&) {
                                 const double wgt = mass * g.determinant();
                                 const double t = w.time(k);
                                 const Vec<D> bx = b(t, x);
                                 for (std::size_t f = 0; f < nphi; ++f) {
                                     const double v = phis[f].value(x);
                                     if (v == 0.0 && (x - phis[f].center).norm() >= phis[f].radius) {
                                         continue;
                                     }
                                     const Vec<D> gp = phis[f].gradient(x);
                                     pair[k * nphi + f] += wgt * v;
                                     drift[k * nphi + f] += wgt * (bx.dot(gp) + 0.5 * phis[f].laplacian(x));
                                     noise[k * nphi + f] += wgt * gp;
                                 }
                             });
        }
        const double dt = w.dt();
        for (std::size_t f = 0; f < nphi; ++f) {
            double acc = 0.0;
            for (int k = 0; k < n; ++k) {
                acc += drift[k * nphi + f] * dt + noise[k * nphi + f].dot(ix.dw(path, k));
                worst[q][f] = std::max(worst[q][f], std::abs(pair[(k + 1) * nphi + f] - pair[f] - acc));
            }
        }
    });
    std::vector<WeakResidual> out(nphi);
    for (const auto& row : worst) {
        for (std::size_t f = 0; f < nphi; ++f) {
            out[f].max = std::max(out[f].max, row[f]);
            out[f].rms += row[f] * row[f];
        }
    }
    for (auto& o : out) {
        o.rms = std::sqrt(o.rms / std::max(n_paths, 1));
    }
    return out;
}

/// max over test functions, times and paths of |∫(u_a − u_b) φ|.
template <int D>
double uniqueness_probe(const TransportField<D>& a, const TransportField<D>& b,
                        const std::vector<TestFunction<D>>& phis)
{
    if (!(a.grid == b.grid) || a.nodes != b.nodes || a.times != b.times || a.n_paths != b.n_paths ||
        !(a.stream == b.stream) || a.path_offset != b.path_offset) {
        throw Error("uniqueness probe needs fields on the same grid, times and noise");
    }
    const double vol = a.grid.cell_volume();
    double worst = 0.0;
    for (const auto& phi : phis) {
        std::vector<double> ph(a.nodes.size());
        for (std::size_t n = 0; n < a.nodes.size(); ++n) {
            ph[n] = phi.value(a.grid.node(a.nodes[n]));
        }
        for (int p = 0; p < a.n_paths; ++p) {
            if (a.failed[p] || b.failed[p]) {
                continue;
            }
            for (std::size_t j = 0; j < a.times.size(); ++j) {
                double s = 0.0;
                for (std::size_t n = 0; n < a.nodes.size(); ++n) {
                    s += (a.at(p, static_cast<int>(j), n) - b.at(p, static_cast<int>(j), n)) * ph[n] * vol;
                }
                worst = std::max(worst, std::abs(s));
            }
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Gradient of the solution

struct GradientStatistic {
    Estimate estimate;       // E sup_t ||∇u(t)||^r_{L^r(B_R)} or E sup_{t,B_R} |∇u|^p
    double pathwise_max = 0.0;
};

/// ∇u(t, x) = ∇X_t^{-1}(x)ᵀ ∇u0(X_t^{-1}(x)) with ∇X_t^{-1}(x) = [∇X_t(X_t^{-1}(x))]^{-1},
/// evaluated at `points` (a sample of B_R with quadrature weight `weight`)
/// and the given times. r = ∞ returns E sup |∇u|^p, otherwise
/// E sup_t Σ |∇u|^r · weight.
template <int D>
GradientStatistic gradient_transport(const InitialDatum<D>& u0, const ZvonkinTransform<D>& z,
                                     const NoiseStream<D>& ns, const std::vector<Vec<D>>& points, double weight,
                                     const std::vector<double>& times, double dt, double r, double p, int n_paths,
                                     std::uint64_t path_offset = 0, std::uint64_t seed = 2024)
{
    if (!u0.gradient) {
        throw Error("gradient statistics need the gradient of u0");
    }
    std::vector<FlowWindow> windows;
    std::vector<NoiseIndex<D>> idx;
    for (double t : times) {
        windows.push_back({0.0, t, std::max(1, static_cast<int>(std::lround(t / dt)))});
        idx.push_back(noise_index(ns, windows.back()));
    }
    const bool sup_mode = !std::isfinite(r);
    const std::size_t work = static_cast<std::size_t>(n_paths) * times.size() * points.size();
    std::vector<double> gnorm(work, std::numeric_limits<double>::quiet_NaN());
    parallel_for(work, [&](std::size_t w) {
        const std::size_t n = w % points.size();
        const std::size_t j = (w / points.size()) % times.size();
        const std::size_t q = w / (points.size() * times.size());
        const std::uint64_t path = path_offset + q;
        const auto back = inverse_walk(z, idx[j], path, windows[j], points[n]);
        if (!back.ok) {
            return;
        }
        const auto fwd = transformed_walk(z, idx[j], path, windows[j], back.x, {true, JetMode::tables});
        if (!fwd.ok) {
            return;
        }
        const Mat<D> ginv = fwd.grad_x.inverse();
        gnorm[w] = (ginv.transpose() * u0.gradient(back.x)).norm();
    });
    std::vector<std::vector<double>> samples(1, std::vector<double>(n_paths));
    GradientStatistic out;
    for (int q = 0; q < n_paths; ++q) {
        double best = 0.0;
        for (std::size_t j = 0; j < times.size(); ++j) {
            double acc = 0.0;
            for (std::size_t n = 0; n < points.size(); ++n) {
                const double g = gnorm[(static_cast<std::size_t>(q) * times.size() + j) * points.size() + n];
                if (!std::isfinite(g)) {
                    acc = std::numeric_limits<double>::quiet_NaN();
                    break;
                }
                acc = sup_mode ? std::max(acc, g) : acc + std::pow(g, r) * weight;
            }
            best = std::isfinite(acc) ? std::max(best, acc) : acc;
            if (!std::isfinite(best)) {
                break;
            }
        }
        samples[0][q] = sup_mode ? std::pow(best, p) : best;
        if (std::isfinite(best)) {
            out.pathwise_max = std::max(out.pathwise_max, best);
        }
    }
    out.estimate = sup_mean_bootstrap(samples, seed);
    return out;
}

}  // namespace roughsde
