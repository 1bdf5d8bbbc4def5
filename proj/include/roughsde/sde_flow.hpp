#pragma once

// Euler–Maruyama on the transformed equation, pullback X = Ψ(t, Y), inverse
// and variational flows, and the Monte Carlo estimators built on them.

#include "roughsde/noise.hpp"
#include "roughsde/zvonkin.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace roughsde {

/// Uniform time partition of [s, t] into n_steps Euler steps.
struct FlowWindow {
    double s = 0.0;
    double t = 1.0;
    int n_steps = 1;

    double dt() const { return (t - s) / n_steps; }
    double time(int k) const { return k >= n_steps ? t : s + (t - s) * k / n_steps; }
    void validate() const
    {
        if (!(s >= 0.0) || !(t >= s) || n_steps < 1) {
            throw Error("flow window needs 0 <= s <= t and at least one step");
        }
    }
};

/// Coarse step k of a window ↦ summed fine increments of the stream.
template <int D>
struct NoiseIndex {
    const NoiseStream<D>* stream = nullptr;
    int first = 0;
    int stride = 0;

    Vec<D> dw(std::uint64_t path, int k) const { return stream->increment(path, first + k * stride, stride); }
};

template <int D>
NoiseIndex<D> noise_index(const NoiseStream<D>& ns, const FlowWindow& w)
{
    w.validate();
    if (w.t > ns.horizon() * (1.0 + 1e-12)) {
        throw Error("flow window extends past the noise stream horizon");
    }
    NoiseIndex<D> ix;
    ix.stream = &ns;
    ix.first = ns.index_of(w.s);
    ix.stride = w.t == w.s ? 0 : ns.stride_for(w.dt());
    return ix;
}

struct WalkOptions {
    bool variational = false;
    JetMode mode = JetMode::tables;
};

template <int D>
struct PathResult {
    Vec<D> x = Vec<D>::Zero();
    Vec<D> y = Vec<D>::Zero();
    Mat<D> grad_x = Mat<D>::Identity();
    Mat<D> zeta = Mat<D>::Identity();
    double sup_grad = 0.0;  // sup_t ||∇X||_HS when variational
    bool ok = true;
    bool left_box = false;
};

namespace detail {

template <int D>
bool outside(const Vec<D>& x, double half_width)
{
    return x.cwiseAbs().maxCoeff() > half_width;
}

struct NoSink {
    template <int D>
    void operator()(int, const Vec<D>&, const Vec<D>&, const Mat<D>&, const Mat<D>&) const
    {
    }
};

}  // namespace detail

/// One path of Y_{k+1} = Y_k + b̃ Δt + σ̃ ΔW_k from Y_0 = Φ(s, x0) with
/// X_k = Ψ(t_k, Y_k) and X_0 = x0. With `variational`, also
/// ζ̃_{k+1} = ζ̃_k + ∇b̃ ζ̃_k Δt + Σ_j ∂σ̃_j ζ̃_k ΔW_j and ∇X = ∇Ψ(t, Y) ζ̃ ∇Φ(s, x0).
/// sink(k, y, x, ∇X, ζ̃) is called for k = 0..n.
template <int D, class Sink = detail::NoSink>
PathResult<D> transformed_walk(const ZvonkinTransform<D>& z, const NoiseIndex<D>& ix, std::uint64_t path,
                               const FlowWindow& w, const Vec<D>& x0, const WalkOptions& opt = {},
                               Sink&& sink = {})
{
    PathResult<D> r;
    const double L = z.grid().half_width();
    const double dt = w.dt();
    r.x = x0;
    r.left_box = detail::outside<D>(x0, L);
    r.sup_grad = opt.variational ? std::sqrt(static_cast<double>(D)) : 0.0;
    try {
        Vec<D> y = z.phi(w.s, x0);
        r.y = y;
        sink(0, y, x0, r.grad_x, r.zeta);
        if (w.t == w.s) {
            return r;
        }
        const Mat<D> gphi0 = opt.variational ? z.grad_phi(w.s, x0, opt.mode) : Mat<D>::Identity();
        auto c = z.coefficients(w.s, y, opt.variational, opt.mode);
        Mat<D> zeta = Mat<D>::Identity();
        for (int k = 0; k < w.n_steps; ++k) {
            const Vec<D> dW = ix.dw(path, k);
            y += c.b * dt + c.s * dW;
            if (opt.variational) {
                Mat<D> dz = c.grad_b * zeta * dt;
                for (int j = 0; j < D; ++j) {
                    dz += c.grad_s[j] * zeta * dW[j];
                }
                zeta += dz;
            }
            c = z.coefficients(w.time(k + 1), y, opt.variational, opt.mode);
            r.x = c.x;
            r.y = y;
            r.left_box = r.left_box || detail::outside<D>(r.x, L);
            if (opt.variational) {
                r.zeta = zeta;
                r.grad_x = c.grad_psi * zeta * gphi0;
                r.sup_grad = std::max(r.sup_grad, r.grad_x.norm());
            }
            sink(k + 1, y, r.x, r.grad_x, r.zeta);
        }
    } catch (const Error&) {
        r.ok = false;
    }
    return r;
}

/// Plain Euler–Maruyama on dX = b dt + σ dW with the same noise layout.
template <int D, class Sink = detail::NoSink>
PathResult<D> direct_walk(const DriftSpec<D>& b, const DiffusionCoefficient<D>& sigma, const NoiseIndex<D>& ix,
                          std::uint64_t path, const FlowWindow& w, const Vec<D>& x0,
                          double half_width = INFINITY, Sink&& sink = {})
{
    PathResult<D> r;
    const double dt = w.dt();
    Vec<D> x = x0;
    r.x = r.y = x;
    r.left_box = detail::outside<D>(x0, half_width);
    sink(0, x, x, r.grad_x, r.zeta);
    if (w.t == w.s) {
        return r;
    }
    for (int k = 0; k < w.n_steps; ++k) {
        const double tk = w.time(k);
        x += b(tk, x) * dt + sigma(tk) * ix.dw(path, k);
        if (!x.allFinite()) {
            r.ok = false;
            return r;
        }
        r.left_box = r.left_box || detail::outside<D>(x, half_width);
        sink(k + 1, x, x, r.grad_x, r.zeta);
    }
    r.x = r.y = x;
    return r;
}

/// X^{-1}_{s,t}(x): Y^{-1} integrated backward over the same increments in
/// reverse order,
///   Z_k = Z_{k+1} − [b̃ − Σ_j (∂σ̃_j) σ̃_j](t_{k+1}, Z_{k+1}) Δt − σ̃(t_{k+1}, Z_{k+1}) ΔW_k,
/// from Z_n = Φ(t, x), then X^{-1} = Ψ(s, Z_0). The bracketed correction makes
/// the reversed right-point scheme consistent with the forward Itô flow.
template <int D>
PathResult<D> inverse_walk(const ZvonkinTransform<D>& z, const NoiseIndex<D>& ix, std::uint64_t path,
                           const FlowWindow& w, const Vec<D>& x)
{
    PathResult<D> r;
    r.x = x;
    if (w.t == w.s) {
        r.y = x;
        return r;
    }
    const double L = z.grid().half_width();
    const double dt = w.dt();
    try {
        Vec<D> y = z.phi(w.t, x);
        for (int k = w.n_steps - 1; k >= 0; --k) {
            const auto c = z.coefficients(w.time(k + 1), y, true, JetMode::tables);
            Vec<D> corr = Vec<D>::Zero();
            for (int j = 0; j < D; ++j) {
                corr += c.grad_s[j] * c.s.col(j);
            }
            r.left_box = r.left_box || detail::outside<D>(c.x, L);
            y -= (c.b - corr) * dt + c.s * ix.dw(path, k);
        }
        r.y = y;
        r.x = z.psi(w.s, y);
        r.left_box = r.left_box || detail::outside<D>(r.x, L);
    } catch (const Error&) {
        r.ok = false;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Ensembles

struct SimOptions {
    int n_paths = 1000;
    std::uint64_t path_offset = 0;
    int record_every = 1;  // 0 keeps only the endpoints
    bool variational = false;
    JetMode mode = JetMode::tables;
};

/// Paths for every (x0, path) unit; records are taken every `record_every`
/// steps. Layout: unit = i * n_paths + p, record slot = unit * n_records + r.
template <int D>
struct FlowEnsemble {
    std::vector<Vec<D>> x0s;
    FlowWindow window;
    NoiseStream<D> stream;
    int n_paths = 0;
    std::uint64_t path_offset = 0;
    int record_every = 1;
    int n_records = 0;
    bool variational = false;
    JetMode mode = JetMode::tables;
    std::vector<double> y_paths;
    std::vector<double> x_paths;
    std::vector<double> grad_paths;  // ∇X, when variational
    std::vector<double> zeta_paths;  // ζ̃, when variational
    std::vector<double> sup_grad;    // per unit, sup_t ||∇X||_HS
    std::vector<unsigned char> failed;
    std::vector<unsigned char> left_box;

    std::size_t units() const { return x0s.size() * static_cast<std::size_t>(n_paths); }
    std::size_t unit(std::size_t i, int p) const { return i * static_cast<std::size_t>(n_paths) + p; }
    int record_step(int r) const { return std::min(r * record_every, window.n_steps); }
    double record_time(int r) const { return window.time(record_step(r)); }
    double step() const { return window.dt(); }
    bool valid(std::size_t i, int p) const { return !failed[unit(i, p)]; }

    Vec<D> x(std::size_t i, int p, int r) const { return read(x_paths, i, p, r); }
    Vec<D> y(std::size_t i, int p, int r) const { return read(y_paths, i, p, r); }
    Mat<D> grad_x(std::size_t i, int p, int r) const { return read_mat(grad_paths, i, p, r); }
    Mat<D> zeta(std::size_t i, int p, int r) const { return read_mat(zeta_paths, i, p, r); }

    std::size_t failures() const
    {
        return static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1));
    }
    double excursion_fraction() const
    {
        return units() == 0 ? 0.0
                            : static_cast<double>(std::count(left_box.begin(), left_box.end(), 1)) / units();
    }

private:
    std::size_t slot(std::size_t i, int p, int r) const
    {
        return unit(i, p) * static_cast<std::size_t>(n_records) + r;
    }
    Vec<D> read(const std::vector<double>& v, std::size_t i, int p, int r) const
    {
        return Eigen::Map<const Vec<D>>(v.data() + slot(i, p, r) * D);
    }
    Mat<D> read_mat(const std::vector<double>& v, std::size_t i, int p, int r) const
    {
        if (v.empty()) {
            throw Error("ensemble has no variational paths");
        }
        return Eigen::Map<const Mat<D>>(v.data() + slot(i, p, r) * D * D);
    }
};

namespace detail {

template <int D>
FlowEnsemble<D> prepare_ensemble(const std::vector<Vec<D>>& x0s, const FlowWindow& w, const NoiseStream<D>& ns,
                                 const SimOptions& opt, bool variational)
{
    w.validate();
    if (opt.n_paths < 1) {
        throw Error("an ensemble needs at least one path");
    }
    if (x0s.empty()) {
        throw Error("an ensemble needs at least one initial point");
    }
    FlowEnsemble<D> e;
    e.x0s = x0s;
    e.window = w;
    e.stream = ns;
    e.n_paths = opt.n_paths;
    e.path_offset = opt.path_offset;
    e.record_every = opt.record_every <= 0 ? w.n_steps : opt.record_every;
    if (w.n_steps % e.record_every != 0) {
        throw Error("record_every must divide the number of steps");
    }
    e.n_records = w.n_steps / e.record_every + 1;
    e.variational = variational;
    e.mode = opt.mode;
    const std::size_t slots = e.units() * static_cast<std::size_t>(e.n_records);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    e.x_paths.assign(slots * D, nan);
    e.y_paths.assign(slots * D, nan);
    if (variational) {
        e.grad_paths.assign(slots * D * D, nan);
        e.zeta_paths.assign(slots * D * D, nan);
        e.sup_grad.assign(e.units(), nan);
    }
    e.failed.assign(e.units(), 0);
    e.left_box.assign(e.units(), 0);
    return e;
}

template <int D>
struct RecordSink {
    FlowEnsemble<D>* e;
    std::size_t unit;

    void operator()(int k, const Vec<D>& y, const Vec<D>& x, const Mat<D>& g, const Mat<D>& z) const
    {
        if (k % e->record_every != 0) {
            return;
        }
        const std::size_t slot = unit * static_cast<std::size_t>(e->n_records) + k / e->record_every;
        for (int a = 0; a < D; ++a) {
            e->y_paths[slot * D + a] = y[a];
            e->x_paths[slot * D + a] = x[a];
        }
        if (e->variational) {
            for (int a = 0; a < D * D; ++a) {
                e->grad_paths[slot * D * D + a] = g.data()[a];
                e->zeta_paths[slot * D * D + a] = z.data()[a];
            }
        }
    }
};

}  // namespace detail

/// Euler–Maruyama on the transformed equation for every (x0, path).
template <int D>
FlowEnsemble<D> simulate_transformed(const ZvonkinTransform<D>& z, const std::vector<Vec<D>>& x0s,
                                     const FlowWindow& w, const NoiseStream<D>& ns, const SimOptions& opt = {})
{
    auto e = detail::prepare_ensemble(x0s, w, ns, opt, opt.variational);
    const auto ix = noise_index(ns, w);
    const WalkOptions wo{opt.variational, opt.mode};
    parallel_for(e.units(), [&](std::size_t u) {
        const std::size_t i = u / opt.n_paths;
        const int p = static_cast<int>(u % opt.n_paths);
        const auto r = transformed_walk(z, ix, opt.path_offset + p, w, x0s[i], wo, detail::RecordSink<D>{&e, u});
        e.failed[u] = r.ok ? 0 : 1;
        e.left_box[u] = r.left_box ? 1 : 0;
        if (opt.variational) {
            e.sup_grad[u] = r.ok ? r.sup_grad : std::numeric_limits<double>::quiet_NaN();
        }
    });
    return e;
}

/// Re-runs the ensemble's paths with the variational equation attached.
template <int D>
FlowEnsemble<D> variational_flow(const ZvonkinTransform<D>& z, const FlowEnsemble<D>& base,
                                 JetMode mode = JetMode::tables)
{
    SimOptions opt;
    opt.n_paths = base.n_paths;
    opt.path_offset = base.path_offset;
    opt.record_every = base.record_every;
    opt.variational = true;
    opt.mode = mode;
    return simulate_transformed(z, base.x0s, base.window, base.stream, opt);
}

/// Euler–Maruyama on the original equation, same noise layout.
template <int D>
FlowEnsemble<D> simulate_direct(const DriftSpec<D>& b, const DiffusionCoefficient<D>& sigma,
                                const std::vector<Vec<D>>& x0s, const FlowWindow& w, const NoiseStream<D>& ns,
                                const SimOptions& opt = {}, double half_width = INFINITY)
{
    auto e = detail::prepare_ensemble(x0s, w, ns, opt, false);
    const auto ix = noise_index(ns, w);
    parallel_for(e.units(), [&](std::size_t u) {
        const std::size_t i = u / opt.n_paths;
        const int p = static_cast<int>(u % opt.n_paths);
        const auto r = direct_walk(b, sigma, ix, opt.path_offset + p, w, x0s[i], half_width,
                                   detail::RecordSink<D>{&e, u});
        e.failed[u] = r.ok ? 0 : 1;
        e.left_box[u] = r.left_box ? 1 : 0;
    });
    return e;
}

/// X^{-1}_{s,t}(x) for every target x and path of an ensemble.
template <int D>
struct InverseEnsemble {
    std::vector<Vec<D>> targets;
    FlowWindow window;
    int n_paths = 0;
    std::uint64_t path_offset = 0;
    std::vector<double> values;    // X^{-1}, unit-major
    std::vector<double> y_values;  // Y^{-1}
    std::vector<unsigned char> failed;
    std::vector<unsigned char> left_box;

    std::size_t unit(std::size_t i, int p) const { return i * static_cast<std::size_t>(n_paths) + p; }
    Vec<D> x(std::size_t i, int p) const { return Eigen::Map<const Vec<D>>(values.data() + unit(i, p) * D); }
    Vec<D> y(std::size_t i, int p) const { return Eigen::Map<const Vec<D>>(y_values.data() + unit(i, p) * D); }
    std::size_t failures() const
    {
        return static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1));
    }
};

template <int D>
InverseEnsemble<D> inverse_flow(const ZvonkinTransform<D>& z, const NoiseStream<D>& ns, const FlowWindow& w,
                                const std::vector<Vec<D>>& targets, int n_paths, std::uint64_t path_offset = 0)
{
    InverseEnsemble<D> e;
    e.targets = targets;
    e.window = w;
    e.n_paths = n_paths;
    e.path_offset = path_offset;
    const std::size_t units = targets.size() * static_cast<std::size_t>(n_paths);
    e.values.assign(units * D, std::numeric_limits<double>::quiet_NaN());
    e.y_values.assign(units * D, std::numeric_limits<double>::quiet_NaN());
    e.failed.assign(units, 0);
    e.left_box.assign(units, 0);
    const auto ix = noise_index(ns, w);
    parallel_for(units, [&](std::size_t u) {
        const std::size_t i = u / n_paths;
        const int p = static_cast<int>(u % n_paths);
        const auto r = inverse_walk(z, ix, path_offset + p, w, targets[i]);
        e.failed[u] = r.ok ? 0 : 1;
        e.left_box[u] = r.left_box ? 1 : 0;
        if (r.ok) {
            for (int a = 0; a < D; ++a) {
                e.values[u * D + a] = r.x[a];
                e.y_values[u * D + a] = r.y[a];
            }
        }
    });
    return e;
}

template <int D>
InverseEnsemble<D> inverse_flow(const ZvonkinTransform<D>& z, const FlowEnsemble<D>& ens,
                                const std::vector<Vec<D>>& targets)
{
    return inverse_flow(z, ens.stream, ens.window, targets, ens.n_paths, ens.path_offset);
}

// ---------------------------------------------------------------------------
// Flow axioms

struct FlowCheckReport {
    double composition_max = 0.0;  // |X_{s,t}(x) − X_{τ,t}(X_{s,τ}(x))|
    double composition_rms = 0.0;
    double inverse_max = 0.0;      // |X^{-1}_{s,t}(X_{s,t}(x)) − x|
    double inverse_rms = 0.0;
    double identity_defect = 0.0;  // |X_{s,s}(x) − x|
    std::size_t failures = 0;
    std::size_t samples = 0;
};

/// Each of the windows (s, τ), (τ, t) and (s, t) uses n_steps Euler steps,
/// so the three discretizations differ and the defects measure the scheme.
template <int D>
FlowCheckReport flow_checks(const ZvonkinTransform<D>& z, const NoiseStream<D>& ns, const std::vector<Vec<D>>& x0s,
                            double s, double tau, double t, int n_steps, int n_paths, std::uint64_t path_offset = 0)
{
    if (!(s <= tau && tau <= t)) {
        throw Error("flow checks need s <= tau <= t");
    }
    const FlowWindow wst{s, t, n_steps}, wsm{s, tau, n_steps}, wmt{tau, t, n_steps}, wss{s, s, 1};
    const auto ist = noise_index(ns, wst), ism = noise_index(ns, wsm), imt = noise_index(ns, wmt);
    const auto iss = noise_index(ns, wss);
    const std::size_t units = x0s.size() * static_cast<std::size_t>(n_paths);
    std::vector<double> comp(units, 0.0), inv(units, 0.0), ident(units, 0.0);
    std::vector<unsigned char> bad(units, 0);
    parallel_for(units, [&](std::size_t u) {
        const Vec<D>& x = x0s[u / n_paths];
        const std::uint64_t path = path_offset + u % n_paths;
        const auto full = transformed_walk(z, ist, path, wst, x);
        const auto first = transformed_walk(z, ism, path, wsm, x);
        const auto second = transformed_walk(z, imt, path, wmt, first.x);
        const auto back = inverse_walk(z, ist, path, wst, full.x);
        const auto same = transformed_walk(z, iss, path, wss, x);
        if (!(full.ok && first.ok && second.ok && back.ok && same.ok)) {
            bad[u] = 1;
            return;
        }
        comp[u] = (full.x - second.x).norm();
        inv[u] = (back.x - x).norm();
        ident[u] = (same.x - x).norm();
    });
    FlowCheckReport rep;
    double c2 = 0.0, i2 = 0.0;
    for (std::size_t u = 0; u < units; ++u) {
        if (bad[u]) {
            ++rep.failures;
            continue;
        }
        ++rep.samples;
        rep.composition_max = std::max(rep.composition_max, comp[u]);
        rep.inverse_max = std::max(rep.inverse_max, inv[u]);
        rep.identity_defect = std::max(rep.identity_defect, ident[u]);
        c2 += comp[u] * comp[u];
        i2 += inv[u] * inv[u];
    }
    if (rep.samples > 0) {
        rep.composition_rms = std::sqrt(c2 / rep.samples);
        rep.inverse_rms = std::sqrt(i2 / rep.samples);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Estimators

struct Estimate {
    double value = 0.0;
    double stderr_ = 0.0;
    std::size_t samples = 0;
};

/// max over groups g of mean_p samples[g][p], with a bootstrap standard error
/// that resamples path indices jointly across groups. NaN entries (failed
/// paths) are skipped.
inline Estimate sup_mean_bootstrap(const std::vector<std::vector<double>>& samples, std::uint64_t seed = 2024,
                                   int resamples = 1000)
{
    if (samples.empty() || samples.front().empty()) {
        throw Error("bootstrap needs at least one sample");
    }
    const std::size_t n = samples.front().size();
    const auto stat = [&](const std::vector<std::uint32_t>* idx) {
        double best = -INFINITY;
        for (const auto& g : samples) {
            double sum = 0.0;
            std::size_t cnt = 0;
            for (std::size_t j = 0; j < n; ++j) {
                const double v = g[idx ? (*idx)[j] : j];
                if (std::isfinite(v)) {
                    sum += v;
                    ++cnt;
                }
            }
            best = std::max(best, cnt ? sum / cnt : INFINITY);
        }
        return best;
    };
    Estimate e;
    e.value = stat(nullptr);
    e.samples = n;
    std::vector<double> boot(resamples);
    parallel_for(static_cast<std::size_t>(resamples), [&](std::size_t b) {
        std::vector<std::uint32_t> idx(n);
        for (std::size_t j = 0; j < n; ++j) {
            idx[j] = static_cast<std::uint32_t>(counter_bits(seed, b, static_cast<std::uint32_t>(j)) % n);
        }
        boot[b] = stat(&idx);
    });
    double mean = 0.0;
    for (double v : boot) {
        mean += v;
    }
    mean /= resamples;
    double var = 0.0;
    for (double v : boot) {
        var += (v - mean) * (v - mean);
    }
    e.stderr_ = resamples > 1 ? std::sqrt(var / (resamples - 1)) : 0.0;
    return e;
}

/// Samples of sup_t ||∇X_{s,t}(x)||^p grouped by initial point.
template <int D>
std::vector<std::vector<double>> grad_moment_samples(const FlowEnsemble<D>& e, double p)
{
    if (!e.variational) {
        throw Error("moment estimates need variational paths");
    }
    std::vector<std::vector<double>> s(e.x0s.size(), std::vector<double>(e.n_paths));
    for (std::size_t i = 0; i < e.x0s.size(); ++i) {
        for (int q = 0; q < e.n_paths; ++q) {
            s[i][q] = std::pow(e.sup_grad[e.unit(i, q)], p);
        }
    }
    return s;
}

/// sup_t ||∇X^{-1}_{s,t}(x)||_HS over t_j = s + j (t − s) / n_times, using
/// ∇X^{-1}_{s,t}(x) = [∇X_{s,t}(X^{-1}_{s,t}(x))]^{-1}. Grouped by target.
template <int D>
std::vector<std::vector<double>> inverse_gradient_sups(const ZvonkinTransform<D>& z, const NoiseStream<D>& ns,
                                                       const std::vector<Vec<D>>& targets, const FlowWindow& w,
                                                       int n_times, int n_paths, std::uint64_t path_offset = 0,
                                                       JetMode mode = JetMode::tables)
{
    if (n_times < 1 || w.n_steps % n_times != 0) {
        throw Error("inverse gradient times must split the window's steps evenly");
    }
    const std::size_t units = targets.size() * static_cast<std::size_t>(n_paths);
    std::vector<double> sup(units, std::sqrt(static_cast<double>(D)));
    std::vector<FlowWindow> windows;
    std::vector<NoiseIndex<D>> idx;
    for (int j = 1; j <= n_times; ++j) {
        windows.push_back({w.s, w.s + (w.t - w.s) * j / n_times, w.n_steps / n_times * j});
        idx.push_back(noise_index(ns, windows.back()));
    }
    parallel_for(units, [&](std::size_t u) {
        const Vec<D>& x = targets[u / n_paths];
        const std::uint64_t path = path_offset + u % n_paths;
        for (int j = 0; j < n_times; ++j) {
            const auto back = inverse_walk(z, idx[j], path, windows[j], x);
            const auto fwd = back.ok ? transformed_walk(z, idx[j], path, windows[j], back.x, {true, mode})
                                     : PathResult<D>{};
            if (!back.ok || !fwd.ok) {
                sup[u] = std::numeric_limits<double>::quiet_NaN();
                return;
            }
            sup[u] = std::max(sup[u], fwd.grad_x.inverse().norm());
        }
    });
    std::vector<std::vector<double>> s(targets.size(), std::vector<double>(n_paths));
    for (std::size_t u = 0; u < units; ++u) {
        s[u / n_paths][u % n_paths] = sup[u];
    }
    return s;
}

/// sup_x E[sup_t ||·||^p] from per-path samples of sup_t ||·||, with
/// bootstrap standard error.
inline Estimate moment_estimator(const std::vector<std::vector<double>>& sups, double p, std::uint64_t seed = 2024,
                                 int resamples = 1000)
{
    if (sups.empty() || sups.front().size() < 100) {
        throw Error("moment estimates need at least 100 paths per point");
    }
    auto pw = sups;
    for (auto& g : pw) {
        for (double& v : g) {
            v = std::pow(v, p);
        }
    }
    return sup_mean_bootstrap(pw, seed, resamples);
}

template <int D>
Estimate moment_estimator(const FlowEnsemble<D>& e, double p, std::uint64_t seed = 2024, int resamples = 1000)
{
    return moment_estimator(grad_moment_samples(e, 1.0), p, seed, resamples);
}

/// Envelope constant of sup_t E|Y_{s,t}(y)|^p <= C (1 + |y|^p): the largest
/// ratio over initial points and record times.
template <int D>
Estimate moment_envelope(const FlowEnsemble<D>& e, double p, std::uint64_t seed = 2024, int resamples = 1000)
{
    std::vector<std::vector<double>> groups;
    for (std::size_t i = 0; i < e.x0s.size(); ++i) {
        const double y0 = e.y(i, 0, 0).norm();
        for (int r = 0; r < e.n_records; ++r) {
            std::vector<double> g(e.n_paths);
            for (int q = 0; q < e.n_paths; ++q) {
                g[q] = std::pow(e.y(i, q, r).norm(), p) / (1.0 + std::pow(y0, p));
            }
            groups.push_back(std::move(g));
        }
    }
    return sup_mean_bootstrap(groups, seed, resamples);
}

/// Smallest |Y(x_i) − Y(x_{i+1})| / |x_i − x_{i+1}| over consecutive initial
/// points, paths and records.
template <int D>
double min_separation_ratio(const FlowEnsemble<D>& e)
{
    double m = INFINITY;
    for (std::size_t i = 0; i + 1 < e.x0s.size(); ++i) {
        const double d = (e.x0s[i] - e.x0s[i + 1]).norm();
        for (int q = 0; q < e.n_paths; ++q) {
            if (!e.valid(i, q) || !e.valid(i + 1, q)) {
                continue;
            }
            for (int r = 0; r < e.n_records; ++r) {
                m = std::min(m, (e.y(i, q, r) - e.y(i + 1, q, r)).norm() / d);
            }
        }
    }
    return m;
}

struct HolderFit {
    double exponent = 0.0;  // slope / p
    double stderr_ = 0.0;   // bootstrap over paths
    double ci_low = 0.0;
    double ci_high = 0.0;
    double intercept = 0.0;
    std::vector<double> separations;
    std::vector<double> moments;  // E|difference|^p per separation
};

/// Regresses log E|diff|^p on log separation. `diffs[j][path]` holds |diff| at
/// separations[j]; paths are resampled jointly for the confidence interval.
inline HolderFit holder_exponent_fit(const std::vector<double>& separations,
                                     const std::vector<std::vector<double>>& diffs, double p,
                                     std::uint64_t seed = 2024, int resamples = 1000)
{
    if (separations.size() < 4 || diffs.size() != separations.size()) {
        throw Error("Hölder exponent fit needs a ladder of at least 4 separations");
    }
    const std::size_t n = diffs.front().size();
    const auto fit = [&](const std::vector<std::uint32_t>* idx, std::vector<double>* mom, double* icpt) {
        std::vector<double> m(separations.size());
        for (std::size_t j = 0; j < separations.size(); ++j) {
            double sum = 0.0;
            std::size_t cnt = 0;
            for (std::size_t q = 0; q < n; ++q) {
                const double v = diffs[j][idx ? (*idx)[q] : q];
                if (std::isfinite(v)) {
                    sum += std::pow(v, p);
                    ++cnt;
                }
            }
            m[j] = sum / std::max<std::size_t>(cnt, 1);
        }
        const double slope = loglog_slope(separations, m);
        if (icpt) {
            double mx = 0.0, my = 0.0;
            for (std::size_t j = 0; j < m.size(); ++j) {
                mx += std::log(separations[j]);
                my += std::log(m[j]);
            }
            *icpt = (my - slope * mx) / m.size();
        }
        if (mom) {
            *mom = m;
        }
        return slope / p;
    };
    HolderFit h;
    h.separations = separations;
    h.exponent = fit(nullptr, &h.moments, &h.intercept);
    std::vector<double> boot(resamples);
    parallel_for(static_cast<std::size_t>(resamples), [&](std::size_t b) {
        std::vector<std::uint32_t> idx(n);
        for (std::size_t q = 0; q < n; ++q) {
            idx[q] = static_cast<std::uint32_t>(counter_bits(seed, b, static_cast<std::uint32_t>(q)) % n);
        }
        boot[b] = fit(&idx, nullptr, nullptr);
    });
    double mean = 0.0;
    for (double v : boot) {
        mean += v;
    }
    mean /= resamples;
    double var = 0.0;
    for (double v : boot) {
        var += (v - mean) * (v - mean);
    }
    h.stderr_ = resamples > 1 ? std::sqrt(var / (resamples - 1)) : 0.0;
    h.ci_low = h.exponent - 2.0 * h.stderr_;
    h.ci_high = h.exponent + 2.0 * h.stderr_;
    return h;
}

/// |X(t_{r0 + lag}) − X(t_{r0})| for initial point i; separations in time.
template <int D>
std::pair<std::vector<double>, std::vector<std::vector<double>>> time_increments(const FlowEnsemble<D>& e,
                                                                                 std::size_t i, int r0,
                                                                                 const std::vector<int>& lags)
{
    std::vector<double> sep;
    std::vector<std::vector<double>> d;
    for (int lag : lags) {
        if (r0 + lag >= e.n_records) {
            throw Error("time lag exceeds the recorded window");
        }
        sep.push_back(e.record_time(r0 + lag) - e.record_time(r0));
        std::vector<double> v(e.n_paths);
        for (int q = 0; q < e.n_paths; ++q) {
            v[q] = e.valid(i, q) ? (e.x(i, q, r0 + lag) - e.x(i, q, r0)).norm()
                                 : std::numeric_limits<double>::quiet_NaN();
        }
        d.push_back(std::move(v));
    }
    return {sep, d};
}

/// |Z(x_j) − Z(x_0)| at record r for initial points x_1.. relative to x_0,
/// with Z = Y (`transformed`) or X.
template <int D>
std::pair<std::vector<double>, std::vector<std::vector<double>>> space_increments(const FlowEnsemble<D>& e, int r,
                                                                                  bool transformed)
{
    std::vector<double> sep;
    std::vector<std::vector<double>> d;
    for (std::size_t j = 1; j < e.x0s.size(); ++j) {
        sep.push_back((e.x0s[j] - e.x0s[0]).norm());
        std::vector<double> v(e.n_paths);
        for (int q = 0; q < e.n_paths; ++q) {
            const Vec<D> a = transformed ? e.y(j, q, r) : e.x(j, q, r);
            const Vec<D> b = transformed ? e.y(0, q, r) : e.x(0, q, r);
            v[q] = e.valid(j, q) && e.valid(0, q) ? (a - b).norm() : std::numeric_limits<double>::quiet_NaN();
        }
        d.push_back(std::move(v));
    }
    return {sep, d};
}

/// |X_{s+δ,t}(x) − X_{s,t}(x)| for start offsets δ; every window uses the step dt.
template <int D>
std::pair<std::vector<double>, std::vector<std::vector<double>>> start_time_increments(
    const ZvonkinTransform<D>& z, const NoiseStream<D>& ns, const Vec<D>& x, double s, double t, double dt,
    const std::vector<double>& offsets, int n_paths, std::uint64_t path_offset = 0)
{
    const auto steps = [&](double a) { return static_cast<int>(std::lround((t - a) / dt)); };
    const FlowWindow base{s, t, steps(s)};
    const auto ib = noise_index(ns, base);
    std::vector<double> sep;
    std::vector<std::vector<double>> d;
    for (double off : offsets) {
        const FlowWindow w{s + off, t, steps(s + off)};
        const auto iw = noise_index(ns, w);
        std::vector<double> v(n_paths);
        parallel_for(static_cast<std::size_t>(n_paths), [&](std::size_t q) {
            const auto a = transformed_walk(z, ib, path_offset + q, base, x);
            const auto b = transformed_walk(z, iw, path_offset + q, w, x);
            v[q] = a.ok && b.ok ? (a.x - b.x).norm() : std::numeric_limits<double>::quiet_NaN();
        });
        sep.push_back(off);
        d.push_back(std::move(v));
    }
    return {sep, d};
}

// ---------------------------------------------------------------------------
// Mollifier stability of the flow

template <int D>
struct FlowStabilityOptions {
    std::vector<int> n_list{4, 8, 16, 32};  // 0 means no mollification
    double p = 2.0;
    FlowWindow window{};
    std::vector<Vec<D>> x0s{Vec<D>::Zero()};
    int n_paths = 1000;
    std::uint64_t path_offset = 0;
    bool gradients = true;
    TransformOptions transform{};
    std::uint64_t bootstrap_seed = 2024;
};

struct FlowStabilityRow {
    int n = 0;
    double lambda = 0.0;
    Estimate path_distance;  // sup_x E sup_t |X^n − X|^p
    Estimate grad_distance;  // sup_x E sup_t ||∇X^n − ∇X||^p
    double c1theta_distance = 0.0;
};

struct FlowStabilityReport {
    double lambda = 0.0;
    std::vector<FlowStabilityRow> rows;
    bool path_nonincreasing = true;  // within 2 combined standard errors
    bool grad_nonincreasing = true;
    bool pde_nonincreasing = true;
};

/// Builds the transform for b_n = b ∗ ρ_n at the λ tuned for b and compares
/// same-noise flows with the unmollified one.
template <int D>
FlowStabilityReport stability_experiment(const DriftSpec<D>& b, const DiffusionCoefficient<D>& sigma,
                                         const Grid<D>& grid, const TimeGrid& time, const NoiseStream<D>& ns,
                                         const FlowStabilityOptions<D>& opt)
{
    b.exponents.validate(true);
    if (opt.n_paths < 1) {
        throw Error("stability experiment needs paths");
    }
    const auto base = build_transform(b, grid, time, sigma, opt.transform);
    FlowStabilityReport rep;
    rep.lambda = base.lambda();
    std::vector<ZvonkinTransform<D>> mollified;
    for (int n : opt.n_list) {
        if (n == 0) {
            mollified.push_back(base);
            continue;
        }
        TransformOptions to = opt.transform;
        to.fixed_lambda = base.lambda();
        mollified.push_back(build_transform(mollify_drift(b, n), grid, time, sigma, to));
    }
    const auto ix = noise_index(ns, opt.window);
    const std::size_t nx = opt.x0s.size();
    const std::size_t units = nx * static_cast<std::size_t>(opt.n_paths);
    const std::size_t nn = opt.n_list.size();
    std::vector<double> pd(units * nn), gd(units * nn);
    const WalkOptions wo{opt.gradients, JetMode::tables};
    parallel_for(units, [&](std::size_t u) {
        const Vec<D>& x = opt.x0s[u / opt.n_paths];
        const std::uint64_t path = opt.path_offset + u % opt.n_paths;
        std::vector<Vec<D>> xs(opt.window.n_steps + 1);
        std::vector<Mat<D>> gs(opt.gradients ? opt.window.n_steps + 1 : 0);
        const auto r0 = transformed_walk(base, ix, path, opt.window, x, wo,
                                         [&](int k, const Vec<D>&, const Vec<D>& xx, const Mat<D>& g, const Mat<D>&) {
                                             xs[k] = xx;
                                             if (opt.gradients) {
                                                 gs[k] = g;
                                             }
                                         });
        for (std::size_t j = 0; j < nn; ++j) {
            double sp = 0.0, sg = 0.0;
            const auto r = transformed_walk(
                mollified[j], ix, path, opt.window, x, wo,
                [&](int k, const Vec<D>&, const Vec<D>& xx, const Mat<D>& g, const Mat<D>&) {
                    sp = std::max(sp, (xx - xs[k]).norm());
                    if (opt.gradients) {
                        sg = std::max(sg, (g - gs[k]).norm());
                    }
                });
            const bool ok = r0.ok && r.ok;
            pd[u * nn + j] = ok ? std::pow(sp, opt.p) : std::numeric_limits<double>::quiet_NaN();
            gd[u * nn + j] = ok ? std::pow(sg, opt.p) : std::numeric_limits<double>::quiet_NaN();
        }
    });
    for (std::size_t j = 0; j < nn; ++j) {
        std::vector<std::vector<double>> ps(nx, std::vector<double>(opt.n_paths));
        std::vector<std::vector<double>> gsm(nx, std::vector<double>(opt.n_paths));
        for (std::size_t u = 0; u < units; ++u) {
            ps[u / opt.n_paths][u % opt.n_paths] = pd[u * nn + j];
            gsm[u / opt.n_paths][u % opt.n_paths] = gd[u * nn + j];
        }
        FlowStabilityRow row;
        row.n = opt.n_list[j];
        row.lambda = mollified[j].lambda();
        row.path_distance = sup_mean_bootstrap(ps, opt.bootstrap_seed);
        if (opt.gradients) {
            row.grad_distance = sup_mean_bootstrap(gsm, opt.bootstrap_seed);
        }
        row.c1theta_distance = opt.n_list[j] == 0
                                   ? 0.0
                                   : solution_distance(mollified[j].solution(), base.solution(),
                                                       b.exponents.theta, opt.transform.tuning.solver.pair_budget)
                                         .first;
        rep.rows.push_back(row);
    }
    const auto trend = [](const Estimate& a, const Estimate& b) {
        return b.value <= a.value + 2.0 * std::hypot(a.stderr_, b.stderr_);
    };
    for (std::size_t j = 1; j < rep.rows.size(); ++j) {
        const auto& a = rep.rows[j - 1];
        const auto& c = rep.rows[j];
        rep.path_nonincreasing = rep.path_nonincreasing && trend(a.path_distance, c.path_distance);
        rep.grad_nonincreasing = rep.grad_nonincreasing && trend(a.grad_distance, c.grad_distance);
        rep.pde_nonincreasing = rep.pde_nonincreasing && c.c1theta_distance <= a.c1theta_distance;
    }
    return rep;
}

}  // namespace roughsde
