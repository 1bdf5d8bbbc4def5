#pragma once

#include "roughsde/core.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace roughsde {

/// Uniform tensor grid on [-L, L]^D with spacing h.
template <int D>
class Grid {
public:
    Grid() = default;

    Grid(double half_width, double spacing) : half_width_(half_width), spacing_(spacing)
    {
        check_dimension<D>();
        if (!(half_width > 0.0) || !(spacing > 0.0) || !std::isfinite(half_width) ||
            !std::isfinite(spacing)) {
            throw Error("grid extent and spacing must be positive and finite");
        }
        const double cells = 2.0 * half_width / spacing;
        per_axis_ = static_cast<int>(std::lround(cells)) + 1;
        if (std::abs(cells - std::round(cells)) > 1e-9 * cells) {
            throw Error("grid spacing must divide the box width 2L");
        }
        size_ = 1;
        for (int a = 0; a < D; ++a) {
            size_ *= static_cast<std::size_t>(per_axis_);
        }
    }

    double half_width() const { return half_width_; }
    double spacing() const { return spacing_; }
    int per_axis() const { return per_axis_; }
    std::size_t size() const { return size_; }
    double cell_volume() const { return std::pow(spacing_, D); }

    double coord(int i) const { return -half_width_ + spacing_ * i; }

    std::array<int, D> multi_index(std::size_t flat) const
    {
        std::array<int, D> idx{};
        for (int a = 0; a < D; ++a) {
            idx[a] = static_cast<int>(flat % per_axis_);
            flat /= per_axis_;
        }
        return idx;
    }

    std::size_t flat_index(const std::array<int, D>& idx) const
    {
        std::size_t flat = 0;
        for (int a = D - 1; a >= 0; --a) {
            flat = flat * per_axis_ + static_cast<std::size_t>(idx[a]);
        }
        return flat;
    }

    /// Flat index of idx with every coordinate clamped into the box.
    std::size_t clamped_index(std::array<int, D> idx) const
    {
        for (int a = 0; a < D; ++a) {
            idx[a] = std::clamp(idx[a], 0, per_axis_ - 1);
        }
        return flat_index(idx);
    }

    Vec<D> node(std::size_t flat) const
    {
        const auto idx = multi_index(flat);
        Vec<D> x;
        for (int a = 0; a < D; ++a) {
            x[a] = coord(idx[a]);
        }
        return x;
    }

    bool contains(const Vec<D>& x) const
    {
        for (int a = 0; a < D; ++a) {
            if (std::abs(x[a]) > half_width_) {
                return false;
            }
        }
        return true;
    }

    /// Multilinear interpolation weights; off-grid points clamp to the box.
    struct Stencil {
        std::array<std::size_t, (1 << D)> index{};
        std::array<double, (1 << D)> weight{};
    };

    Stencil locate(const Vec<D>& x) const
    {
        std::array<int, D> base{};
        std::array<double, D> frac{};
        for (int a = 0; a < D; ++a) {
            double u = (std::clamp(x[a], -half_width_, half_width_) + half_width_) / spacing_;
            int i = static_cast<int>(std::floor(u));
            if (i >= per_axis_ - 1) {
                i = per_axis_ - 2;
            }
            if (i < 0) {
                i = 0;
            }
            base[a] = i;
            frac[a] = std::clamp(u - i, 0.0, 1.0);
        }
        Stencil s;
        for (int corner = 0; corner < (1 << D); ++corner) {
            std::array<int, D> idx{};
            double w = 1.0;
            for (int a = 0; a < D; ++a) {
                const int bit = (corner >> a) & 1;
                idx[a] = base[a] + bit;
                w *= bit ? frac[a] : 1.0 - frac[a];
            }
            s.index[corner] = flat_index(idx);
            s.weight[corner] = w;
        }
        return s;
    }

    /// Weights of the interpolant and of its spatial gradient. The gradient
    /// weights vanish along axes where x was clamped.
    struct StencilGrad {
        Stencil s;
        std::array<std::array<double, (1 << D)>, D> dweight{};
    };

    StencilGrad locate_with_gradient(const Vec<D>& x) const
    {
        StencilGrad g;
        g.s = locate(x);
        std::array<double, D> frac{};
        std::array<bool, D> inside{};
        for (int a = 0; a < D; ++a) {
            inside[a] = std::abs(x[a]) < half_width_;
            const double u = (std::clamp(x[a], -half_width_, half_width_) + half_width_) / spacing_;
            const int i = std::clamp(static_cast<int>(std::floor(u)), 0, per_axis_ - 2);
            frac[a] = std::clamp(u - i, 0.0, 1.0);
        }
        for (int corner = 0; corner < (1 << D); ++corner) {
            for (int a = 0; a < D; ++a) {
                if (!inside[a]) {
                    g.dweight[a][corner] = 0.0;
                    continue;
                }
                double w = ((corner >> a) & 1) ? 1.0 / spacing_ : -1.0 / spacing_;
                for (int b = 0; b < D; ++b) {
                    if (b != a) {
                        w *= ((corner >> b) & 1) ? frac[b] : 1.0 - frac[b];
                    }
                }
                g.dweight[a][corner] = w;
            }
        }
        return g;
    }

    bool operator==(const Grid& o) const
    {
        return half_width_ == o.half_width_ && spacing_ == o.spacing_;
    }

private:
    double half_width_ = 1.0;
    double spacing_ = 1.0;
    int per_axis_ = 3;
    std::size_t size_ = 0;
};

/// Uniform partition of [0, T] with M steps. M = 0 denotes a single slice at t = 0.
class TimeGrid {
public:
    TimeGrid() = default;

    TimeGrid(double horizon, int steps) : horizon_(horizon), steps_(steps)
    {
        if (steps < 0 || (steps > 0 && !(horizon > 0.0))) {
            throw Error("time grid needs T > 0 and M >= 1 (or M = 0 for a static slice)");
        }
    }

    double horizon() const { return horizon_; }
    int steps() const { return steps_; }
    int slices() const { return steps_ + 1; }
    double step() const { return steps_ == 0 ? 0.0 : horizon_ / steps_; }
    double time(int k) const { return steps_ == 0 ? 0.0 : horizon_ * k / steps_; }

    /// Slice index k and weight theta with t ~ (1 - theta) t_k + theta t_{k+1}.
    std::pair<int, double> locate(double t) const
    {
        if (steps_ == 0) {
            return {0, 0.0};
        }
        const double u = std::clamp(t / step(), 0.0, static_cast<double>(steps_));
        int k = static_cast<int>(std::floor(u));
        if (k >= steps_) {
            k = steps_ - 1;
        }
        return {k, u - k};
    }

    bool operator==(const TimeGrid& o) const
    {
        return horizon_ == o.horizon_ && steps_ == o.steps_;
    }

private:
    double horizon_ = 0.0;
    int steps_ = 0;
};

/// Samples of a (possibly vector-valued) field on a space-time grid.
/// Layout: values[(slice * nodes + node) * components + c].
template <int D>
class SampledField {
public:
    SampledField() = default;

    SampledField(Grid<D> grid, TimeGrid time, int components)
        : grid_(grid), time_(time), components_(components),
          values_(grid.size() * static_cast<std::size_t>(time.slices()) *
                      static_cast<std::size_t>(components),
                  0.0)
    {
        if (components < 1) {
            throw Error("a field needs at least one component");
        }
    }

    template <class Fn>
    static SampledField from_function(Grid<D> grid, TimeGrid time, int components, Fn&& fn)
    {
        SampledField f(grid, time, components);
        for (int k = 0; k < time.slices(); ++k) {
            const double t = time.time(k);
            for (std::size_t i = 0; i < grid.size(); ++i) {
                const Vec<D> x = grid.node(i);
                auto slot = f.at(k, i);
                fn(t, x, slot);
            }
        }
        return f;
    }

    const Grid<D>& grid() const { return grid_; }
    const TimeGrid& time() const { return time_; }
    int components() const { return components_; }
    std::size_t slice_size() const { return grid_.size() * static_cast<std::size_t>(components_); }

    std::span<double> slice(int k)
    {
        return {values_.data() + static_cast<std::size_t>(k) * slice_size(), slice_size()};
    }
    std::span<const double> slice(int k) const
    {
        return {values_.data() + static_cast<std::size_t>(k) * slice_size(), slice_size()};
    }

    std::span<double> at(int k, std::size_t node)
    {
        return {values_.data() + (static_cast<std::size_t>(k) * grid_.size() + node) * components_,
                static_cast<std::size_t>(components_)};
    }
    std::span<const double> at(int k, std::size_t node) const
    {
        return {values_.data() + (static_cast<std::size_t>(k) * grid_.size() + node) * components_,
                static_cast<std::size_t>(components_)};
    }

    double& operator()(int k, std::size_t node, int c)
    {
        return values_[(static_cast<std::size_t>(k) * grid_.size() + node) * components_ + c];
    }
    double operator()(int k, std::size_t node, int c) const
    {
        return values_[(static_cast<std::size_t>(k) * grid_.size() + node) * components_ + c];
    }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    /// Multilinear in space, linear in time; clamps outside the grid.
    void interpolate(double t, const Vec<D>& x, std::span<double> out) const
    {
        const auto st = grid_.locate(x);
        const auto [k, theta] = time_.locate(t);
        std::fill(out.begin(), out.end(), 0.0);
        const int k1 = time_.steps() == 0 ? k : k + 1;
        for (int corner = 0; corner < (1 << D); ++corner) {
            const double w = st.weight[corner];
            if (w == 0.0) {
                continue;
            }
            const auto a = at(k, st.index[corner]);
            const auto b = at(k1, st.index[corner]);
            for (int c = 0; c < components_; ++c) {
                out[c] += w * ((1.0 - theta) * a[c] + theta * b[c]);
            }
        }
    }

    double interpolate_scalar(double t, const Vec<D>& x) const
    {
        double v = 0.0;
        interpolate(t, x, std::span<double>(&v, 1));
        return v;
    }

    void require_finite() const
    {
        for (double v : values_) {
            if (!std::isfinite(v)) {
                throw Error("field contains non-finite values");
            }
        }
    }

    /// Columnar text export: header `t,x1..xd,v1..vk`, one row per (time, node),
    /// 17 significant digits.
    void write_csv(std::ostream& os) const
    {
        os << "t";
        for (int a = 0; a < D; ++a) {
            os << ",x" << (a + 1);
        }
        for (int c = 0; c < components_; ++c) {
            os << ",v" << (c + 1);
        }
        os << '\n';
        char buf[64];
        for (int k = 0; k < time_.slices(); ++k) {
            for (std::size_t i = 0; i < grid_.size(); ++i) {
                std::snprintf(buf, sizeof buf, "%.17g", time_.time(k));
                os << buf;
                const Vec<D> x = grid_.node(i);
                for (int a = 0; a < D; ++a) {
                    std::snprintf(buf, sizeof buf, ",%.17g", x[a]);
                    os << buf;
                }
                for (int c = 0; c < components_; ++c) {
                    std::snprintf(buf, sizeof buf, ",%.17g", (*this)(k, i, c));
                    os << buf;
                }
                os << '\n';
            }
        }
    }

private:
    Grid<D> grid_;
    TimeGrid time_;
    int components_ = 1;
    std::vector<double> values_;
};

/// Centered-difference gradient of a slice (one-sided at the box faces).
/// Output layout per node: out[c * D + a] = d v_c / d x_a.
template <int D>
void fd_gradient(const Grid<D>& grid, std::span<const double> v, int comps, std::span<double> out)
{
    const double h = grid.spacing();
    const int n = grid.per_axis();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto idx = grid.multi_index(i);
        for (int a = 0; a < D; ++a) {
            auto lo = idx;
            auto hi = idx;
            double span_h = 2.0 * h;
            if (idx[a] == 0) {
                hi[a] = 1;
                span_h = h;
            } else if (idx[a] == n - 1) {
                lo[a] = n - 2;
                span_h = h;
            } else {
                lo[a] -= 1;
                hi[a] += 1;
            }
            const std::size_t il = grid.flat_index(lo);
            const std::size_t ih = grid.flat_index(hi);
            for (int c = 0; c < comps; ++c) {
                out[i * comps * D + c * D + a] = (v[ih * comps + c] - v[il * comps + c]) / span_h;
            }
        }
    }
}

/// Formats a double with 17 significant digits.
inline std::string fmt17(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace roughsde
