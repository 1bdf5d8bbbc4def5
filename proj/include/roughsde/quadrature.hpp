#pragma once

#include <boost/math/quadrature/gauss.hpp>

#include <vector>

namespace roughsde {

struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/// N-point Gauss-Legendre rule mapped to [a, b], nodes in increasing order.
template <unsigned N>
QuadratureRule gauss_legendre(double a, double b)
{
    using Rule = boost::math::quadrature::gauss<double, N>;
    const auto& abscissa = Rule::abscissa();
    const auto& weight = Rule::weights();
    QuadratureRule r;
    const double mid = 0.5 * (a + b);
    const double half = 0.5 * (b - a);
    // Boost stores the non-negative half of the symmetric rule.
    for (std::size_t i = abscissa.size(); i-- > 0;) {
        if (abscissa[i] == 0.0) {
            continue;
        }
        r.nodes.push_back(mid - half * abscissa[i]);
        r.weights.push_back(half * weight[i]);
    }
    for (std::size_t i = 0; i < abscissa.size(); ++i) {
        r.nodes.push_back(mid + half * abscissa[i]);
        r.weights.push_back(half * weight[i]);
    }
    return r;
}

/// Composite Simpson weights on [a, b] with `panels` (even count forced) subintervals.
inline QuadratureRule composite_simpson(double a, double b, int panels)
{
    if (panels % 2 != 0) {
        ++panels;
    }
    QuadratureRule r;
    const double h = (b - a) / panels;
    for (int i = 0; i <= panels; ++i) {
        r.nodes.push_back(a + i * h);
        double w = (i == 0 || i == panels) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        r.weights.push_back(w * h / 3.0);
    }
    return r;
}

/// Composite trapezoid of samples on a uniform grid with spacing h.
inline double trapezoid(const std::vector<double>& y, double h)
{
    if (y.size() < 2) {
        return 0.0;
    }
    double s = 0.5 * (y.front() + y.back());
    for (std::size_t i = 1; i + 1 < y.size(); ++i) {
        s += y[i];
    }
    return s * h;
}

}  // namespace roughsde
