#pragma once

#include <span>
#include <utility>
#include <vector>

namespace dtr {

/// Natural cubic spline basis in truncated-power form.
///
/// With knots xi_1 < ... < xi_K the basis is {1, x, N_3, ..., N_K} where
///   N_{k+2}(x) = d_k(x) - d_{K-1}(x),
///   d_k(x)     = ((x - xi_k)_+^3 - (x - xi_K)_+^3) / (xi_K - xi_k).
/// Every basis function is linear outside [xi_1, xi_K], so the dimension
/// equals the number of knots. Inputs are rescaled to [0, 1] over the
/// boundary knots before evaluation.
class NaturalSplineBasis {
public:
    /// `knots` includes both boundary knots; at least two, strictly increasing.
    static NaturalSplineBasis from_knots(std::vector<double> knots);
    static NaturalSplineBasis build(std::span<const double> interior, std::pair<double, double> boundary);

    /// Values of all J basis functions at x (J = number of knots).
    [[nodiscard]] std::vector<double> evaluate(double x) const;

    /// Basis without the constant function, for models that carry their own
    /// intercept or none at all (proportional hazards). Size J - 1.
    [[nodiscard]] std::vector<double> evaluate_no_intercept(double x) const;

    [[nodiscard]] std::size_t dimension() const { return knots_.size(); }
    [[nodiscard]] const std::vector<double>& knots() const { return knots_; }
    [[nodiscard]] std::pair<double, double> boundary() const { return {knots_.front(), knots_.back()}; }

private:
    explicit NaturalSplineBasis(std::vector<double> knots);

    std::vector<double> knots_;
    std::vector<double> scaled_;
};

/// Knots at equally spaced quantiles of `values` (levels i/(n_interior+1))
/// with boundary knots at the minimum and maximum. Duplicate knots are dropped.
std::vector<double> quantile_knots(std::span<const double> values, int n_interior);

/// Knots at the given quantile levels of `values` plus explicit boundaries.
std::vector<double> quantile_knots_at(std::span<const double> values, std::span<const double> levels,
                                      std::pair<double, double> boundary);

} // namespace dtr
