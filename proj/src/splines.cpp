#include "dtr/splines.hpp"

#include "dtr/errors.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>

namespace dtr {

NaturalSplineBasis::NaturalSplineBasis(std::vector<double> knots) : knots_(std::move(knots)) {
    const double lo = knots_.front();
    const double width = knots_.back() - lo;
    scaled_.reserve(knots_.size());
    for (double k : knots_) scaled_.push_back((k - lo) / width);
}

NaturalSplineBasis NaturalSplineBasis::from_knots(std::vector<double> knots) {
    if (knots.size() < 2) throw ConfigError("natural spline needs at least 2 knots");
    for (std::size_t i = 0; i < knots.size(); ++i) {
        if (!std::isfinite(knots[i])) throw ConfigError("spline knots must be finite");
        if (i > 0 && !(knots[i] > knots[i - 1])) {
            throw ConfigError(fmt::format("spline knots must be strictly increasing (knot {} = {} after {})", i,
                                          knots[i], knots[i - 1]));
        }
    }
    return NaturalSplineBasis(std::move(knots));
}

NaturalSplineBasis NaturalSplineBasis::build(std::span<const double> interior, std::pair<double, double> boundary) {
    std::vector<double> knots;
    knots.reserve(interior.size() + 2);
    knots.push_back(boundary.first);
    knots.insert(knots.end(), interior.begin(), interior.end());
    knots.push_back(boundary.second);
    return from_knots(std::move(knots));
}

std::vector<double> NaturalSplineBasis::evaluate(double x) const {
    const std::size_t k = scaled_.size();
    const double u = (x - knots_.front()) / (knots_.back() - knots_.front());
    std::vector<double> out(k);
    out[0] = 1.0;
    out[1] = u;
    if (k == 2) return out;

    auto cube_plus = [](double v) { return v > 0.0 ? v * v * v : 0.0; };
    const double last = scaled_[k - 1];
    const double tail = cube_plus(u - last);
    auto d = [&](std::size_t j) { return (cube_plus(u - scaled_[j]) - tail) / (last - scaled_[j]); };
    const double d_penultimate = d(k - 2);
    for (std::size_t j = 0; j + 2 < k; ++j) out[j + 2] = d(j) - d_penultimate;
    return out;
}

std::vector<double> NaturalSplineBasis::evaluate_no_intercept(double x) const {
    auto full = evaluate(x);
    full.erase(full.begin());
    return full;
}

namespace {

double sorted_quantile(const std::vector<double>& sorted, double level) {
    // linear interpolation between order statistics
    const double pos = level * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

} // namespace

std::vector<double> quantile_knots_at(std::span<const double> values, std::span<const double> levels,
                                      std::pair<double, double> boundary) {
    if (values.empty()) throw ConfigError("cannot place knots on an empty sample");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> knots{boundary.first};
    for (double level : levels) {
        const double k = sorted_quantile(sorted, level);
        if (k > knots.back() && k < boundary.second) knots.push_back(k);
    }
    if (boundary.second > knots.back()) knots.push_back(boundary.second);
    return knots;
}

std::vector<double> quantile_knots(std::span<const double> values, int n_interior) {
    if (values.empty()) throw ConfigError("cannot place knots on an empty sample");
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    std::vector<double> levels;
    for (int i = 1; i <= n_interior; ++i) levels.push_back(static_cast<double>(i) / (n_interior + 1));
    return quantile_knots_at(values, levels, {*mn, *mx});
}

} // namespace dtr
