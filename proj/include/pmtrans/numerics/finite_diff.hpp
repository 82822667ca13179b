#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include "pmtrans/errors.hpp"

namespace pmtrans {

/// Central-difference gradient of a scalar function of a flat parameter
/// vector: (f(θ + h·e_i) − f(θ − h·e_i)) / 2h for every coordinate.
template <typename F>
    requires std::invocable<F&, std::span<const float>>
std::vector<double> finite_diff_grad(F&& f, std::span<const float> theta, float h = 1e-3f) {
    std::vector<float> probe(theta.begin(), theta.end());
    std::vector<double> grad(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const float orig = probe[i];
        probe[i] = orig + h;
        const double up = static_cast<double>(f(std::span<const float>(probe)));
        probe[i] = orig - h;
        const double down = static_cast<double>(f(std::span<const float>(probe)));
        probe[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw OracleError("finite difference probe produced a non-finite value at coordinate " + std::to_string(i));
        }
        // The actual step is the float-rounded distance between the probes.
        const double step = static_cast<double>(orig + h) - static_cast<double>(orig - h);
        grad[i] = (up - down) / step;
    }
    return grad;
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vectors vanish.
template <typename A, typename B>
double relative_error(const A& a, const B& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    const double denom = std::sqrt(std::max(na, nb));
    return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

}  // namespace pmtrans
