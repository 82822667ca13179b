#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pmtrans/errors.hpp"

namespace pmtrans {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major float32 tensor. A rank-0 tensor holds one value.
struct Tensor {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::optional<std::vector<float>> grad;

    Tensor() = default;

    explicit Tensor(Shape s, float fill = 0.0f) : shape(std::move(s)), data(numel(shape), fill) {}

    Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape)) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
    }

    static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t axis) const { return shape.at(axis); }

    float& operator[](std::size_t i) { return data[i]; }
    float operator[](std::size_t i) const { return data[i]; }

    float& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    float item() const {
        if (data.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape));
        return data[0];
    }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void zero_grad() {
        if (requires_grad) grad.emplace(data.size(), 0.0f);
        else grad.reset();
    }
};

}  // namespace pmtrans
