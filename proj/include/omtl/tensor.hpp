#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "omtl/errors.hpp"

namespace omtl {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    friend bool operator==(const Shape&, const Shape&) = default;

    std::string str() const { return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")"; }
};

/// Row-major matrix of doubles. Vectors are 1xN rows.
class DenseTensor {
public:
    DenseTensor() = default;
    DenseTensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : shape_{rows, cols}, values_(rows * cols, fill) {}
    DenseTensor(std::size_t rows, std::size_t cols, std::vector<double> values)
        : shape_{rows, cols}, values_(std::move(values)) {
        if (values_.size() != rows * cols) {
            throw ShapeError("tensor: " + std::to_string(values_.size()) + " values do not fill shape " +
                             shape_.str());
        }
    }

    static DenseTensor row(std::span<const double> values) {
        return DenseTensor(1, values.size(), std::vector<double>(values.begin(), values.end()));
    }
    static DenseTensor scalar(double v) { return DenseTensor(1, 1, v); }

    Shape shape() const { return shape_; }
    std::size_t rows() const { return shape_.rows; }
    std::size_t cols() const { return shape_.cols; }
    std::size_t size() const { return values_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_.cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * shape_.cols + c]; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    std::span<double> data() { return values_; }
    std::span<const double> data() const { return values_; }
    std::span<const double> row_span(std::size_t r) const {
        return std::span<const double>(values_).subspan(r * shape_.cols, shape_.cols);
    }
    const std::vector<double>& values() const { return values_; }

    double item() const {
        if (values_.size() != 1) throw ShapeError("item: tensor of shape " + shape_.str() + " is not a scalar");
        return values_[0];
    }

    bool all_finite() const {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

    friend bool operator==(const DenseTensor&, const DenseTensor&) = default;

private:
    Shape shape_;
    std::vector<double> values_;
};

inline void require_shape(bool ok, const char* primitive, Shape a, Shape b) {
    if (!ok) {
        std::ostringstream msg;
        msg << primitive << ": incompatible shapes " << a.str() << " and " << b.str();
        throw ShapeError(msg.str());
    }
}

}  // namespace omtl
