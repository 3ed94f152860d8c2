#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace brimpr {

/// Dense row-major tensor of 64-bit floats. Construction validates that the
/// shape product matches the value count and that every entry is finite.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> values;

    Tensor() = default;

    Tensor(std::vector<int> shape_, std::vector<double> values_)
        : shape(std::move(shape_)), values(std::move(values_)) {
        validate();
    }

    static Tensor zeros(std::vector<int> shape_) {
        std::size_t n = checked_numel(shape_);
        return Tensor(std::move(shape_), std::vector<double>(n, 0.0));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor row_vector(std::vector<double> v) {
        int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }

    std::size_t numel() const { return values.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    bool is_scalar() const { return numel() == 1; }
    bool is_vector() const { return rank() == 1; }
    bool is_matrix() const { return rank() == 2; }

    int rows() const {
        require(is_matrix(), "rows() on non-matrix");
        return shape[0];
    }
    int cols() const {
        require(is_matrix(), "cols() on non-matrix");
        return shape[1];
    }

    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols() + c]; }

    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    std::string shape_str() const { return shape_to_string(shape); }

    static std::string shape_to_string(const std::vector<int>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << ",";
            os << s[i];
        }
        os << "]";
        return os.str();
    }

private:
    static void require(bool cond, const char* msg) {
        if (!cond) throw std::invalid_argument(msg);
    }

    static std::size_t checked_numel(const std::vector<int>& s) {
        if (s.empty()) throw std::invalid_argument("tensor shape must be non-empty");
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0)
                throw std::invalid_argument("tensor dims must be positive, got " +
                                            shape_to_string(s));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    void validate() const {
        std::size_t n = checked_numel(shape);
        if (n != values.size())
            throw std::invalid_argument("tensor shape " + shape_str() + " expects " +
                                        std::to_string(n) + " values, got " +
                                        std::to_string(values.size()));
        for (double v : values)
            if (!std::isfinite(v))
                throw std::invalid_argument("tensor contains a non-finite value");
    }
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a.values[i] != b.values[i]) return false;
    return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument("max_abs_diff: shapes differ " + a.shape_str() + " vs " +
                                    b.shape_str());
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.values[i] - b.values[i]));
    return m;
}

}  // namespace brimpr
