#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "d2t/errors.hpp"

namespace d2t {

/// Dense row-major tensor. Rank 1 and 2 are the only shapes the model uses;
/// elementwise ops are rank-agnostic.
template <typename T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s)
        : shape(std::move(s)), data(numel_of(shape), T(0)) {}

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::size_t> s, T v) {
        Tensor t(std::move(s));
        for (T& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(T v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor vec(std::vector<T> values) {
        Tensor t;
        t.shape = {values.size()};
        t.data = std::move(values);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }
    bool is_scalar() const { return numel() == 1; }

    std::size_t rows() const {
        if (ndim() != 2) throw ShapeMismatch("rows(): tensor is not 2-D");
        return shape[0];
    }
    std::size_t cols() const {
        if (ndim() != 2) throw ShapeMismatch("cols(): tensor is not 2-D");
        return shape[1];
    }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    T& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    T item() const {
        if (!is_scalar()) throw ShapeMismatch("item(): tensor is not scalar");
        return data[0];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (const T& v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void fill(T v) {
        for (T& x : data) x = v;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i > 0) os << ",";
            os << shape[i];
        }
        os << "]";
        return os.str();
    }
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeMismatch(std::string(op) + ": shape " + a.shape_str() + " vs " +
                            b.shape_str());
    }
}

} // namespace d2t
