#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace roiformer {

// Structured error types: shape/contract violations vs bad numeric values.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ValueError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Dense row-major tensor. [C,H,W] layout for feature maps, [rows,cols] for
// token matrices. Instantiated with float for training and double for the
// finite-difference certification path.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), T(0));
    }

    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor from(std::vector<int> s, std::vector<T> d) {
        if (count(s) != static_cast<int64_t>(d.size()))
            throw ShapeError("Tensor::from: data length does not match shape");
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(d);
        return t;
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError("Tensor: dimensions must be positive");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    // Rank-specific accessors; hot loops index data[] directly.
    T& operator()(int i) { return data[static_cast<size_t>(i)]; }
    T operator()(int i) const { return data[static_cast<size_t>(i)]; }
    T& operator()(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    T operator()(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    T& operator()(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    T operator()(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    T& operator()(int a, int b, int c, int d) {
        return data[((static_cast<size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }
    T operator()(int a, int b, int c, int d) const {
        return data[((static_cast<size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
}

// A learnable tensor with an additively accumulated gradient of equal shape.
template <typename T>
struct Parameter {
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.shape) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }

    // Uniform in +-1/sqrt(fan_in), the init used across the model.
    static Parameter uniform_init(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
        Tensor<T> v(std::move(shape));
        const T bound = T(1) / std::sqrt(static_cast<T>(fan_in > 0 ? fan_in : 1));
        std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                                    static_cast<double>(bound));
        for (auto& x : v.data) x = static_cast<T>(dist(rng));
        return Parameter(std::move(v));
    }
};

}  // namespace roiformer
