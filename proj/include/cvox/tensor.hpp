#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "cvox/core.hpp"

namespace cvox::ad {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

// Dense row-major tensor. Plain value type; all layout logic lives in the ops.
template <class T>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), T(0)) {}
    Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != numel(shape_))
            throw Error::contract("tensor data size does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data_) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    static Tensor uniform(Shape s, Rng& rng, T lo, T hi) {
        Tensor t(std::move(s));
        for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_[i]; }
    size_t rank() const { return shape_.size(); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](int64_t i) { return data_[i]; }
    const T& operator[](int64_t i) const { return data_[i]; }

    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    // metadata-only reshape; element count must be preserved
    Tensor reshaped(Shape s) const {
        if (numel(s) != size())
            throw Error::contract("reshape " + shape_str(shape_) + " -> " + shape_str(s));
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (const auto& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out = Tensor<U>(shape_);
        for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

  private:
    Shape shape_;
    std::vector<T> data_;
};

// double accumulation regardless of T; order is fixed so results are
// reproducible run to run
template <class T>
double dsum(const Tensor<T>& t) {
    double acc = 0.0;
    for (int64_t i = 0; i < t.size(); ++i) acc += static_cast<double>(t[i]);
    return acc;
}

template <class T>
double dmean(const Tensor<T>& t) {
    return t.size() ? dsum(t) / static_cast<double>(t.size()) : 0.0;
}

}  // namespace cvox::ad
