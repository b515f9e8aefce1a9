#ifndef CLOUDFUSE_TENSOR_HPP
#define CLOUDFUSE_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cloudfuse/errors.hpp"

namespace cloudfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ')';
    return os.str();
}

// Dense row-major tensor. Feature maps are rank 3 (C, H, W); convolution
// kernels are rank 4 (out, in, k, k); biases and norm parameters rank 1.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_)) {
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor chw(std::size_t c, std::size_t h, std::size_t w, T fill = T(0)) {
        return Tensor(Shape{c, h, w}, fill);
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Rank-3 accessors.
    std::size_t channels() const { return shape_.at(0); }
    std::size_t height() const { return shape_.at(1); }
    std::size_t width() const { return shape_.at(2); }
    std::size_t plane() const { return shape_.at(1) * shape_.at(2); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t c, std::size_t y, std::size_t x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    const T& at(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    std::span<T> channel(std::size_t c) { return {data_.data() + c * plane(), plane()}; }
    std::span<const T> channel(std::size_t c) const { return {data_.data() + c * plane(), plane()}; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(*this, o, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

    static void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
        if (a.shape_ != b.shape_) {
            throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape_) + " vs " +
                             shape_str(b.shape_));
        }
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs(const Tensor<T>& t) {
    T m = 0;
    for (T v : t.values()) m = std::max(m, std::abs(v));
    return m;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T>::require_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_TENSOR_HPP
