#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "san/error.hpp"

namespace san {

/// Dense row-major shape. Most tensors are NCHW; linear layers use (N, F)
/// and scalars use {1}.
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<int> dims) : dims_(dims) {}
    explicit Shape(std::vector<int> dims) : dims_(std::move(dims)) {}

    int rank() const noexcept { return static_cast<int>(dims_.size()); }
    int operator[](int i) const { return dims_.at(static_cast<std::size_t>(i)); }
    const std::vector<int>& dims() const noexcept { return dims_; }

    std::size_t numel() const noexcept {
        std::size_t n = 1;
        for (int d : dims_) n *= static_cast<std::size_t>(d);
        return dims_.empty() ? 0 : n;
    }

    bool operator==(const Shape&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
        os << ')';
        return os.str();
    }

    // NCHW accessors; valid only for rank-4 shapes.
    int n() const { return dims_.at(0); }
    int c() const { return dims_.at(1); }
    int h() const { return dims_.at(2); }
    int w() const { return dims_.at(3); }

private:
    std::vector<int> dims_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* where) {
    if (!(a == b)) throw ShapeError(std::string(where) + ": " + a.str() + " vs " + b.str());
}

/// 64-byte aligned allocator. Eigen's vectorized kernels choose their
/// head/tail split from the buffer address, so a fixed alignment keeps
/// floating-point results independent of where the heap put the data.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}
    Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) { check_size(); }
    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check_size();
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    Buffer<T>& vec() noexcept { return data_; }
    const Buffer<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    const T& at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

    std::size_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const {
        if (s.numel() != data_.size()) throw ShapeError("reshape " + shape_.str() + " -> " + s.str());
        return Tensor(std::move(s), data_);
    }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, Buffer<U>(data_.begin(), data_.end()));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    /// One sample of an NCHW batch, returned as a 1×C×H×W tensor.
    Tensor sample(int n) const {
        const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_[0]);
        std::vector<int> dims = shape_.dims();
        dims[0] = 1;
        return Tensor(Shape(dims), Buffer<T>(data_.begin() + n * stride, data_.begin() + (n + 1) * stride));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    void check_size() const {
        if (data_.size() != shape_.numel())
            throw ShapeError("tensor data size " + std::to_string(data_.size()) + " for shape " + shape_.str());
    }

    Shape shape_;
    Buffer<T> data_;
};

/// Stacks equally shaped 1×... tensors into an N×... batch.
template <class T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
    if (items.empty()) throw ShapeError("stack_batch: no items");
    std::vector<int> dims = items[0].shape().dims();
    const int per = dims[0];
    dims[0] = per * static_cast<int>(items.size());
    Buffer<T> out;
    out.reserve(items[0].size() * items.size());
    for (const auto& t : items) {
        std::vector<int> d = t.shape().dims();
        d[0] = per;
        require_same_shape(Shape(d), items[0].shape(), "stack_batch");
        out.insert(out.end(), t.vec().begin(), t.vec().end());
    }
    return Tensor<T>(Shape(dims), std::move(out));
}

template <class T, class Rng>
Tensor<T> randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
    return t;
}

template <class T, class Rng>
Tensor<T> rand_uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace san
