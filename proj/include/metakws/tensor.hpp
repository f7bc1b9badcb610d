#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "metakws/errors.hpp"

namespace metakws {

using Shape = std::vector<std::size_t>;

/// Allocator whose value-initialization is default-initialization, so that
/// buffers about to be overwritten are not zero-filled first.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;

    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major tensor. Scalars are rank-0 (empty shape, one element).
template <class T>
class Tensor {
  public:
    using value_type = T;

    Tensor() : data_(1, T(0)) {}
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (data_.size() != shape_size(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                                 shape_str(shape_));
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    /// Contents unspecified; for outputs that are fully overwritten.
    static Tensor uninitialized(Shape shape) {
        Tensor t;
        t.data_ = Storage(shape_size(shape));
        t.shape_ = std::move(shape);
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T> vec() const { return {data_.begin(), data_.end()}; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    template <class U>
    Tensor<U> cast() const {
        auto out = Tensor<U>::uninitialized(shape_);
        std::copy(data_.begin(), data_.end(), out.data().begin());
        return out;
    }

    bool operator==(const Tensor& other) const = default;

  private:
    using Storage = std::vector<T, DefaultInitAllocator<T>>;

    Shape shape_;
    Storage data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace metakws
