#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace uccl {

/// Allocates on 64-byte boundaries. Eigen kernels round differently depending on buffer
/// alignment, so fixed alignment keeps results independent of allocation history.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Row-major dense array of rank 1..4. Dimensions are stored outermost first.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(std::vector<int> shape, T fill = T{}) : shape_(std::move(shape)) {
        if (shape_.empty() || shape_.size() > 4) {
            throw std::invalid_argument("tensor rank must be 1..4");
        }
        std::size_t n = 1;
        for (int d : shape_) {
            if (d < 0) throw std::invalid_argument("negative tensor dimension");
            n *= static_cast<std::size_t>(d);
        }
        data_.assign(n, fill);
    }

    BasicTensor(std::initializer_list<int> shape, T fill = T{})
        : BasicTensor(std::vector<int>(shape), fill) {}

    const std::vector<int>& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& operator()(int i) { return data_[offset(i)]; }
    const T& operator()(int i) const { return data_[offset(i)]; }
    T& operator()(int i, int j) { return data_[offset(i, j)]; }
    const T& operator()(int i, int j) const { return data_[offset(i, j)]; }
    T& operator()(int i, int j, int k) { return data_[offset(i, j, k)]; }
    const T& operator()(int i, int j, int k) const { return data_[offset(i, j, k)]; }
    T& operator()(int i, int j, int k, int l) { return data_[offset(i, j, k, l)]; }
    const T& operator()(int i, int j, int k, int l) const { return data_[offset(i, j, k, l)]; }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool operator==(const BasicTensor& other) const = default;

    template <typename U>
    BasicTensor<U> cast() const {
        BasicTensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    /// Contiguous view of the slab at outermost index `b`.
    std::span<T> slab(int b) {
        const std::size_t n = data_.size() / static_cast<std::size_t>(shape_[0]);
        return std::span<T>(data_).subspan(static_cast<std::size_t>(b) * n, n);
    }
    std::span<const T> slab(int b) const {
        const std::size_t n = data_.size() / static_cast<std::size_t>(shape_[0]);
        return std::span<const T>(data_).subspan(static_cast<std::size_t>(b) * n, n);
    }

private:
    std::size_t offset(int i) const {
        assert(rank() == 1);
        return static_cast<std::size_t>(i);
    }
    std::size_t offset(int i, int j) const {
        assert(rank() == 2);
        return static_cast<std::size_t>(i) * shape_[1] + j;
    }
    std::size_t offset(int i, int j, int k) const {
        assert(rank() == 3);
        return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
    }
    std::size_t offset(int i, int j, int k, int l) const {
        assert(rank() == 4);
        return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
    }

    std::vector<int> shape_;
    AlignedVector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;
/// Integer class-index map, usually (B, H, W).
using LabelMap = BasicTensor<std::int32_t>;

inline std::string shape_string(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                                    " vs " + shape_string(b.shape()));
    }
}

/// Concatenates two tensors along the outermost axis.
template <typename T>
BasicTensor<T> concat_batch(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
        throw std::invalid_argument("concat_batch: trailing dims differ");
    }
    std::vector<int> shape = a.shape();
    shape[0] += b.dim(0);
    BasicTensor<T> out(shape);
    std::copy(a.values().begin(), a.values().end(), out.data());
    std::copy(b.values().begin(), b.values().end(), out.data() + a.size());
    return out;
}

/// Rows [begin, begin+count) along the outermost axis.
template <typename T>
BasicTensor<T> slice_batch(const BasicTensor<T>& a, int begin, int count) {
    std::vector<int> shape = a.shape();
    shape[0] = count;
    BasicTensor<T> out(shape);
    const std::size_t n = a.size() / static_cast<std::size_t>(a.dim(0));
    std::copy_n(a.data() + static_cast<std::size_t>(begin) * n, static_cast<std::size_t>(count) * n, out.data());
    return out;
}

}  // namespace uccl
