#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace hmdr {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Allocator with a fixed 64-byte alignment. Vectorized kernels choose their
/// loop split from the buffer address, so a fixed alignment keeps results
/// independent of where the heap places a tensor.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlignment{64};

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept
    {
    }

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept
    {
        return true;
    }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, const std::vector<double>& data);
    Tensor(Shape shape, Storage data);
    Tensor(Shape shape, std::initializer_list<double> data);

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> span() noexcept { return data_; }
    std::span<const double> span() const noexcept { return data_; }
    Storage& vec() noexcept { return data_; }
    const Storage& vec() const noexcept { return data_; }
    std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Same data viewed under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;
    void fill(double value);

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    Storage data_;
};

} // namespace hmdr
