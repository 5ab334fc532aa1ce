#include "hmdr/tensor.hpp"

#include "hmdr/error.hpp"

#include <algorithm>
#include <sstream>

namespace hmdr {

std::size_t shape_size(const Shape& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) {
            throw InvalidInput("negative dimension in shape " + shape_str(shape));
        }
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), Storage(data.begin(), data.end()))
{
}

Tensor::Tensor(Shape shape, std::initializer_list<double> data) : Tensor(std::move(shape), Storage(data))
{
}

Tensor::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data))
{
    if (data_.size() != shape_size(shape_)) {
        throw InvalidInput("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                           shape_str(shape_));
    }
}

Tensor Tensor::reshaped(Shape shape) const
{
    if (shape_size(shape) != data_.size()) {
        throw InvalidInput("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value)
{
    std::fill(data_.begin(), data_.end(), value);
}

} // namespace hmdr
