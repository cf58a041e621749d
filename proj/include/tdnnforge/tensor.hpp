#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tdnnforge/error.hpp"

namespace tdnnforge {

// Dense row-major tensor of 64-bit floats. The fixed layout contract
// (row-major, batch leading) keeps serialized checkpoints portable.
// All math is double precision; gradient checks at 1e-4 are not reliable
// in 32-bit.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    // 1-D / 2-D literal helpers, mostly for tests.
    static Tensor vec(std::initializer_list<double> values) {
        return Tensor({values.size()}, std::vector<double>(values));
    }

    static Tensor mat(std::initializer_list<std::initializer_list<double>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t size(std::size_t dim) const {
        assert(dim < shape_.size());
        return shape_[dim];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    double& operator[](std::size_t i) {
        assert(i < data_.size());
        return data_[i];
    }
    const double& operator[](std::size_t i) const {
        assert(i < data_.size());
        return data_[i];
    }

    double& operator()(std::size_t i, std::size_t j) {
        assert(shape_.size() == 2 && i < shape_[0] && j < shape_[1]);
        return data_[i * shape_[1] + j];
    }
    const double& operator()(std::size_t i, std::size_t j) const {
        assert(shape_.size() == 2 && i < shape_[0] && j < shape_[1]);
        return data_[i * shape_[1] + j];
    }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        assert(shape_.size() == 3 && i < shape_[0] && j < shape_[1] && k < shape_[2]);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const double& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        assert(shape_.size() == 3 && i < shape_[0] && j < shape_[1] && k < shape_[2]);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        assert(shape_.size() == 4 && i < shape_[0] && j < shape_[1] && k < shape_[2] &&
               l < shape_[3]);
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    const double& operator()(std::size_t i, std::size_t j, std::size_t k,
                             std::size_t l) const {
        assert(shape_.size() == 4 && i < shape_[0] && j < shape_[1] && k < shape_[2] &&
               l < shape_[3]);
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    // Pointer to the start of row i of a 2-D tensor.
    double* row(std::size_t i) {
        assert(shape_.size() == 2 && i < shape_[0]);
        return data_.data() + i * shape_[1];
    }
    const double* row(std::size_t i) const {
        assert(shape_.size() == 2 && i < shape_[0]);
        return data_.data() + i * shape_[1];
    }

    void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    std::string shape_str() const { return shape_string(shape_); }

    static std::string shape_string(const std::vector<std::size_t>& shape) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << "x";
            os << shape[i];
        }
        os << "]";
        return os.str();
    }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) {
            if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape));
            n *= e;
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline void require_shape(const Tensor& t, const std::vector<std::size_t>& shape,
                          const char* what) {
    if (t.shape() != shape) {
        throw DimensionError(std::string(what) + ": expected shape " +
                             Tensor::shape_string(shape) + ", got " + t.shape_str());
    }
}

}  // namespace tdnnforge
