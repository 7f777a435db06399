#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "naic/rng.hpp"

namespace naic {

// Dense row-major tensor of 64-bit reals. Immutable by convention once a
// graph node owns it; shape product always equals data size.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int> shape_, std::vector<double> data_);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor scalar(double value);
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);
    static Tensor identity(int n);

    int64_t numel() const;
    bool is_scalar() const { return numel() == 1; }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    // 2-D accessors; valid only when shape.size() == 2.
    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }
    double& at(int r, int c) { return data[static_cast<size_t>(r) * static_cast<size_t>(cols()) + static_cast<size_t>(c)]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * static_cast<size_t>(cols()) + static_cast<size_t>(c)]; }
    std::span<const double> row(int r) const { return {data.data() + static_cast<size_t>(r) * static_cast<size_t>(cols()), static_cast<size_t>(cols())}; }
    std::span<double> row(int r) { return {data.data() + static_cast<size_t>(r) * static_cast<size_t>(cols()), static_cast<size_t>(cols())}; }

    bool all_finite() const;
    double max_abs() const;

    std::string shape_str() const;
};

std::string shape_str(std::span<const int> shape);
int64_t shape_numel(std::span<const int> shape);

// Max |a-b| over all elements; throws on shape mismatch.
double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace naic
