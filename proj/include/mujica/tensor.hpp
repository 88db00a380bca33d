// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace mujica {

/// Dense row-major tensor of doubles. Feature grids use (H, W, C) order with
/// the channel index fastest; matrices are (rows, cols).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), 0.0);
    }

    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    static Tensor full(std::vector<int> shape, double value) {
        Tensor t(std::move(shape));
        t.fill(value);
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<double> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        assert(count(t.shape_) == static_cast<std::int64_t>(values.size()));
        t.data_ = std::move(values);
        return t;
    }

    bool empty() const { return data_.empty(); }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    const std::vector<int>& shape() const { return shape_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int i, int j) {
        assert(rank() == 2);
        return data_[static_cast<size_t>(i) * shape_[1] + j];
    }
    double at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }

    double& at(int i, int j, int k) {
        assert(rank() == 3);
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    double at(int i, int j, int k) const { return const_cast<Tensor*>(this)->at(i, j, k); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(0.0); }

    double sum() const;
    double abs_max() const;
    bool all_finite() const;
    bool same_values(const Tensor& other) const; // bit-level equality

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = shape.empty() ? 0 : 1;
        for (int d : shape) n *= d;
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

std::string shape_str(const std::vector<int>& shape);

/// Explicit random stream. Every stochastic operation takes one of these;
/// nothing in the library touches global RNG state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
    std::int64_t index(std::int64_t n) {
        return std::uniform_int_distribution<std::int64_t>(0, n - 1)(engine_);
    }

    Tensor uniform_tensor(std::vector<int> shape, double lo, double hi);
    Tensor normal_tensor(std::vector<int> shape, double stddev);

    std::mt19937_64& engine() { return engine_; }
    std::string state() const;
    void restore(const std::string& state);

private:
    std::mt19937_64 engine_;
};

} // namespace mujica
