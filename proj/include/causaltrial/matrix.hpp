#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace causaltrial {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::vector<double> column(std::size_t c) const {
        std::vector<double> out(rows_);
        for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
        return out;
    }

    void set_column(std::size_t c, std::span<const double> values) {
        detail::require(values.size() == rows_, "set_column: length mismatch");
        for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = values[r];
    }

    /// Rows picked in the given order.
    Matrix take_rows(std::span<const std::size_t> idx) const {
        Matrix out(idx.size(), cols_);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto src = row(idx[i]);
            std::copy(src.begin(), src.end(), out.row(i).begin());
        }
        return out;
    }

    Matrix take_cols(std::span<const std::size_t> idx) const {
        Matrix out(rows_, idx.size());
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t j = 0; j < idx.size(); ++j) out(r, j) = (*this)(r, idx[j]);
        return out;
    }

    /// Columns of `other` appended on the right.
    Matrix hstack(const Matrix& other) const {
        detail::require(other.rows_ == rows_, "hstack: row count mismatch");
        Matrix out(rows_, cols_ + other.cols_);
        for (std::size_t r = 0; r < rows_; ++r) {
            for (std::size_t c = 0; c < cols_; ++c) out(r, c) = (*this)(r, c);
            for (std::size_t c = 0; c < other.cols_; ++c) out(r, cols_ + c) = other(r, c);
        }
        return out;
    }

    const std::vector<double>& data() const noexcept { return data_; }
    std::vector<double>& data() noexcept { return data_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

template <class T>
std::vector<T> take(std::span<const T> xs, std::span<const std::size_t> idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(xs[i]);
    return out;
}

template <class T>
std::vector<T> take(const std::vector<T>& xs, std::span<const std::size_t> idx) {
    return take(std::span<const T>(xs), idx);
}

}  // namespace causaltrial
