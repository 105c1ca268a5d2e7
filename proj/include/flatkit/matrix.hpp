#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace flatkit {

/// Dense row-major matrix of 64-bit reals.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const double> v);
  static Matrix diagonal(std::span<const double> v);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  Matrix transposed() const;

  Matrix& operator+=(const Matrix& o);
  Matrix& operator-=(const Matrix& o);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);

/// max_ij |a_ij - b_ij|; shapes must agree.
double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
double frobenius_norm(const Matrix& a);
double squared_frobenius(const Matrix& a);

/// Copy of columns [begin, begin + count).
Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t count);
Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t count);
void set_cols(Matrix& dst, std::size_t begin, const Matrix& src);
void set_rows(Matrix& dst, std::size_t begin, const Matrix& src);

/// Column-wise scaling a * diag(v).
Matrix scale_cols(const Matrix& a, std::span<const double> v);
/// Row-wise scaling diag(v) * a.
Matrix scale_rows(const Matrix& a, std::span<const double> v);

void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

}  // namespace flatkit
