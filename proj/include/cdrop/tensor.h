#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdrop {

// Base for every error the library raises. `kind` drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  enum class Kind { kValidation, kIo };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(Kind::kValidation, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(Kind::kIo, what) {}
};

// Named row-major f32 tensor.
struct Tensor {
  std::string name;
  std::vector<int64_t> dims;
  std::vector<float> data;

  int64_t rank() const { return static_cast<int64_t>(dims.size()); }
  int64_t dim(std::size_t axis) const { return dims.at(axis); }
  std::size_t numel() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Product of dims; 0 for an empty dim list.
std::size_t element_count(std::span<const int64_t> dims);

// Dense row-major matrix. Used for every 2-D intermediate (attention maps,
// normalized features, merged token rows).
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ValidationError("matrix data size does not match " + std::to_string(rows_) + "x" +
                            std::to_string(cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  const std::vector<T>& data() const { return data_; }
  std::vector<T>& data() { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

// View a rank-2 tensor as a matrix (copies).
MatrixF to_matrix(const Tensor& t);

}  // namespace cdrop
