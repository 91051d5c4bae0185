#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace melo {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using VectorF = Vector<float>;
using MatrixD = Matrix<double>;
using VectorD = Vector<double>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(std::span<const std::size_t> shape);

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

/// Dense row-major f32 array with an explicit shape. Used for images and for
/// anything crossing a file boundary; the math itself runs on Eigen matrices.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<float> data);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

/// Raw tensor file: "MELT", u32 rank, u32 dims, f32 little-endian payload.
void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

/// Binary (P5) or ASCII (P2) greymap, scaled to [0,1], shape {1, H, W}.
Tensor load_pgm(const std::filesystem::path& path);

/// Dispatches on extension: .pgm goes through load_pgm, anything else is a raw tensor.
Tensor load_image(const std::filesystem::path& path);

template <typename Scalar>
Matrix<Scalar> matmul(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_string(a) + " x " +
                     shape_string(b));
  }
  Matrix<Scalar> out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

template <typename Scalar>
Matrix<Scalar> softmax(const Matrix<Scalar>& x, int axis) {
  if (axis != 0 && axis != 1) {
    throw ShapeError("softmax: axis must be 0 or 1, got " + std::to_string(axis));
  }
  if (axis == 0) return softmax<Scalar>(Matrix<Scalar>(x.transpose()), 1).transpose();
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar peak = x.row(i).maxCoeff();
    Scalar total = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      out(i, j) = std::exp(x(i, j) - peak);
      total += out(i, j);
    }
    out.row(i) /= total;
  }
  return out;
}

template <typename Scalar>
Vector<Scalar> softmax(const Vector<Scalar>& x) {
  Matrix<Scalar> row = x.transpose();
  return softmax<Scalar>(row, 1).row(0).transpose();
}

/// Row-wise normalisation over the last axis, then gamma * xhat + beta.
template <typename Scalar>
Matrix<Scalar> layernorm(const Matrix<Scalar>& x, const Vector<Scalar>& gamma,
                         const Vector<Scalar>& beta, Scalar eps) {
  if (gamma.size() != x.cols() || beta.size() != x.cols()) {
    throw ShapeError("layernorm: gamma/beta " + shape_string(gamma) + "/" + shape_string(beta) +
                     " do not match input " + shape_string(x));
  }
  Matrix<Scalar> out(x.rows(), x.cols());
  const Scalar n = static_cast<Scalar>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Scalar mean = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) mean += x(i, j);
    mean /= n;
    Scalar var = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= n;
    const Scalar inv_std = Scalar(1) / std::sqrt(var + eps);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      out(i, j) = gamma(j) * ((x(i, j) - mean) * inv_std) + beta(j);
    }
  }
  return out;
}

namespace detail {
template <typename Scalar>
constexpr Scalar kGeluC = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
template <typename Scalar>
constexpr Scalar kGeluCubic = static_cast<Scalar>(0.044715);
}  // namespace detail

template <typename Scalar>
Scalar gelu(Scalar x) {
  using detail::kGeluC, detail::kGeluCubic;
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(kGeluC<Scalar> * (x + kGeluCubic<Scalar> * x * x * x)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  using detail::kGeluC, detail::kGeluCubic;
  const Scalar t = std::tanh(kGeluC<Scalar> * (x + kGeluCubic<Scalar> * x * x * x));
  const Scalar du = kGeluC<Scalar> * (Scalar(1) + Scalar(3) * kGeluCubic<Scalar> * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}

template <typename Scalar>
Matrix<Scalar> gelu(const Matrix<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return gelu(v); });
}

}  // namespace melo
