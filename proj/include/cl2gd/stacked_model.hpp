#ifndef CL2GD_STACKED_MODEL_HPP_
#define CL2GD_STACKED_MODEL_HPP_

#include <Eigen/Dense>
#include <cassert>

namespace cl2gd {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// The stacked iterate x = (x_1, ..., x_n) in R^{nd}, stored as a d x n
/// matrix with one column per client.
template <typename Scalar>
class StackedModel {
 public:
  StackedModel() = default;
  StackedModel(Eigen::Index n, Eigen::Index d) : blocks_(Matrix<Scalar>::Zero(d, n)) {}
  explicit StackedModel(Matrix<Scalar> blocks) : blocks_(std::move(blocks)) {}

  static StackedModel Zero(Eigen::Index n, Eigen::Index d) { return StackedModel(n, d); }

  /// Every block equal to `v`.
  static StackedModel Replicate(const Vector<Scalar>& v, Eigen::Index n) {
    return StackedModel(Matrix<Scalar>(v.replicate(1, n)));
  }

  Eigen::Index clients() const { return blocks_.cols(); }
  Eigen::Index dim() const { return blocks_.rows(); }

  auto block(Eigen::Index i) { return blocks_.col(i); }
  auto block(Eigen::Index i) const { return blocks_.col(i); }

  Matrix<Scalar>& blocks() { return blocks_; }
  const Matrix<Scalar>& blocks() const { return blocks_; }

  /// x-bar = (1/n) sum_i x_i.
  Vector<Scalar> average() const { return blocks_.rowwise().mean(); }

  /// Euclidean norm in R^{nd}.
  Scalar squaredNorm() const { return blocks_.squaredNorm(); }
  Scalar norm() const { return blocks_.norm(); }

  StackedModel& operator+=(const StackedModel& o) { blocks_ += o.blocks_; return *this; }
  StackedModel& operator-=(const StackedModel& o) { blocks_ -= o.blocks_; return *this; }
  StackedModel& operator*=(Scalar s) { blocks_ *= s; return *this; }

  friend StackedModel operator+(StackedModel a, const StackedModel& b) { return a += b; }
  friend StackedModel operator-(StackedModel a, const StackedModel& b) { return a -= b; }
  friend StackedModel operator*(Scalar s, StackedModel a) { return a *= s; }

  bool operator==(const StackedModel& o) const { return blocks_ == o.blocks_; }

 private:
  Matrix<Scalar> blocks_;
};

/// sum_i ||x_i - avg||^2
template <typename Scalar>
Scalar consensus_distance(const StackedModel<Scalar>& x) {
  return (x.blocks().colwise() - x.average()).squaredNorm();
}

}  // namespace cl2gd

#endif  // CL2GD_STACKED_MODEL_HPP_
