#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qf {

using Shape = std::vector<std::size_t>;

/// Thrown when tensor dimensions do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a caller breaks a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Thrown when a forward op produces NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown on malformed files or config text.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;

/// Dense row-major float64 array. Copies share storage; the optional tape
/// node makes the tensor a variable of the tape that produced it.
class Tensor {
 public:
  static constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

  /// Scalar zero.
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor from(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t size() const { return data_->size(); }

  std::span<const double> values() const& { return *data_; }
  std::span<const double> values() const&& = delete;  // would dangle
  /// Writable view; detaches from shared storage first.
  std::span<double> mutable_values();
  const double* data() const { return data_->data(); }

  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }
  bool tracked() const { return tape_ != nullptr; }

  /// Same values, no tape node.
  Tensor detach() const;
  /// Same storage viewed with another shape of equal element count.
  Tensor with_shape(Shape shape) const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = kNoNode;
};

/// Define-by-run record of differentiable operations. One tape per step;
/// tensors holding a node must not outlive the tape.
class Tape {
 public:
  /// Receives the output gradient and one writable gradient view per input.
  /// Views of constant inputs are empty.
  using Backward = std::function<void(std::span<const double> grad_out,
                                      std::span<const std::span<double>> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a leaf variable.
  Tensor watch(const Tensor& value);

  /// Records an op result. Returns `out` unchanged when no input is tracked.
  static Tensor record(Tensor out, std::initializer_list<const Tensor*> inputs, Backward backward);
  static Tensor record(Tensor out, std::span<const Tensor> inputs, Backward backward);

  /// Reverse sweep from a scalar root; gradients accumulate across calls.
  void backward(const Tensor& root);

  /// Gradient of the last backward root with respect to `t` (zeros if unreached).
  std::vector<double> grad(const Tensor& t) const;

  std::size_t size() const { return nodes_.size(); }
  void zero_grad();

 private:
  struct Node {
    std::size_t size = 0;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  Tensor append(Tensor out, std::vector<std::size_t> inputs, Backward backward);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

/// Throws NumericError naming `op` if any value is not finite.
void check_finite(const Tensor& t, const char* op);

}  // namespace qf
