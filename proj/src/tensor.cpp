#include "quadformer/tensor.hpp"

#include <cmath>
#include <sstream>

namespace qf {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(numel(shape_), fill)) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(values))) {
  if (data_->size() != numel(shape_)) {
    throw ShapeError("tensor: " + std::to_string(data_->size()) + " values for shape " +
                     to_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= shape_.size()) {
    throw ShapeError("dim " + std::to_string(i) + " out of range for " + to_string(shape_));
  }
  return shape_[i];
}

std::span<double> Tensor::mutable_values() {
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
  return *data_;
}

double Tensor::item() const {
  if (data_->size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

Tensor Tensor::with_shape(Shape shape) const {
  if (numel(shape) != size()) {
    throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

Tensor Tape::watch(const Tensor& value) {
  return append(value.detach(), {}, nullptr);
}

Tensor Tape::append(Tensor out, std::vector<std::size_t> inputs, Backward backward) {
  Node node;
  node.size = out.size();
  node.inputs = std::move(inputs);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  grads_.emplace_back();
  out.tape_ = this;
  out.node_ = nodes_.size() - 1;
  return out;
}

namespace {

Tape* common_tape(std::span<const Tensor* const> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape && tape != t->tape()) throw ContractError("op mixes tensors from two tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace

Tensor Tape::record(Tensor out, std::initializer_list<const Tensor*> inputs, Backward backward) {
  std::vector<const Tensor*> ptrs(inputs);
  Tape* tape = common_tape(ptrs);
  if (!tape) return out;
  std::vector<std::size_t> ids;
  ids.reserve(ptrs.size());
  for (const Tensor* t : ptrs) ids.push_back(t->tracked() ? t->node() : Tensor::kNoNode);
  return tape->append(std::move(out), std::move(ids), std::move(backward));
}

Tensor Tape::record(Tensor out, std::span<const Tensor> inputs, Backward backward) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& t : inputs) ptrs.push_back(&t);
  Tape* tape = common_tape(ptrs);
  if (!tape) return out;
  std::vector<std::size_t> ids;
  ids.reserve(ptrs.size());
  for (const Tensor* t : ptrs) ids.push_back(t->tracked() ? t->node() : Tensor::kNoNode);
  return tape->append(std::move(out), std::move(ids), std::move(backward));
}

void Tape::zero_grad() {
  for (auto& g : grads_) g.clear();
}

void Tape::backward(const Tensor& root) {
  if (root.tape() != this) throw ContractError("backward: root is not recorded on this tape");
  if (root.size() != 1 || !root.shape().empty()) {
    throw ContractError("backward: root must be a scalar, got shape " + to_string(root.shape()));
  }
  auto& seed = grads_[root.node()];
  if (seed.empty()) seed.assign(1, 0.0);
  seed[0] += 1.0;

  std::vector<std::span<double>> views;
  for (std::size_t id = root.node() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || grads_[id].empty()) continue;
    views.clear();
    for (std::size_t in : node.inputs) {
      if (in == Tensor::kNoNode) {
        views.emplace_back();
        continue;
      }
      auto& g = grads_[in];
      if (g.empty()) g.assign(nodes_[in].size, 0.0);
      views.emplace_back(g);
    }
    node.backward(grads_[id], views);
  }
}

std::vector<double> Tape::grad(const Tensor& t) const {
  if (t.tape() != this) return std::vector<double>(t.size(), 0.0);
  const auto& g = grads_[t.node()];
  if (g.empty()) return std::vector<double>(t.size(), 0.0);
  return g;
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

}  // namespace qf
