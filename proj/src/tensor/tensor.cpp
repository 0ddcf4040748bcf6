#include "fgc/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "fgc/error.hpp"

namespace fgc {

namespace {
thread_local Tape* active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : storage_(std::make_shared<Storage>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  storage_->shape = std::move(shape);
  storage_->data = std::move(values);
  set_requires_grad(requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return storage_ ? storage_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->data;
}

std::span<double> Tensor::mutable_data() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  }
  return storage_->data[0];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!storage_) throw ContractError("use of an undefined tensor");
  storage_->requires_grad = flag;
  if (flag) {
    storage_->grad.assign(storage_->data.size(), 0.0);
  } else {
    storage_->grad.clear();
    storage_->grad.shrink_to_fit();
  }
}

std::span<const double> Tensor::grad() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->grad;
}

std::span<double> Tensor::mutable_grad() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->grad;
}

void Tensor::zero_grad() const {
  if (storage_) std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), storage_->data, false); }

Tensor Tensor::clone() const {
  Tensor t(shape(), storage_->data, requires_grad());
  if (requires_grad()) t.storage_->grad = storage_->grad;
  return t;
}

Tape::Tape() : previous_(active_tape) { active_tape = this; }

Tape::~Tape() { active_tape = previous_; }

Tape* Tape::current() { return active_tape; }

void Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
                  BackwardFn backward) {
  if (consumed_) throw ContractError("recording onto a tape that was already replayed");
  nodes_.push_back(Node{std::string(op), std::move(inputs), std::move(output),
                        std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward called twice on the same tape");
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward on a loss that does not depend on any tracked tensor");
  }
  consumed_ = true;
  // Outputs recorded here were born with zeroed grads; only the other inputs
  // (parameters, leaves) may carry stale ones. Each is cleared once.
  std::unordered_set<const void*> seen;
  for (const Node& node : nodes_) seen.insert(node.output.storage_id());
  for (Node& node : nodes_) {
    for (Tensor& in : node.inputs) {
      if (seen.insert(in.storage_id()).second) in.zero_grad();
    }
  }
  Tensor seed = loss;
  seed.mutable_grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
    ++replayed_;
  }
}

std::vector<std::string> Tape::ops() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const Node& n : nodes_) names.push_back(n.op);
  return names;
}

NoGradGuard::NoGradGuard() : saved_(active_tape) { active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { active_tape = saved_; }

void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (!tape) throw ContractError("backward without an active tape");
  tape->backward(loss);
}

}  // namespace fgc
