#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fgc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float64 tensor. Copies share storage (handle semantics), so
// a tensor recorded on a tape and the caller's handle refer to the same
// buffers. Use clone() or detach() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data() const;
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  // Empty span when the tensor does not track gradients.
  std::span<const double> grad() const;
  std::span<double> mutable_grad() const;
  void zero_grad() const;

  Tensor detach() const;
  Tensor clone() const;
  bool shares_storage(const Tensor& other) const { return storage_ == other.storage_; }
  const void* storage_id() const { return storage_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> storage_;
};

// Ordered record of executed primitives. Constructing a Tape makes it the
// recording target for the current thread until it is destroyed; ops with at
// least one gradient-tracking input append a node to it.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
              BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and replays the nodes in reverse order. Grads of
  // every tensor on the tape are zeroed first. A tape can be replayed once.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  std::size_t replayed() const { return replayed_; }
  std::vector<std::string> ops() const;

 private:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
  bool consumed_ = false;
  std::size_t replayed_ = 0;
};

// Suspends recording for its lifetime (evaluation, bank maintenance).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// Convenience: replays the current thread's tape.
void backward(const Tensor& loss);

}  // namespace fgc
