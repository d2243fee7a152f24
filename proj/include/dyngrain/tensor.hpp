#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dyngrain {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised for incompatible shapes; the message names every shape involved.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a numeric precondition fails (non-finite input, bad range).
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until an adjoint reaches this node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Dense row-major f32 tensor. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor scalar(float v) { return Tensor(Shape{1}, v); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  /// Extent of axis `axis`; negative values count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;

  std::span<const float> data() const;
  /// Direct write access. Only meaningful for leaves or outside a recorded step.
  std::span<float> mutable_data();
  float item() const;
  float operator[](std::int64_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const { return clone(); }

  const detail::NodePtr& node() const { return node_; }
  static Tensor wrap(detail::NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  detail::NodePtr node_;
};

using BackwardFn = std::function<void(detail::Node& out)>;

/// Records one adjoint rule per op. One tape per training step; backward()
/// consumes it and clears it so no gradient can read stale entries.
class Tape {
 public:
  static Tape& active();

  void record(detail::NodePtr output, std::vector<detail::NodePtr> inputs, BackwardFn fn);
  void backward(const Tensor& root);
  void clear();
  std::size_t size() const { return entries_.size(); }
  std::uint64_t epoch() const { return epoch_; }

 private:
  struct Entry {
    detail::NodePtr output;
    std::vector<detail::NodePtr> inputs;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::uint64_t epoch_ = 0;
};

bool grad_enabled();

/// Disables recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void backward(const Tensor& root);

/// Builds an op result and registers `fn` when any input is differentiable.
Tensor make_result(Shape shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                   BackwardFn fn);
Tensor make_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                   BackwardFn fn);

}  // namespace dyngrain
