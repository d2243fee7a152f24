#include "dyngrain/tensor.hpp"

#include <sstream>

namespace dyngrain {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

detail::Node& deref(const detail::NodePtr& n) {
  if (!n) throw std::logic_error("use of undefined tensor");
  return *n;
}

thread_local bool g_grad_enabled = true;

}  // namespace

Tensor::Tensor(Shape shape, float fill) {
  check_shape(shape);
  node_ = std::make_shared<detail::Node>();
  node_->data.assign(static_cast<std::size_t>(dyngrain::numel(shape)), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> data) {
  check_shape(shape);
  if (static_cast<std::int64_t>(data.size()) != dyngrain::numel(shape)) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

const Shape& Tensor::shape() const { return deref(node_).shape; }

std::int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(deref(node_).data.size()); }

std::span<const float> Tensor::data() const { return deref(node_).data; }
std::span<float> Tensor::mutable_data() { return deref(node_).data; }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single element, shape " + to_string(shape()));
  return deref(node_).data[0];
}

bool Tensor::requires_grad() const { return deref(node_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  deref(node_).requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const {
  const auto& n = deref(node_);
  return !n.grad.empty() && n.grad.size() == n.data.size();
}

std::span<const float> Tensor::grad() const { return deref(node_).grad; }

std::span<float> Tensor::mutable_grad() {
  auto& n = deref(node_);
  n.ensure_grad();
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = deref(node_);
  if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
  const auto& n = deref(node_);
  return Tensor(n.shape, n.data);
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(detail::NodePtr output, std::vector<detail::NodePtr> inputs, BackwardFn fn) {
  entries_.push_back(Entry{std::move(output), std::move(inputs), std::move(fn)});
}

void Tape::backward(const Tensor& root) {
  if (!root.defined()) throw std::logic_error("backward on undefined tensor");
  if (root.numel() != 1) {
    throw ShapeError("backward root must be scalar, got shape " + to_string(root.shape()));
  }
  auto& r = *root.node();
  r.ensure_grad();
  r.grad[0] += 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& out = *it->output;
    if (out.grad.empty()) continue;  // not reachable from root
    it->fn(out);
  }
  clear();
}

void Tape::clear() {
  entries_.clear();
  ++epoch_;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& root) { Tape::active().backward(root); }

namespace {

template <typename Range>
Tensor make_result_impl(Shape shape, std::vector<float> data, const Range& inputs, BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return out;
  out.set_requires_grad(true);
  std::vector<detail::NodePtr> nodes;
  nodes.reserve(inputs.size());
  for (const auto& t : inputs) nodes.push_back(t.node());
  Tape::active().record(out.node(), std::move(nodes), std::move(fn));
  return out;
}

}  // namespace

Tensor make_result(Shape shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                   BackwardFn fn) {
  return make_result_impl(std::move(shape), std::move(data), inputs, std::move(fn));
}

Tensor make_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                   BackwardFn fn) {
  return make_result_impl(std::move(shape), std::move(data), inputs, std::move(fn));
}

}  // namespace dyngrain
