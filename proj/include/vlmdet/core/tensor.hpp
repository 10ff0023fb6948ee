#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "vlmdet/core/error.hpp"

namespace vlmdet {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold f32 or f64 values");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
class Tape;

namespace detail {

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something writes a gradient
  bool requires_grad = false;
  // Identity of the tape epoch that produced this node; 0 for leaves.
  std::uint64_t tape_epoch = 0;
  std::size_t op_index = 0;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

inline std::atomic<std::uint64_t>& epoch_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

}  // namespace detail

// Dense row-major tensor handle. Copies share storage (like a reference);
// use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from(Shape{}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  static constexpr DType dtype() { return dtype_of<T>(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  // Rows/cols view of the tensor as a matrix over its last axis.
  std::size_t cols() const { return ndim() == 0 ? 1 : node_->shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const {
    Tensor t = from(shape(), node_->data, requires_grad());
    return t;
  }
  Tensor detach() const { return from(shape(), node_->data, false); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
    }
    return from(std::move(s), node_->data, false);
  }

  bool same_storage(const Tensor& o) const { return node_ == o.node_; }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of differentiable operations. Constructing a tape makes it
// the active recorder for its scalar type on the current thread; destroying
// it restores the previous one. clear() starts a new epoch, which detaches
// every tensor the tape produced so far.
template <class T>
class Tape {
 public:
  struct Record {
    std::shared_ptr<detail::TensorNode<T>> output;
    std::function<void(const std::vector<T>& out_grad)> backward;
  };

  Tape() : previous_(active_slot()), epoch_(++detail::epoch_counter()) { active_slot() = this; }
  ~Tape() { active_slot() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  std::uint64_t epoch() const { return epoch_; }
  std::size_t size() const { return records_.size(); }

  void clear() {
    records_.clear();
    epoch_ = ++detail::epoch_counter();
  }

  std::size_t push(Record r) {
    records_.push_back(std::move(r));
    return records_.size() - 1;
  }

  // Walks the records from the loss backwards, visiting each once.
  void backward(const Tensor<T>& loss) {
    auto* node = loss.node();
    if (loss.numel() != 1) {
      throw TapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (node->tape_epoch != epoch_ || node->op_index >= records_.size() ||
        records_[node->op_index].output.get() != node) {
      throw TapeError("loss was not produced on the active tape (cleared or detached)");
    }
    node->ensure_grad();
    node->grad[0] += T(1);
    for (std::size_t i = node->op_index + 1; i-- > 0;) {
      const Record& r = records_[i];
      if (r.output->grad.empty()) continue;
      r.backward(r.output->grad);
    }
  }

 private:
  static Tape*& active_slot() {
    static thread_local Tape* slot = nullptr;
    return slot;
  }

  Tape* previous_;
  std::uint64_t epoch_;
  std::vector<Record> records_;
};

// Runs backward on the tape that is currently active for T.
template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) throw TapeError("backward() with no active tape");
  if (!loss.requires_grad()) throw TapeError("loss does not depend on any tensor requiring grad");
  tape->backward(loss);
}

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Accumulate g into the node's gradient if it participates in differentiation.
template <class T>
inline std::vector<T>* grad_sink(const std::shared_ptr<TensorNode<T>>& n) {
  if (!n || !n->requires_grad) return nullptr;
  n->ensure_grad();
  return &n->grad;
}

}  // namespace detail

// Builds an op output and, when a tape is active and an input needs grad,
// records the backward rule. Public so tests and model code can define
// custom differentiable operations.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(const std::vector<T>&)> backward_rule) {
  detail::check_finite(values, op);
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values), false);
  Tape<T>* tape = Tape<T>::active();
  if (tape != nullptr && detail::any_requires_grad<T>(inputs)) {
    out.set_requires_grad(true);
    out.node()->tape_epoch = tape->epoch();
    out.node()->op_index = tape->push({out.node_ptr(), std::move(backward_rule)});
  }
  return out;
}

}  // namespace vlmdet
