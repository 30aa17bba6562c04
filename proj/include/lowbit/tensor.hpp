#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lowbit {

using Shape = std::vector<int64_t>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense float32 tensor, row-major, shared-handle semantics.
///
/// A Tensor is a cheap handle onto shared storage; copies alias the same
/// values and gradient buffer. Values are treated as immutable once an op
/// has produced them: only initialization and the optimizer write through
/// `data_mut()`, and only between training steps. The gradient buffer is
/// allocated lazily on first accumulation, which lets the backward pass skip
/// ops that never fed the loss.
class Tensor {
  struct Impl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first touched
    bool requires_grad = false;
  };

 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<float> d(static_cast<size_t>(shape_numel(shape)), 0.0f);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    std::vector<float> d(static_cast<size_t>(shape_numel(shape)), value);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(float value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<const float> data() const { return impl_->data; }
  // Mutates the shared storage, not the handle; reserved for initialization
  // and optimizer updates between steps.
  std::span<float> data_mut() const { return impl_->data; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  /// Gradient buffer, zero-initialized on first access.
  std::span<float> grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
  }
  bool grad_allocated() const { return impl_ && !impl_->grad.empty(); }
  void clear_grad() const { impl_->grad.clear(); }

  float item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not a scalar");
    return impl_->data[0];
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

/// Fails fast on NaN/Inf so a diverging run names the op that produced it.
inline void check_finite(const char* op, std::span<const float> v) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericsError(std::string(op) + ": non-finite value at flat index " +
                          std::to_string(i));
    }
  }
}

inline void check_finite(const char* op, const Tensor& t) {
  check_finite(op, t.data());
}

/// Reverse-mode gradient tape.
///
/// Constructing a Tape makes it the active recording context for the current
/// thread; ops record a backward closure when any input requires a gradient.
/// `backward(loss)` seeds the loss gradient and runs the closures in reverse
/// order. A tape drives exactly one backward pass; rebuild the forward pass
/// for the next step.
class Tape {
 public:
  Tape() {
    prev_ = active_;
    active_ = this;
  }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(const char* op, std::function<void()> fn) {
    ops_.emplace_back(op, std::move(fn));
  }

  void backward(const Tensor& loss) {
    if (used_) throw TapeError("backward: tape already consumed, rebuild the forward pass");
    used_ = true;
    if (!loss.defined() || loss.numel() != 1)
      throw TapeError("backward: loss must be a defined scalar");
    if (!loss.requires_grad())
      throw TapeError("backward: loss is detached from the tape");
    loss.grad()[0] += 1.0f;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->second();
  }

  size_t size() const { return ops_.size(); }

 private:
  std::vector<std::pair<const char*, std::function<void()>>> ops_;
  bool used_ = false;
  Tape* prev_ = nullptr;
  inline static thread_local Tape* active_ = nullptr;
};

namespace detail {

inline bool grad_wanted(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace detail

}  // namespace lowbit
