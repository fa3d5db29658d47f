#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace blab {

[[noreturn]] void fail(const std::string& msg);

namespace detail {

// std::vector that default-initializes (i.e. leaves doubles uninitialized)
// instead of zero-filling; op outputs that are fully overwritten skip one
// memory sweep per allocation.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  template <class U>
  void construct(U* p) noexcept(noexcept(::new (static_cast<void*>(p)) U)) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

using RawVec = std::vector<double, detail::DefaultInitAllocator<double>>;

// Dense row-major 64-bit float tensor. Plain value type; autodiff handles
// live in the Tape, not here.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(static_cast<size_t>(checked_numel(shape_))) {
    std::fill(data_.begin(), data_.end(), 0.0);
  }
  Tensor(std::vector<int> shape, const std::vector<double>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (static_cast<size_t>(checked_numel(shape_)) != data_.size())
      fail("Tensor: shape/data size mismatch");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  // Storage left uninitialized; caller overwrites every element.
  static Tensor uninit(std::vector<int> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.resize(static_cast<size_t>(checked_numel(t.shape_)));
    return t;
  }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t = uninit(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int numel() const { return static_cast<int>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  // NCHW-style accessors for the common ranks.
  double& at2(int i, int j) { return data_[static_cast<size_t>(i) * dim(1) + j]; }
  double at2(int i, int j) const { return data_[static_cast<size_t>(i) * dim(1) + j]; }
  double& at3(int c, int h, int w) {
    return data_[(static_cast<size_t>(c) * dim(1) + h) * dim(2) + w];
  }
  double at3(int c, int h, int w) const {
    return data_[(static_cast<size_t>(c) * dim(1) + h) * dim(2) + w];
  }
  double& at4(int n, int c, int h, int w) {
    return data_[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  double at4(int n, int c, int h, int w) const {
    return data_[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;
  bool all_finite() const;

 private:
  static int checked_numel(const std::vector<int>& shape);
  std::vector<int> shape_;
  RawVec data_;
};

std::string shape_to_string(const std::vector<int>& shape);

}  // namespace blab
