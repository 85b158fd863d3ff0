#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <vector>

#include "vseg/common.hpp"

namespace vseg {

// Dense row-major tensor. Axis conventions by context:
//   volumes        (Z, H, W)
//   one-hot maps   (C, Z, H, W)
//   network feats  (N, Z, H, W, C)   -- channels innermost for SIMD
template <typename T>
class Tensor {
 public:
  struct Uninitialized {};  // tag: caller promises to overwrite every element

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape, T fill = T(0))
      : shape_(std::move(shape)), size_(checked_size(shape_)), data_(alloc(size_)) {
    std::fill_n(data_.get(), size_, fill);
  }
  Tensor(std::vector<int64_t> shape, Uninitialized)
      : shape_(std::move(shape)), size_(checked_size(shape_)), data_(alloc(size_)) {}

  Tensor(const Tensor& o) : shape_(o.shape_), size_(o.size_), data_(alloc(o.size_)) {
    std::memcpy(data_.get(), o.data_.get(), size_t(size_) * sizeof(T));
  }
  Tensor(Tensor&&) noexcept = default;
  Tensor& operator=(const Tensor& o) {
    if (this != &o) *this = Tensor(o);
    return *this;
  }
  Tensor& operator=(Tensor&&) noexcept = default;

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor uninit(std::vector<int64_t> shape) {
    return Tensor(std::move(shape), Uninitialized{});
  }

  int rank() const { return int(shape_.size()); }
  int64_t dim(int i) const { return shape_[size_t(i)]; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }

  T& operator[](int64_t i) { return data_[i]; }
  const T& operator[](int64_t i) const { return data_[i]; }

  template <class... I>
  T& at(I... idx) {
    return data_[size_t(offset(idx...))];
  }
  template <class... I>
  const T& at(I... idx) const {
    return data_[size_t(offset(idx...))];
  }

  template <class... I>
  int64_t offset(I... idx) const {
    const std::array<int64_t, sizeof...(I)> ix{int64_t(idx)...};
    int64_t off = 0;
    for (size_t d = 0; d < ix.size(); ++d) off = off * shape_[d] + ix[d];
    return off;
  }

  void fill(T v) { std::fill_n(data_.get(), size_, v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Reinterprets the flat buffer under a new shape of identical size (copies).
  Tensor reshaped(std::vector<int64_t> shape) const {
    check_arg(checked_size(shape) == size(), "reshape: element count mismatch");
    Tensor out(*this);
    out.shape_ = std::move(shape);
    return out;
  }

 private:
  static int64_t checked_size(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      check_arg(d >= 1, "tensor dims must be >= 1");
      n *= d;
    }
    return n;
  }

  static std::unique_ptr<T[]> alloc(int64_t n) { return std::unique_ptr<T[]>(new T[size_t(n)]); }

  std::vector<int64_t> shape_;
  int64_t size_ = 0;
  std::unique_ptr<T[]> data_;
};

}  // namespace vseg
