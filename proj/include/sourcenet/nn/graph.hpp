#pragma once

// Dense tensors, named parameters, and a reverse-mode tape.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "sourcenet/errors.hpp"

namespace sourcenet::nn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

// Storage with a fixed alignment. Eigen starts vectorized reductions at the
// first aligned element, so with plain heap buffers a sum could depend on
// where malloc placed the data and training would not be reproducible.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct Tensor {
  Shape shape;
  Buffer<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, Buffer<T> d) : shape(std::move(s)), data(std::move(d)) { check(); }
  Tensor(Shape s, const std::vector<T>& d) : shape(std::move(s)), data(d.begin(), d.end()) { check(); }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(std::size_t i) const { return shape.at(i); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
  bool operator==(const Tensor&) const = default;
  std::vector<T> values() const { return {data.begin(), data.end()}; }

 private:
  void check() const {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw ShapeError("tensor data does not match shape " + shape_str(shape));
  }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

/// Row-major matrix view of a tensor whose elements are `rows x cols`.
template <class T>
MatMap<T> mat(Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
  return MatMap<T>(t.ptr(), rows, cols);
}
template <class T>
CMatMap<T> mat(const Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
  return CMatMap<T>(t.ptr(), rows, cols);
}

template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;  // weight decay applies (false for biases and norm gains)
};

/// Handle to a node on the tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    Param<T>* param = nullptr;
    std::function<void(const Tensor<T>& gout)> backward;
  };

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor<T> value, bool needs_grad = false) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    return push(std::move(n));
  }

  Var param(Param<T>& p) {
    Node n;
    n.value = p.value;
    n.needs_grad = true;
    n.param = &p;
    return push(std::move(n));
  }

  /// Adds a computed node. `backward` runs only if the node received a
  /// gradient and at least one input needs one.
  Var op(Tensor<T> value, std::initializer_list<Var> inputs,
         std::function<void(const Tensor<T>& gout)> backward) {
    return op(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var op(Tensor<T> value, const std::vector<Var>& inputs,
         std::function<void(const Tensor<T>& gout)> backward) {
    Node n;
    n.value = std::move(value);
    for (Var v : inputs) n.needs_grad = n.needs_grad || nodes_.at(v.id).needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  Tensor<T>& mutable_value(Var v) { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.data.empty(); }

  /// Gradient buffer for `v`, zero-allocated on first use.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }

  /// Reverse sweep from a scalar; parameter gradients are accumulated into
  /// each Param's `grad`.
  void backward(Var loss) {
    if (!loss.valid() || nodes_.empty()) throw NoTape("nothing recorded on the tape");
    if (nodes_.at(loss.id).value.size() != 1) throw ShapeError("backward needs a scalar");
    if (!nodes_[loss.id].needs_grad) throw NoTape("loss does not depend on any parameter");
    grad(loss)[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.data.empty()) continue;
      if (n.backward) n.backward(n.grad);
      if (n.param) {
        Param<T>& p = *n.param;
        if (p.grad.data.empty()) p.grad = Tensor<T>(p.value.shape);
        for (std::size_t k = 0; k < p.grad.data.size(); ++k) p.grad.data[k] += n.grad.data[k];
      }
    }
    backward_done_ = true;
  }

  bool backward_done() const { return backward_done_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace sourcenet::nn
