#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "tweo/common.hpp"
#include "tweo/rng.hpp"

namespace tweo {

/**
 * Dense row-major tensor that doubles as a handle into the autodiff graph.
 *
 * Every op allocates a fresh node; nodes hold shared_ptr references to their
 * parents, so the recorded graph stays alive as long as some downstream
 * handle does. Node creation order (a monotone sequence id) is a valid
 * topological order by construction, which is what backward() relies on.
 *
 * T is float (training storage) or double (gradient checks, diagnostics).
 */
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> val;
  std::vector<T> grad;  // sized on demand during backward
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> back;  // accumulates into parents' grad

  size_t numel() const { return val.size(); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), T(0));
  }
};

uint64_t next_node_seq();

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s) { return full(s, T(0)); }
  static Tensor full(const Shape& s, T v);
  static Tensor from(const Shape& s, std::vector<T> data);
  static Tensor scalar(T v) { return from({1}, {v}); }
  static Tensor randn(const Shape& s, Rng& rng, double mean = 0.0, double stddev = 1.0);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t rank() const { return node_->shape.size(); }
  size_t numel() const { return node_->val.size(); }
  size_t dim(size_t i) const { return node_->shape.at(i); }

  const std::vector<T>& data() const { return node_->val; }
  std::vector<T>& mut_data() { return node_->val; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }
  const std::vector<T>& grad() const { return node_->grad; }
  void zero_grad() {
    if (node_) node_->grad.assign(node_->val.size(), T(0));
  }

  std::shared_ptr<Node<T>>& node() { return node_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/**
 * The recorded operation list for one backward sweep: every node reachable
 * from the root, ordered by creation sequence (ascending). Reverse iteration
 * visits each node exactly once, after all of its consumers.
 */
template <typename T>
struct ComputationTape {
  std::vector<Node<T>*> order;
  static ComputationTape record_from(const Tensor<T>& root);
};

// Seeds d(root)/d(root) = 1 (root must be scalar) and runs the reverse sweep.
// Gradients accumulate into every reachable node with requires_grad set.
template <typename T>
void backward(const Tensor<T>& root);

Tensor<double> to_f64(const Tensor<float>& t);
Tensor<float> to_f32(const Tensor<double>& t);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;
extern template struct ComputationTape<float>;
extern template struct ComputationTape<double>;
extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);

}  // namespace tweo
