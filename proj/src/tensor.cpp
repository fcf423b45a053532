#include "tweo/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace tweo {

uint64_t next_node_seq() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
static std::shared_ptr<Node<T>> make_node(Shape s, std::vector<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(s);
  n->val = std::move(v);
  n->seq = next_node_seq();
  return n;
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& s, T v) {
  return Tensor(make_node<T>(s, std::vector<T>(tweo::numel(s), v)));
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& s, std::vector<T> data) {
  if (data.size() != tweo::numel(s))
    throw DimError(strf("tensor data size %zu does not match shape %s", data.size(),
                        shape_str(s).c_str()));
  return Tensor(make_node<T>(s, std::move(data)));
}

template <typename T>
Tensor<T> Tensor<T>::randn(const Shape& s, Rng& rng, double mean, double stddev) {
  std::vector<T> v(tweo::numel(s));
  for (auto& x : v) x = static_cast<T>(rng.normal(mean, stddev));
  return Tensor(make_node<T>(s, std::move(v)));
}

template <typename T>
T Tensor<T>::item() const {
  if (!node_ || node_->val.size() != 1)
    throw DimError(strf("item() needs a single-element tensor, got %s",
                        node_ ? shape_str(node_->shape).c_str() : "<empty>"));
  return node_->val[0];
}

template <typename T>
ComputationTape<T> ComputationTape<T>::record_from(const Tensor<T>& root) {
  ComputationTape<T> tape;
  if (!root.defined()) return tape;
  std::unordered_set<uint64_t> seen;
  std::vector<Node<T>*> stack{root.node().get()};
  seen.insert(root.node()->seq);
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    tape.order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p->seq).second) stack.push_back(p.get());
    }
  }
  // creation sequence is a topological order: parents always precede children
  std::sort(tape.order.begin(), tape.order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->seq < b->seq; });
  return tape;
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (!root.defined() || root.numel() != 1)
    throw DimError("backward() expects a defined scalar root");
  if (!root.node()->requires_grad) return;
  auto tape = ComputationTape<T>::record_from(root);
  root.node()->ensure_grad();
  root.node()->grad[0] = T(1);
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    if ((*it)->back) (*it)->back();
  }
}

Tensor<double> to_f64(const Tensor<float>& t) {
  std::vector<double> v(t.data().begin(), t.data().end());
  return Tensor<double>::from(t.shape(), std::move(v));
}

Tensor<float> to_f32(const Tensor<double>& t) {
  std::vector<float> v(t.data().begin(), t.data().end());
  return Tensor<float>::from(t.shape(), std::move(v));
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;
template struct ComputationTape<float>;
template struct ComputationTape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace tweo
