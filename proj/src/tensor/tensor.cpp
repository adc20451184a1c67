#include "htsc/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "htsc/errors.hpp"

namespace htsc {

namespace {
thread_local bool g_grad_enabled = true;
bool g_finite_checks = false;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }
void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  auto n = std::make_shared<Node<T>>();
  n->data.assign(shape_numel(shape), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  if (data.size() != shape_numel(shape))
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  auto n = std::make_shared<Node<T>>();
  n->data = std::move(data);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw ShapeError("at(r, c) needs a matrix");
  return node_->data.at(r * node_->shape[1] + c);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->data, false);
}

template <typename T>
void Tensor<T>::backward() const {
  // Iterative post-order DFS gives a topological order of recorded nodes.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  auto& seed = node_->grad_buffer();
  for (auto& g : seed) g += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node<T>* n : order) {
    if (n->is_leaf()) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    if (n != node_.get()) std::vector<T>().swap(n->grad);
  }
}

namespace {
template <typename T>
Tensor<T> build_result(const char* op, Shape shape, std::vector<T> data,
                       const Tensor<T>* parents, std::size_t count,
                       std::function<void(Node<T>&)> backward) {
  if (data.size() != shape_numel(shape))
    throw ShapeError(std::string(op) + ": result buffer does not match shape " + shape_str(shape));
  if (g_finite_checks) {
    for (const T& v : data)
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool needs = false;
  if (g_grad_enabled) {
    for (std::size_t i = 0; i < count; ++i)
      if (parents[i].defined() && parents[i].requires_grad()) needs = true;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
      n->parents.push_back(parents[i].defined() ? parents[i].node_ptr() : nullptr);
    n->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}
}  // namespace

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
  return build_result(op, std::move(shape), std::move(data), parents.begin(), parents.size(),
                      std::move(backward));
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& parents,
                      std::function<void(Node<T>&)> backward) {
  return build_result(op, std::move(shape), std::move(data), parents.data(), parents.size(),
                      std::move(backward));
}

template class Tensor<float>;
template class Tensor<double>;

#define HTSC_INSTANTIATE(T)                                                                   \
  template Tensor<T> make_result<T>(const char*, Shape, std::vector<T>,                      \
                                    std::initializer_list<Tensor<T>>,                        \
                                    std::function<void(Node<T>&)>);                          \
  template Tensor<T> make_result<T>(const char*, Shape, std::vector<T>,                      \
                                    const std::vector<Tensor<T>>&, std::function<void(Node<T>&)>);
HTSC_INSTANTIATE(float)
HTSC_INSTANTIATE(double)
#undef HTSC_INSTANTIATE

}  // namespace htsc
