#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace upm {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // operation that produced this tensor; null for leaves

  std::vector<double>& ensure_grad();
};

/// One recorded operation. `backward` reads the output's gradient and
/// accumulates into every input that tracks gradients.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

}  // namespace detail

/// Dense row-major float64 array with optional gradient tracking.
///
/// A Tensor is a cheap handle: copies share storage. Operations build a
/// define-by-run graph whenever one of their operands requires gradients
/// and gradient recording is enabled (see NoGradGuard).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);

  [[nodiscard]] bool defined() const { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::size_t rank() const { return shape().size(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const;
  [[nodiscard]] std::size_t size() const;
  /// First dimension; for rank-1 tensors this is 1 (treated as a row vector).
  [[nodiscard]] std::size_t rows() const;
  /// Last dimension.
  [[nodiscard]] std::size_t cols() const;

  [[nodiscard]] std::span<const double> data() const;
  /// Direct write access. Do not mutate a tensor that a live graph still reads.
  [[nodiscard]] std::span<double> mutable_data();
  [[nodiscard]] double item() const;
  [[nodiscard]] double at(std::size_t i) const { return data()[i]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  [[nodiscard]] bool requires_grad() const;
  void set_requires_grad(bool value);
  [[nodiscard]] bool is_leaf() const;

  [[nodiscard]] bool has_grad() const;
  [[nodiscard]] std::span<const double> grad() const;
  [[nodiscard]] std::span<double> mutable_grad();
  void zero_grad();

  /// Copy of the values with no graph history and no gradient tracking.
  [[nodiscard]] Tensor detach() const;

  [[nodiscard]] const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// True while gradient recording is enabled on this thread.
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an op result and records a node when any input tracks gradients.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   const char* op, std::function<void(const detail::TensorImpl&)> backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   const char* op, std::function<void(const detail::TensorImpl&)> backward);

/// Nodes reachable from `root`, ordered so every node's operands precede it.
std::vector<detail::Node*> topological_order(const Tensor& root);

/// Accumulates d(root)/d(t) into every gradient-tracked tensor reachable from
/// `root`. Each node runs exactly once. `root` must hold a single element.
void backward(const Tensor& root);

}  // namespace upm
