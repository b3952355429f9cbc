#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "promuse/rng.hpp"

namespace promuse {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
  const char* op = nullptr;  // null for leaves
  std::vector<std::shared_ptr<Node>> parents;
  // Distributes this node's grad into its parents' grad buffers.
  std::function<void(Node&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

// Dense 64-bit float tensor with an optional reverse-mode autodiff record.
// A Tensor is a cheap handle; copies alias the same storage. Values are
// immutable after creation except for leaf tensors mutated by the optimizer
// and the grad slot written during backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(std::vector<double> values, Shape shape);
  static Tensor scalar(double value);
  static Tensor randn(Rng& rng, Shape shape, double stddev);
  static Tensor rand_uniform(Rng& rng, Shape shape, double lo, double hi);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t rank() const;
  std::int64_t numel() const;
  std::int64_t extent(int axis) const;

  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();  // leaf updates (optimizer) only
  double item() const;                    // scalar tensors only
  double at(std::int64_t flat_index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool rg);  // leaves only
  bool is_leaf() const;

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad() const;   // clears the accumulated gradient buffer
  void drop_grad() const;   // deallocates the grad slot entirely

  // Value copy detached from the graph (no node, no grad requirement).
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// When false, ops do not record graph nodes (evaluation mode).
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable tensor that requires them, in a fixed topological order so that
// repeated runs are bit-identical.
void backward(const Tensor& loss);

// ---- structural ops (no broadcasting anywhere; shapes must conform) ----
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor transpose(const Tensor& x);             // rank-2
Tensor transpose_last2(const Tensor& x);       // rank-3, swaps dims 1 and 2
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len);
Tensor repeat_rows(const Tensor& v, std::int64_t n);        // [d] -> [n,d]
Tensor tile_rows(const Tensor& x, std::int64_t times);      // [m,d] -> [times*m,d]
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx);
Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids);

// ---- arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor matmul(const Tensor& a, const Tensor& b);   // [m,k]x[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);      // [B,m,k]x[B,k,n]
Tensor scale_by(const Tensor& x, const Tensor& s);           // s scalar tensor
Tensor rowwise_scale(const Tensor& x, const Tensor& s);      // [m,n] * [m]

// ---- nonlinearities ----
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor tanh_op(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// ---- normalization / softmax ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);  // rank-2 convenience
// softmax(scale * x + mask) fused over the last dim; mask is a constant
// additive tensor of the same shape (not differentiated) and may be empty.
Tensor attention_softmax(const Tensor& scores, const Tensor& mask, double scale_factor);

// ---- reductions / losses ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mean_axis(const Tensor& x, int axis);  // rank-2
Tensor nll_mean(const Tensor& log_probs, const std::vector<std::int64_t>& targets);
Tensor cross_entropy(const Tensor& logits, std::int64_t target);  // rank-1

// ---- regularization ----
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

}  // namespace promuse
