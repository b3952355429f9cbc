#include "promuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "promuse/errors.hpp"

namespace promuse {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

namespace {

thread_local bool t_grad_enabled = true;

void check_shape(const char* op, const Shape& s) {
  if (s.empty()) throw ShapeError(std::string(op) + ": empty shape");
  for (auto e : s) {
    if (e <= 0)
      throw ShapeError(std::string(op) + ": non-positive extent in " + shape_str(s));
  }
}

NodePtr make_leaf(Shape shape, std::vector<double> values) {
  check_shape("tensor", shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  return n;
}

// Attaches the backward record only when gradients are being tracked and at
// least one parent requires them.
Tensor make_op(Shape shape, std::vector<double> values, const char* op,
               std::vector<NodePtr> parents, std::function<void(Node&)> bwd) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  if (t_grad_enabled && rg) {
    n->requires_grad = true;
    n->op = op;
    n->parents = std::move(parents);
    n->backward_fn = std::move(bwd);
  }
  return Tensor(n);
}

[[noreturn]] void binary_shape_error(const char* op, const Node& a, const Node& b) {
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape) + " vs " +
                   shape_str(b.shape) + " do not conform");
}

// ---- matmul kernels; ikj / dot orders chosen so the inner loop vectorizes ----

void kernel_nn(const double* a, const double* b, double* c, std::int64_t m,
               std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
void kernel_nt(const double* a, const double* b, double* c, std::int64_t m,
               std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void kernel_tn(const double* a, const double* b, double* c, std::int64_t m,
               std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

// ---- Tensor basics ----

Tensor Tensor::zeros(Shape shape) {
  auto numel = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(numel, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
  auto numel = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(numel, value)));
}

Tensor Tensor::from(std::vector<double> values, Shape shape) {
  return Tensor(make_leaf(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) {
  return Tensor(make_leaf({1}, std::vector<double>{value}));
}

Tensor Tensor::randn(Rng& rng, Shape shape, double stddev) {
  auto numel = shape_numel(shape);
  std::vector<double> v(numel);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(make_leaf(std::move(shape), std::move(v)));
}

Tensor Tensor::rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  auto numel = shape_numel(shape);
  std::vector<double> v(numel);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(make_leaf(std::move(shape), std::move(v)));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::int64_t Tensor::rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
std::int64_t Tensor::numel() const { return node_->numel(); }
std::int64_t Tensor::extent(int axis) const { return node_->shape.at(axis); }

const std::vector<double>& Tensor::values() const { return node_->values; }

std::vector<double>& Tensor::mutable_values() {
  if (!is_leaf())
    throw ValueError("mutable_values: only leaf tensors may be mutated");
  return node_->values;
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
  return node_->values[0];
}

double Tensor::at(std::int64_t flat_index) const { return node_->values.at(flat_index); }

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool rg) {
  if (!is_leaf())
    throw ValueError("set_requires_grad: only leaf tensors may be marked");
  node_->requires_grad = rg;
  return *this;
}

bool Tensor::is_leaf() const { return node_->op == nullptr; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw ValueError("grad: tensor has no gradient (did backward reach it?)");
  return node_->grad;
}

void Tensor::zero_grad() const {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::drop_grad() const {
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(node_->shape, node_->values));
}

// ---- backward ----

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ValueError("backward: undefined tensor");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw ValueError("backward: loss is not connected to the graph");

  // Iterative post-order DFS; reversing it yields a topological order that
  // visits every consumer before its producer, fixing the accumulation order.
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  std::unordered_set<Node*> visited;
  Node* root = loss.node().get();
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx].get();
      ++idx;
      if (p->requires_grad && !p->parents.empty() && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      } else if (p->requires_grad) {
        // leaf parameter: nothing to expand
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---- structural ops ----

Tensor reshape(const Tensor& x, Shape new_shape) {
  check_shape("reshape", new_shape);
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  auto px = x.node();
  return make_op(std::move(new_shape), px->values, "reshape", {px},
                 [px](Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     px->grad[i] += self.grad[i];
                 });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2)
    throw ShapeError("transpose: expected rank-2, got " + shape_str(x.shape()));
  const std::int64_t m = x.extent(0), n = x.extent(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  const auto& v = x.values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  auto px = x.node();
  return make_op({n, m}, std::move(out), "transpose", {px}, [px, m, n](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) px->grad[i * n + j] += self.grad[j * m + i];
  });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() != 3)
    throw ShapeError("transpose_last2: expected rank-3, got " + shape_str(x.shape()));
  const std::int64_t B = x.extent(0), m = x.extent(1), n = x.extent(2);
  std::vector<double> out(static_cast<std::size_t>(B * m * n));
  const auto& v = x.values();
  for (std::int64_t b = 0; b < B; ++b) {
    const double* src = v.data() + b * m * n;
    double* dst = out.data() + b * m * n;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  auto px = x.node();
  return make_op({B, n, m}, std::move(out), "transpose_last2", {px},
                 [px, B, m, n](Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::int64_t b = 0; b < B; ++b) {
                     double* dst = px->grad.data() + b * m * n;
                     const double* g = self.grad.data() + b * m * n;
                     for (std::int64_t i = 0; i < m; ++i)
                       for (std::int64_t j = 0; j < n; ++j)
                         dst[i * n + j] += g[j * m + i];
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const auto& first = xs.front().shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0 || axis >= rank)
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    const auto& s = t.shape();
    if (static_cast<int>(s.size()) != rank)
      throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(s));
    for (int a = 0; a < rank; ++a) {
      if (a != axis && s[a] != first[a])
        throw ShapeError("concat: shapes " + shape_str(first) + " vs " + shape_str(s) +
                         " differ off-axis");
    }
    out_shape[axis] += s[axis];
  }

  std::int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= first[a];
  for (int a = axis + 1; a < rank; ++a) inner *= first[a];
  const std::int64_t out_block = out_shape[axis] * inner;

  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;  // per-input offset (in elements) within a block
  {
    std::int64_t off = 0;
    for (const auto& t : xs) {
      offsets.push_back(off);
      const std::int64_t blk = t.extent(axis) * inner;
      const auto& v = t.values();
      for (std::int64_t o = 0; o < outer; ++o)
        std::copy(v.begin() + o * blk, v.begin() + (o + 1) * blk,
                  out.begin() + o * out_block + off);
      off += blk;
    }
  }

  std::vector<NodePtr> parents;
  parents.reserve(xs.size());
  for (const auto& t : xs) parents.push_back(t.node());
  std::vector<std::int64_t> blocks;
  for (const auto& t : xs) blocks.push_back(t.extent(axis) * inner);

  return make_op(std::move(out_shape), std::move(out), "concat", parents,
                 [parents, offsets, blocks, outer, out_block](Node& self) {
                   for (std::size_t k = 0; k < parents.size(); ++k) {
                     auto& p = parents[k];
                     if (!p->requires_grad) continue;
                     p->ensure_grad();
                     const std::int64_t blk = blocks[k], off = offsets[k];
                     for (std::int64_t o = 0; o < outer; ++o) {
                       const double* g = self.grad.data() + o * out_block + off;
                       double* dst = p->grad.data() + o * blk;
                       for (std::int64_t i = 0; i < blk; ++i) dst[i] += g[i];
                     }
                   }
                 });
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const auto& s = x.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0 || axis >= rank)
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  if (start < 0 || len <= 0 || start + len > s[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds " + shape_str(s));
  std::int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= s[a];
  for (int a = axis + 1; a < rank; ++a) inner *= s[a];
  const std::int64_t in_block = s[axis] * inner;
  const std::int64_t out_block = len * inner;
  Shape out_shape = s;
  out_shape[axis] = len;

  std::vector<double> out(static_cast<std::size_t>(outer * out_block));
  const auto& v = x.values();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(v.begin() + o * in_block + start * inner,
              v.begin() + o * in_block + start * inner + out_block,
              out.begin() + o * out_block);

  auto px = x.node();
  return make_op(std::move(out_shape), std::move(out), "slice", {px},
                 [px, outer, in_block, out_block, start, inner](Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::int64_t o = 0; o < outer; ++o) {
                     const double* g = self.grad.data() + o * out_block;
                     double* dst = px->grad.data() + o * in_block + start * inner;
                     for (std::int64_t i = 0; i < out_block; ++i) dst[i] += g[i];
                   }
                 });
}

Tensor repeat_rows(const Tensor& v, std::int64_t n) {
  if (v.rank() != 1)
    throw ShapeError("repeat_rows: expected rank-1, got " + shape_str(v.shape()));
  if (n <= 0) throw ShapeError("repeat_rows: n must be positive");
  const std::int64_t d = v.extent(0);
  std::vector<double> out(static_cast<std::size_t>(n * d));
  for (std::int64_t i = 0; i < n; ++i)
    std::copy(v.values().begin(), v.values().end(), out.begin() + i * d);
  auto pv = v.node();
  return make_op({n, d}, std::move(out), "repeat_rows", {pv}, [pv, n, d](Node& self) {
    if (!pv->requires_grad) return;
    pv->ensure_grad();
    for (std::int64_t i = 0; i < n; ++i) {
      const double* g = self.grad.data() + i * d;
      for (std::int64_t j = 0; j < d; ++j) pv->grad[j] += g[j];
    }
  });
}

Tensor tile_rows(const Tensor& x, std::int64_t times) {
  if (x.rank() != 2)
    throw ShapeError("tile_rows: expected rank-2, got " + shape_str(x.shape()));
  if (times <= 0) throw ShapeError("tile_rows: times must be positive");
  const std::int64_t m = x.extent(0), d = x.extent(1);
  std::vector<double> out(static_cast<std::size_t>(times * m * d));
  for (std::int64_t t = 0; t < times; ++t)
    std::copy(x.values().begin(), x.values().end(), out.begin() + t * m * d);
  auto px = x.node();
  return make_op({times * m, d}, std::move(out), "tile_rows", {px},
                 [px, times, m, d](Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::int64_t t = 0; t < times; ++t) {
                     const double* g = self.grad.data() + t * m * d;
                     for (std::int64_t i = 0; i < m * d; ++i) px->grad[i] += g[i];
                   }
                 });
}

namespace {
Tensor gather_rows_impl(const char* op, const Tensor& x,
                        const std::vector<std::int64_t>& idx) {
  if (x.rank() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2 table, got " +
                     shape_str(x.shape()));
  const std::int64_t N = x.extent(0), d = x.extent(1);
  for (auto i : idx)
    if (i < 0 || i >= N)
      throw ValueError(std::string(op) + ": index " + std::to_string(i) +
                       " out of range [0," + std::to_string(N) + ")");
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  if (k == 0) throw ShapeError(std::string(op) + ": empty index list");
  std::vector<double> out(static_cast<std::size_t>(k * d));
  const auto& v = x.values();
  for (std::int64_t i = 0; i < k; ++i)
    std::copy(v.begin() + idx[i] * d, v.begin() + (idx[i] + 1) * d, out.begin() + i * d);
  auto px = x.node();
  return make_op({k, d}, std::move(out), op, {px}, [px, idx, d](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* g = self.grad.data() + static_cast<std::int64_t>(i) * d;
      double* dst = px->grad.data() + idx[i] * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
    }
  });
}
}  // namespace

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx) {
  return gather_rows_impl("gather_rows", x, idx);
}

Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids) {
  return gather_rows_impl("embedding", table, ids);
}

// ---- arithmetic ----

namespace {
Tensor pointwise_binary(const char* op, const Tensor& a, const Tensor& b,
                        double sign_b) {
  auto pa = a.node();
  auto pb = b.node();
  if (pa->shape != pb->shape) binary_shape_error(op, *pa, *pb);
  std::vector<double> out(pa->values.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = pa->values[i] + sign_b * pb->values[i];
  return make_op(pa->shape, std::move(out), op, {pa, pb}, [pa, pb, sign_b](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] += sign_b * self.grad[i];
    }
  });
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return pointwise_binary("add", a, b, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return pointwise_binary("sub", a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
  auto pa = a.node();
  auto pb = b.node();
  if (pa->shape != pb->shape) binary_shape_error("mul", *pa, *pb);
  std::vector<double> out(pa->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->values[i] * pb->values[i];
  return make_op(pa->shape, std::move(out), "mul", {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * pb->values[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] += self.grad[i] * pa->values[i];
    }
  });
}

Tensor scale(const Tensor& x, double c) {
  auto px = x.node();
  std::vector<double> out(px->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * px->values[i];
  return make_op(px->shape, std::move(out), "scale", {px}, [px, c](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += c * self.grad[i];
  });
}

Tensor add_const(const Tensor& x, double c) {
  auto px = x.node();
  std::vector<double> out(px->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px->values[i] + c;
  return make_op(px->shape, std::move(out), "add_const", {px}, [px](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto pa = a.node();
  auto pb = b.node();
  if (pa->shape.size() != 2 || pb->shape.size() != 2 || pa->shape[1] != pb->shape[0])
    binary_shape_error("matmul", *pa, *pb);
  const std::int64_t m = pa->shape[0], k = pa->shape[1], n = pb->shape[1];
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  kernel_nn(pa->values.data(), pb->values.data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), "matmul", {pa, pb}, [pa, pb, m, k, n](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      kernel_nt(self.grad.data(), pb->values.data(), pa->grad.data(), m, n, k);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      kernel_tn(pa->values.data(), self.grad.data(), pb->grad.data(), m, k, n);
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  auto pa = a.node();
  auto pb = b.node();
  if (pa->shape.size() != 3 || pb->shape.size() != 3 || pa->shape[0] != pb->shape[0] ||
      pa->shape[2] != pb->shape[1])
    binary_shape_error("bmm", *pa, *pb);
  const std::int64_t B = pa->shape[0], m = pa->shape[1], k = pa->shape[2],
                     n = pb->shape[2];
  std::vector<double> out(static_cast<std::size_t>(B * m * n), 0.0);
  for (std::int64_t i = 0; i < B; ++i)
    kernel_nn(pa->values.data() + i * m * k, pb->values.data() + i * k * n,
              out.data() + i * m * n, m, k, n);
  return make_op({B, m, n}, std::move(out), "bmm", {pa, pb},
                 [pa, pb, B, m, k, n](Node& self) {
                   for (std::int64_t i = 0; i < B; ++i) {
                     const double* g = self.grad.data() + i * m * n;
                     if (pa->requires_grad) {
                       pa->ensure_grad();
                       kernel_nt(g, pb->values.data() + i * k * n,
                                 pa->grad.data() + i * m * k, m, n, k);
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       kernel_tn(pa->values.data() + i * m * k, g,
                                 pb->grad.data() + i * k * n, m, k, n);
                     }
                   }
                 });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  auto px = x.node();
  auto ps = s.node();
  if (ps->numel() != 1)
    throw ShapeError("scale_by: scale must be scalar, got " + shape_str(ps->shape));
  const double c = ps->values[0];
  std::vector<double> out(px->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * px->values[i];
  return make_op(px->shape, std::move(out), "scale_by", {px, ps}, [px, ps, c](Node& self) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += c * self.grad[i];
    }
    if (ps->requires_grad) {
      ps->ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        acc += self.grad[i] * px->values[i];
      ps->grad[0] += acc;
    }
  });
}

Tensor rowwise_scale(const Tensor& x, const Tensor& s) {
  auto px = x.node();
  auto ps = s.node();
  if (px->shape.size() != 2 || ps->shape.size() != 1 || ps->shape[0] != px->shape[0])
    binary_shape_error("rowwise_scale", *px, *ps);
  const std::int64_t m = px->shape[0], n = px->shape[1];
  std::vector<double> out(px->values.size());
  for (std::int64_t i = 0; i < m; ++i) {
    const double c = ps->values[i];
    for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = c * px->values[i * n + j];
  }
  return make_op(px->shape, std::move(out), "rowwise_scale", {px, ps},
                 [px, ps, m, n](Node& self) {
                   if (px->requires_grad) {
                     px->ensure_grad();
                     for (std::int64_t i = 0; i < m; ++i) {
                       const double c = ps->values[i];
                       for (std::int64_t j = 0; j < n; ++j)
                         px->grad[i * n + j] += c * self.grad[i * n + j];
                     }
                   }
                   if (ps->requires_grad) {
                     ps->ensure_grad();
                     for (std::int64_t i = 0; i < m; ++i) {
                       double acc = 0.0;
                       for (std::int64_t j = 0; j < n; ++j)
                         acc += self.grad[i * n + j] * px->values[i * n + j];
                       ps->grad[i] += acc;
                     }
                   }
                 });
}

// ---- nonlinearities ----

namespace {
template <typename F, typename DF>
Tensor pointwise_unary(const char* op, const Tensor& x, F f, DF df) {
  auto px = x.node();
  std::vector<double> out(px->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(px->values[i]);
  // df receives (input, output); the output is read back from self.values.
  return make_op(px->shape, std::move(out), op, {px}, [px, df](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      px->grad[i] += self.grad[i] * df(px->values[i], self.values[i]);
  });
}
}  // namespace

Tensor relu(const Tensor& x) {
  return pointwise_unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return pointwise_unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor tanh_op(const Tensor& x) {
  return pointwise_unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return pointwise_unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// ---- normalization / softmax ----

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  if (px->shape.empty())
    throw ShapeError("layer_norm: input must have rank >= 1");
  const std::int64_t D = px->shape.back();
  if (pg->shape != Shape{D} || pb->shape != Shape{D})
    throw ShapeError("layer_norm: affine params " + shape_str(pg->shape) + "/" +
                     shape_str(pb->shape) + " do not match feature dim " +
                     std::to_string(D));
  const std::int64_t rows = px->numel() / D;

  std::vector<double> out(px->values.size());
  // Per-row statistics are kept; x-hat is recomputed in backward from them.
  auto stats = std::make_shared<std::vector<double>>(2 * rows);  // mean, inv_std
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = px->values.data() + r * D;
    double mean = 0.0;
    for (std::int64_t j = 0; j < D; ++j) mean += xr[j];
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (std::int64_t j = 0; j < D; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(D);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[2 * r] = mean;
    (*stats)[2 * r + 1] = inv;
    for (std::int64_t j = 0; j < D; ++j)
      out[r * D + j] = pg->values[j] * ((xr[j] - mean) * inv) + pb->values[j];
  }

  return make_op(px->shape, std::move(out), "layer_norm", {px, pg, pb},
                 [px, pg, pb, stats, rows, D](Node& self) {
                   if (pg->requires_grad) pg->ensure_grad();
                   if (pb->requires_grad) pb->ensure_grad();
                   if (px->requires_grad) px->ensure_grad();
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double* g = self.grad.data() + r * D;
                     const double* xr = px->values.data() + r * D;
                     const double mean = (*stats)[2 * r];
                     const double inv = (*stats)[2 * r + 1];
                     if (pg->requires_grad || pb->requires_grad) {
                       for (std::int64_t j = 0; j < D; ++j) {
                         if (pb->requires_grad) pb->grad[j] += g[j];
                         if (pg->requires_grad)
                           pg->grad[j] += g[j] * ((xr[j] - mean) * inv);
                       }
                     }
                     if (px->requires_grad) {
                       double mean_t = 0.0, mean_th = 0.0;
                       for (std::int64_t j = 0; j < D; ++j) {
                         const double t = g[j] * pg->values[j];
                         mean_t += t;
                         mean_th += t * ((xr[j] - mean) * inv);
                       }
                       mean_t /= static_cast<double>(D);
                       mean_th /= static_cast<double>(D);
                       double* dst = px->grad.data() + r * D;
                       for (std::int64_t j = 0; j < D; ++j) {
                         const double t = g[j] * pg->values[j];
                         dst[j] += inv * (t - mean_t - ((xr[j] - mean) * inv) * mean_th);
                       }
                     }
                   }
                 });
}

namespace {
void check_finite_rows(const char* op, const Node& n) {
  for (double v : n.values)
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
}

// exp(x) for x <= 0 via 2^k * exp(r) with |r| <= ln2/2 and a degree-13
// Taylor tail; relative error stays below ~1e-15, and the branch-free body
// auto-vectorizes. Inputs below the denormal cutoff flush to 0.
inline double exp_neg_fast(double x) {
  if (x < -708.0) return 0.0;
  constexpr double kLog2e = 1.4426950408889634074;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  const double t = x * kLog2e;
  const double k = std::nearbyint(t);
  const double r = (x - k * kLn2Hi) - k * kLn2Lo;
  // exp(r), |r| <= 0.3466
  double p = 1.0 / 6227020800.0;  // 1/13!
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  const std::int64_t ki = static_cast<std::int64_t>(k);
  const std::uint64_t bits = static_cast<std::uint64_t>(1023 + ki) << 52;
  double scale_pow;
  std::memcpy(&scale_pow, &bits, 8);
  return p * scale_pow;
}
}  // namespace

Tensor attention_softmax(const Tensor& scores, const Tensor& mask, double scale_factor) {
  auto px = scores.node();
  if (px->shape.empty())
    throw ShapeError("attention_softmax: input must have rank >= 1");
  const bool has_mask = mask.defined();
  if (has_mask) {
    if (mask.shape() != px->shape)
      throw ShapeError("attention_softmax: mask " + shape_str(mask.shape()) +
                       " does not match scores " + shape_str(px->shape));
    if (mask.requires_grad())
      throw ValueError("attention_softmax: mask must be a constant");
  }
  check_finite_rows("attention_softmax", *px);
  const std::int64_t D = px->shape.back();
  const std::int64_t rows = px->numel() / D;
  const double* mk = has_mask ? mask.values().data() : nullptr;

  std::vector<double> out(px->values.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = px->values.data() + r * D;
    const double* mr = mk ? mk + r * D : nullptr;
    double* yr = out.data() + r * D;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < D; ++j) {
      const double z = scale_factor * xr[j] + (mr ? mr[j] : 0.0);
      yr[j] = z;
      if (z > mx) mx = z;
    }
    double sum = 0.0;
    for (std::int64_t j = 0; j < D; ++j) {
      const double e = exp_neg_fast(yr[j] - mx);
      yr[j] = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < D; ++j) yr[j] *= inv;
  }

  return make_op(px->shape, std::move(out), "attention_softmax", {px},
                 [px, rows, D, scale_factor](Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double* g = self.grad.data() + r * D;
                     const double* p = self.values.data() + r * D;
                     double dot = 0.0;
                     for (std::int64_t j = 0; j < D; ++j) dot += g[j] * p[j];
                     double* dst = px->grad.data() + r * D;
                     for (std::int64_t j = 0; j < D; ++j)
                       dst[j] += scale_factor * p[j] * (g[j] - dot);
                   }
                 });
}

Tensor softmax_last(const Tensor& x) {
  auto px = x.node();
  if (px->shape.empty()) throw ShapeError("softmax: input must have rank >= 1");
  check_finite_rows("softmax", *px);
  const std::int64_t D = px->shape.back();
  const std::int64_t rows = px->numel() / D;
  std::vector<double> out(px->values.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = px->values.data() + r * D;
    double* yr = out.data() + r * D;
    double mx = xr[0];
    for (std::int64_t j = 1; j < D; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < D; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < D; ++j) yr[j] *= inv;
  }
  return make_op(px->shape, std::move(out), "softmax", {px},
                 [px, rows, D](Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double* g = self.grad.data() + r * D;
                     const double* p = self.values.data() + r * D;
                     double dot = 0.0;
                     for (std::int64_t j = 0; j < D; ++j) dot += g[j] * p[j];
                     double* dst = px->grad.data() + r * D;
                     for (std::int64_t j = 0; j < D; ++j)
                       dst[j] += p[j] * (g[j] - dot);
                   }
                 });
}

Tensor log_softmax_last(const Tensor& x) {
  auto px = x.node();
  if (px->shape.empty()) throw ShapeError("log_softmax: input must have rank >= 1");
  check_finite_rows("log_softmax", *px);
  const std::int64_t D = px->shape.back();
  const std::int64_t rows = px->numel() / D;
  std::vector<double> out(px->values.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = px->values.data() + r * D;
    double* yr = out.data() + r * D;
    double mx = xr[0];
    for (std::int64_t j = 1; j < D; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < D; ++j) sum += std::exp(xr[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::int64_t j = 0; j < D; ++j) yr[j] = xr[j] - lse;
  }
  return make_op(px->shape, std::move(out), "log_softmax", {px},
                 [px, rows, D](Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double* g = self.grad.data() + r * D;
                     const double* lp = self.values.data() + r * D;
                     double sum_g = 0.0;
                     for (std::int64_t j = 0; j < D; ++j) sum_g += g[j];
                     double* dst = px->grad.data() + r * D;
                     for (std::int64_t j = 0; j < D; ++j)
                       dst[j] += g[j] - std::exp(lp[j]) * sum_g;
                   }
                 });
}

Tensor softmax(const Tensor& x, int axis) {
  if (x.rank() == 1) {
    if (axis != 0)
      throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for rank-1");
    return softmax_last(x);
  }
  if (x.rank() != 2)
    throw ShapeError("softmax: axis form expects rank-1 or rank-2, got " +
                     shape_str(x.shape()));
  if (axis == 1) return softmax_last(x);
  if (axis == 0) return transpose(softmax_last(transpose(x)));
  throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range");
}

// ---- reductions / losses ----

Tensor sum_all(const Tensor& x) {
  auto px = x.node();
  double acc = 0.0;
  for (double v : px->values) acc += v;
  return make_op({1}, {acc}, "sum_all", {px}, [px](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const double g = self.grad[0];
    for (auto& d : px->grad) d += g;
  });
}

Tensor mean_all(const Tensor& x) {
  auto px = x.node();
  double acc = 0.0;
  for (double v : px->values) acc += v;
  const double inv = 1.0 / static_cast<double>(px->numel());
  return make_op({1}, {acc * inv}, "mean_all", {px}, [px, inv](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const double g = self.grad[0] * inv;
    for (auto& d : px->grad) d += g;
  });
}

Tensor mean_axis(const Tensor& x, int axis) {
  if (x.rank() != 2)
    throw ShapeError("mean_axis: expected rank-2, got " + shape_str(x.shape()));
  if (axis != 0 && axis != 1)
    throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range");
  auto px = x.node();
  const std::int64_t m = px->shape[0], n = px->shape[1];
  if (axis == 0) {
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) out[j] += px->values[i * n + j];
    const double inv = 1.0 / static_cast<double>(m);
    for (auto& v : out) v *= inv;
    return make_op({n}, std::move(out), "mean_axis", {px}, [px, m, n, inv](Node& self) {
      if (!px->requires_grad) return;
      px->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) px->grad[i * n + j] += self.grad[j] * inv;
    });
  }
  std::vector<double> out(static_cast<std::size_t>(m), 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < n; ++j) acc += px->values[i * n + j];
    out[i] = acc / static_cast<double>(n);
  }
  const double inv = 1.0 / static_cast<double>(n);
  return make_op({m}, std::move(out), "mean_axis", {px}, [px, m, n, inv](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) px->grad[i * n + j] += self.grad[i] * inv;
  });
}

Tensor nll_mean(const Tensor& log_probs, const std::vector<std::int64_t>& targets) {
  auto pl = log_probs.node();
  if (pl->shape.size() != 2)
    throw ShapeError("nll_mean: expected rank-2 log-probs, got " + shape_str(pl->shape));
  const std::int64_t B = pl->shape[0], C = pl->shape[1];
  if (static_cast<std::int64_t>(targets.size()) != B)
    throw ShapeError("nll_mean: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(B) + " rows");
  for (auto t : targets)
    if (t < 0 || t >= C)
      throw ValueError("nll_mean: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(C) + ")");
  double acc = 0.0;
  for (std::int64_t i = 0; i < B; ++i) acc -= pl->values[i * C + targets[i]];
  const double inv = 1.0 / static_cast<double>(B);
  return make_op({1}, {acc * inv}, "nll_mean", {pl}, [pl, targets, C, inv](Node& self) {
    if (!pl->requires_grad) return;
    pl->ensure_grad();
    const double g = self.grad[0] * inv;
    for (std::size_t i = 0; i < targets.size(); ++i)
      pl->grad[static_cast<std::int64_t>(i) * C + targets[i]] -= g;
  });
}

Tensor cross_entropy(const Tensor& logits, std::int64_t target) {
  if (logits.rank() != 1)
    throw ShapeError("cross_entropy: expected rank-1 logits, got " +
                     shape_str(logits.shape()));
  const std::int64_t C = logits.extent(0);
  if (target < 0 || target >= C)
    throw ValueError("cross_entropy: target " + std::to_string(target) +
                     " out of range [0," + std::to_string(C) + ")");
  Tensor row = reshape(logits, {1, C});
  return nll_mean(log_softmax_last(row), {target});
}

// ---- regularization ----

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0)
    throw ValueError("dropout: rate must be in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  auto px = x.node();
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(px->values.size());
  std::vector<double> out(px->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = rng.bernoulli(p) ? 0.0 : keep_scale;
    (*mask)[i] = m;
    out[i] = m * px->values[i];
  }
  return make_op(px->shape, std::move(out), "dropout", {px}, [px, mask](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      px->grad[i] += self.grad[i] * (*mask)[i];
  });
}

}  // namespace promuse
