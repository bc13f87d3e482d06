#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "jd/common.hpp"

// Dense f64 tensors with reverse-mode differentiation. The graph is a tape of
// nodes ordered by creation; backward walks the reachable set once in reverse
// creation order, accumulating gradients additively. Only the operations this
// project needs are implemented.

namespace jd {

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // leaves with requires_grad keep this allocated
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, writes parents' grads

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline std::uint64_t next_seq() {
  static std::uint64_t counter = 0;
  return ++counter;
}

inline int grad_mode_depth = 0;

inline bool grad_enabled() { return grad_mode_depth == 0; }

inline std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace detail

// Disables graph construction in its scope; forwards become plain arithmetic.
struct NoGradGuard {
  NoGradGuard() { ++detail::grad_mode_depth; }
  ~NoGradGuard() { --detail::grad_mode_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(std::vector<int> shape, double value, bool requires_grad = false) {
    check_shape(shape);
    auto n = std::make_shared<detail::Node>();
    n->data.assign(detail::numel(shape), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad && detail::grad_enabled();
    if (n->requires_grad) n->ensure_grad();
    n->seq = detail::next_seq();
    return Tensor(std::move(n));
  }

  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false) {
    check_shape(shape);
    if (detail::numel(shape) != data.size()) {
      throw ShapeError("from_data: shape product " + std::to_string(detail::numel(shape)) +
                       " != data length " + std::to_string(data.size()));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad && detail::grad_enabled();
    if (n->requires_grad) n->ensure_grad();
    n->seq = detail::next_seq();
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->data.size(); }
  const std::vector<double>& data() const { return node_->data; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward_fn; }
  std::uint64_t id() const { return node_->seq; }

  std::vector<std::uint64_t> parent_ids() const {
    std::vector<std::uint64_t> ids;
    for (const auto& p : node_->parents) ids.push_back(p->seq);
    return ids;
  }

  // In-place access for leaves (parameter updates, test setup).
  std::vector<double>& mutable_data() {
    if (!is_leaf()) throw ValueError("mutable_data: only leaf tensors may be mutated");
    return node_->data;
  }

  const std::vector<double>& grad() const {
    if (node_->grad.size() != node_->data.size()) {
      throw ValueError("grad: tensor has no gradient buffer");
    }
    return node_->grad;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  void zero_grad() {
    if (node_->requires_grad) {
      node_->grad.assign(node_->data.size(), 0.0);
    } else {
      node_->grad.clear();
    }
  }

  double value() const {
    if (size() != 1) throw ShapeError("value: tensor is not scalar");
    return node_->data[0];
  }

  double at(const std::vector<int>& idx) const {
    if (idx.size() != node_->shape.size()) throw ShapeError("at: rank mismatch");
    std::size_t off = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= node_->shape[i]) {
        throw ShapeError("at: index out of range on axis " + std::to_string(i),
                         static_cast<int>(i));
      }
      off = off * static_cast<std::size_t>(node_->shape[i]) + static_cast<std::size_t>(idx[i]);
    }
    return node_->data[off];
  }

  // Constant copy sharing no graph history.
  Tensor detach() const {
    auto n = std::make_shared<detail::Node>();
    n->shape = node_->shape;
    n->data = node_->data;
    n->requires_grad = false;
    n->seq = detail::next_seq();
    return Tensor(std::move(n));
  }

  detail::Node* node() const { return node_.get(); }
  const detail::NodePtr& node_ptr() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

  static void check_shape(const std::vector<int>& shape) {
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] < 1) {
        throw ShapeError("shape axis " + std::to_string(i) + " must be >= 1, got " +
                             std::to_string(shape[i]),
                         static_cast<int>(i));
      }
    }
  }

  friend Tensor make_op(std::vector<int>, std::vector<double>, std::vector<Tensor>,
                        std::function<void(detail::Node&)>);

  detail::NodePtr node_;
};

// Builds a graph node from computed data. Parents are retained for backward;
// the node requires grad iff grad mode is on and any parent requires it.
inline Tensor make_op(std::vector<int> shape, std::vector<double> data,
                      std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backward_fn) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool rg = false;
  if (detail::grad_enabled()) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  n->requires_grad = rg;
  if (rg) {
    for (auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  n->seq = detail::next_seq();
  return Tensor(std::move(n));
}

namespace detail {

inline void accumulate(Node& parent, const std::vector<double>& contribution) {
  parent.ensure_grad();
  for (std::size_t i = 0; i < contribution.size(); ++i) parent.grad[i] += contribution[i];
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + std::to_string(sa.size()) + " vs " +
                     std::to_string(sb.size()));
  }
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i] != sb[i]) {
      throw ShapeError(std::string(op) + ": size mismatch on axis " + std::to_string(i) + " (" +
                           std::to_string(sa[i]) + " vs " + std::to_string(sb[i]) + ")",
                       static_cast<int>(i));
    }
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *self.parents[static_cast<std::size_t>(k)];
      if (p.requires_grad) detail::accumulate(p, self.grad);
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::accumulate(pa, self.grad);
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + s;
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) detail::accumulate(p, self.grad);
  });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * s;
  return make_op(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) {
      p.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
    }
  });
}

inline Tensor abs(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(da[i]);
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double x = p.data[i];
      double s = (x > 0.0) ? 1.0 : (x < 0.0 ? -1.0 : 0.0);  // subgradient at 0 is 0
      p.grad[i] += self.grad[i] * s;
    }
  });
}

inline Tensor pow_scalar(const Tensor& a, double e) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(da[i], e);
  return make_op(a.shape(), std::move(out), {a}, [e](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * e * std::pow(p.data[i], e - 1.0);
    }
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] > 0.0 ? da[i] : 0.0;
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (p.data[i] > 0.0) p.grad[i] += self.grad[i];  // subgradient at 0 is 0
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-da[i]));
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.data[i];
      p.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;  // fixed index order
  return make_op({1}, {acc}, {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    double g = self.grad[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
  });
}

inline Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  double inv = 1.0 / static_cast<double>(a.size());
  return make_op({1}, {acc * inv}, {a}, [inv](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    double g = self.grad[0] * inv;
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
  });
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (detail::numel(shape) != a.size()) {
    throw ShapeError("reshape: element count mismatch");
  }
  return make_op(std::move(shape), a.data(), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) detail::accumulate(p, self.grad);
  });
}

namespace detail {

// Decomposes `shape` into (outer, axis_len, inner) strides around `axis`.
struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const std::vector<int>& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(shape.size()),
                     axis);
  }
  AxisSplit s{1, static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
    s.inner *= static_cast<std::size_t>(shape[i]);
  }
  return s;
}

}  // namespace detail

// Numerically stable log-softmax along `axis` (max subtraction).
inline Tensor log_softmax(const Tensor& a, int axis) {
  auto sp = detail::split_axis(a.shape(), axis);
  if (sp.len < 1) throw ValueError("log_softmax: empty axis");
  const auto& x = a.data();
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      std::size_t base = o * sp.len * sp.inner + in;
      double mx = x[base];
      for (std::size_t k = 1; k < sp.len; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      double denom = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) denom += std::exp(x[base + k * sp.inner] - mx);
      double lse = mx + std::log(denom);
      for (std::size_t k = 0; k < sp.len; ++k) out[base + k * sp.inner] = x[base + k * sp.inner] - lse;
    }
  }
  return make_op(a.shape(), std::move(out), {a}, [sp](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        std::size_t base = o * sp.len * sp.inner + in;
        double gsum = 0.0;
        for (std::size_t k = 0; k < sp.len; ++k) gsum += self.grad[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.len; ++k) {
          std::size_t idx = base + k * sp.inner;
          p.grad[idx] += self.grad[idx] - std::exp(self.data[idx]) * gsum;
        }
      }
    }
  });
}

inline Tensor softmax(const Tensor& a, int axis) {
  auto sp = detail::split_axis(a.shape(), axis);
  if (sp.len < 1) throw ValueError("softmax: empty axis");
  const auto& x = a.data();
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      std::size_t base = o * sp.len * sp.inner + in;
      double mx = x[base];
      for (std::size_t k = 1; k < sp.len; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      double denom = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) {
        double e = std::exp(x[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        denom += e;
      }
      double inv = 1.0 / denom;
      for (std::size_t k = 0; k < sp.len; ++k) out[base + k * sp.inner] *= inv;
    }
  }
  return make_op(a.shape(), std::move(out), {a}, [sp](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        std::size_t base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.len; ++k) {
          std::size_t idx = base + k * sp.inner;
          dot += self.grad[idx] * self.data[idx];
        }
        for (std::size_t k = 0; k < sp.len; ++k) {
          std::size_t idx = base + k * sp.inner;
          p.grad[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

// [N,C,H,W] -> [N,H,W], summing over channels.
inline Tensor sum_channels(const Tensor& a) {
  if (a.rank() != 4) throw ShapeError("sum_channels: expected rank-4 input");
  int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<double> out(static_cast<std::size_t>(n) * plane, 0.0);
  const auto& x = a.data();
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const double* src = x.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
      double* dst = out.data() + static_cast<std::size_t>(ni) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
    }
  }
  return make_op({n, h, w}, std::move(out), {a}, [n, c, plane](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int ni = 0; ni < n; ++ni) {
      const double* g = self.grad.data() + static_cast<std::size_t>(ni) * plane;
      for (int ci = 0; ci < c; ++ci) {
        double* dst = p.grad.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += g[i];
      }
    }
  });
}

// [N,H,W] -> [H,W], averaging over the batch axis.
inline Tensor mean_batch(const Tensor& a) {
  if (a.rank() != 3) throw ShapeError("mean_batch: expected rank-3 input");
  int n = a.dim(0), h = a.dim(1), w = a.dim(2);
  std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<double> out(plane, 0.0);
  const auto& x = a.data();
  for (int ni = 0; ni < n; ++ni) {
    const double* src = x.data() + static_cast<std::size_t>(ni) * plane;
    for (std::size_t i = 0; i < plane; ++i) out[i] += src[i];
  }
  double inv = 1.0 / n;
  for (std::size_t i = 0; i < plane; ++i) out[i] *= inv;
  return make_op({h, w}, std::move(out), {a}, [n, plane, inv](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int ni = 0; ni < n; ++ni) {
      double* dst = p.grad.data() + static_cast<std::size_t>(ni) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += self.grad[i] * inv;
    }
  });
}

// Elementwise a / s where s is a scalar tensor.
inline Tensor div_by_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("div_by_scalar: divisor must be scalar");
  double sv = s.data()[0];
  std::vector<double> out(a.size());
  const auto& da = a.data();
  double inv = 1.0 / sv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * inv;
  return make_op(a.shape(), std::move(out), {a, s}, [inv](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * inv;
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.data[i];
      ps.grad[0] -= acc * inv * inv;
    }
  });
}

// Concatenation along the channel axis of [N,C,H,W] tensors.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValueError("concat_channels: no inputs");
  int n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int c_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 4) throw ShapeError("concat_channels: expected rank-4 inputs");
    if (p.dim(0) != n) throw ShapeError("concat_channels: batch mismatch", 0);
    if (p.dim(2) != h) throw ShapeError("concat_channels: height mismatch", 2);
    if (p.dim(3) != w) throw ShapeError("concat_channels: width mismatch", 3);
    c_total += p.dim(1);
  }
  std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<double> out(static_cast<std::size_t>(n) * c_total * plane);
  std::vector<int> channels;
  for (const auto& p : parts) channels.push_back(p.dim(1));
  std::size_t c_off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& x = parts[pi].data();
    std::size_t c = static_cast<std::size_t>(channels[pi]);
    for (int ni = 0; ni < n; ++ni) {
      std::copy(x.begin() + static_cast<std::ptrdiff_t>(ni * c * plane),
                x.begin() + static_cast<std::ptrdiff_t>((ni + 1) * c * plane),
                out.begin() + static_cast<std::ptrdiff_t>(
                                  (static_cast<std::size_t>(ni) * c_total + c_off) * plane));
    }
    c_off += c;
  }
  return make_op({n, c_total, h, w}, std::move(out), parts,
                 [n, c_total, channels, plane](detail::Node& self) {
                   std::size_t c_off = 0;
                   for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                     auto& p = *self.parents[pi];
                     std::size_t c = static_cast<std::size_t>(channels[pi]);
                     if (p.requires_grad) {
                       p.ensure_grad();
                       for (int ni = 0; ni < n; ++ni) {
                         const double* g =
                             self.grad.data() +
                             (static_cast<std::size_t>(ni) * c_total + c_off) * plane;
                         double* dst = p.grad.data() + static_cast<std::size_t>(ni) * c * plane;
                         for (std::size_t i = 0; i < c * plane; ++i) dst[i] += g[i];
                       }
                     }
                     c_off += c;
                   }
                 });
}

namespace detail {

// Direct cross-correlation with odd kernel, stride 1, zero padding k/2.
// Accumulation order is fixed: (ci, ky, kx) outer to inner, rows in order.
inline void conv2d_plane_accum(const double* in_plane, double wv, double* out_plane, int h, int w,
                               int dy, int dx) {
  int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
  int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
  for (int y = y0; y < y1; ++y) {
    const double* src = in_plane + (y + dy) * w + (x0 + dx);
    double* dst = out_plane + y * w + x0;
    int len = x1 - x0;
    for (int x = 0; x < len; ++x) dst[x] += wv * src[x];
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  if (input.rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W]");
  if (kernel.rank() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin,k,k]");
  int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  int cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(2) != kernel.dim(3)) throw ShapeError("conv2d: kernel must be square", 3);
  if (k != 1 && k != 3) throw ValueError("conv2d: only 1x1 and 3x3 kernels supported");
  if (kernel.dim(1) != cin) {
    throw ShapeError("conv2d: kernel input channels " + std::to_string(kernel.dim(1)) +
                         " != input channels " + std::to_string(cin),
                     1);
  }
  if (bias.rank() != 1 || bias.dim(0) != cout) {
    throw ShapeError("conv2d: bias length must equal output channels", 0);
  }
  int half = k / 2;
  std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<double> out(static_cast<std::size_t>(n) * cout * plane);
  const double* x = input.data().data();
  const double* wt = kernel.data().data();
  const double* b = bias.data().data();
  for (int ni = 0; ni < n; ++ni) {
    for (int co = 0; co < cout; ++co) {
      double* out_plane = out.data() + (static_cast<std::size_t>(ni) * cout + co) * plane;
      std::fill(out_plane, out_plane + plane, b[co]);
      for (int ci = 0; ci < cin; ++ci) {
        const double* in_plane = x + (static_cast<std::size_t>(ni) * cin + ci) * plane;
        const double* w9 = wt + (static_cast<std::size_t>(co) * cin + ci) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            detail::conv2d_plane_accum(in_plane, w9[ky * k + kx], out_plane, h, w, ky - half,
                                       kx - half);
          }
        }
      }
    }
  }
  return make_op(
      {n, cout, h, w}, std::move(out), {input, kernel, bias},
      [n, cin, cout, h, w, k, half, plane](detail::Node& self) {
        auto& pin = *self.parents[0];
        auto& pker = *self.parents[1];
        auto& pbias = *self.parents[2];
        const double* g = self.grad.data();
        if (pin.requires_grad) {
          pin.ensure_grad();
          const double* wt = pker.data.data();
          for (int ni = 0; ni < n; ++ni) {
            for (int co = 0; co < cout; ++co) {
              const double* g_plane = g + (static_cast<std::size_t>(ni) * cout + co) * plane;
              for (int ci = 0; ci < cin; ++ci) {
                double* din_plane =
                    pin.grad.data() + (static_cast<std::size_t>(ni) * cin + ci) * plane;
                const double* w9 = wt + (static_cast<std::size_t>(co) * cin + ci) * k * k;
                // dIn[y+dy, x+dx] += w * dOut[y, x]  (correlate with flipped offsets)
                for (int ky = 0; ky < k; ++ky) {
                  for (int kx = 0; kx < k; ++kx) {
                    detail::conv2d_plane_accum(g_plane, w9[ky * k + kx], din_plane, h, w,
                                               half - ky, half - kx);
                  }
                }
              }
            }
          }
        }
        if (pker.requires_grad) {
          pker.ensure_grad();
          const double* x = pin.data.data();
          for (int co = 0; co < cout; ++co) {
            for (int ci = 0; ci < cin; ++ci) {
              double* dw9 = pker.grad.data() + (static_cast<std::size_t>(co) * cin + ci) * k * k;
              for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                  int dy = ky - half, dx = kx - half;
                  int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                  int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                  double acc = 0.0;
                  for (int ni = 0; ni < n; ++ni) {
                    const double* g_plane =
                        g + (static_cast<std::size_t>(ni) * cout + co) * plane;
                    const double* in_plane =
                        x + (static_cast<std::size_t>(ni) * cin + ci) * plane;
                    for (int y = y0; y < y1; ++y) {
                      const double* gr = g_plane + y * w + x0;
                      const double* ir = in_plane + (y + dy) * w + (x0 + dx);
                      int len = x1 - x0;
                      for (int xx = 0; xx < len; ++xx) acc += gr[xx] * ir[xx];
                    }
                  }
                  dw9[ky * k + kx] += acc;
                }
              }
            }
          }
        }
        if (pbias.requires_grad) {
          pbias.ensure_grad();
          for (int ni = 0; ni < n; ++ni) {
            for (int co = 0; co < cout; ++co) {
              const double* g_plane = g + (static_cast<std::size_t>(ni) * cout + co) * plane;
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += g_plane[i];
              pbias.grad[co] += acc;
            }
          }
        }
      });
}

// Reverse-mode pass from a scalar loss. Reachable nodes are visited exactly
// once, in reverse creation order, which is a reverse topological order of
// the executed tape.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ValueError("backward: loss must be scalar");
  if (!std::isfinite(loss.value())) throw NumericError("backward: loss is not finite");
  if (!loss.requires_grad()) return;  // constant loss: nothing to propagate

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node()};
  seen.insert(loss.node());
  while (!stack.empty()) {
    detail::Node* cur = stack.back();
    stack.pop_back();
    order.push_back(cur);
    for (const auto& p : cur->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (detail::Node* node : order) {
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

// ---------------------------------------------------------------------------
// SGD with momentum: v <- momentum * v + grad; param <- param - lr * v.

struct SgdState {
  std::vector<double> velocity;
  double learning_rate = 0.0;
  double momentum = 0.0;
};

inline void sgd_momentum_step(Tensor& param, const std::vector<double>& grad, SgdState& state) {
  if (grad.size() != param.size()) {
    throw ShapeError("sgd_momentum_step: grad length " + std::to_string(grad.size()) +
                     " != param length " + std::to_string(param.size()));
  }
  if (state.velocity.size() != param.size()) {
    throw ShapeError("sgd_momentum_step: velocity length mismatch");
  }
  auto& data = param.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    state.velocity[i] = state.momentum * state.velocity[i] + grad[i];
    data[i] -= state.learning_rate * state.velocity[i];
  }
}

// Convenience wrapper stepping a whole parameter list.
class SgdOptimizer {
 public:
  SgdOptimizer() = default;
  SgdOptimizer(std::vector<Tensor> params, double lr, double momentum) : params_(std::move(params)) {
    for (auto& p : params_) {
      states_.push_back(SgdState{std::vector<double>(p.size(), 0.0), lr, momentum});
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      sgd_momentum_step(params_[i], params_[i].grad(), states_[i]);
    }
  }

  std::vector<SgdState>& states() { return states_; }
  const std::vector<SgdState>& states() const { return states_; }
  std::vector<Tensor>& params() { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<SgdState> states_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradCheckOptions {
  double h = 1e-6;
  double tolerance = 1e-5;
  int max_coords_per_param = 100;
  std::uint64_t seed = 0x6a64636865636bULL;
  // Test hook: adds `corrupt_delta` to the analytic gradient of the named
  // parameter before comparison, to prove the checker catches mismatches.
  std::string corrupt_param;
  double corrupt_delta = 0.0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool pass = false;
};

// Central differences on a deterministic forward closure. The closure must
// rebuild its graph from the current parameter values on every call.
inline GradCheckReport grad_check(std::vector<std::pair<std::string, Tensor>> params,
                                  const std::function<Tensor()>& forward,
                                  const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;

  for (auto& [name, p] : params) p.zero_grad();
  Tensor loss = forward();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& [name, p] : params) {
    std::vector<double> g = p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0);
    if (name == opts.corrupt_param) {
      for (auto& v : g) v += opts.corrupt_delta;
    }
    analytic.push_back(std::move(g));
  }

  Rng rng(opts.seed);
  bool pass = true;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, p] = params[pi];
    GradCheckEntry entry{name, 0.0};
    std::size_t n = p.size();
    std::size_t n_coords = std::min<std::size_t>(n, static_cast<std::size_t>(opts.max_coords_per_param));
    for (std::size_t ci = 0; ci < n_coords; ++ci) {
      std::size_t idx = (n_coords == n) ? ci : static_cast<std::size_t>(rng.below(n));
      auto& data = p.mutable_data();
      double saved = data[idx];
      data[idx] = saved + opts.h;
      double lp;
      {
        NoGradGuard ng;
        lp = forward().value();
      }
      data[idx] = saved - opts.h;
      double lm;
      {
        NoGradGuard ng;
        lm = forward().value();
      }
      data[idx] = saved;
      double fd = (lp - lm) / (2.0 * opts.h);
      double an = analytic[pi][idx];
      double denom = std::max({std::fabs(fd), std::fabs(an), 1e-2});
      double rel = std::fabs(fd - an) / denom;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    if (entry.max_rel_err > opts.tolerance) pass = false;
    report.entries.push_back(std::move(entry));
  }
  report.pass = pass;
  return report;
}

}  // namespace jd
