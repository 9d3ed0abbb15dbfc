#include "plsm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace plsm {

Var Tape::constant(Tensor value) {
  value.require_finite("constant" + (scope_.empty() ? std::string() : " in " + scope_));
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Tensor& source) {
  if (auto it = parameter_ids_.find(&source); it != parameter_ids_.end()) {
    return Var(this, it->second);
  }
  source.require_finite("parameter");
  nodes_.push_back(Node{source, {}, {}, nullptr, true});
  parameter_ids_.emplace(&source, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string("non-finite value produced by ") + op +
                         (scope_.empty() ? std::string() : " in " + scope_));
  }
  bool needs = false;
  for (std::size_t id : inputs) {
    if (id >= nodes_.size()) throw std::logic_error(std::string(op) + ": input is not on this tape");
    needs = needs || nodes_[id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, std::move(inputs), needs ? std::move(backward) : nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor* Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return &n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Tensor* buf = grad_buffer(id);
  if (!buf) return;
  auto dst = buf->data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

const Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

const Tensor* Tape::gradient_for(const Tensor& source) {
  auto it = parameter_ids_.find(&source);
  if (it == parameter_ids_.end()) return nullptr;
  return &grad(it->second);
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw std::logic_error("backward: loss belongs to another tape");
  if (backward_done_) throw std::logic_error("backward: already called on this tape");
  const Tensor& lv = nodes_.at(loss.id()).value;
  if (lv.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(lv.shape()));
  }
  backward_done_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())->fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // Copy out: the closure may grow other buffers but never this node's.
    const Tensor g = n.grad;
    n.backward(*this, g);
  }
}

namespace ops {

namespace {

enum class Broadcast { none, a_row, b_row };

Broadcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1)) {
    if (b.dim(0) == 1) return Broadcast::b_row;
    if (a.dim(0) == 1) return Broadcast::a_row;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

// Reduce a [B, D] gradient to the [1, D] row it was broadcast from.
Tensor reduce_to_row(const Tensor& g) {
  Tensor out({1, g.cols()});
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) out[c] += g.at(r, c);
  return out;
}

template <typename F>
Tensor binary_map(const Tensor& a, const Tensor& b, Broadcast mode, F f) {
  const Tensor& big = mode == Broadcast::a_row ? b : a;
  Tensor out(big.shape());
  const std::size_t cols = big.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double av = mode == Broadcast::a_row ? a[i % cols] : a[i];
    const double bv = mode == Broadcast::b_row ? b[i % cols] : b[i];
    out[i] = f(av, bv);
  }
  return out;
}

void accumulate_broadcast(Tape& t, std::size_t id, Tensor g, bool was_row) {
  if (!t.requires_grad(id)) return;
  t.accumulate(id, was_row ? reduce_to_row(g) : g);
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  Tensor out = plsm::matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, plsm::matmul(g, tp.value(ib), false, true));
    if (tp.requires_grad(ib)) tp.accumulate(ib, plsm::matmul(tp.value(ia), g, true, false));
  });
}

Var add(Var a, Var b) {
  Tape& t = a.tape();
  const Broadcast mode = broadcast_mode("add", a.value(), b.value());
  Tensor out = binary_map(a.value(), b.value(), mode, [](double x, double y) { return x + y; });
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", std::move(out), {ia, ib}, [ia, ib, mode](Tape& tp, const Tensor& g) {
    accumulate_broadcast(tp, ia, g, mode == Broadcast::a_row);
    accumulate_broadcast(tp, ib, g, mode == Broadcast::b_row);
  });
}

Var sub(Var a, Var b) {
  Tape& t = a.tape();
  const Broadcast mode = broadcast_mode("sub", a.value(), b.value());
  Tensor out = binary_map(a.value(), b.value(), mode, [](double x, double y) { return x - y; });
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("sub", std::move(out), {ia, ib}, [ia, ib, mode](Tape& tp, const Tensor& g) {
    accumulate_broadcast(tp, ia, g, mode == Broadcast::a_row);
    if (tp.requires_grad(ib)) {
      Tensor neg = g;
      for (double& v : neg.storage()) v = -v;
      accumulate_broadcast(tp, ib, std::move(neg), mode == Broadcast::b_row);
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = a.tape();
  const Broadcast mode = broadcast_mode("mul", a.value(), b.value());
  Tensor out = binary_map(a.value(), b.value(), mode, [](double x, double y) { return x * y; });
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("mul", std::move(out), {ia, ib}, [ia, ib, mode](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ia);
    const Tensor& bv = tp.value(ib);
    const std::size_t cols = g.cols();
    if (tp.requires_grad(ia)) {
      Tensor ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (mode == Broadcast::b_row ? bv[i % cols] : bv[i]);
      accumulate_broadcast(tp, ia, std::move(ga), mode == Broadcast::a_row);
    }
    if (tp.requires_grad(ib)) {
      Tensor gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * (mode == Broadcast::a_row ? av[i % cols] : av[i]);
      accumulate_broadcast(tp, ib, std::move(gb), mode == Broadcast::b_row);
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record("scale", std::move(out), {ia}, [ia, factor](Tape& tp, const Tensor& g) {
    Tensor* buf = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += factor * g[i];
  });
}

Var add_scalar(Var a, double offset) {
  Tensor out = a.value();
  for (double& v : out.storage()) v += offset;
  const std::size_t ia = a.id();
  return a.tape().record("add_scalar", std::move(out), {ia},
                         [ia](Tape& tp, const Tensor& g) { tp.accumulate(ia, g); });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record("relu", std::move(out), {ia}, [ia](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(ia);
    Tensor* buf = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) (*buf)[i] += g[i];
  });
}

Var square(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= v;
  const std::size_t ia = a.id();
  return a.tape().record("square", std::move(out), {ia}, [ia](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(ia);
    Tensor* buf = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += 2.0 * x[i] * g[i];
  });
}

Var abs(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = std::fabs(v);
  const std::size_t ia = a.id();
  return a.tape().record("abs", std::move(out), {ia}, [ia](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(ia);
    Tensor* buf = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double sign = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
      (*buf)[i] += sign * g[i];
    }
  });
}

Var maximum(Var a, double floor) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = v > floor ? v : floor;
  const std::size_t ia = a.id();
  return a.tape().record("maximum", std::move(out), {ia}, [ia, floor](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(ia);
    Tensor* buf = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > floor) (*buf)[i] += g[i];
  });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, widths;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.value().rows() != rows) {
      throw ShapeError("concat: incompatible shapes " + shape_string(parts.front().shape()) + " and " +
                       shape_string(p.shape()));
    }
    ids.push_back(p.id());
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out({rows, total});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(&v.data()[r * v.cols()], v.cols(), &out.data()[r * total + offset]);
    offset += v.cols();
  }
  return t.record("concat", std::move(out), ids, [ids, widths, total](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* buf = tp.grad_buffer(ids[k])) {
        const std::size_t w = widths[k];
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) buf->at(r, c) += g[r * total + off + c];
      }
      off += widths[k];
    }
  });
}

Var concat(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat(std::span<const Var>(parts));
}

Var slice(Var a, std::size_t begin, std::size_t end) {
  const Tensor& v = a.value();
  if (v.rank() != 2 || begin >= end || end > v.cols()) {
    throw ShapeError("slice: columns [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for shape " + shape_string(v.shape()));
  }
  const std::size_t rows = v.rows(), width = end - begin, cols = v.cols();
  Tensor out({rows, width});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(&v.data()[r * cols + begin], width, &out.data()[r * width]);
  const std::size_t ia = a.id();
  return a.tape().record("slice", std::move(out), {ia}, [ia, begin, width, cols](Tape& tp, const Tensor& g) {
    Tensor* buf = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < width; ++c) (*buf)[r * cols + begin + c] += g.at(r, c);
  });
}

Var sum(Var a) {
  const Tensor& v = a.value();
  const double s = std::accumulate(v.data().begin(), v.data().end(), 0.0);
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor::scalar(s), {ia}, [ia](Tape& tp, const Tensor& g) {
    Tensor* buf = tp.grad_buffer(ia);
    for (double& x : buf->storage()) x += g[0];
  });
}

Var mean(Var a) {
  const Tensor& v = a.value();
  const double n = static_cast<double>(v.size());
  const double s = std::accumulate(v.data().begin(), v.data().end(), 0.0) / n;
  const std::size_t ia = a.id();
  return a.tape().record("mean", Tensor::scalar(s), {ia}, [ia, n](Tape& tp, const Tensor& g) {
    Tensor* buf = tp.grad_buffer(ia);
    for (double& x : buf->storage()) x += g[0] / n;
  });
}

Var row_sqnorm(Var a) {
  const Tensor& v = a.value();
  if (v.rank() != 2) throw ShapeError("row_sqnorm: expected rank-2 input, got " + shape_string(v.shape()));
  Tensor out({v.rows(), 1});
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < v.cols(); ++c) s += v.at(r, c) * v.at(r, c);
    out[r] = s;
  }
  const std::size_t ia = a.id();
  return a.tape().record("row_sqnorm", std::move(out), {ia}, [ia](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(ia);
    Tensor* buf = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) buf->at(r, c) += 2.0 * x.at(r, c) * g[r];
  });
}

Var row_l1norm(Var a) {
  const Tensor& v = a.value();
  if (v.rank() != 2) throw ShapeError("row_l1norm: expected rank-2 input, got " + shape_string(v.shape()));
  Tensor out({v.rows(), 1});
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < v.cols(); ++c) s += std::fabs(v.at(r, c));
    out[r] = s;
  }
  const std::size_t ia = a.id();
  return a.tape().record("row_l1norm", std::move(out), {ia}, [ia](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(ia);
    Tensor* buf = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double xv = x.at(r, c);
        const double sign = xv > 0.0 ? 1.0 : (xv < 0.0 ? -1.0 : 0.0);
        buf->at(r, c) += sign * g[r];
      }
  });
}

Var gather_rows(Var a, std::vector<std::size_t> indices) {
  Tensor out = plsm::gather_rows(a.value(), indices);
  const std::size_t ia = a.id();
  return a.tape().record("gather_rows", std::move(out), {ia},
                         [ia, indices = std::move(indices)](Tape& tp, const Tensor& g) {
                           Tensor* buf = tp.grad_buffer(ia);
                           const std::size_t cols = g.cols();
                           for (std::size_t i = 0; i < indices.size(); ++i)
                             for (std::size_t c = 0; c < cols; ++c) buf->at(indices[i], c) += g.at(i, c);
                         });
}

Var stop_gradient(Var a) {
  const std::size_t ia = a.id();
  Var out = a.tape().record("stop_gradient", a.value(), {ia}, [](Tape&, const Tensor&) {});
  return out;
}

Var topk_mask(Var a, std::size_t k) {
  const Tensor& v = a.value();
  if (v.rank() != 2 || k == 0 || k > v.cols()) {
    throw ShapeError("topk_mask: k=" + std::to_string(k) + " invalid for shape " + shape_string(v.shape()));
  }
  const std::size_t rows = v.rows(), cols = v.cols();
  std::vector<unsigned char> keep(v.size(), 0);
  std::vector<std::size_t> order(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Stable so ties resolve toward the lower column.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return std::fabs(v.at(r, x)) > std::fabs(v.at(r, y));
    });
    for (std::size_t j = 0; j < k; ++j) keep[r * cols + order[j]] = 1;
  }
  Tensor out(v.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? v[i] : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record("topk_mask", std::move(out), {ia}, [ia, keep = std::move(keep)](Tape& tp, const Tensor& g) {
    Tensor* buf = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (keep[i]) (*buf)[i] += g[i];
  });
}

}  // namespace ops

}  // namespace plsm
