#include "protopool/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "protopool/errors.hpp"

namespace protopool::ad {

const Tensor& Var::value() const { return graph->value(*this); }

double Var::item() const {
  const Tensor& t = value();
  if (t.numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(t.shape()));
  return t[0];
}

Var Graph::leaf(Tensor value, bool requires_grad, Tensor* sink) {
  if (!value.all_finite()) throw DomainError("non-finite value entering the graph");
  Node node;
  node.kind = OpKind::leaf;
  node.value = std::move(value);
  node.value.requires_grad = requires_grad;
  node.value.grad.reset();
  node.requires_grad = requires_grad;
  node.sink = sink;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Graph::constant(Tensor value) { return leaf(std::move(value), false, nullptr); }

Var Graph::variable(Tensor value) { return leaf(std::move(value), true, nullptr); }

Var Graph::parameter(Tensor& source) { return leaf(source, source.requires_grad, &source); }

Var Graph::record(OpKind kind, std::vector<std::size_t> inputs, Tensor value,
                  BackwardFn backward) {
  if (!value.all_finite()) throw DomainError("non-finite value produced in the graph");
  Node node;
  node.kind = kind;
  for (std::size_t id : inputs) node.requires_grad = node.requires_grad || nodes_.at(id).requires_grad;
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

std::vector<double> Graph::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.empty()) return std::vector<double>(node.value.numel(), 0.0);
  return node.grad;
}

std::vector<double>& Graph::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(node.value.numel(), 0.0);
  return node.grad;
}

void Graph::accumulate(std::size_t id, std::span<const double> delta) {
  if (!nodes_[id].requires_grad) return;
  std::vector<double>& g = grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

void Graph::backward(Var root) {
  if (root.graph != this) throw ShapeError("backward root belongs to another graph");
  if (value(root).numel() != 1) throw ShapeError("backward root must have one element");
  for (Node& node : nodes_) node.grad.clear();
  if (!nodes_[root.id].requires_grad) return;
  grad_buffer(root.id)[0] = 1.0;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.grad.empty()) continue;
    if (node.backward) node.backward(*this, id, node.grad);
    if (node.sink != nullptr) {
      Tensor& sink = *node.sink;
      if (!sink.grad) sink.grad.emplace(sink.numel(), 0.0);
      for (std::size_t i = 0; i < node.grad.size(); ++i) (*sink.grad)[i] += node.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw ShapeError("variable is not attached to a graph");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw ShapeError("operands belong to different graphs");
  return graph_of(a);
}

struct Broadcast {
  Shape shape;
  bool a_scalar = false;
  bool b_scalar = false;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), false, false};
  if (b.numel() == 1) return {a.shape(), false, true};
  if (a.numel() == 1) return {b.shape(), true, false};
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                   shape_string(b.shape()));
}

// Binary elementwise op given value f(x, y) and partials (dfdx, dfdy).
template <class F, class Dx, class Dy>
Var binary(OpKind kind, Var a, Var b, const char* name, F f, Dx dfdx, Dy dfdy) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast(av, bv, name);
  Tensor out(bc.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = f(av[bc.a_scalar ? 0 : i], bv[bc.b_scalar ? 0 : i]);
  }
  const std::size_t ia = a.id;
  const std::size_t ib = b.id;
  return g.record(kind, {ia, ib}, std::move(out),
                  [ia, ib, bc, dfdx, dfdy](Graph& gr, std::size_t, std::span<const double> go) {
                    const Tensor& x = gr.value(Var{&gr, ia});
                    const Tensor& y = gr.value(Var{&gr, ib});
                    if (gr.needs_grad(ia)) {
                      std::vector<double>& ga = gr.grad_buffer(ia);
                      for (std::size_t i = 0; i < go.size(); ++i) {
                        const double d = go[i] * dfdx(x[bc.a_scalar ? 0 : i], y[bc.b_scalar ? 0 : i]);
                        ga[bc.a_scalar ? 0 : i] += d;
                      }
                    }
                    if (gr.needs_grad(ib)) {
                      std::vector<double>& gb = gr.grad_buffer(ib);
                      for (std::size_t i = 0; i < go.size(); ++i) {
                        const double d = go[i] * dfdy(x[bc.a_scalar ? 0 : i], y[bc.b_scalar ? 0 : i]);
                        gb[bc.b_scalar ? 0 : i] += d;
                      }
                    }
                  });
}

// Unary elementwise op; `deriv(x, y)` gets input and output values.
template <class F, class D>
Var unary(OpKind kind, Var a, F f, D deriv) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id;
  return g.record(kind, {ia}, std::move(out),
                  [ia, deriv](Graph& gr, std::size_t self, std::span<const double> go) {
                    const Tensor& x = gr.value(Var{&gr, ia});
                    const Tensor& y = gr.value(Var{&gr, self});
                    std::vector<double>& ga = gr.grad_buffer(ia);
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * deriv(x[i], y[i]);
                  });
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
  Shape reduced;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) s.reduced.push_back(shape[i]);
  }
  return s;
}

}  // namespace

Var elementwise(Elementwise op, Var a, std::optional<Var> b) {
  const bool binary_op = op == Elementwise::add || op == Elementwise::sub || op == Elementwise::mul;
  if (binary_op != b.has_value()) {
    throw ShapeError(binary_op ? "binary elementwise op needs two operands"
                               : "unary elementwise op takes one operand");
  }
  switch (op) {
    case Elementwise::add: return add(a, *b);
    case Elementwise::sub: return sub(a, *b);
    case Elementwise::mul: return mul(a, *b);
    case Elementwise::log: return log(a);
    case Elementwise::relu: return relu(a);
  }
  throw ShapeError("unknown elementwise op");
}

Var add(Var a, Var b) {
  return binary(
      OpKind::add, a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      OpKind::sub, a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      OpKind::mul, a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  for (double y : b.value().data()) {
    if (y == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      OpKind::div, a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Var log(Var a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x));
  }
  return unary(
      OpKind::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary(
      OpKind::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var relu(Var a) {
  return unary(
      OpKind::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var abs(Var a) {
  return unary(
      OpKind::abs, a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sqrt(Var a) {
  for (double x : a.value().data()) {
    if (x < 0.0) throw DomainError("sqrt: negative input");
  }
  return unary(
      OpKind::sqrt, a, [](double x) { return std::sqrt(x); },
      [](double, double y) {
        if (y == 0.0) throw DomainError("sqrt: gradient undefined at 0");
        return 0.5 / y;
      });
}

Var add_scalar(Var a, double c) { return add(a, graph_of(a).constant(Tensor::scalar(c))); }

Var scale(Var a, double c) { return mul(a, graph_of(a).constant(Tensor::scalar(c))); }

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()));
  }
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return g.record(OpKind::matmul, {ia, ib}, std::move(out),
                  [ia, ib, m, k, n](Graph& gr, std::size_t, std::span<const double> go) {
                    const Tensor& x = gr.value(Var{&gr, ia});
                    const Tensor& y = gr.value(Var{&gr, ib});
                    if (gr.needs_grad(ia)) {
                      std::vector<double>& ga = gr.grad_buffer(ia);
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t p = 0; p < k; ++p) {
                          double acc = 0.0;
                          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * y[p * n + j];
                          ga[i * k + p] += acc;
                        }
                      }
                    }
                    if (gr.needs_grad(ib)) {
                      std::vector<double>& gb = gr.grad_buffer(ib);
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t p = 0; p < k; ++p) {
                          const double xip = x[i * k + p];
                          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += xip * go[i * n + j];
                        }
                      }
                    }
                  });
}

Var transpose(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  require_rank(av, 2, "transpose");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  }
  const std::size_t ia = a.id;
  return g.record(OpKind::transpose, {ia}, std::move(out),
                  [ia, r, c](Graph& gr, std::size_t, std::span<const double> go) {
                    std::vector<double>& ga = gr.grad_buffer(ia);
                    for (std::size_t i = 0; i < r; ++i) {
                      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
                    }
                  });
}

Var reshape(Var a, Shape shape) {
  Graph& g = graph_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return g.record(OpKind::reshape, {ia}, std::move(out),
                  [ia](Graph& gr, std::size_t, std::span<const double> go) { gr.accumulate(ia, go); });
}

Var reduce(Reduce op, Var t, std::size_t axis) {
  Graph& g = graph_of(t);
  const Tensor& tv = t.value();
  const AxisSplit s = split_axis(tv.shape(), axis, "reduce");
  Tensor out(s.reduced);
  const std::size_t ia = t.id;

  if (op == Reduce::max) {
    std::vector<std::size_t> argmax(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        std::size_t best = o * s.n * s.inner + i;
        for (std::size_t j = 1; j < s.n; ++j) {
          const std::size_t idx = (o * s.n + j) * s.inner + i;
          if (tv[idx] > tv[best]) best = idx;
        }
        argmax[o * s.inner + i] = best;
        out[o * s.inner + i] = tv[best];
      }
    }
    return g.record(OpKind::reduce_max, {ia}, std::move(out),
                    [ia, argmax = std::move(argmax)](Graph& gr, std::size_t, std::span<const double> go) {
                      std::vector<double>& ga = gr.grad_buffer(ia);
                      for (std::size_t r = 0; r < argmax.size(); ++r) ga[argmax[r]] += go[r];
                    });
  }

  const double factor = op == Reduce::mean ? 1.0 / static_cast<double>(s.n) : 1.0;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) acc += tv[(o * s.n + j) * s.inner + i];
      out[o * s.inner + i] = acc * factor;
    }
  }
  return g.record(op == Reduce::mean ? OpKind::reduce_mean : OpKind::reduce_sum, {ia}, std::move(out),
                  [ia, s, factor](Graph& gr, std::size_t, std::span<const double> go) {
                    std::vector<double>& ga = gr.grad_buffer(ia);
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      for (std::size_t i = 0; i < s.inner; ++i) {
                        const double d = go[o * s.inner + i] * factor;
                        for (std::size_t j = 0; j < s.n; ++j) ga[(o * s.n + j) * s.inner + i] += d;
                      }
                    }
                  });
}

Var sum(Var t) {
  Graph& g = graph_of(t);
  double acc = 0.0;
  for (double x : t.value().data()) acc += x;
  const std::size_t ia = t.id;
  return g.record(OpKind::sum_all, {ia}, Tensor::scalar(acc),
                  [ia](Graph& gr, std::size_t, std::span<const double> go) {
                    std::vector<double>& ga = gr.grad_buffer(ia);
                    for (double& x : ga) x += go[0];
                  });
}

Var mean(Var t) { return scale(sum(t), 1.0 / static_cast<double>(t.numel())); }

namespace {

Var softmax_impl(Var t, std::size_t axis, bool take_log) {
  Graph& g = graph_of(t);
  const Tensor& tv = t.value();
  const AxisSplit s = split_axis(tv.shape(), axis, take_log ? "log_softmax" : "softmax");
  Tensor out(tv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
      double hi = tv[at(0)];
      for (std::size_t j = 1; j < s.n; ++j) hi = std::max(hi, tv[at(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) z += std::exp(tv[at(j)] - hi);
      const double log_z = std::log(z);
      for (std::size_t j = 0; j < s.n; ++j) {
        const double shifted = tv[at(j)] - hi;
        out[at(j)] = take_log ? shifted - log_z : std::exp(shifted) / z;
      }
    }
  }
  const std::size_t ia = t.id;
  return g.record(take_log ? OpKind::log_softmax : OpKind::softmax, {ia}, std::move(out),
                  [ia, s, take_log](Graph& gr, std::size_t self, std::span<const double> go) {
                    const Tensor& y = gr.value(Var{&gr, self});
                    std::vector<double>& ga = gr.grad_buffer(ia);
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      for (std::size_t i = 0; i < s.inner; ++i) {
                        auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
                        double dot = 0.0;
                        for (std::size_t j = 0; j < s.n; ++j) {
                          dot += take_log ? go[at(j)] : go[at(j)] * y[at(j)];
                        }
                        for (std::size_t j = 0; j < s.n; ++j) {
                          const std::size_t k = at(j);
                          ga[k] += take_log ? go[k] - std::exp(y[k]) * dot : y[k] * (go[k] - dot);
                        }
                      }
                    }
                  });
}

}  // namespace

Var softmax(Var t, std::size_t axis) { return softmax_impl(t, axis, false); }

Var log_softmax(Var t, std::size_t axis) { return softmax_impl(t, axis, true); }

Var sq_dist_map(Var z, Var p) {
  const Tensor& pv = p.value();
  require_rank(pv, 1, "sq_dist_map");
  Var pm = reshape(p, Shape{1, pv.dim(0)});
  Var d = sq_dist_matrix(z, pm);
  return reshape(d, Shape{z.value().dim(0)});
}

Var sq_dist_matrix(Var z, Var p) {
  Graph& g = graph_of(z, p);
  const Tensor& zv = z.value();
  const Tensor& pv = p.value();
  require_rank(zv, 2, "sq_dist_matrix");
  require_rank(pv, 2, "sq_dist_matrix");
  const std::size_t n = zv.dim(0), d = zv.dim(1), m = pv.dim(0);
  if (pv.dim(1) != d) {
    throw ShapeError("sq_dist: depth mismatch " + shape_string(zv.shape()) + " vs " +
                     shape_string(pv.shape()));
  }
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* zi = zv.data().data() + i * d;
    for (std::size_t j = 0; j < m; ++j) {
      const double* pj = pv.data().data() + j * d;
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = zi[c] - pj[c];
        acc += diff * diff;
      }
      out[i * m + j] = acc;
    }
  }
  const std::size_t iz = z.id, ip = p.id;
  return g.record(OpKind::sq_dist_matrix, {iz, ip}, std::move(out),
                  [iz, ip, n, d, m](Graph& gr, std::size_t, std::span<const double> go) {
                    const Tensor& zt = gr.value(Var{&gr, iz});
                    const Tensor& pt = gr.value(Var{&gr, ip});
                    const bool want_z = gr.needs_grad(iz);
                    const bool want_p = gr.needs_grad(ip);
                    std::vector<double>* gz = want_z ? &gr.grad_buffer(iz) : nullptr;
                    std::vector<double>* gp = want_p ? &gr.grad_buffer(ip) : nullptr;
                    for (std::size_t i = 0; i < n; ++i) {
                      for (std::size_t j = 0; j < m; ++j) {
                        const double w = 2.0 * go[i * m + j];
                        if (w == 0.0) continue;
                        for (std::size_t c = 0; c < d; ++c) {
                          const double diff = w * (zt[i * d + c] - pt[j * d + c]);
                          if (gz) (*gz)[i * d + c] += diff;
                          if (gp) (*gp)[j * d + c] -= diff;
                        }
                      }
                    }
                  });
}

Var slice_rows(Var t, std::size_t begin, std::size_t count) {
  Graph& g = graph_of(t);
  const Tensor& tv = t.value();
  require_rank(tv, 2, "slice_rows");
  const std::size_t rows = tv.dim(0), cols = tv.dim(1);
  if (count == 0 || begin + count > rows) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + shape_string(tv.shape()));
  }
  const auto first = tv.values().begin() + static_cast<std::ptrdiff_t>(begin * cols);
  Tensor out(Shape{count, cols},
             std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * cols)));
  const std::size_t ia = t.id;
  return g.record(OpKind::slice_rows, {ia}, std::move(out),
                  [ia, begin, cols](Graph& gr, std::size_t, std::span<const double> go) {
                    std::vector<double>& ga = gr.grad_buffer(ia);
                    for (std::size_t i = 0; i < go.size(); ++i) ga[begin * cols + i] += go[i];
                  });
}

Var pick(Var t, std::span<const std::size_t> index) {
  Graph& g = graph_of(t);
  const Tensor& tv = t.value();
  require_rank(tv, 2, "pick");
  const std::size_t rows = tv.dim(0), cols = tv.dim(1);
  if (index.size() != rows) throw ShapeError("pick: need one index per row");
  std::vector<std::size_t> flat(rows);
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= cols) throw ShapeError("pick: column index out of range");
    flat[r] = r * cols + index[r];
    out[r] = tv[flat[r]];
  }
  const std::size_t ia = t.id;
  return g.record(OpKind::pick, {ia}, std::move(out),
                  [ia, flat = std::move(flat)](Graph& gr, std::size_t, std::span<const double> go) {
                    std::vector<double>& ga = gr.grad_buffer(ia);
                    for (std::size_t r = 0; r < flat.size(); ++r) ga[flat[r]] += go[r];
                  });
}

Var normalize_rows(Var t) {
  Graph& g = graph_of(t);
  const Tensor& tv = t.value();
  require_rank(tv, 2, "normalize_rows");
  const std::size_t rows = tv.dim(0), cols = tv.dim(1);
  std::vector<double> norms(rows);
  Tensor out(tv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += tv[r * cols + c] * tv[r * cols + c];
    norms[r] = std::sqrt(acc);
    if (!(norms[r] > 0.0)) throw DomainError("normalize_rows: zero-norm row " + std::to_string(r));
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = tv[r * cols + c] / norms[r];
  }
  const std::size_t ia = t.id;
  return g.record(OpKind::normalize_rows, {ia}, std::move(out),
                  [ia, rows, cols, norms = std::move(norms)](Graph& gr, std::size_t self,
                                                             std::span<const double> go) {
                    const Tensor& y = gr.value(Var{&gr, self});
                    std::vector<double>& ga = gr.grad_buffer(ia);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double dot = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * go[r * cols + c];
                      for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t k = r * cols + c;
                        ga[k] += (go[k] - y[k] * dot) / norms[r];
                      }
                    }
                  });
}

}  // namespace protopool::ad
