#include "pem/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace pem {

using detail::Node;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

Node* raw(const Tensor& t) { return t.node_ptr().get(); }
bool wants_grad(const Node* n) { return n != nullptr && n->requires_grad; }

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

void check_finite(const std::vector<double>& values, const std::string& op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + op);
  }
}

// Wraps a freshly computed value into a tensor, attaching `backward` when
// recording is on and some input needs a gradient.
Tensor make_result(std::string op, Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(const Node&)> backward) {
  check_finite(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = std::move(op);
  bool any = false;
  if (grad_enabled()) {
    for (const Tensor* in : inputs) {
      if (in && in->defined() && in->requires_grad()) any = true;
    }
  }
  if (any) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const Tensor* in : inputs) {
      if (in && in->defined()) node->parents.push_back(in->node_ptr());
    }
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_result_n(std::string op, Shape shape, std::vector<double> values,
                     const std::vector<Tensor>& inputs,
                     std::function<void(const Node&)> backward) {
  check_finite(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = std::move(op);
  bool any = false;
  if (grad_enabled()) {
    for (const Tensor& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const Tensor& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  require(axis < shape.size(), "axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// Maps every output position to the flat offsets of both broadcast inputs.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

Broadcast broadcast(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  std::vector<std::size_t> a_ext(rank, 1), b_ext(rank, 1);
  for (std::size_t i = 0; i < a.size(); ++i) a_ext[rank - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) b_ext[rank - b.size() + i] = b[i];
  for (std::size_t i = 0; i < rank; ++i) {
    if (a_ext[i] != b_ext[i] && a_ext[i] != 1 && b_ext[i] != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    }
    out[i] = std::max(a_ext[i], b_ext[i]);
  }
  const auto a_str = strides_of(a_ext);
  const auto b_str = strides_of(b_ext);
  const std::size_t total = numel(out);
  Broadcast result{out, std::vector<std::size_t>(total), std::vector<std::size_t>(total)};
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      if (a_ext[d] != 1) ia += counter[d] * a_str[d];
      if (b_ext[d] != 1) ib += counter[d] * b_str[d];
    }
    result.a_index[flat] = ia;
    result.b_index[flat] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out[d]) break;
      counter[d] = 0;
    }
  }
  return result;
}

double apply(Binary op, double a, double b) {
  switch (op) {
    case Binary::add: return a + b;
    case Binary::sub: return a - b;
    case Binary::mul: return a * b;
    case Binary::div: return a / b;
  }
  return 0.0;
}

const char* name_of(Binary op) {
  switch (op) {
    case Binary::add: return "add";
    case Binary::sub: return "sub";
    case Binary::mul: return "mul";
    case Binary::div: return "div";
  }
  return "binary";
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Separable linear interpolation taps along one axis.
struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_lo, w_hi;
};

AxisTaps bilinear_taps(std::size_t in, std::size_t out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_lo.resize(out);
  t.w_hi.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    t.lo[o] = lo;
    t.hi[o] = hi;
    t.w_lo[o] = 1.0 - frac;
    t.w_hi[o] = frac;
  }
  return t;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.dim() == 2 && b.dim() == 2,
          "matmul needs 2-D operands, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  require(b.size(0) == k, "matmul inner extents differ: " + to_string(a.shape()) + " x " +
                              to_string(b.shape()));
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  Node* na = raw(a);
  Node* nb = raw(b);
  return make_result("matmul", {m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](const Node& self) {
    ConstMap g(self.grad.data(), m, n);
    if (wants_grad(na)) {
      MutMap(detail::grad_buffer(*na).data(), m, k).noalias() +=
          g * ConstMap(nb->value.data(), k, n).transpose();
    }
    if (wants_grad(nb)) {
      MutMap(detail::grad_buffer(*nb).data(), k, n).noalias() +=
          ConstMap(na->value.data(), m, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& x) {
  require(x.dim() == 2, "transpose needs a 2-D tensor, got " + to_string(x.shape()));
  return permute(x, {1, 0});
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& in = x.shape();
  require(order.size() == in.size(), "permute order rank mismatch");
  std::vector<bool> seen(order.size(), false);
  Shape out(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    require(order[i] < in.size() && !seen[order[i]], "permute order is not a permutation");
    seen[order[i]] = true;
    out[i] = in[order[i]];
  }
  const auto in_str = strides_of(in);
  const std::size_t total = x.numel();
  // source[flat_out] = flat_in
  std::vector<std::size_t> source(total);
  std::vector<std::size_t> counter(out.size(), 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < out.size(); ++d) src += counter[d] * in_str[order[d]];
    source[flat] = src;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++counter[d] < out[d]) break;
      counter[d] = 0;
    }
  }
  std::vector<double> values(total);
  const auto xv = x.values();
  for (std::size_t i = 0; i < total; ++i) values[i] = xv[source[i]];
  Node* nx = raw(x);
  return make_result("permute", std::move(out), std::move(values), {&x},
                     [nx, source = std::move(source)](const Node& self) {
                       auto& g = detail::grad_buffer(*nx);
                       for (std::size_t i = 0; i < source.size(); ++i) g[source[i]] += self.grad[i];
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.numel(),
          "cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  std::vector<double> values(x.values().begin(), x.values().end());
  Node* nx = raw(x);
  return make_result("reshape", std::move(shape), std::move(values), {&x}, [nx](const Node& self) {
    auto& g = detail::grad_buffer(*nx);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor elementwise(Binary op, const Tensor& a, const Tensor& b) {
  const auto av = a.values();
  const auto bv = b.values();
  Node* na = raw(a);
  Node* nb = raw(b);
  if (a.shape() == b.shape()) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(op, av[i], bv[i]);
    return make_result(name_of(op), a.shape(), std::move(out), {&a, &b}, [op, na, nb](const Node& self) {
      const auto& g = self.grad;
      if (wants_grad(na)) {
        auto& ga = detail::grad_buffer(*na);
        for (std::size_t i = 0; i < g.size(); ++i) {
          switch (op) {
            case Binary::add:
            case Binary::sub: ga[i] += g[i]; break;
            case Binary::mul: ga[i] += g[i] * nb->value[i]; break;
            case Binary::div: ga[i] += g[i] / nb->value[i]; break;
          }
        }
      }
      if (wants_grad(nb)) {
        auto& gb = detail::grad_buffer(*nb);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double bi = nb->value[i];
          switch (op) {
            case Binary::add: gb[i] += g[i]; break;
            case Binary::sub: gb[i] -= g[i]; break;
            case Binary::mul: gb[i] += g[i] * na->value[i]; break;
            case Binary::div: gb[i] -= g[i] * na->value[i] / (bi * bi); break;
          }
        }
      }
    });
  }
  Broadcast bc = broadcast(a.shape(), b.shape());
  std::vector<double> out(bc.a_index.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(op, av[bc.a_index[i]], bv[bc.b_index[i]]);
  Shape shape = bc.out;
  return make_result(name_of(op), std::move(shape), std::move(out), {&a, &b},
                     [op, na, nb, bc = std::move(bc)](const Node& self) {
                       const auto& g = self.grad;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double x = na->value[bc.a_index[i]];
                         const double y = nb->value[bc.b_index[i]];
                         if (wants_grad(na)) {
                           double d = 0;
                           switch (op) {
                             case Binary::add:
                             case Binary::sub: d = 1; break;
                             case Binary::mul: d = y; break;
                             case Binary::div: d = 1 / y; break;
                           }
                           detail::grad_buffer(*na)[bc.a_index[i]] += g[i] * d;
                         }
                         if (wants_grad(nb)) {
                           double d = 0;
                           switch (op) {
                             case Binary::add: d = 1; break;
                             case Binary::sub: d = -1; break;
                             case Binary::mul: d = x; break;
                             case Binary::div: d = -x / (y * y); break;
                           }
                           detail::grad_buffer(*nb)[bc.b_index[i]] += g[i] * d;
                         }
                       }
                     });
}

Tensor elementwise(Binary op, const Tensor& a, double b) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(op, av[i], b);
  Node* na = raw(a);
  return make_result(std::string(name_of(op)) + "_scalar", a.shape(), std::move(out), {&a},
                     [op, na, b](const Node& self) {
                       double d = 1;
                       if (op == Binary::mul) d = b;
                       if (op == Binary::div) d = 1 / b;
                       auto& ga = detail::grad_buffer(*na);
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * d;
                     });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return elementwise(Binary::add, a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return elementwise(Binary::sub, a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise(Binary::mul, a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return elementwise(Binary::div, a, b); }
Tensor operator+(const Tensor& a, double b) { return elementwise(Binary::add, a, b); }
Tensor operator-(const Tensor& a, double b) { return elementwise(Binary::sub, a, b); }
Tensor operator*(const Tensor& a, double b) { return elementwise(Binary::mul, a, b); }
Tensor operator*(double a, const Tensor& b) { return elementwise(Binary::mul, b, a); }
Tensor operator-(const Tensor& a) { return elementwise(Binary::mul, a, -1.0); }

Tensor unary(Unary op, const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (op) {
      case Unary::exp: out[i] = std::exp(xv[i]); break;
      case Unary::log: out[i] = std::log(xv[i]); break;
      case Unary::sqrt: out[i] = std::sqrt(xv[i]); break;
      case Unary::square: out[i] = xv[i] * xv[i]; break;
    }
  }
  Node* nx = raw(x);
  return make_result("unary", x.shape(), std::move(out), {&x}, [op, nx](const Node& self) {
    auto& g = detail::grad_buffer(*nx);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = nx->value[i];
      double d = 0;
      switch (op) {
        case Unary::exp: d = self.value[i]; break;
        case Unary::log: d = 1 / v; break;
        case Unary::sqrt: d = 0.5 / self.value[i]; break;
        case Unary::square: d = 2 * v; break;
      }
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor reduce(Reduce op, const Tensor& x, std::size_t axis, bool keepdim) {
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const auto xv = x.values();
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> arg;  // for max
  if (op == Reduce::max) arg.resize(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double acc = 0;
      switch (op) {
        case Reduce::sum:
        case Reduce::mean:
          for (std::size_t k = 0; k < s.extent; ++k) acc += xv[base + k * s.inner];
          if (op == Reduce::mean) acc /= static_cast<double>(s.extent);
          break;
        case Reduce::max: {
          std::size_t best = 0;
          acc = xv[base];
          for (std::size_t k = 1; k < s.extent; ++k) {
            if (xv[base + k * s.inner] > acc) {
              acc = xv[base + k * s.inner];
              best = k;
            }
          }
          arg[o * s.inner + i] = best;
          break;
        }
        case Reduce::l2norm:
          for (std::size_t k = 0; k < s.extent; ++k) acc += xv[base + k * s.inner] * xv[base + k * s.inner];
          acc = std::sqrt(acc);
          break;
      }
      out[o * s.inner + i] = acc;
    }
  }
  Node* nx = raw(x);
  return make_result("reduce", std::move(out_shape), std::move(out), {&x},
                     [op, nx, s, arg = std::move(arg)](const Node& self) {
                       auto& g = detail::grad_buffer(*nx);
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           const std::size_t r = o * s.inner + i;
                           const std::size_t base = o * s.extent * s.inner + i;
                           const double go = self.grad[r];
                           switch (op) {
                             case Reduce::sum:
                               for (std::size_t k = 0; k < s.extent; ++k) g[base + k * s.inner] += go;
                               break;
                             case Reduce::mean:
                               for (std::size_t k = 0; k < s.extent; ++k)
                                 g[base + k * s.inner] += go / static_cast<double>(s.extent);
                               break;
                             case Reduce::max: g[base + arg[r] * s.inner] += go; break;
                             case Reduce::l2norm: {
                               const double norm = self.value[r];
                               if (norm == 0) break;
                               for (std::size_t k = 0; k < s.extent; ++k)
                                 g[base + k * s.inner] += go * nx->value[base + k * s.inner] / norm;
                               break;
                             }
                           }
                         }
                       }
                     });
}

Tensor sum_all(const Tensor& x) {
  return reduce(Reduce::sum, reshape(x, {x.numel()}), 0);
}

Tensor mean_all(const Tensor& x) {
  return reduce(Reduce::mean, reshape(x, {x.numel()}), 0);
}

Tensor activation(Activation kind, const Tensor& x, std::size_t axis) {
  if (kind == Activation::softmax) return softmax(x, axis);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    switch (kind) {
      case Activation::sigmoid: out[i] = sigmoid_scalar(v); break;
      case Activation::relu: out[i] = v > 0 ? v : 0.0; break;
      case Activation::gelu: out[i] = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); break;
      case Activation::softplus: out[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); break;
      case Activation::softmax: break;
    }
  }
  Node* nx = raw(x);
  return make_result("activation", x.shape(), std::move(out), {&x}, [kind, nx](const Node& self) {
    auto& g = detail::grad_buffer(*nx);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = nx->value[i];
      double d = 0;
      switch (kind) {
        case Activation::sigmoid: d = self.value[i] * (1.0 - self.value[i]); break;
        case Activation::relu: d = v > 0 ? 1.0 : 0.0; break;
        case Activation::gelu: {
          const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
          const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
          d = cdf + v * pdf;
          break;
        }
        case Activation::softplus: d = sigmoid_scalar(v); break;
        case Activation::softmax: break;
      }
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor sigmoid(const Tensor& x) { return activation(Activation::sigmoid, x); }
Tensor relu(const Tensor& x) { return activation(Activation::relu, x); }
Tensor gelu(const Tensor& x) { return activation(Activation::gelu, x); }
Tensor softplus(const Tensor& x) { return activation(Activation::softplus, x); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = xv[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      double total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const double e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  }
  Node* nx = raw(x);
  return make_result("softmax", x.shape(), std::move(out), {&x}, [nx, s](const Node& self) {
    auto& g = detail::grad_buffer(*nx);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0;
        for (std::size_t k = 0; k < s.extent; ++k) {
          dot += self.grad[base + k * s.inner] * self.value[base + k * s.inner];
        }
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t j = base + k * s.inner;
          g[j] += self.value[j] * (self.grad[j] - dot);
        }
      }
    }
  });
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  require(x.dim() == 2, "masked_softmax needs a 2-D tensor");
  require(keep.size() == x.numel(), "masked_softmax keep mask size mismatch");
  const std::size_t rows = x.size(0), cols = x.size(1);
  const auto xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) any = any || keep[base + c] != 0;
    auto kept = [&](std::size_t c) { return !any || keep[base + c] != 0; };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (kept(c)) mx = std::max(mx, xv[base + c]);
    }
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!kept(c)) continue;
      out[base + c] = std::exp(xv[base + c] - mx);
      total += out[base + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[base + c] /= total;
  }
  Node* nx = raw(x);
  return make_result("masked_softmax", x.shape(), std::move(out), {&x}, [nx, rows, cols](const Node& self) {
    auto& g = detail::grad_buffer(*nx);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * cols;
      double dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.grad[base + c] * self.value[base + c];
      // Masked entries have value 0 and so receive no gradient.
      for (std::size_t c = 0; c < cols; ++c) {
        g[base + c] += self.value[base + c] * (self.grad[base + c] - dot);
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions options) {
  require(x.dim() == 3, "conv2d input must be [C,H,W], got " + to_string(x.shape()));
  require(w.dim() == 4 && w.size(2) == w.size(3),
          "conv2d weight must be [C_out,C_in,k,k], got " + to_string(w.shape()));
  const std::size_t c_in = x.size(0), h = x.size(1), wd = x.size(2);
  const std::size_t c_out = w.size(0), k = w.size(2);
  require(w.size(1) == c_in, "conv2d channel mismatch: input " + to_string(x.shape()) +
                                 ", weight " + to_string(w.shape()));
  require(k == 1 || k == 3, "conv2d supports kernel sizes 1 and 3");
  require(options.stride >= 1, "conv2d stride must be positive");
  if (bias.defined()) require(bias.numel() == c_out, "conv2d bias size mismatch");
  require(h + 2 * options.pad >= k && wd + 2 * options.pad >= k, "conv2d kernel larger than padded input");
  const std::size_t stride = options.stride, pad = options.pad;
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
  const std::size_t rows = c_in * k * k, cols = ho * wo;

  // cols_src[r * cols + p] = flat input index, or -1 for padding.
  std::vector<std::ptrdiff_t> src(rows * cols);
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::size_t r = (c * k + ky) * k + kx;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(wd);
            src[r * cols + oy * wo + ox] =
                inside ? static_cast<std::ptrdiff_t>((c * h + static_cast<std::size_t>(iy)) * wd +
                                                     static_cast<std::size_t>(ix))
                       : -1;
          }
        }
      }
    }
  }
  const auto xv = x.values();
  std::vector<double> columns(rows * cols);
  for (std::size_t i = 0; i < columns.size(); ++i) columns[i] = src[i] >= 0 ? xv[static_cast<std::size_t>(src[i])] : 0.0;

  std::vector<double> out(c_out * cols);
  MutMap om(out.data(), c_out, cols);
  om.noalias() = ConstMap(w.values().data(), c_out, rows) * ConstMap(columns.data(), rows, cols);
  if (bias.defined()) {
    const auto bv = bias.values();
    for (std::size_t o = 0; o < c_out; ++o) om.row(o).array() += bv[o];
  }
  Node* nx = raw(x);
  Node* nw = raw(w);
  Node* nb = bias.defined() ? raw(bias) : nullptr;
  return make_result("conv2d", {c_out, ho, wo}, std::move(out), {&x, &w, &bias},
                     [nx, nw, nb, c_out, rows, cols, src = std::move(src),
                      columns = std::move(columns)](const Node& self) {
                       ConstMap g(self.grad.data(), c_out, cols);
                       if (wants_grad(nw)) {
                         MutMap(detail::grad_buffer(*nw).data(), c_out, rows).noalias() +=
                             g * ConstMap(columns.data(), rows, cols).transpose();
                       }
                       if (wants_grad(nb)) {
                         auto& gb = detail::grad_buffer(*nb);
                         for (std::size_t o = 0; o < c_out; ++o) gb[o] += g.row(o).sum();
                       }
                       if (wants_grad(nx)) {
                         std::vector<double> dcols(rows * cols);
                         MutMap(dcols.data(), rows, cols).noalias() =
                             ConstMap(nw->value.data(), c_out, rows).transpose() * g;
                         auto& gx = detail::grad_buffer(*nx);
                         for (std::size_t i = 0; i < dcols.size(); ++i) {
                           if (src[i] >= 0) gx[static_cast<std::size_t>(src[i])] += dcols[i];
                         }
                       }
                     });
}

Tensor bilinear_sample(const Tensor& x, const Tensor& points) {
  require(x.dim() == 3, "bilinear_sample input must be [C,H,W]");
  require(points.dim() == 2 && points.size(1) == 2, "bilinear_sample points must be [P,2]");
  const std::size_t c = x.size(0), h = x.size(1), w = x.size(2), p = points.size(0);
  const auto xv = x.values();
  const auto pv = points.values();

  struct Tap {
    std::ptrdiff_t y0, x0;
    double ly, lx;
  };
  std::vector<Tap> taps(p);
  for (std::size_t i = 0; i < p; ++i) {
    const double y = pv[2 * i], xx = pv[2 * i + 1];
    const double fy = std::floor(y), fx = std::floor(xx);
    taps[i] = {static_cast<std::ptrdiff_t>(fy), static_cast<std::ptrdiff_t>(fx), y - fy, xx - fx};
  }
  const auto hh = static_cast<std::ptrdiff_t>(h), ww = static_cast<std::ptrdiff_t>(w);
  auto read = [&](std::size_t ch, std::ptrdiff_t yy, std::ptrdiff_t xx) {
    if (yy < 0 || xx < 0 || yy >= hh || xx >= ww) return 0.0;
    return xv[(ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
  };
  std::vector<double> out(c * p);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < p; ++i) {
      const Tap& t = taps[i];
      const double v00 = read(ch, t.y0, t.x0), v01 = read(ch, t.y0, t.x0 + 1);
      const double v10 = read(ch, t.y0 + 1, t.x0), v11 = read(ch, t.y0 + 1, t.x0 + 1);
      out[ch * p + i] = (1 - t.ly) * ((1 - t.lx) * v00 + t.lx * v01) + t.ly * ((1 - t.lx) * v10 + t.lx * v11);
    }
  }
  Node* nx = raw(x);
  Node* np = raw(points);
  return make_result("bilinear_sample", {c, p}, std::move(out), {&x, &points},
                     [nx, np, c, h, w, p, hh, ww, taps = std::move(taps)](const Node& self) {
                       auto inside = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) {
                         return yy >= 0 && xx >= 0 && yy < hh && xx < ww;
                       };
                       auto flat = [&](std::size_t ch, std::ptrdiff_t yy, std::ptrdiff_t xx) {
                         return (ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx);
                       };
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         for (std::size_t i = 0; i < p; ++i) {
                           const Tap& t = taps[i];
                           const double g = self.grad[ch * p + i];
                           if (g == 0) continue;
                           const std::ptrdiff_t ys[2] = {t.y0, t.y0 + 1};
                           const std::ptrdiff_t xs[2] = {t.x0, t.x0 + 1};
                           const double wy[2] = {1 - t.ly, t.ly};
                           const double wx[2] = {1 - t.lx, t.lx};
                           double v[2][2] = {{0, 0}, {0, 0}};
                           for (int a = 0; a < 2; ++a) {
                             for (int b = 0; b < 2; ++b) {
                               if (!inside(ys[a], xs[b])) continue;
                               v[a][b] = nx->value[flat(ch, ys[a], xs[b])];
                               if (wants_grad(nx)) detail::grad_buffer(*nx)[flat(ch, ys[a], xs[b])] += g * wy[a] * wx[b];
                             }
                           }
                           if (wants_grad(np)) {
                             auto& gp = detail::grad_buffer(*np);
                             gp[2 * i] += g * ((1 - t.lx) * (v[1][0] - v[0][0]) + t.lx * (v[1][1] - v[0][1]));
                             gp[2 * i + 1] += g * ((1 - t.ly) * (v[0][1] - v[0][0]) + t.ly * (v[1][1] - v[1][0]));
                           }
                         }
                       }
                     });
}

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require(x.dim() == 3, "resize_bilinear input must be [C,H,W]");
  require(out_h > 0 && out_w > 0, "resize target must be positive");
  const std::size_t c = x.size(0), h = x.size(1), w = x.size(2);
  AxisTaps ty = bilinear_taps(h, out_h);
  AxisTaps tx = bilinear_taps(w, out_w);
  const auto xv = x.values();
  std::vector<double> out(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = xv.data() + ch * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const double* r0 = plane + ty.lo[oy] * w;
      const double* r1 = plane + ty.hi[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double top = tx.w_lo[ox] * r0[tx.lo[ox]] + tx.w_hi[ox] * r0[tx.hi[ox]];
        const double bottom = tx.w_lo[ox] * r1[tx.lo[ox]] + tx.w_hi[ox] * r1[tx.hi[ox]];
        out[(ch * out_h + oy) * out_w + ox] = ty.w_lo[oy] * top + ty.w_hi[oy] * bottom;
      }
    }
  }
  Node* nx = raw(x);
  return make_result("resize_bilinear", {c, out_h, out_w}, std::move(out), {&x},
                     [nx, c, h, w, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](const Node& self) {
                       auto& g = detail::grad_buffer(*nx);
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double* plane = g.data() + ch * h * w;
                         for (std::size_t oy = 0; oy < out_h; ++oy) {
                           for (std::size_t ox = 0; ox < out_w; ++ox) {
                             const double go = self.grad[(ch * out_h + oy) * out_w + ox];
                             plane[ty.lo[oy] * w + tx.lo[ox]] += go * ty.w_lo[oy] * tx.w_lo[ox];
                             plane[ty.lo[oy] * w + tx.hi[ox]] += go * ty.w_lo[oy] * tx.w_hi[ox];
                             plane[ty.hi[oy] * w + tx.lo[ox]] += go * ty.w_hi[oy] * tx.w_lo[ox];
                             plane[ty.hi[oy] * w + tx.hi[ox]] += go * ty.w_hi[oy] * tx.w_hi[ox];
                           }
                         }
                       }
                     });
}

Tensor resize_nearest(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require(x.dim() == 3, "resize_nearest input must be [C,H,W]");
  require(out_h > 0 && out_w > 0, "resize target must be positive");
  const std::size_t c = x.size(0), h = x.size(1), w = x.size(2);
  std::vector<std::size_t> source(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const std::size_t iy = std::min(oy * h / out_h, h - 1);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t ix = std::min(ox * w / out_w, w - 1);
        source[(ch * out_h + oy) * out_w + ox] = (ch * h + iy) * w + ix;
      }
    }
  }
  const auto xv = x.values();
  std::vector<double> out(source.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[source[i]];
  Node* nx = raw(x);
  return make_result("resize_nearest", {c, out_h, out_w}, std::move(out), {&x},
                     [nx, source = std::move(source)](const Node& self) {
                       auto& g = detail::grad_buffer(*nx);
                       for (std::size_t i = 0; i < source.size(); ++i) g[source[i]] += self.grad[i];
                     });
}

std::vector<std::size_t> argmax_axis(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  const auto xv = x.values();
  std::vector<std::size_t> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      std::size_t best = 0;
      double best_value = xv[base];
      for (std::size_t k = 1; k < s.extent; ++k) {
        if (xv[base + k * s.inner] > best_value) {
          best_value = xv[base + k * s.inner];
          best = k;
        }
      }
      out[o * s.inner + i] = best;
    }
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require(x.dim() == 2, "gather_rows needs a 2-D tensor");
  require(!rows.empty(), "gather_rows needs at least one index");
  const std::size_t n = x.size(0), d = x.size(1);
  const auto xv = x.values();
  std::vector<double> out(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < n, "gather_rows index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  Node* nx = raw(x);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result("gather_rows", {rows.size(), d}, std::move(out), {&x},
                     [nx, d, idx = std::move(idx)](const Node& self) {
                       auto& g = detail::grad_buffer(*nx);
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
                       }
                     });
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_at(x.shape(), axis);
  require(length > 0 && start + length <= s.extent, "narrow range out of bounds");
  Shape shape = x.shape();
  shape[axis] = length;
  const auto xv = x.values();
  std::vector<double> out(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * s.extent + start) * s.inner), length * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  }
  Node* nx = raw(x);
  return make_result("narrow", std::move(shape), std::move(out), {&x}, [nx, s, start, length](const Node& self) {
    auto& g = detail::grad_buffer(*nx);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < length * s.inner; ++j) {
        g[(o * s.extent + start) * s.inner + j] += self.grad[o * length * s.inner + j];
      }
    }
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  require(!parts.empty(), "concat needs at least one tensor");
  Shape shape = parts[0].shape();
  require(axis < shape.size(), "concat axis out of range");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape other = p.shape();
    require(other.size() == shape.size(), "concat rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (d != axis) require(other[d] == shape[d], "concat extent mismatch");
    }
    total += other[axis];
  }
  shape[axis] = total;
  const AxisSplit s = split_at(shape, axis);
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.size(axis);
    const auto pv = p.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner), len * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * s.inner));
    }
    offset += len;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<Node*> nodes;
  std::vector<std::size_t> lengths;
  for (const Tensor& p : parts) {
    nodes.push_back(raw(p));
    lengths.push_back(p.size(axis));
  }
  return make_result_n("concat", std::move(shape), std::move(out), inputs,
                       [nodes, lengths, offsets, s, total](const Node& self) {
                         for (std::size_t k = 0; k < nodes.size(); ++k) {
                           if (!wants_grad(nodes[k])) continue;
                           auto& g = detail::grad_buffer(*nodes[k]);
                           const std::size_t len = lengths[k];
                           for (std::size_t o = 0; o < s.outer; ++o) {
                             for (std::size_t j = 0; j < len * s.inner; ++j) {
                               g[o * len * s.inner + j] += self.grad[(o * total + offsets[k]) * s.inner + j];
                             }
                           }
                         }
                       });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? y + b : y;
}

Tensor normalize_rows(const Tensor& x, double eps) {
  require(x.dim() == 2, "normalize_rows needs a 2-D tensor");
  Tensor centered = x - reduce(Reduce::mean, x, 1, true);
  Tensor var = reduce(Reduce::mean, unary(Unary::square, centered), 1, true);
  return centered / unary(Unary::sqrt, var + eps);
}

}  // namespace pem
