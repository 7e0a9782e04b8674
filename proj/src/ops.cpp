#include "doprompt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "doprompt/errors.hpp"
#include "doprompt/kernels.hpp"

namespace doprompt {

namespace {

using detail::Node;
using BackwardFn = std::function<void(Node&)>;

Tensor record(const char* op, Shape shape, std::vector<Real> values,
              std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor* t : inputs) needs = needs || (t->defined() && t->requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->defined() ? t->node() : nullptr);
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

// Gradient buffer of input i, or nullptr when it does not take gradients.
Real* grad_of(Node& self, std::size_t i) {
  Node* in = self.inputs[i].get();
  if (!in || !in->requires_grad) return nullptr;
  return in->grad.data();
}

const std::vector<Real>& value_of(const Node& self, std::size_t i) { return self.inputs[i]->value; }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw IndexError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                     shape_string(x.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<Real> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return record("add", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Real* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<Real> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return record("sub", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (Real* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<Real> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return record("mul", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (Real* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, Real factor) {
  std::vector<Real> out(a.values().begin(), a.values().end());
  for (Real& v : out) v *= factor;
  return record("scale", a.shape(), std::move(out), {&a}, [factor](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (Real v : a.values()) acc += v;
  return record("sum", {}, {static_cast<Real>(acc)}, {&a}, [](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (Real v : a.values()) acc += v;
  const double n = static_cast<double>(a.numel());
  return record("mean", {}, {static_cast<Real>(acc / n)}, {&a}, [](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      const Real share = self.grad[0] / static_cast<Real>(n);
      for (std::size_t i = 0; i < n; ++i) g[i] += share;
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                     shape_string(shape));
  }
  std::vector<Real> out(a.values().begin(), a.values().end());
  return record("reshape", std::move(shape), std::move(out), {&a}, [](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n, Real(0));
  kernels::gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  return record("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    if (Real* g = grad_of(self, 0)) {
      const auto bt = kernels::transpose(bv.data(), k, n);
      kernels::gemm_acc(self.grad.data(), bt.data(), g, m, n, k);
    }
    if (Real* g = grad_of(self, 1)) {
      kernels::gemm_at_b_acc(av.data(), self.grad.data(), g, m, k, n);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.dim(0)) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  }
  const std::size_t in = weight.dim(0), out_dim = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                     shape_string(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  std::vector<Real> out(rows * out_dim, Real(0));
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * out_dim);
  }
  kernels::gemm_acc(x.values().data(), weight.values().data(), out.data(), rows, in, out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  return record("linear", std::move(shape), std::move(out), {&x, &weight, &bias},
                [rows, in, out_dim](Node& self) {
                  const auto& xv = value_of(self, 0);
                  const auto& wv = value_of(self, 1);
                  if (Real* g = grad_of(self, 0)) {
                    const auto wt = kernels::transpose(wv.data(), in, out_dim);
                    kernels::gemm_acc(self.grad.data(), wt.data(), g, rows, out_dim, in);
                  }
                  if (Real* g = grad_of(self, 1)) {
                    kernels::gemm_at_b_acc(xv.data(), self.grad.data(), g, rows, in, out_dim);
                  }
                  if (self.inputs[2]) {
                    if (Real* g = grad_of(self, 2)) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        const Real* gr = self.grad.data() + r * out_dim;
                        for (std::size_t j = 0; j < out_dim; ++j) g[j] += gr[j];
                      }
                    }
                  }
                });
}

Tensor broadcast_add(const Tensor& x, const Tensor& y) {
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.begin(), ys.end(), xs.end() - ys.size())) {
    throw ShapeError("broadcast_add: " + shape_string(ys) + " is not a suffix of " +
                     shape_string(xs));
  }
  const std::size_t inner = y.numel();
  const std::size_t outer = x.numel() / inner;
  std::vector<Real> out(x.values().begin(), x.values().end());
  auto yv = y.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += yv[i];
  }
  return record("broadcast_add", xs, std::move(out), {&x, &y}, [outer, inner](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (Real* g = grad_of(self, 1)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
      }
    }
  });
}

Tensor repeat_leading(const Tensor& x, std::size_t count) {
  if (count == 0) throw ShapeError("repeat_leading: count must be positive");
  const std::size_t n = x.numel();
  std::vector<Real> out(count * n);
  auto xv = x.values();
  for (std::size_t c = 0; c < count; ++c) std::copy(xv.begin(), xv.end(), out.begin() + c * n);
  Shape shape{count};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  return record("repeat_leading", std::move(shape), std::move(out), {&x}, [count, n](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t c = 0; c < count; ++c) {
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[c * n + i];
      }
    }
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  require_axis("concat", parts[0], axis);
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) {
      throw ShapeError("concat: rank mismatch " + shape_string(a) + " vs " + shape_string(b));
    }
    a[axis] = b[axis] = 0;
    if (a != b) {
      throw ShapeError("concat: shapes " + shape_string(p.shape()) + " and " +
                       shape_string(parts[0].shape()) + " differ off axis " +
                       std::to_string(axis));
    }
    shape[axis] += p.dim(axis);
  }
  const AxisSplit total = split_at(shape, axis);
  std::vector<std::size_t> extents;
  std::vector<Real> out(shape_numel(shape));
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t e = p.dim(axis);
    extents.push_back(e);
    auto pv = p.values();
    for (std::size_t o = 0; o < total.outer; ++o) {
      std::copy_n(pv.begin() + o * e * total.inner, e * total.inner,
                  out.begin() + (o * total.extent + offset) * total.inner);
    }
    offset += e;
  }

  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(out);
  node->op = "concat";
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor& p : parts) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& p : parts) node->inputs.push_back(p.node());
    node->backward = [total, extents](Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < extents.size(); ++k) {
        const std::size_t e = extents[k];
        if (Real* g = grad_of(self, k)) {
          for (std::size_t o = 0; o < total.outer; ++o) {
            const Real* src = self.grad.data() + (o * total.extent + off) * total.inner;
            Real* dst = g + o * e * total.inner;
            for (std::size_t i = 0; i < e * total.inner; ++i) dst[i] += src[i];
          }
        }
        off += e;
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_axis("slice", x, axis);
  if (length == 0 || start + length > x.dim(axis)) {
    throw IndexError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside axis of extent " +
                     std::to_string(x.dim(axis)));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<Real> out(shape_numel(shape));
  auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.begin() + (o * s.extent + start) * s.inner, length * s.inner,
                out.begin() + o * length * s.inner);
  }
  return record("slice", std::move(shape), std::move(out), {&x}, [s, start, length](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t o = 0; o < s.outer; ++o) {
        Real* dst = g + (o * s.extent + start) * s.inner;
        const Real* src = self.grad.data() + o * length * s.inner;
        for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  if (x.rank() < 1) throw ShapeError("gather_rows: scalar input");
  if (indices.empty()) throw ContractError("gather_rows: no indices");
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.numel() / rows;
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  for (std::size_t i : idx) {
    if (i >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(i) + " out of range for " +
                       shape_string(x.shape()));
    }
  }
  Shape shape = x.shape();
  shape[0] = idx.size();
  std::vector<Real> out(idx.size() * width);
  auto xv = x.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(xv.begin() + idx[r] * width, width, out.begin() + r * width);
  }
  return record("gather_rows", std::move(shape), std::move(out), {&x},
                [idx = std::move(idx), width](Node& self) {
                  if (Real* g = grad_of(self, 0)) {
                    for (std::size_t r = 0; r < idx.size(); ++r) {
                      const Real* src = self.grad.data() + r * width;
                      Real* dst = g + idx[r] * width;
                      for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
                    }
                  }
                });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_axis("softmax", x, axis);
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<Real> out(x.numel());
  auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const Real ex = std::exp(xv[base + e * s.inner] - mx);
        out[base + e * s.inner] = ex;
        total += ex;
      }
      const Real inv = static_cast<Real>(1.0 / total);
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] *= inv;
    }
  }
  return record("softmax", x.shape(), std::move(out), {&x}, [s](Node& self) {
    Real* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) {
          dot += static_cast<double>(self.value[base + e * s.inner]) * self.grad[base + e * s.inner];
        }
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          g[k] += self.value[k] * (self.grad[k] - static_cast<Real>(dot));
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma " + shape_string(gamma.shape()) + " / beta " +
                     shape_string(beta.shape()) + " do not match input " +
                     shape_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<Real> out(x.numel());
  std::vector<Real> normalized(x.numel());
  std::vector<Real> inv_std(rows);
  auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_std[r] = static_cast<Real>(is);
    for (std::size_t i = 0; i < d; ++i) {
      const Real xhat = static_cast<Real>((row[i] - mu) * is);
      normalized[r * d + i] = xhat;
      out[r * d + i] = xhat * gv[i] + bv[i];
    }
  }
  return record("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                [rows, d, normalized = std::move(normalized),
                 inv_std = std::move(inv_std)](Node& self) {
                  const auto& gv = value_of(self, 1);
                  Real* gx = grad_of(self, 0);
                  Real* gg = grad_of(self, 1);
                  Real* gb = grad_of(self, 2);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const Real* dy = self.grad.data() + r * d;
                    const Real* xhat = normalized.data() + r * d;
                    if (gg || gb) {
                      for (std::size_t i = 0; i < d; ++i) {
                        if (gg) gg[i] += dy[i] * xhat[i];
                        if (gb) gb[i] += dy[i];
                      }
                    }
                    if (gx) {
                      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                      for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = static_cast<double>(dy[i]) * gv[i];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[i];
                      }
                      mean_dxhat /= static_cast<double>(d);
                      mean_dxhat_xhat /= static_cast<double>(d);
                      for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = static_cast<double>(dy[i]) * gv[i];
                        gx[r * d + i] += static_cast<Real>(
                            inv_std[r] * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat));
                      }
                    }
                  }
                });
}

Tensor gelu(const Tensor& x) {
  std::vector<Real> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = static_cast<Real>(v * 0.5 * std::erfc(-v / std::numbers::sqrt2));
  }
  return record("gelu", x.shape(), std::move(out), {&x}, [](Node& self) {
    Real* g = grad_of(self, 0);
    if (!g) return;
    const auto& xv = value_of(self, 0);
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * std::erfc(-v / std::numbers::sqrt2);
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += static_cast<Real>(self.grad[i] * (cdf + v * pdf));
    }
  });
}

Tensor dropout(const Tensor& x, Real rate, std::mt19937_64& rng) {
  if (!(rate >= 0) || !(rate < 1)) throw ContractError("dropout: rate must lie in [0, 1)");
  if (rate == 0) return x;
  const Real keep_scale = Real(1) / (Real(1) - rate);
  // Compare the top 53 bits against the rate; std distributions are not
  // guaranteed to be identical across standard libraries.
  const double threshold = static_cast<double>(rate);
  std::vector<Real> mask(x.numel());
  for (Real& m : mask) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u < threshold ? Real(0) : keep_scale;
  }
  std::vector<Real> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return record("dropout", x.shape(), std::move(out), {&x}, [mask = std::move(mask)](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * mask[i];
    }
  });
}

namespace {

struct AttentionDims {
  std::size_t batch, tokens, dim, heads, head_dim;
};

AttentionDims attention_dims(const Tensor& qkv, std::size_t num_heads) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0) {
    throw ShapeError("attention: expected [B x T x 3D], got " + shape_string(qkv.shape()));
  }
  const std::size_t d = qkv.dim(2) / 3;
  if (num_heads == 0 || d % num_heads != 0) {
    throw ShapeError("attention: model dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(num_heads) + " heads");
  }
  return {qkv.dim(0), qkv.dim(1), d, num_heads, d / num_heads};
}

// probs[b, h, i, j] for the packed qkv layout.
std::vector<Real> attention_probs(std::span<const Real> qkv, const AttentionDims& a) {
  const std::size_t t = a.tokens, stride = 3 * a.dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(a.head_dim));
  std::vector<Real> probs(a.batch * a.heads * t * t);
  std::vector<double> row(t);
  for (std::size_t b = 0; b < a.batch; ++b) {
    const Real* base = qkv.data() + b * t * stride;
    for (std::size_t h = 0; h < a.heads; ++h) {
      const std::size_t qo = h * a.head_dim, ko = a.dim + h * a.head_dim;
      for (std::size_t i = 0; i < t; ++i) {
        const Real* q = base + i * stride + qo;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < t; ++j) {
          const Real* k = base + j * stride + ko;
          double s = 0.0;
          for (std::size_t c = 0; c < a.head_dim; ++c) s += static_cast<double>(q[c]) * k[c];
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        Real* p = probs.data() + ((b * a.heads + h) * t + i) * t;
        for (std::size_t j = 0; j < t; ++j) p[j] = static_cast<Real>(row[j] / total);
      }
    }
  }
  return probs;
}

}  // namespace

Tensor attention_probabilities(const Tensor& qkv, std::size_t num_heads) {
  const AttentionDims a = attention_dims(qkv, num_heads);
  return Tensor({a.batch, a.heads, a.tokens, a.tokens}, attention_probs(qkv.values(), a));
}

Tensor multi_head_attention(const Tensor& qkv, std::size_t num_heads) {
  const AttentionDims a = attention_dims(qkv, num_heads);
  std::vector<Real> probs = attention_probs(qkv.values(), a);
  const std::size_t t = a.tokens, stride = 3 * a.dim;
  std::vector<Real> out(a.batch * t * a.dim, Real(0));
  auto qv = qkv.values();
  for (std::size_t b = 0; b < a.batch; ++b) {
    const Real* base = qv.data() + b * t * stride;
    for (std::size_t h = 0; h < a.heads; ++h) {
      const std::size_t vo = 2 * a.dim + h * a.head_dim;
      for (std::size_t i = 0; i < t; ++i) {
        const Real* p = probs.data() + ((b * a.heads + h) * t + i) * t;
        Real* o = out.data() + (b * t + i) * a.dim + h * a.head_dim;
        for (std::size_t j = 0; j < t; ++j) {
          const Real* v = base + j * stride + vo;
          for (std::size_t c = 0; c < a.head_dim; ++c) o[c] += p[j] * v[c];
        }
      }
    }
  }
  return record(
      "multi_head_attention", {a.batch, t, a.dim}, std::move(out), {&qkv},
      [a, probs = std::move(probs)](Node& self) {
        Real* g = grad_of(self, 0);
        if (!g) return;
        const auto& qv = value_of(self, 0);
        const std::size_t t = a.tokens, stride = 3 * a.dim;
        const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(a.head_dim)));
        std::vector<Real> dp(t);
        for (std::size_t b = 0; b < a.batch; ++b) {
          const Real* base = qv.data() + b * t * stride;
          Real* gbase = g + b * t * stride;
          for (std::size_t h = 0; h < a.heads; ++h) {
            const std::size_t qo = h * a.head_dim, ko = a.dim + qo, vo = 2 * a.dim + qo;
            for (std::size_t i = 0; i < t; ++i) {
              const Real* p = probs.data() + ((b * a.heads + h) * t + i) * t;
              const Real* dout = self.grad.data() + (b * t + i) * a.dim + qo;
              double dot = 0.0;
              for (std::size_t j = 0; j < t; ++j) {
                const Real* v = base + j * stride + vo;
                Real* dv = gbase + j * stride + vo;
                Real s = 0;
                for (std::size_t c = 0; c < a.head_dim; ++c) {
                  s += dout[c] * v[c];
                  dv[c] += p[j] * dout[c];
                }
                dp[j] = s;
                dot += static_cast<double>(p[j]) * s;
              }
              const Real* q = base + i * stride + qo;
              Real* dq = gbase + i * stride + qo;
              for (std::size_t j = 0; j < t; ++j) {
                const Real ds = p[j] * (dp[j] - static_cast<Real>(dot)) * scale;
                const Real* k = base + j * stride + ko;
                Real* dk = gbase + j * stride + ko;
                for (std::size_t c = 0; c < a.head_dim; ++c) {
                  dq[c] += ds * k[c];
                  dk[c] += ds * q[c];
                }
              }
            }
          }
        }
      });
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  if (images.rank() != 4 || patch == 0 || images.dim(2) % patch != 0 ||
      images.dim(3) % patch != 0) {
    throw ShapeError("patchify: images " + shape_string(images.shape()) +
                     " cannot be tiled by patch " + std::to_string(patch));
  }
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t gy = h / patch, gx = w / patch, k = gy * gx, f = c * patch * patch;
  // out index -> image index map, shared by forward and backward.
  std::vector<std::size_t> source(b * k * f);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t py = 0; py < gy; ++py) {
      for (std::size_t px = 0; px < gx; ++px) {
        const std::size_t token = py * gx + px;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t iy = 0; iy < patch; ++iy) {
            for (std::size_t ix = 0; ix < patch; ++ix) {
              const std::size_t feat = (ch * patch + iy) * patch + ix;
              source[(n * k + token) * f + feat] =
                  ((n * c + ch) * h + py * patch + iy) * w + px * patch + ix;
            }
          }
        }
      }
    }
  }
  std::vector<Real> out(source.size());
  auto iv = images.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = iv[source[i]];
  return record("patchify", {b, k, f}, std::move(out), {&images},
                [source = std::move(source)](Node& self) {
                  if (Real* g = grad_of(self, 0)) {
                    for (std::size_t i = 0; i < source.size(); ++i) g[source[i]] += self.grad[i];
                  }
                });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits must be [B x C], got " + shape_string(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for batch " +
                     std::to_string(batch));
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  auto lv = logits.values();
  std::vector<Real> probs(lv.size());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* row = lv.data() + b * classes;
    const Real mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    const double log_z = std::log(z) + mx;
    total += log_z - row[targets[b]];
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = static_cast<Real>(std::exp(row[c] - log_z));
    }
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return record("cross_entropy", {}, {static_cast<Real>(total / static_cast<double>(batch))},
                {&logits},
                [batch, classes, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                  Real* g = grad_of(self, 0);
                  if (!g) return;
                  const Real s = self.grad[0] / static_cast<Real>(batch);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t c = 0; c < classes; ++c) {
                      const Real onehot = static_cast<int>(c) == tgt[b] ? Real(1) : Real(0);
                      g[b * classes + c] += s * (probs[b * classes + c] - onehot);
                    }
                  }
                });
}

Tensor binary_cross_entropy(const Tensor& probs, std::span<const Real> targets, Real eps) {
  if (targets.size() != probs.numel()) {
    throw ShapeError("binary_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + shape_string(probs.shape()));
  }
  auto pv = probs.values();
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double p = pv[i];
    const double t = targets[i];
    double term = 0.0;
    if (t != 0.0) term -= t * std::log(std::max(p, static_cast<double>(eps)));
    if (t != 1.0) term -= (1.0 - t) * std::log(std::max(1.0 - p, static_cast<double>(eps)));
    total += term;
  }
  const std::size_t n = pv.size();
  std::vector<Real> tgt(targets.begin(), targets.end());
  return record("binary_cross_entropy", {}, {static_cast<Real>(total / static_cast<double>(n))},
                {&probs}, [n, eps, tgt = std::move(tgt)](Node& self) {
                  Real* g = grad_of(self, 0);
                  if (!g) return;
                  const auto& pv = value_of(self, 0);
                  const double s = static_cast<double>(self.grad[0]) / static_cast<double>(n);
                  for (std::size_t i = 0; i < n; ++i) {
                    const double p = pv[i];
                    const double t = tgt[i];
                    double d = 0.0;
                    // Clamped regions are flat.
                    if (t != 0.0 && p > eps) d -= t / p;
                    if (t != 1.0 && 1.0 - p > eps) d += (1.0 - t) / (1.0 - p);
                    g[i] += static_cast<Real>(s * d);
                  }
                });
}

Tensor mix_prompts(const Tensor& bank, const Tensor& weights) {
  if (bank.rank() != 3 || weights.rank() != 3 || weights.dim(1) != bank.dim(1) ||
      weights.dim(2) != bank.dim(0)) {
    throw ShapeError("mix_prompts: bank " + shape_string(bank.shape()) +
                     " incompatible with weights " + shape_string(weights.shape()));
  }
  const std::size_t k = bank.dim(0), l = bank.dim(1), d = bank.dim(2), b = weights.dim(0);
  std::vector<Real> out(b * l * d, Real(0));
  auto bv = bank.values(), wv = weights.values();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t j = 0; j < l; ++j) {
      Real* o = out.data() + (n * l + j) * d;
      for (std::size_t dom = 0; dom < k; ++dom) {
        const Real w = wv[(n * l + j) * k + dom];
        const Real* tok = bv.data() + (dom * l + j) * d;
        for (std::size_t c = 0; c < d; ++c) o[c] += w * tok[c];
      }
    }
  }
  return record("mix_prompts", {b, l, d}, std::move(out), {&bank, &weights},
                [k, l, d, b](Node& self) {
                  const auto& bv = value_of(self, 0);
                  const auto& wv = value_of(self, 1);
                  Real* gbank = grad_of(self, 0);
                  Real* gw = grad_of(self, 1);
                  for (std::size_t n = 0; n < b; ++n) {
                    for (std::size_t j = 0; j < l; ++j) {
                      const Real* go = self.grad.data() + (n * l + j) * d;
                      for (std::size_t dom = 0; dom < k; ++dom) {
                        const std::size_t wi = (n * l + j) * k + dom;
                        const Real* tok = bv.data() + (dom * l + j) * d;
                        if (gbank) {
                          Real* gt = gbank + (dom * l + j) * d;
                          for (std::size_t c = 0; c < d; ++c) gt[c] += wv[wi] * go[c];
                        }
                        if (gw) {
                          double s = 0.0;
                          for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(go[c]) * tok[c];
                          gw[wi] += static_cast<Real>(s);
                        }
                      }
                    }
                  }
                });
}

}  // namespace doprompt
