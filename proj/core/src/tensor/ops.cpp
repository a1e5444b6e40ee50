#include "nervesynth/tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "blas.hpp"
#include "nervesynth/common/error.hpp"

namespace nervesynth {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Builds the output node. Parents and the backward closure are only recorded
// when grad mode is on and some input requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_enabled() && any_requires_grad(inputs)) {
    node->requires_grad = true;
    for (const auto* t : inputs) {
      if (t->defined()) node->parents.push_back(t->node());
    }
    node->backward_fn = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                     std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (grad_enabled() && needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

// Gradient sink for a parent; empty when the parent does not track grads.
std::span<double> sink(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_to_string(t.shape()));
  }
}

// Number of times `b` repeats inside `a` under the suffix broadcasting rule.
std::size_t broadcast_outer(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) return 1;
  const std::size_t nb = b.numel();
  if (nb == 1) return a.numel();
  if (sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - sb.size())) {
    return a.numel() / nb;
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(sb) + " onto " +
                       shape_to_string(sa));
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  const std::size_t outer = broadcast_outer(a, b, name);
  const std::size_t inner = b.numel();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t idx = o * inner + i;
      out[idx] = fwd(ad[idx], bd[i]);
    }
  }
  return make_result(a.shape(), std::move(out), {&a, &b},
                     [outer, inner, da, db](Node& self) {
                       const auto& av = self.parents[0]->data;
                       const auto& bv = self.parents[1]->data;
                       auto ga = sink(self, 0);
                       auto gb = sink(self, 1);
                       const auto& g = self.grad;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < inner; ++i) {
                           const std::size_t idx = o * inner + i;
                           if (!ga.empty()) ga[idx] += g[idx] * da(av[idx], bv[i]);
                           if (!gb.empty()) gb[i] += g[idx] * db(av[idx], bv[i]);
                         }
                       }
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  return make_result(a.shape(), std::move(out), {&a}, [deriv](Node& self) {
    auto ga = sink(self, 0);
    if (ga.empty()) return;
    const auto& x = self.parents[0]->data;
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * deriv(x[i], self.data[i]);
  });
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm(false, false, m, n, k, 1.0, a.data().data(), k, b.data().data(), n, 0.0,
               out.data(), n);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const double* g = self.grad.data();
    auto ga = sink(self, 0);
    auto gb = sink(self, 1);
    // dA = G . B^T, dB = A^T . G
    if (!ga.empty()) {
      detail::gemm(false, true, m, k, n, 1.0, g, n, self.parents[1]->data.data(), n, 1.0,
                   ga.data(), k);
    }
    if (!gb.empty()) {
      detail::gemm(true, false, k, n, m, 1.0, self.parents[0]->data.data(), k, g, n, 1.0,
                   gb.data(), n);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t n = x.dim(0), k = x.dim(1), d = w.dim(0);
  if (w.dim(1) != k) {
    throw DimensionError("linear: input width " + std::to_string(k) + " does not match weight " +
                         shape_to_string(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != d)) {
    throw DimensionError("linear: bias " + shape_to_string(bias.shape()) + " for " +
                         std::to_string(d) + " outputs");
  }
  std::vector<double> out(n * d, 0.0);
  if (has_bias) {
    auto bd = bias.data();
    for (std::size_t r = 0; r < n; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * d);
  }
  detail::gemm(false, true, n, d, k, 1.0, x.data().data(), k, w.data().data(), k,
               has_bias ? 1.0 : 0.0, out.data(), d);
  auto backward = [n, k, d, has_bias](Node& self) {
    const double* g = self.grad.data();
    auto gx = sink(self, 0);
    auto gw = sink(self, 1);
    if (!gx.empty()) {
      detail::gemm(false, false, n, k, d, 1.0, g, d, self.parents[1]->data.data(), k, 1.0,
                   gx.data(), k);
    }
    if (!gw.empty()) {
      detail::gemm(true, false, d, k, n, 1.0, g, d, self.parents[0]->data.data(), k, 1.0,
                   gw.data(), k);
    }
    if (has_bias) {
      auto gbias = sink(self, 2);
      if (!gbias.empty()) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) gbias[j] += g[r * d + j];
      }
    }
  };
  return make_result({n, d}, std::move(out), {&x, &w, &bias}, backward);
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto ad = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  return make_result({c, r}, std::move(out), {&a}, [r, c](Node& self) {
    auto ga = sink(self, 0);
    if (ga.empty()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

Tensor sum(const Tensor& a) {
  auto ad = a.data();
  const double s = std::accumulate(ad.begin(), ad.end(), 0.0);
  return make_result({}, {s}, {&a}, [](Node& self) {
    auto ga = sink(self, 0);
    for (auto& v : ga) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw DimensionError("sum_axis: axis out of range");
  const auto s = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto ad = a.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += ad[(o * s.extent + e) * s.inner + i];
  return make_result(std::move(out_shape), std::move(out), {&a}, [s](Node& self) {
    auto ga = sink(self, 0);
    if (ga.empty()) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i)
          ga[(o * s.extent + e) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const std::size_t extent = a.dim(axis);
  if (extent == 0) throw ContractError("mean_axis over empty axis");
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(extent));
}

Tensor column_norms(const Tensor& w, double eps) {
  require_rank(w, 2, "column_norms");
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  auto wd = w.data();
  std::vector<double> out(cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j] += wd[i * cols + j] * wd[i * cols + j];
  for (auto& v : out) v = std::max(std::sqrt(v), eps);
  return make_result({cols}, std::move(out), {&w}, [rows, cols, eps](Node& self) {
    auto gw = sink(self, 0);
    if (gw.empty()) return;
    const auto& x = self.parents[0]->data;
    for (std::size_t j = 0; j < cols; ++j) {
      const double norm = self.data[j];
      if (norm <= eps) continue;
      const double g = self.grad[j] / norm;
      for (std::size_t i = 0; i < rows; ++i) gw[i * cols + j] += g * x[i * cols + j];
    }
  });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax of a scalar");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * width;
    double* o = out.data() + r * width;
    const double mx = *std::max_element(in, in + width);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < width; ++j) o[j] /= z;
  }
  return make_result(x.shape(), std::move(out), {&x}, [rows, width](Node& self) {
    auto gx = sink(self, 0);
    if (gx.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = self.data.data() + r * width;
      const double* g = self.grad.data() + r * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += p[j] * g[j];
      for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += p[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax of a scalar");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * width;
    const double mx = *std::max_element(in, in + width);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = in[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {&x}, [rows, width](Node& self) {
    auto gx = sink(self, 0);
    if (gx.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* lp = self.data.data() + r * width;
      const double* g = self.grad.data() + r * width;
      double gsum = 0.0;
      for (std::size_t j = 0; j < width; ++j) gsum += g[j];
      for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += g[j] - std::exp(lp[j]) * gsum;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm of a scalar");
  const std::size_t width = x.shape().back();
  if (gamma.numel() != width || beta.numel() != width) {
    throw DimensionError("layer_norm: affine parameters must have " + std::to_string(width) +
                         " entries");
  }
  const std::size_t rows = x.numel() / width;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> out(xd.size());
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += in[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (in[j] - mu) * is;
      xhat[r * width + j] = h;
      out[r * width + j] = h * gd[j] + bd[j];
    }
  }
  auto backward = [rows, width, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    auto gx = sink(self, 0);
    auto ggamma = sink(self, 1);
    auto gbeta = sink(self, 2);
    const auto& gam = self.parents[1]->data;
    const double inv_w = 1.0 / static_cast<double>(width);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * width;
      const double* h = xhat.data() + r * width;
      double sum_gh = 0.0, sum_g = 0.0;
      for (std::size_t j = 0; j < width; ++j) {
        const double gy = g[j] * gam[j];
        sum_g += gy;
        sum_gh += gy * h[j];
        if (!ggamma.empty()) ggamma[j] += g[j] * h[j];
        if (!gbeta.empty()) gbeta[j] += g[j];
      }
      if (gx.empty()) continue;
      for (std::size_t j = 0; j < width; ++j) {
        const double gy = g[j] * gam[j];
        gx[r * width + j] += inv_std[r] * (gy - inv_w * sum_g - h[j] * inv_w * sum_gh);
      }
    }
  };
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta}, std::move(backward));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  if (n == 0) throw ContractError("cross_entropy of an empty batch");
  std::vector<std::size_t> pick(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    }
    pick[i] = i * c + static_cast<std::size_t>(labels[i]);
  }
  Tensor picked = gather(log_softmax(logits), pick, {n});
  return neg(mean(picked));
}

Tensor weighted_mse(const Tensor& pred, const Tensor& target, const Tensor& weight) {
  if (pred.shape() != target.shape() || pred.shape() != weight.shape()) {
    throw DimensionError("weighted_mse: shapes " + shape_to_string(pred.shape()) + ", " +
                         shape_to_string(target.shape()) + ", " + shape_to_string(weight.shape()) +
                         " differ");
  }
  auto wd = weight.data();
  const double total = std::accumulate(wd.begin(), wd.end(), 0.0);
  if (!(total > 0.0)) throw ContractError("weighted_mse: weights must have a positive sum");
  return scale(sum(mul(square(sub(pred, target)), weight)), 1.0 / total);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_to_string(a.shape()) + " to " +
                         shape_to_string(shape));
  }
  auto ad = a.data();
  return make_result(std::move(shape), std::vector<double>(ad.begin(), ad.end()), {&a},
                     [](Node& self) {
                       auto ga = sink(self, 0);
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank()) throw DimensionError("slice: axis out of range");
  if (begin > end || end > a.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside axis of extent " + std::to_string(a.dim(axis)));
  }
  const auto s = split_axis(a.shape(), axis);
  const std::size_t len = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  auto ad = a.data();
  std::vector<double> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = ad.data() + (o * s.extent + begin) * s.inner;
    std::copy(src, src + len * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
  }
  return make_result(std::move(out_shape), std::move(out), {&a}, [s, begin, len](Node& self) {
    auto ga = sink(self, 0);
    if (ga.empty()) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = ga.data() + (o * s.extent + begin) * s.inner;
      const double* g = self.grad.data() + o * len * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += g[i];
    }
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_to_string(ref) + " and " +
                           shape_to_string(s));
    }
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const auto s = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pd = parts[p].data();
    const std::size_t chunk = extents[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(pd.begin() + static_cast<std::ptrdiff_t>(o * chunk),
                pd.begin() + static_cast<std::ptrdiff_t>((o + 1) * chunk),
                out.begin() + static_cast<std::ptrdiff_t>((o * s.extent + offset) * s.inner));
    }
    offset += extents[p];
  }
  return make_result_n(std::move(out_shape), std::move(out), parts,
                       [s, extents](Node& self) {
                         std::size_t offset = 0;
                         for (std::size_t p = 0; p < extents.size(); ++p) {
                           auto gp = sink(self, p);
                           const std::size_t chunk = extents[p] * s.inner;
                           if (!gp.empty()) {
                             for (std::size_t o = 0; o < s.outer; ++o) {
                               const double* g =
                                   self.grad.data() + (o * s.extent + offset) * s.inner;
                               for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[i];
                             }
                           }
                           offset += extents[p];
                         }
                       });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " +
                         shape_to_string(out_shape));
  }
  auto ad = a.data();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= ad.size()) throw DimensionError("gather: index out of range");
    out[i] = ad[index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(std::move(out_shape), std::move(out), {&a},
                     [idx = std::move(idx)](Node& self) {
                       auto ga = sink(self, 0);
                       if (ga.empty()) return;
                       for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += self.grad[i];
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> index;
  index.reserve(ids.size() * d);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw ContractError("embedding: id " + std::to_string(id) + " outside table of " +
                          std::to_string(v));
    }
    for (std::size_t j = 0; j < d; ++j) index.push_back(static_cast<std::size_t>(id) * d + j);
  }
  return gather(table, index, {ids.size(), d});
}

namespace {

struct ConvGeom {
  std::size_t batch, in_ch, height, width, out_ch, kh, kw, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return in_ch * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
};

void im2col(const double* img, const ConvGeom& g, double* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                             static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
}

void col2im_add(const double* col, const ConvGeom& g, double* img) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  ConvGeom g{};
  g.batch = x.dim(0);
  g.in_ch = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_ch = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (w.dim(1) != g.in_ch) {
    throw DimensionError("conv2d: kernel " + shape_to_string(w.shape()) + " for " +
                         std::to_string(g.in_ch) + " input channels");
  }
  if (g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != g.out_ch) throw DimensionError("conv2d: bias size mismatch");

  const std::size_t crow = g.col_rows(), ccol = g.col_cols();
  const std::size_t in_plane = g.in_ch * g.height * g.width;
  const std::size_t out_plane = g.out_ch * ccol;
  std::vector<double> cols(g.batch * crow * ccol);
  std::vector<double> out(g.batch * out_plane, 0.0);
  auto xd = x.data();
  auto wd = w.data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    double* col = cols.data() + b * crow * ccol;
    im2col(xd.data() + b * in_plane, g, col);
    double* o = out.data() + b * out_plane;
    if (has_bias) {
      auto bd = bias.data();
      for (std::size_t oc = 0; oc < g.out_ch; ++oc) std::fill(o + oc * ccol, o + (oc + 1) * ccol, bd[oc]);
    }
    detail::gemm(false, false, g.out_ch, ccol, crow, 1.0, wd.data(), crow, col, ccol,
                 has_bias ? 1.0 : 0.0, o, ccol);
  }
  auto backward = [g, has_bias, cols = std::move(cols)](Node& self) {
    auto gx = sink(self, 0);
    auto gw = sink(self, 1);
    std::span<double> gb = has_bias ? sink(self, 2) : std::span<double>{};
    const std::size_t crow = g.col_rows(), ccol = g.col_cols();
    const std::size_t in_plane = g.in_ch * g.height * g.width;
    const std::size_t out_plane = g.out_ch * ccol;
    std::vector<double> dcol(gx.empty() ? 0 : crow * ccol);
    const double* wv = self.parents[1]->data.data();
    for (std::size_t b = 0; b < g.batch; ++b) {
      const double* go = self.grad.data() + b * out_plane;
      if (!gw.empty()) {
        detail::gemm(false, true, g.out_ch, crow, ccol, 1.0, go, ccol, cols.data() + b * crow * ccol,
                     ccol, 1.0, gw.data(), crow);
      }
      if (!gb.empty()) {
        for (std::size_t oc = 0; oc < g.out_ch; ++oc)
          for (std::size_t i = 0; i < ccol; ++i) gb[oc] += go[oc * ccol + i];
      }
      if (!gx.empty()) {
        detail::gemm(true, false, crow, ccol, g.out_ch, 1.0, wv, crow, go, ccol, 0.0, dcol.data(),
                     ccol);
        col2im_add(dcol.data(), g, gx.data() + b * in_plane);
      }
    }
  };
  return make_result({g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out), {&x, &w, &bias},
                     std::move(backward));
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require_rank(x, 4, "upsample_nearest");
  if (factor == 0) throw ContractError("upsample_nearest: factor must be positive");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<std::size_t> index(b * c * oh * ow);
  for (std::size_t p = 0; p < b * c; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        index[(p * oh + y) * ow + xx] = (p * h + y / factor) * w + xx / factor;
  return gather(x, index, {b, c, oh, ow});
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t seq_len, std::size_t n_heads, std::vector<double>* probs) {
  require_rank(q, 2, "attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q, k, v shapes differ");
  }
  const std::size_t rows = q.dim(0), d = q.dim(1);
  if (seq_len == 0 || rows % seq_len != 0) {
    throw DimensionError("attention: " + std::to_string(rows) + " rows not divisible by sequence length " +
                         std::to_string(seq_len));
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  const std::size_t n_seq = rows / seq_len, dh = d / n_heads, L = seq_len;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> p(n_seq * n_heads * L * L);
  std::vector<double> out(rows * d, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t base = s * L * d + h * dh;
      double* P = p.data() + (s * n_heads + h) * L * L;
      detail::gemm(false, true, L, L, dh, inv_scale, qd + base, d, kd + base, d, 0.0, P, L);
      for (std::size_t i = 0; i < L; ++i) {
        double* row = P + i * L;
        const double mx = *std::max_element(row, row + L);
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < L; ++j) row[j] /= z;
      }
      detail::gemm(false, false, L, dh, L, 1.0, P, L, vd + base, d, 0.0, out.data() + base, d);
    }
  }
  if (probs) *probs = p;
  auto backward = [n_seq, n_heads, L, d, dh, inv_scale, p = std::move(p)](Node& self) {
    auto gq = sink(self, 0);
    auto gk = sink(self, 1);
    auto gv = sink(self, 2);
    const double* qv = self.parents[0]->data.data();
    const double* kv = self.parents[1]->data.data();
    const double* vv = self.parents[2]->data.data();
    std::vector<double> dP(L * L);
    for (std::size_t s = 0; s < n_seq; ++s) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t base = s * L * d + h * dh;
        const double* P = p.data() + (s * n_heads + h) * L * L;
        const double* gO = self.grad.data() + base;
        if (!gv.empty()) {
          detail::gemm(true, false, L, dh, L, 1.0, P, L, gO, d, 1.0, gv.data() + base, d);
        }
        if (gq.empty() && gk.empty()) continue;
        detail::gemm(false, true, L, L, dh, 1.0, gO, d, vv + base, d, 0.0, dP.data(), L);
        for (std::size_t i = 0; i < L; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < L; ++j) dot += dP[i * L + j] * P[i * L + j];
          for (std::size_t j = 0; j < L; ++j) dP[i * L + j] = P[i * L + j] * (dP[i * L + j] - dot);
        }
        if (!gq.empty()) {
          detail::gemm(false, false, L, dh, L, inv_scale, dP.data(), L, kv + base, d, 1.0,
                       gq.data() + base, d);
        }
        if (!gk.empty()) {
          detail::gemm(true, false, L, dh, L, inv_scale, dP.data(), L, qv + base, d, 1.0,
                       gk.data() + base, d);
        }
      }
    }
  };
  return make_result({rows, d}, std::move(out), {&q, &k, &v}, std::move(backward));
}

}  // namespace nervesynth
