#include "dml/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace dml {

namespace {

thread_local int no_grad_depth = 0;
thread_local std::uint64_t node_counter = 0;

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.dim() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_enabled() { return no_grad_depth == 0; }

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) require(d > 0, "tensor dimensions must be positive: " + shape_str(shape));
  require(shape_numel(shape) == values.size(),
          "tensor data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorData>();
  impl->shape = std::move(shape);
  impl->value = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  require_rank(*this, 2, "at");
  return impl_->value.at(row * impl_->shape[1] + col);
}

Tensor Tensor::clone() const { return from(impl_->shape, impl_->value, false); }

// ---------------------------------------------------------------------------

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn backward) {
  auto impl = std::make_shared<TensorData>();
  impl->shape = std::move(shape);
  impl->value = std::move(values);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    auto node = std::make_shared<Node>();
    node->order = ++node_counter;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    impl->node = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

std::vector<double>* grad_sink(const std::shared_ptr<TensorData>& t) {
  if (!t->requires_grad) return nullptr;
  return &t->grad_buffer();
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.size(0), p = a.size(1), q = b.size(1);
  if (b.size(0) != p) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * q, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * q;
    for (std::size_t k = 0; k < p; ++k) {
      const double aik = av[i * p + k];
      const double* brow = bv + k * q;
      for (std::size_t j = 0; j < q; ++j) orow[j] += aik * brow[j];
    }
  }
  auto ai = a.impl(), bi = b.impl();
  return make_result({m, q}, std::move(out), {a, b}, [ai, bi, m, p, q](const TensorData& o) {
    const double* g = o.grad.data();
    if (auto* ga = grad_sink(ai)) {
      const double* bv = bi->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < p; ++k) {
          double acc = 0.0;
          const double* grow = g + i * q;
          const double* brow = bv + k * q;
          for (std::size_t j = 0; j < q; ++j) acc += grow[j] * brow[j];
          (*ga)[i * p + k] += acc;
        }
      }
    }
    if (auto* gb = grad_sink(bi)) {
      const double* av = ai->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * q;
        for (std::size_t k = 0; k < p; ++k) {
          const double aik = av[i * p + k];
          double* gbrow = gb->data() + k * q;
          for (std::size_t j = 0; j < q; ++j) gbrow[j] += aik * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.size(0), n = a.size(1);
  std::vector<double> out(m * n);
  auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  auto ai = a.impl();
  return make_result({n, m}, std::move(out), {a}, [ai, m, n](const TensorData& o) {
    if (auto* ga = grad_sink(ai)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += o.grad[j * m + i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto ai = a.impl();
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(out), {a}, [ai](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
    if (auto* gb = grad_sink(bi))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*gb)[i] += o.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
    if (auto* gb = grad_sink(bi))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*gb)[i] -= o.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i] * bi->value[i];
    if (auto* gb = grad_sink(bi))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*gb)[i] += o.grad[i] * ai->value[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  auto ai = a.impl();
  return make_result(a.shape(), std::move(out), {a}, [ai, factor](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i] * factor;
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "add_rowvec");
  require_rank(b, 1, "add_rowvec");
  const std::size_t m = a.size(0), n = a.size(1);
  if (b.size(0) != n) {
    throw DimensionError("add_rowvec: row width " + std::to_string(n) + " vs vector " + shape_str(b.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  auto ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi, m, n](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
    if (auto* gb = grad_sink(bi))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += o.grad[i * n + j];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto ai = a.impl();
  return make_result({1}, {s}, {a}, [ai](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (auto& g : *ga) g += o.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor squared_distance(const Tensor& a, const Tensor& b) {
  auto d = sub(a, b);
  return sum(mul(d, d));
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
  auto ai = a.impl();
  return make_result(a.shape(), std::move(out), {a}, [ai, inv_sqrt2pi](const TensorData& o) {
    if (auto* ga = grad_sink(ai)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double x = ai->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        (*ga)[i] += o.grad[i] * (cdf + x * pdf);
      }
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.dim()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  const std::size_t c = x.size(axis);
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < x.dim(); ++d) inner *= x.size(d);
  const std::size_t outer = x.numel() / (c * inner);
  auto xv = x.values();
  for (double v : xv)
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * c * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        out[base + j * inner] = std::exp(xv[base + j * inner] - mx);
        z += out[base + j * inner];
      }
      for (std::size_t j = 0; j < c; ++j) out[base + j * inner] /= z;
    }
  }
  auto xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [xi, outer, inner, c](const TensorData& o) {
    if (auto* gx = grad_sink(xi)) {
      for (std::size_t oo = 0; oo < outer; ++oo) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = oo * c * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += o.grad[base + j * inner] * o.value[base + j * inner];
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t idx = base + j * inner;
            (*gx)[idx] += o.value[idx] * (o.grad[idx] - dot);
          }
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.dim() < 1) throw DimensionError("layer_norm: rank-0 input");
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: feature size " + std::to_string(d) + " vs gain " +
                         shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.values(), gv = gain.values(), bv = bias.values();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * is;
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  auto xi = x.impl(), gi = gain.impl(), bi = bias.impl();
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [xi, gi, bi, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const TensorData& o) {
                       auto* gx = grad_sink(xi);
                       auto* gg = grad_sink(gi);
                       auto* gb = grad_sink(bi);
                       const double dd = static_cast<double>(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = o.grad.data() + r * d;
                         const double* xh = xhat.data() + r * d;
                         if (gg)
                           for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g[j] * xh[j];
                         if (gb)
                           for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g[j];
                         if (gx) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double gh = g[j] * gi->value[j];
                             s1 += gh;
                             s2 += gh * xh[j];
                           }
                           for (std::size_t j = 0; j < d; ++j) {
                             const double gh = g[j] * gi->value[j];
                             (*gx)[r * d + j] += inv_std[r] * (gh - s1 / dd - xh[j] * s2 / dd);
                           }
                         }
                       }
                     });
}

AttentionMask AttentionMask::all_visible(std::size_t rows, std::size_t cols) {
  return AttentionMask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

AttentionMask AttentionMask::causal(std::size_t size) {
  AttentionMask m{size, size, std::vector<std::uint8_t>(size * size, 0)};
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * size + j] = 1;
  return m;
}

AttentionMask AttentionMask::key_padding(std::size_t rows, const std::vector<bool>& key_is_pad) {
  AttentionMask m{rows, key_is_pad.size(), std::vector<std::uint8_t>(rows * key_is_pad.size(), 1)};
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < key_is_pad.size(); ++j)
      if (key_is_pad[j]) m.allowed[i * m.cols + j] = 0;
  return m;
}

Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask) {
  require_rank(scores, 2, "masked_softmax");
  const std::size_t tq = scores.size(0), tk = scores.size(1);
  if (mask.rows != tq || mask.cols != tk) {
    throw DimensionError("attention mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                         " does not match scores " + shape_str(scores.shape()));
  }
  auto sv = scores.values();
  std::vector<double> out(tq * tk, 0.0);
  for (std::size_t i = 0; i < tq; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < tk; ++j) {
      if (!mask.at(i, j)) continue;
      const double v = sv[i * tk + j];
      if (!std::isfinite(v)) throw NumericError("masked_softmax: non-finite score");
      mx = std::max(mx, v);
      any = true;
    }
    if (!any) throw NumericError("attention row " + std::to_string(i) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < tk; ++j) {
      if (!mask.at(i, j)) continue;
      out[i * tk + j] = std::exp(sv[i * tk + j] - mx);
      z += out[i * tk + j];
    }
    for (std::size_t j = 0; j < tk; ++j) out[i * tk + j] /= z;
  }
  auto si = scores.impl();
  return make_result(scores.shape(), std::move(out), {scores}, [si, tq, tk](const TensorData& o) {
    if (auto* gs = grad_sink(si)) {
      for (std::size_t i = 0; i < tq; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < tk; ++j) dot += o.grad[i * tk + j] * o.value[i * tk + j];
        for (std::size_t j = 0; j < tk; ++j) {
          const std::size_t idx = i * tk + j;
          (*gs)[idx] += o.value[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_rank(a, 2, "slice_cols");
  const std::size_t m = a.size(0), n = a.size(1);
  if (count == 0 || start + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_str(a.shape()));
  }
  std::vector<double> out(m * count);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = av[i * n + start + j];
  auto ai = a.impl();
  return make_result({m, count}, std::move(out), {a}, [ai, m, n, start, count](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) (*ga)[i * n + start + j] += o.grad[i * count + j];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  require_rank(a, 2, "slice_rows");
  const std::size_t m = a.size(0), n = a.size(1);
  if (count == 0 || start + count > m) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_str(a.shape()));
  }
  auto av = a.values();
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(start * n),
                          av.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  auto ai = a.impl();
  return make_result({count, n}, std::move(out), {a}, [ai, start, n](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[start * n + i] += o.grad[i];
  });
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
  const Shape ts = top.dim() == 1 ? Shape{1, top.size(0)} : top.shape();
  const Shape bs = bottom.dim() == 1 ? Shape{1, bottom.size(0)} : bottom.shape();
  if (ts.size() != 2 || bs.size() != 2 || ts[1] != bs[1]) {
    throw DimensionError("concat_rows: " + shape_str(top.shape()) + " vs " + shape_str(bottom.shape()));
  }
  std::vector<double> out(top.values().begin(), top.values().end());
  out.insert(out.end(), bottom.values().begin(), bottom.values().end());
  auto ti = top.impl(), bi = bottom.impl();
  const std::size_t split = top.numel();
  return make_result({ts[0] + bs[0], ts[1]}, std::move(out), {top, bottom}, [ti, bi, split](const TensorData& o) {
    if (auto* gt = grad_sink(ti))
      for (std::size_t i = 0; i < split; ++i) (*gt)[i] += o.grad[i];
    if (auto* gb = grad_sink(bi))
      for (std::size_t i = split; i < o.grad.size(); ++i) (*gb)[i - split] += o.grad[i];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].size(0);
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.size(0) != m) throw DimensionError("concat_cols: row count mismatch " + shape_str(p.shape()));
    offsets.push_back(n);
    n += p.size(1);
  }
  std::vector<double> out(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].size(1);
    auto pv = parts[k].values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + offsets[k] + j] = pv[i * w + j];
  }
  std::vector<std::shared_ptr<TensorData>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_result({m, n}, std::move(out), parts, [impls, offsets, m, n](const TensorData& o) {
    for (std::size_t k = 0; k < impls.size(); ++k) {
      auto* g = grad_sink(impls[k]);
      if (!g) continue;
      const std::size_t w = impls[k]->shape[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += o.grad[i * n + offsets[k] + j];
    }
  });
}

Tensor row(const Tensor& a, std::size_t index) {
  require_rank(a, 2, "row");
  const std::size_t n = a.size(1);
  if (index >= a.size(0)) throw DimensionError("row: index " + std::to_string(index) + " out of range for " + shape_str(a.shape()));
  auto av = a.values();
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(index * n),
                          av.begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
  auto ai = a.impl();
  return make_result({n}, std::move(out), {a}, [ai, index, n](const TensorData& o) {
    if (auto* ga = grad_sink(ai))
      for (std::size_t j = 0; j < n; ++j) (*ga)[index * n + j] += o.grad[j];
  });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no inputs");
  const std::size_t n = rows[0].numel();
  std::vector<double> out;
  out.reserve(rows.size() * n);
  for (const auto& r : rows) {
    if (r.numel() != n) throw DimensionError("stack_rows: width mismatch " + shape_str(r.shape()));
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  std::vector<std::shared_ptr<TensorData>> impls;
  for (const auto& r : rows) impls.push_back(r.impl());
  return make_result({rows.size(), n}, std::move(out), rows, [impls, n](const TensorData& o) {
    for (std::size_t k = 0; k < impls.size(); ++k)
      if (auto* g = grad_sink(impls[k]))
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += o.grad[k * n + j];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.size(0), d = table.size(1);
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  std::vector<int> idv(ids.begin(), ids.end());
  std::vector<double> out(idv.size() * d);
  auto tv = table.values();
  for (std::size_t t = 0; t < idv.size(); ++t) {
    if (idv[t] < 0 || static_cast<std::size_t>(idv[t]) >= vocab) {
      throw DimensionError("embedding: token id " + std::to_string(idv[t]) + " out of range for vocabulary of " +
                           std::to_string(vocab));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(idv[t] * d), d, out.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  auto ti = table.impl();
  const std::size_t n = idv.size();
  return make_result({n, d}, std::move(out), {table}, [ti, idv = std::move(idv), d](const TensorData& o) {
    if (auto* g = grad_sink(ti))
      for (std::size_t t = 0; t < idv.size(); ++t)
        for (std::size_t j = 0; j < d; ++j) (*g)[static_cast<std::size_t>(idv[t]) * d + j] += o.grad[t * d + j];
  });
}

Tensor dropout(const Tensor& a, double p, const std::function<double()>& uniform01) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  std::vector<double> keep(a.numel());
  const double s = 1.0 / (1.0 - p);
  for (auto& k : keep) k = uniform01() < p ? 0.0 : s;
  return mul(a, Tensor::from(a.shape(), std::move(keep)));
}

std::vector<double> log_softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "log_softmax_rows");
  const std::size_t t = logits.size(0), v = logits.size(1);
  auto lv = logits.values();
  std::vector<double> out(t * v);
  for (std::size_t i = 0; i < t; ++i) {
    double mx = lv[i * v];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, lv[i * v + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(lv[i * v + j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) out[i * v + j] = lv[i * v + j] - lz;
  }
  return out;
}

Tensor cross_entropy_smoothed(const Tensor& logits, std::span<const int> targets, double smoothing, int ignore_id) {
  require_rank(logits, 2, "cross_entropy_smoothed");
  const std::size_t t = logits.size(0), v = logits.size(1);
  if (targets.size() != t) {
    throw DimensionError("cross_entropy_smoothed: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  for (double x : logits.values())
    if (!std::isfinite(x)) throw NumericError("cross_entropy_smoothed: non-finite logit");
  std::vector<int> tg(targets.begin(), targets.end());
  std::size_t count = 0;
  for (int id : tg) {
    if (id == ignore_id) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DimensionError("cross_entropy_smoothed: target " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(v));
    }
    ++count;
  }
  if (count == 0) throw DimensionError("cross_entropy_smoothed: every position is ignored (empty batch)");

  auto logp = log_softmax_rows(logits);
  const double off = smoothing / static_cast<double>(v);
  const double on = 1.0 - smoothing + off;
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (tg[i] == ignore_id) continue;
    double row_loss = 0.0;
    if (smoothing > 0.0) {
      double s = 0.0;
      for (std::size_t j = 0; j < v; ++j) s += logp[i * v + j];
      row_loss -= off * s;
      row_loss -= (on - off) * logp[i * v + static_cast<std::size_t>(tg[i])];
    } else {
      row_loss -= logp[i * v + static_cast<std::size_t>(tg[i])];
    }
    total += row_loss;
  }
  const double inv = 1.0 / static_cast<double>(count);
  auto li = logits.impl();
  return make_result({1}, {total * inv}, {logits},
                     [li, tg = std::move(tg), logp = std::move(logp), t, v, off, on, inv, ignore_id](const TensorData& o) {
                       auto* g = grad_sink(li);
                       if (!g) return;
                       const double go = o.grad[0] * inv;
                       for (std::size_t i = 0; i < t; ++i) {
                         if (tg[i] == ignore_id) continue;
                         for (std::size_t j = 0; j < v; ++j) {
                           double target = off;
                           if (static_cast<int>(j) == tg[i]) target = on;
                           (*g)[i * v + j] += go * (std::exp(logp[i * v + j]) - target);
                         }
                       }
                     });
}

Tensor detach(const Tensor& x) { return x.clone(); }

Tensor straight_through(const Tensor& e, const Tensor& q) {
  require_same_shape(e, q, "straight_through");
  std::vector<double> out(q.values().begin(), q.values().end());
  auto ei = e.impl();
  return make_result(q.shape(), std::move(out), {e}, [ei](const TensorData& o) {
    if (auto* ge = grad_sink(ei))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*ge)[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::shared_ptr<TensorData>> collect_nodes(const Tensor& root) {
  std::vector<std::shared_ptr<TensorData>> out;
  std::unordered_set<const TensorData*> seen;
  std::vector<std::shared_ptr<TensorData>> stack{root.impl()};
  while (!stack.empty()) {
    auto t = std::move(stack.back());
    stack.pop_back();
    if (!t->node || !seen.insert(t.get()).second) continue;
    for (const auto& in : t->node->inputs) stack.push_back(in);
    out.push_back(std::move(t));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a->node->order > b->node->order; });
  return out;
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  if (loss.numel() != 1) throw GraphError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  const auto& impl = loss.impl();
  if (impl->node && impl->node->consumed) {
    throw GraphError("backward called twice on the same graph; run a new forward pass first");
  }
  if (!impl->requires_grad) throw GraphError("backward on a loss that does not require grad");
  auto order = collect_nodes(loss);
  impl->grad_buffer()[0] += 1.0;
  for (const auto& t : order) {
    if (!t->grad.empty() && t->node->backward) t->node->backward(*t);
  }
  // Release saved activations; keep a consumed marker on each node.
  for (const auto& t : order) {
    t->node->backward = nullptr;
    t->node->inputs.clear();
    t->node->consumed = true;
  }
}

std::vector<std::shared_ptr<TensorData>> reachable_leaves(const Tensor& root) {
  std::vector<std::shared_ptr<TensorData>> leaves;
  std::unordered_set<const TensorData*> seen;
  std::vector<std::shared_ptr<TensorData>> stack{root.impl()};
  while (!stack.empty()) {
    auto t = stack.back();
    stack.pop_back();
    if (!seen.insert(t.get()).second) continue;
    if (!t->node) {
      if (t->requires_grad) leaves.push_back(t);
      continue;
    }
    for (const auto& in : t->node->inputs) stack.push_back(in);
  }
  return leaves;
}

}  // namespace dml
