#include "fusedet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fusedet {

namespace {

Tape& same_tape(std::string_view op, const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape();
}

std::string mismatch(std::string_view op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b);
}

enum class Broadcast { kNone, kScalarA, kScalarB };

Broadcast broadcast_mode(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (b.size() == 1) return Broadcast::kScalarB;
  if (a.size() == 1) return Broadcast::kScalarA;
  throw ShapeError(mismatch(op, a.shape(), b.shape()));
}

// f(a, b) -> value; da(a, b) -> d out / d a; db(a, b) -> d out / d b.
template <class F, class DA, class DB>
Var binary(std::string_view op, const Var& a, const Var& b, F f, DA da, DB db) {
  Tape& tape = same_tape(op, a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast mode = broadcast_mode(op, av, bv);
  const Tensor& like = mode == Broadcast::kScalarA ? bv : av;
  Tensor out(like.shape());
  const std::size_t n = out.size();
  const bool sa = mode == Broadcast::kScalarA;
  const bool sb = mode == Broadcast::kScalarB;
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[sa ? 0 : i], bv[sb ? 0 : i]);

  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return tape.record(std::move(out), {a, b}, [=](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    if (Tensor* ga = t.grad_slot(ia)) {
      for (std::size_t i = 0; i < n; ++i) {
        (*ga)[sa ? 0 : i] += g[i] * da(x[sa ? 0 : i], y[sb ? 0 : i]);
      }
    }
    if (Tensor* gb = t.grad_slot(ib)) {
      for (std::size_t i = 0; i < n; ++i) {
        (*gb)[sb ? 0 : i] += g[i] * db(x[sa ? 0 : i], y[sb ? 0 : i]);
      }
    }
  });
}

// f(x) -> value; df(x, y) -> d y / d x.
template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(xv[i]);
  const std::size_t ix = x.id();
  const std::size_t iy = x.tape()->size();
  return x.tape()->record(std::move(out), {x}, [=](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(ix);
    if (!gx) return;
    const Tensor& in = t.value(ix);
    const Tensor& res = t.value(iy);
    for (std::size_t i = 0; i < n; ++i) (*gx)[i] += g[i] * df(in[i], res[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                [](double x, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  for (double v : b.value().data()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary("div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
                [](double x, double y) { return -x / (y * y); });
}

Var maximum(const Var& a, const Var& b) {
  return binary("maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
                [](double x, double y) { return x >= y ? 1.0 : 0.0; },
                [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Var scale(const Var& x, double factor) {
  return unary(x, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Var shift(const Var& x, double offset) {
  return unary(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var abs(const Var& x) {
  return unary(x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sqrt(const Var& x) {
  for (double v : x.value().data()) {
    if (v < 0.0) throw DomainError("sqrt: negative input");
  }
  return unary(x, [](double v) { return std::sqrt(v); },
               [](double, double y) {
                 if (y == 0.0) throw DomainError("sqrt: gradient undefined at zero");
                 return 0.5 / y;
               });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape()->record(Tensor::scalar(s), {x}, [ix](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (double& v : gx->data()) v += g[0];
    }
  });
}

Var mean(const Var& x) {
  const std::size_t n = x.value().size();
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape()->record(Tensor::scalar(s / static_cast<double>(n)), {x}, [ix, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      const double d = g[0] / static_cast<double>(n);
      for (double& v : gx->data()) v += d;
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError(mismatch("matmul", av.shape(), bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [=](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    if (Tensor* ga = t.grad_slot(ia)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * y[p * n + j];
          (*ga)[i * k + p] += s;
        }
      }
    }
    if (Tensor* gb = t.grad_slot(ib)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double xip = x[i * k + p];
          if (xip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += xip * g[i * n + j];
        }
      }
    }
  });
}

Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_string(xv.shape()));
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += g[j * r + i];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_size(shape) != x.value().size()) {
    throw ShapeError(mismatch("reshape", x.shape(), shape));
  }
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape* tape = parts.front().tape();
  const Shape& first = parts.front().shape();
  if (first.empty()) throw ShapeError("concat: inputs must have rank >= 1");
  Shape out_shape = first;
  out_shape[0] = 0;
  std::vector<std::size_t> ids, offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape() != tape) throw std::invalid_argument("concat: operands live on different tapes");
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw ShapeError(mismatch("concat", first, s));
    }
    out_shape[0] += s[0];
    ids.push_back(p.id());
    offsets.push_back(total);
    total += p.value().size();
  }
  Tensor out(out_shape);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[k]));
  }
  return tape->record(std::move(out), parts, [ids, offsets](Tape& t, const Tensor& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gk = t.grad_slot(ids[k])) {
        for (std::size_t i = 0; i < gk->size(); ++i) (*gk)[i] += g[offsets[k] + i];
      }
    }
  });
}

Var conv2d(const Var& x, const Var& weight, const Var* bias, Conv2dOptions options) {
  Tape& tape = same_tape("conv2d", x, weight);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0)) {
    throw ShapeError(mismatch("conv2d", xv.shape(), wv.shape()));
  }
  if (options.stride != 1 && options.stride != 2) {
    throw std::invalid_argument("conv2d: stride must be 1 or 2, got " + std::to_string(options.stride));
  }
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const std::size_t O = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
  const std::size_t S = options.stride, P = options.padding;
  if (H + 2 * P < KH || W + 2 * P < KW) {
    throw ShapeError(mismatch("conv2d", xv.shape(), wv.shape()) + " (kernel larger than padded input)");
  }
  const std::size_t OH = (H + 2 * P - KH) / S + 1;
  const std::size_t OW = (W + 2 * P - KW) / S + 1;
  if (bias) {
    if (bias->tape() != &tape || bias->value().rank() != 1 || bias->value().dim(0) != O) {
      throw ShapeError(mismatch("conv2d bias", bias->shape(), Shape{O}));
    }
  }

  // Valid output index range [lo, hi) for kernel offset k along an axis of length n.
  auto out_range = [S, P](std::size_t k, std::size_t n, std::size_t on) {
    const long long kk = static_cast<long long>(k), pp = static_cast<long long>(P), ss = static_cast<long long>(S);
    long long lo = (pp - kk + ss - 1) / ss;
    if (pp - kk <= 0) lo = 0;
    long long hi = (static_cast<long long>(n) - 1 + pp - kk) / ss + 1;
    if (static_cast<long long>(n) - 1 + pp - kk < 0) hi = 0;
    lo = std::max(lo, 0LL);
    hi = std::min(hi, static_cast<long long>(on));
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(lo),
                                               static_cast<std::size_t>(std::max(lo, hi)));
  };

  Tensor out(Shape{O, OH, OW});
  const double* xd = xv.data().data();
  const double* wd = wv.data().data();
  double* od = out.data().data();
  for (std::size_t o = 0; o < O; ++o) {
    if (bias) std::fill(od + o * OH * OW, od + (o + 1) * OH * OW, bias->value()[o]);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t ky = 0; ky < KH; ++ky) {
        const auto [ylo, yhi] = out_range(ky, H, OH);
        for (std::size_t kx = 0; kx < KW; ++kx) {
          const auto [xlo, xhi] = out_range(kx, W, OW);
          const double w = wd[((o * C + c) * KH + ky) * KW + kx];
          if (w == 0.0) continue;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t iy = oy * S + ky - P;
            const double* xrow = xd + (c * H + iy) * W;
            double* orow = od + (o * OH + oy) * OW;
            for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += w * xrow[ox * S + kx - P];
          }
        }
      }
    }
  }

  const std::size_t ix = x.id(), iw = weight.id();
  const bool has_bias = bias != nullptr;
  const std::size_t ib = has_bias ? bias->id() : 0;
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(*bias);
  return tape.record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
    const double* gd = g.data().data();
    const double* xin = t.value(ix).data().data();
    const double* win = t.value(iw).data().data();
    Tensor* gx = t.grad_slot(ix);
    Tensor* gw = t.grad_slot(iw);
    if (has_bias) {
      if (Tensor* gb = t.grad_slot(ib)) {
        for (std::size_t o = 0; o < O; ++o) {
          double s = 0.0;
          for (std::size_t p = 0; p < OH * OW; ++p) s += gd[o * OH * OW + p];
          (*gb)[o] += s;
        }
      }
    }
    if (!gx && !gw) return;
    double* gxd = gx ? gx->data().data() : nullptr;
    double* gwd = gw ? gw->data().data() : nullptr;
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < KH; ++ky) {
          const auto [ylo, yhi] = out_range(ky, H, OH);
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const auto [xlo, xhi] = out_range(kx, W, OW);
            const std::size_t widx = ((o * C + c) * KH + ky) * KW + kx;
            const double w = win[widx];
            double acc = 0.0;
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const std::size_t iy = oy * S + ky - P;
              const double* grow = gd + (o * OH + oy) * OW;
              const std::size_t base = (c * H + iy) * W;
              if (gwd) {
                for (std::size_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * xin[base + ox * S + kx - P];
              }
              if (gxd && w != 0.0) {
                for (std::size_t ox = xlo; ox < xhi; ++ox) gxd[base + ox * S + kx - P] += w * grow[ox];
              }
            }
            if (gwd) gwd[widx] += acc;
          }
        }
      }
    }
  });
}

Var conv2d_same(const Var& x, const Var& weight, const Var* bias) {
  const std::size_t k = weight.value().rank() == 4 ? weight.value().dim(2) : 1;
  return conv2d(x, weight, bias, Conv2dOptions{1, k / 2});
}

Var add_channel_bias(const Var& x, const Var& bias) {
  Tape& tape = same_tape("add_channel_bias", x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() < 1 || bv.size() != xv.dim(0)) {
    throw ShapeError(mismatch("add_channel_bias", xv.shape(), bv.shape()));
  }
  const std::size_t C = xv.dim(0), inner = xv.size() / C;
  Tensor out = xv;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] += bv[c];
  const std::size_t ix = x.id(), ib = bias.id();
  return tape.record(std::move(out), {x, bias}, [=](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
    if (Tensor* gb = t.grad_slot(ib)) {
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) s += g[c * inner + i];
        (*gb)[c] += s;
      }
    }
  });
}

std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  if (size % 2 == 0 || sigma <= 0.0) throw std::invalid_argument("gaussian_kernel: need odd size and sigma > 0");
  std::vector<double> k(size);
  const double r = static_cast<double>(size / 2);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - r;
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  return k;
}

namespace {

inline std::size_t clamp_index(long long i, std::size_t n) {
  if (i < 0) return 0;
  if (i >= static_cast<long long>(n)) return n - 1;
  return static_cast<std::size_t>(i);
}

// One separable pass over `planes` planes of H x W. Horizontal when `along_rows`.
// adjoint=false: out[p] = sum_k k[k] in[clamp(p + k - r)]; adjoint=true scatters instead.
void filter_pass(const double* in, double* out, std::size_t planes, std::size_t H, std::size_t W,
                 const std::vector<double>& kernel, bool along_rows, bool adjoint) {
  const long long r = static_cast<long long>(kernel.size() / 2);
  const std::size_t len = along_rows ? W : H;
  const std::size_t lines = along_rows ? H : W;
  const std::size_t step = along_rows ? 1 : W;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t line = 0; line < lines; ++line) {
      const std::size_t base = p * H * W + (along_rows ? line * W : line);
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t k = 0; k < kernel.size(); ++k) {
          const std::size_t j = clamp_index(static_cast<long long>(i) + static_cast<long long>(k) - r, len);
          if (adjoint) {
            out[base + j * step] += kernel[k] * in[base + i * step];
          } else {
            out[base + i * step] += kernel[k] * in[base + j * step];
          }
        }
      }
    }
  }
}

}  // namespace

Var blur(const Var& x, std::span<const double> kernel) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 3) throw ShapeError("blur: expected H x W or C x H x W, got " + shape_string(xv.shape()));
  if (kernel.empty() || kernel.size() % 2 == 0) throw std::invalid_argument("blur: kernel length must be odd");
  const std::size_t H = xv.dim(xv.rank() - 2), W = xv.dim(xv.rank() - 1);
  const std::size_t planes = xv.size() / (H * W);
  std::vector<double> k(kernel.begin(), kernel.end());
  Tensor tmp(xv.shape());
  Tensor out(xv.shape());
  filter_pass(xv.data().data(), tmp.data().data(), planes, H, W, k, true, false);
  filter_pass(tmp.data().data(), out.data().data(), planes, H, W, k, false, false);
  const std::size_t ix = x.id();
  const Shape shape = xv.shape();
  return x.tape()->record(std::move(out), {x}, [=](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_slot(ix);
    if (!gx) return;
    Tensor mid(shape);
    filter_pass(g.data().data(), mid.data().data(), planes, H, W, k, false, true);
    filter_pass(mid.data().data(), gx->data().data(), planes, H, W, k, true, true);
  });
}

Var upsample_nearest(const Var& x, std::size_t factor) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("upsample_nearest: expected rank >= 2, got " + shape_string(xv.shape()));
  if (factor == 0) throw std::invalid_argument("upsample_nearest: factor must be positive");
  const std::size_t H = xv.dim(xv.rank() - 2), W = xv.dim(xv.rank() - 1);
  const std::size_t planes = xv.size() / (H * W);
  const std::size_t OH = H * factor, OW = W * factor;
  Shape shape = xv.shape();
  shape[shape.size() - 2] = OH;
  shape[shape.size() - 1] = OW;
  Tensor out(shape);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < OH; ++i)
      for (std::size_t j = 0; j < OW; ++j) out[(p * OH + i) * OW + j] = xv[(p * H + i / factor) * W + j / factor];
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < OH; ++i)
          for (std::size_t j = 0; j < OW; ++j) (*gx)[(p * H + i / factor) * W + j / factor] += g[(p * OH + i) * OW + j];
    }
  });
}

Var channel_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Tape& tape = same_tape("channel_norm", x, gamma);
  same_tape("channel_norm", x, beta);
  const Tensor& xv = x.value();
  if (xv.rank() < 2 || gamma.value().size() != xv.dim(0) || beta.value().size() != xv.dim(0)) {
    throw ShapeError(mismatch("channel_norm", xv.shape(), gamma.shape()));
  }
  const std::size_t C = xv.dim(0), n = xv.size() / C;
  const double dn = static_cast<double>(n);
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(C);
  Tensor out(xv.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += xv[c * n + i];
    mu /= dn;
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = xv[c * n + i] - mu;
      var += d * d;
    }
    var /= dn;
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const double h = n == 1 ? 0.0 : (xv[c * n + i] - mu) * inv_std[c];
      xhat[c * n + i] = h;
      out[c * n + i] = gamma.value()[c] * h + beta.value()[c];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.record(std::move(out), {x, gamma, beta}, [=](Tape& t, const Tensor& g) {
    const Tensor& gam = t.value(ig);
    if (Tensor* gb = t.grad_slot(ib)) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) (*gb)[c] += g[c * n + i];
    }
    if (Tensor* gg = t.grad_slot(ig)) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) (*gg)[c] += g[c * n + i] * xhat[c * n + i];
    }
    if (Tensor* gx = t.grad_slot(ix)) {
      if (n == 1) return;
      for (std::size_t c = 0; c < C; ++c) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dh = g[c * n + i] * gam[c];
          s1 += dh;
          s2 += dh * xhat[c * n + i];
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double dh = g[c * n + i] * gam[c];
          (*gx)[c * n + i] += inv_std[c] / dn * (dn * dh - s1 - xhat[c * n + i] * s2);
        }
      }
    }
  });
}

Var channel_outer(const Var& mask, const Var& features) {
  Tape& tape = same_tape("channel_outer", mask, features);
  const Tensor& mv = mask.value();
  const Tensor& fv = features.value();
  if (mv.rank() != 3 || fv.rank() != 3 || mv.dim(1) != fv.dim(1) || mv.dim(2) != fv.dim(2)) {
    throw ShapeError(mismatch("channel_outer", mv.shape(), fv.shape()));
  }
  const std::size_t M = mv.dim(0), C = fv.dim(0), HW = fv.dim(1) * fv.dim(2);
  Tensor out(Shape{M * C, fv.dim(1), fv.dim(2)});
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) out[(m * C + c) * HW + p] = mv[m * HW + p] * fv[c * HW + p];
  const std::size_t im = mask.id(), iff = features.id();
  return tape.record(std::move(out), {mask, features}, [=](Tape& t, const Tensor& g) {
    const Tensor& mk = t.value(im);
    const Tensor& ft = t.value(iff);
    Tensor* gm = t.grad_slot(im);
    Tensor* gf = t.grad_slot(iff);
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t p = 0; p < HW; ++p) {
          const double gv = g[(m * C + c) * HW + p];
          if (gm) (*gm)[m * HW + p] += gv * ft[c * HW + p];
          if (gf) (*gf)[c * HW + p] += gv * mk[m * HW + p];
        }
      }
    }
  });
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kMaximum: return "elementwise-max";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kAbs: return "abs";
    case OpKind::kSquare: return "square";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kBlur: return "blur";
    case OpKind::kBroadcastScale: return "broadcast-scale";
    case OpKind::kUpsampleNearest: return "upsample-nearest";
    case OpKind::kConcatChannel: return "concat-channel";
  }
  return "unknown";
}

Var forward_op(OpKind kind, std::span<const Var> in) {
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": wrong number of inputs (" +
                                  std::to_string(in.size()) + ")");
    }
  };
  switch (kind) {
    case OpKind::kAdd: need(2, 2); return add(in[0], in[1]);
    case OpKind::kSub: need(2, 2); return sub(in[0], in[1]);
    case OpKind::kMul: need(2, 2); return mul(in[0], in[1]);
    case OpKind::kDiv: need(2, 2); return div(in[0], in[1]);
    case OpKind::kMatmul: need(2, 2); return matmul(in[0], in[1]);
    case OpKind::kConv2d: need(2, 3); return conv2d_same(in[0], in[1], in.size() == 3 ? &in[2] : nullptr);
    case OpKind::kRelu: need(1, 1); return relu(in[0]);
    case OpKind::kSigmoid: need(1, 1); return sigmoid(in[0]);
    case OpKind::kMaximum: need(2, 2); return maximum(in[0], in[1]);
    case OpKind::kMean: need(1, 1); return mean(in[0]);
    case OpKind::kSum: need(1, 1); return sum(in[0]);
    case OpKind::kAbs: need(1, 1); return abs(in[0]);
    case OpKind::kSquare: need(1, 1); return square(in[0]);
    case OpKind::kSqrt: need(1, 1); return sqrt(in[0]);
    case OpKind::kBlur: {
      need(1, 1);
      static const std::vector<double> kernel = gaussian_kernel(5, 1.0);
      return blur(in[0], kernel);
    }
    case OpKind::kBroadcastScale:
      need(2, 2);
      if (in[0].value().size() != 1) {
        throw ShapeError("broadcast-scale: first input must be scalar, got " + shape_string(in[0].shape()));
      }
      return mul(in[1], in[0]);
    case OpKind::kUpsampleNearest: need(1, 1); return upsample_nearest(in[0], 2);
    case OpKind::kConcatChannel:
      need(1, in.size());
      return concat(std::vector<Var>(in.begin(), in.end()));
  }
  throw std::invalid_argument("forward_op: unknown op kind");
}

}  // namespace fusedet
