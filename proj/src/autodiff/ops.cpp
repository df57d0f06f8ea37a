#include "nrp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "gemm.hpp"

namespace nrp::ops {
namespace {

using std::size_t;

void require(const Var& v, const char* op) {
  if (!v.valid()) throw std::invalid_argument(std::string(op) + ": unbound variable");
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw std::invalid_argument(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                                dtype_name(b.dtype()));
}

void require_rank(const Tensor& t, int rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
}

template <class T>
std::vector<T> zeros_like(const Tensor& t) {
  return std::vector<T>(static_cast<size_t>(t.numel()), T(0));
}

template <class Fwd, class Dfdx>
Var unary(const Var& x, const char* op, Fwd fwd, Dfdx dfdx) {
  require(x, op);
  const Tensor xv = x.value();
  Tensor y = visit_dtype(xv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = xv.data<T>();
    std::vector<T> out(in.size());
    for (size_t i = 0; i < in.size(); ++i) out[i] = static_cast<T>(fwd(in[i]));
    return Tensor(xv.shape(), std::move(out));
  });
  return x.tape()->record(y, {x}, [xv, y, dfdx](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{visit_dtype(xv.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gi = g.data<T>();
      auto xi = xv.data<T>();
      auto yi = y.data<T>();
      std::vector<T> out(gi.size());
      for (size_t i = 0; i < gi.size(); ++i) out[i] = static_cast<T>(gi[i] * dfdx(xi[i], yi[i]));
      return Tensor(xv.shape(), std::move(out));
    })};
  });
}

// Elementwise binary op with single-element broadcast. da/db return partial
// derivatives given (a, b).
template <class Fwd, class Da, class Db>
Var binary(const Var& a, const Var& b, const char* op, Fwd fwd, Da da, Db db) {
  require(a, op);
  require(b, op);
  const Tensor av = a.value();
  const Tensor bv = b.value();
  require_same_dtype(av, bv, op);
  Shape out_shape;
  if (av.shape() == bv.shape()) {
    out_shape = av.shape();
  } else if (av.numel() == 1) {
    out_shape = bv.shape();
  } else if (bv.numel() == 1) {
    out_shape = av.shape();
  } else {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  const bool a_bcast = av.numel() == 1 && av.shape() != out_shape;
  const bool b_bcast = bv.numel() == 1 && bv.shape() != out_shape;
  const auto n = static_cast<size_t>(numel_of(out_shape));

  Tensor y = visit_dtype(av.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = av.data<T>();
    auto pb = bv.data<T>();
    std::vector<T> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<T>(fwd(pa[a_bcast ? 0 : i], pb[b_bcast ? 0 : i]));
    return Tensor(out_shape, std::move(out));
  });

  return a.tape()->record(y, {a, b}, [=](const Tensor& g, const std::vector<bool>& needs) {
    std::vector<Tensor> grads(2);
    visit_dtype(av.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pa = av.data<T>();
      auto pb = bv.data<T>();
      auto pg = g.data<T>();
      if (needs[0]) {
        if (a_bcast) {
          double acc = 0.0;
          for (size_t i = 0; i < n; ++i) acc += static_cast<double>(pg[i]) * da(pa[0], pb[b_bcast ? 0 : i]);
          grads[0] = Tensor(av.shape(), std::vector<T>{static_cast<T>(acc)});
        } else {
          std::vector<T> out(n);
          for (size_t i = 0; i < n; ++i) out[i] = static_cast<T>(pg[i] * da(pa[i], pb[b_bcast ? 0 : i]));
          grads[0] = Tensor(av.shape(), std::move(out));
        }
      }
      if (needs[1]) {
        if (b_bcast) {
          double acc = 0.0;
          for (size_t i = 0; i < n; ++i) acc += static_cast<double>(pg[i]) * db(pa[a_bcast ? 0 : i], pb[0]);
          grads[1] = Tensor(bv.shape(), std::vector<T>{static_cast<T>(acc)});
        } else {
          std::vector<T> out(n);
          for (size_t i = 0; i < n; ++i) out[i] = static_cast<T>(pg[i] * db(pa[a_bcast ? 0 : i], pb[i]));
          grads[1] = Tensor(bv.shape(), std::move(out));
        }
      }
      return 0;
    });
    return grads;
  });
}

template <class T>
T stable_softplus(T v) {
  return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <class T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](auto x, auto y) { return x + y; }, [](auto, auto) { return 1.0; },
      [](auto, auto) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](auto x, auto y) { return x - y; }, [](auto, auto) { return 1.0; },
      [](auto, auto) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](auto x, auto y) { return x * y; }, [](auto, auto y) { return y; },
      [](auto x, auto) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary(
      a, b, "div", [](auto x, auto y) { return x / y; }, [](auto, auto y) { return 1 / y; },
      [](auto x, auto y) { return -x / (y * y); });
}

Var scale(const Var& a, double factor) {
  return unary(
      a, "scale", [factor](auto v) { return v * factor; }, [factor](auto, auto) { return factor; });
}

Var add_scalar(const Var& a, double offset) {
  return unary(
      a, "add_scalar", [offset](auto v) { return v + offset; }, [](auto, auto) { return 1.0; });
}

Var sigmoid(const Var& x) {
  return unary(
      x, "sigmoid", [](auto v) { return stable_sigmoid(v); }, [](auto, auto y) { return y * (1 - y); });
}

Var sign(const Var& x) {
  return unary(
      x, "sign", [](auto v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }, [](auto, auto) { return 0.0; });
}

Var clamp(const Var& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary(
      x, "clamp", [lo, hi](auto v) { return std::clamp<double>(v, lo, hi); },
      [lo, hi](auto v, auto) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var abs(const Var& x) {
  return unary(
      x, "abs", [](auto v) { return std::abs(v); },
      [](auto v, auto) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var square(const Var& x) {
  return unary(
      x, "square", [](auto v) { return v * v; }, [](auto v, auto) { return 2 * v; });
}

Var sqrt(const Var& x) {
  return unary(
      x, "sqrt", [](auto v) { return std::sqrt(v); },
      [](auto, auto y) { return y > 0 ? 0.5 / static_cast<double>(y) : 0.0; });
}

Var softplus(const Var& x) {
  return unary(
      x, "softplus", [](auto v) { return stable_softplus(v); }, [](auto v, auto) { return stable_sigmoid(v); });
}

Var log_sigmoid(const Var& x) {
  return unary(
      x, "log_sigmoid", [](auto v) { return -stable_softplus(-v); },
      [](auto v, auto) { return stable_sigmoid(-v); });
}

Var leaky_relu(const Var& x, double slope) {
  if (!(slope >= 0.0 && slope < 1.0)) throw std::invalid_argument("leaky_relu: slope must lie in [0,1)");
  return unary(
      x, "leaky_relu", [slope](auto v) { return v >= 0 ? static_cast<double>(v) : slope * v; },
      [slope](auto v, auto) { return v >= 0 ? 1.0 : slope; });
}

Var sum(const Var& x) {
  require(x, "sum");
  const Tensor xv = x.value();
  Tensor y = visit_dtype(xv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = xv.data<T>();
    double acc = 0.0;
    for (T v : d) acc += v;
    return Tensor(Shape{}, std::vector<T>{static_cast<T>(acc)});
  });
  return x.tape()->record(y, {x}, [xv](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{Tensor::full(xv.shape(), g.item(), xv.dtype())};
  });
}

Var mean(const Var& x) {
  require(x, "mean");
  const auto n = x.value().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var sum_rows(const Var& x) {
  require(x, "sum_rows");
  const Tensor xv = x.value();
  if (xv.rank() < 1) throw ShapeError("sum_rows needs rank >= 1");
  const auto rows = xv.dim(0);
  const auto cols = rows == 0 ? 0 : xv.numel() / rows;
  Tensor y = visit_dtype(xv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = xv.data<T>();
    std::vector<T> out(static_cast<size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) acc += d[static_cast<size_t>(r * cols + c)];
      out[static_cast<size_t>(r)] = static_cast<T>(acc);
    }
    return Tensor(Shape{rows}, std::move(out));
  });
  return x.tape()->record(y, {x}, [xv, rows, cols](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{visit_dtype(xv.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = g.data<T>();
      std::vector<T> out(static_cast<size_t>(rows * cols));
      for (std::int64_t r = 0; r < rows; ++r)
        std::fill_n(out.begin() + r * cols, cols, pg[static_cast<size_t>(r)]);
      return Tensor(xv.shape(), std::move(out));
    })};
  });
}

Var mean_rows(const Var& x) {
  require(x, "mean_rows");
  const auto& v = x.value();
  if (v.rank() < 1 || v.dim(0) == 0) throw ShapeError("mean_rows needs a nonempty leading axis");
  return scale(sum_rows(x), static_cast<double>(v.dim(0)) / static_cast<double>(v.numel()));
}

Var reshape(const Var& x, Shape shape) {
  require(x, "reshape");
  const Shape in_shape = x.shape();
  Tensor y = x.value().reshape(std::move(shape));
  return x.tape()->record(y, {x}, [in_shape](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{g.reshape(in_shape)};
  });
}

Var dense(const Var& x, const Var& weight, const Var& bias) {
  require(x, "dense");
  require(weight, "dense");
  const Tensor xv = x.value();
  const Tensor wv = weight.value();
  require_rank(xv, 2, "dense", "input");
  require_rank(wv, 2, "dense", "weight");
  require_same_dtype(xv, wv, "dense");
  const int n = static_cast<int>(xv.dim(0));
  const int k = static_cast<int>(xv.dim(1));
  const int o = static_cast<int>(wv.dim(0));
  if (wv.dim(1) != k)
    throw ShapeError("dense: input " + shape_str(xv.shape()) + " incompatible with weight " + shape_str(wv.shape()));
  Tensor bv;
  if (bias.valid()) {
    bv = bias.value();
    require_same_dtype(xv, bv, "dense");
    if (bv.shape() != Shape{o}) throw ShapeError("dense: bias shape " + shape_str(bv.shape()));
  }

  Tensor y = visit_dtype(xv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> out(static_cast<size_t>(n) * o, T(0));
    if (bv.defined()) {
      auto pb = bv.data<T>();
      for (int i = 0; i < n; ++i) std::copy(pb.begin(), pb.end(), out.begin() + static_cast<long>(i) * o);
    }
    if (n > 0 && k > 0)
      detail::gemm(false, true, n, o, k, T(1), xv.data<T>().data(), k, wv.data<T>().data(), k, T(1), out.data(), o);
    return Tensor(Shape{n, o}, std::move(out));
  });

  std::vector<Var> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  const bool has_bias = bias.valid();
  return x.tape()->record(y, inputs, [=](const Tensor& g, const std::vector<bool>& needs) {
    std::vector<Tensor> grads(inputs.size());
    visit_dtype(xv.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = g.data<T>();
      if (needs[0]) {
        std::vector<T> gx(static_cast<size_t>(n) * k, T(0));
        detail::gemm(false, false, n, k, o, T(1), pg.data(), o, wv.data<T>().data(), k, T(0), gx.data(), k);
        grads[0] = Tensor(xv.shape(), std::move(gx));
      }
      if (needs[1]) {
        std::vector<T> gw(static_cast<size_t>(o) * k, T(0));
        detail::gemm(true, false, o, k, n, T(1), pg.data(), o, xv.data<T>().data(), k, T(0), gw.data(), k);
        grads[1] = Tensor(wv.shape(), std::move(gw));
      }
      if (has_bias && needs[2]) {
        std::vector<T> gb(static_cast<size_t>(o), T(0));
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < o; ++j) gb[static_cast<size_t>(j)] += pg[static_cast<size_t>(i) * o + j];
        grads[2] = Tensor(Shape{o}, std::move(gb));
      }
      return 0;
    });
    return grads;
  });
}

namespace {

struct ConvGeometry {
  int n, c, h, w, o, kh, kw, oh, ow;
  Conv2dParams p;
  int col_rows() const { return c * kh * kw; }
  int col_cols() const { return oh * ow; }
};

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const int cols = g.col_cols();
  for (int ch = 0; ch < g.c; ++ch) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* dst = col + static_cast<size_t>((ch * g.kh + ky) * g.kw + kx) * cols;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.p.stride_h - g.p.pad_h + ky;
          T* row = dst + static_cast<size_t>(oy) * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(row, g.ow, T(0));
            continue;
          }
          const T* src = img + (static_cast<size_t>(ch) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.p.stride_w - g.p.pad_w + kx;
            row[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  const int cols = g.col_cols();
  for (int ch = 0; ch < g.c; ++ch) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* src = col + static_cast<size_t>((ch * g.kh + ky) * g.kw + kx) * cols;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.p.stride_h - g.p.pad_h + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* row = src + static_cast<size_t>(oy) * g.ow;
          T* dst = img + (static_cast<size_t>(ch) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.p.stride_w - g.p.pad_w + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& input, const Var& kernel, const Var& bias, Conv2dParams params) {
  require(input, "conv2d");
  require(kernel, "conv2d");
  const Tensor xv = input.value();
  const Tensor kv = kernel.value();
  require_rank(xv, 4, "conv2d", "input");
  require_rank(kv, 4, "conv2d", "kernel");
  require_same_dtype(xv, kv, "conv2d");
  if (params.stride_h < 1 || params.stride_w < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (params.pad_h < 0 || params.pad_w < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  if (xv.dim(1) != kv.dim(1))
    throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " has " + std::to_string(xv.dim(1)) +
                     " channels but kernel " + shape_str(kv.shape()) + " expects " + std::to_string(kv.dim(1)));
  ConvGeometry g{};
  g.n = static_cast<int>(xv.dim(0));
  g.c = static_cast<int>(xv.dim(1));
  g.h = static_cast<int>(xv.dim(2));
  g.w = static_cast<int>(xv.dim(3));
  g.o = static_cast<int>(kv.dim(0));
  g.kh = static_cast<int>(kv.dim(2));
  g.kw = static_cast<int>(kv.dim(3));
  g.p = params;
  const int span_h = g.h + 2 * params.pad_h - g.kh;
  const int span_w = g.w + 2 * params.pad_w - g.kw;
  if (span_h < 0 || span_w < 0)
    throw ShapeError("conv2d: kernel " + shape_str(kv.shape()) + " larger than padded input " + shape_str(xv.shape()));
  g.oh = span_h / params.stride_h + 1;
  g.ow = span_w / params.stride_w + 1;
  Tensor bv;
  if (bias.valid()) {
    bv = bias.value();
    require_same_dtype(xv, bv, "conv2d");
    if (bv.shape() != Shape{g.o}) throw ShapeError("conv2d: bias shape " + shape_str(bv.shape()));
  }

  const int K = g.col_rows();
  const int P = g.col_cols();
  const Shape out_shape{g.n, g.o, g.oh, g.ow};

  Tensor y = visit_dtype(xv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = xv.data<T>();
    auto pk = kv.data<T>();
    std::vector<T> out(static_cast<size_t>(numel_of(out_shape)), T(0));
    std::vector<T> col(static_cast<size_t>(K) * P);
    for (int i = 0; i < g.n; ++i) {
      T* dst = out.data() + static_cast<size_t>(i) * g.o * P;
      if (bv.defined()) {
        auto pb = bv.data<T>();
        for (int oc = 0; oc < g.o; ++oc) std::fill_n(dst + static_cast<size_t>(oc) * P, P, pb[oc]);
      }
      im2col(px.data() + static_cast<size_t>(i) * g.c * g.h * g.w, g, col.data());
      detail::gemm(false, false, g.o, P, K, T(1), pk.data(), K, col.data(), P, T(1), dst, P);
    }
    return Tensor(out_shape, std::move(out));
  });

  std::vector<Var> inputs{input, kernel};
  if (bias.valid()) inputs.push_back(bias);
  const bool has_bias = bias.valid();
  return input.tape()->record(y, inputs, [=](const Tensor& grad, const std::vector<bool>& needs) {
    std::vector<Tensor> grads(inputs.size());
    visit_dtype(xv.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto px = xv.data<T>();
      auto pk = kv.data<T>();
      auto pg = grad.data<T>();
      std::vector<T> col(static_cast<size_t>(K) * P);
      std::vector<T> gx;
      std::vector<T> gk;
      if (needs[0]) gx.assign(static_cast<size_t>(xv.numel()), T(0));
      if (needs[1]) gk.assign(static_cast<size_t>(kv.numel()), T(0));
      for (int i = 0; i < g.n; ++i) {
        const T* gout = pg.data() + static_cast<size_t>(i) * g.o * P;
        if (needs[1]) {
          im2col(px.data() + static_cast<size_t>(i) * g.c * g.h * g.w, g, col.data());
          detail::gemm(false, true, g.o, K, P, T(1), gout, P, col.data(), P, T(1), gk.data(), K);
        }
        if (needs[0]) {
          detail::gemm(true, false, K, P, g.o, T(1), pk.data(), K, gout, P, T(0), col.data(), P);
          col2im_add(col.data(), g, gx.data() + static_cast<size_t>(i) * g.c * g.h * g.w);
        }
      }
      if (needs[0]) grads[0] = Tensor(xv.shape(), std::move(gx));
      if (needs[1]) grads[1] = Tensor(kv.shape(), std::move(gk));
      if (has_bias && needs[2]) {
        std::vector<T> gb(static_cast<size_t>(g.o), T(0));
        for (int i = 0; i < g.n; ++i)
          for (int oc = 0; oc < g.o; ++oc) {
            const T* row = pg.data() + (static_cast<size_t>(i) * g.o + oc) * P;
            double acc = 0.0;
            for (int q = 0; q < P; ++q) acc += row[q];
            gb[static_cast<size_t>(oc)] += static_cast<T>(acc);
          }
        grads[2] = Tensor(Shape{g.o}, std::move(gb));
      }
      return 0;
    });
    return grads;
  });
}

namespace {

void check_bn_params(const Tensor& x, const Tensor& gamma, const Tensor& beta, const char* op) {
  require_rank(x, 4, op, "input");
  const Shape per_channel{x.dim(1)};
  if (gamma.shape() != per_channel || beta.shape() != per_channel)
    throw ShapeError(std::string(op) + ": per-channel parameters must have shape " + shape_str(per_channel));
  require_same_dtype(x, gamma, op);
  require_same_dtype(x, beta, op);
}

}  // namespace

Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps, BatchNormStats* batch_stats) {
  require(x, "batch_norm");
  require(gamma, "batch_norm");
  require(beta, "batch_norm");
  const Tensor xv = x.value();
  const Tensor gv = gamma.value();
  const Tensor bv = beta.value();
  check_bn_params(xv, gv, bv, "batch_norm");
  const auto n = xv.dim(0);
  if (n < 2) throw std::invalid_argument("batch_norm: training mode needs a batch of at least 2");
  const auto c = xv.dim(1);
  const auto hw = xv.dim(2) * xv.dim(3);
  const auto m = n * hw;

  Tensor xhat;
  Tensor invstd;
  Tensor y = visit_dtype(xv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = xv.data<T>();
    auto pgm = gv.data<T>();
    auto pbt = bv.data<T>();
    std::vector<T> out(px.size());
    std::vector<T> xh(px.size());
    std::vector<T> inv(static_cast<size_t>(c));
    std::vector<T> mean_v(static_cast<size_t>(c));
    std::vector<T> var_v(static_cast<size_t>(c));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t q = 0; q < hw; ++q) s += px[static_cast<size_t>((i * c + ch) * hw + q)];
      const double mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t q = 0; q < hw; ++q) {
          const double d = px[static_cast<size_t>((i * c + ch) * hw + q)] - mu;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      inv[static_cast<size_t>(ch)] = static_cast<T>(is);
      mean_v[static_cast<size_t>(ch)] = static_cast<T>(mu);
      var_v[static_cast<size_t>(ch)] = static_cast<T>(ss / static_cast<double>(m - 1));
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t q = 0; q < hw; ++q) {
          const auto idx = static_cast<size_t>((i * c + ch) * hw + q);
          const T h = static_cast<T>((px[idx] - mu) * is);
          xh[idx] = h;
          out[idx] = pgm[static_cast<size_t>(ch)] * h + pbt[static_cast<size_t>(ch)];
        }
    }
    xhat = Tensor(xv.shape(), std::move(xh));
    invstd = Tensor(Shape{c}, std::move(inv));
    if (batch_stats) {
      batch_stats->mean = Tensor(Shape{c}, std::move(mean_v));
      batch_stats->var = Tensor(Shape{c}, std::move(var_v));
    }
    return Tensor(xv.shape(), std::move(out));
  });

  return x.tape()->record(y, {x, gamma, beta}, [=](const Tensor& grad, const std::vector<bool>& needs) {
    std::vector<Tensor> grads(3);
    visit_dtype(xv.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = grad.data<T>();
      auto ph = xhat.data<T>();
      auto pgm = gv.data<T>();
      auto pinv = invstd.data<T>();
      std::vector<T> gx(needs[0] ? pg.size() : 0);
      std::vector<T> ggm(static_cast<size_t>(c));
      std::vector<T> gbt(static_cast<size_t>(c));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0;
        double sum_gh = 0.0;
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t q = 0; q < hw; ++q) {
            const auto idx = static_cast<size_t>((i * c + ch) * hw + q);
            sum_g += pg[idx];
            sum_gh += static_cast<double>(pg[idx]) * ph[idx];
          }
        ggm[static_cast<size_t>(ch)] = static_cast<T>(sum_gh);
        gbt[static_cast<size_t>(ch)] = static_cast<T>(sum_g);
        if (needs[0]) {
          const double k = static_cast<double>(pgm[static_cast<size_t>(ch)]) * pinv[static_cast<size_t>(ch)] /
                           static_cast<double>(m);
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t q = 0; q < hw; ++q) {
              const auto idx = static_cast<size_t>((i * c + ch) * hw + q);
              gx[idx] = static_cast<T>(k * (static_cast<double>(m) * pg[idx] - sum_g - ph[idx] * sum_gh));
            }
        }
      }
      if (needs[0]) grads[0] = Tensor(xv.shape(), std::move(gx));
      if (needs[1]) grads[1] = Tensor(gv.shape(), std::move(ggm));
      if (needs[2]) grads[2] = Tensor(bv.shape(), std::move(gbt));
      return 0;
    });
    return grads;
  });
}

Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                    const Tensor& running_var, double eps) {
  require(x, "batch_norm");
  require(gamma, "batch_norm");
  require(beta, "batch_norm");
  const Tensor xv = x.value();
  const Tensor gv = gamma.value();
  const Tensor bv = beta.value();
  check_bn_params(xv, gv, bv, "batch_norm");
  if (running_mean.shape() != gv.shape() || running_var.shape() != gv.shape())
    throw ShapeError("batch_norm: running statistics shape mismatch");
  const auto n = xv.dim(0);
  const auto c = xv.dim(1);
  const auto hw = xv.dim(2) * xv.dim(3);

  Tensor xhat;
  Tensor invstd;
  Tensor y = visit_dtype(xv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = xv.data<T>();
    auto pgm = gv.data<T>();
    auto pbt = bv.data<T>();
    const auto rm = running_mean.cast(xv.dtype());
    const auto rv = running_var.cast(xv.dtype());
    auto pm = rm.template data<T>();
    auto pv = rv.template data<T>();
    std::vector<T> out(px.size());
    std::vector<T> xh(px.size());
    std::vector<T> inv(static_cast<size_t>(c));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double is = 1.0 / std::sqrt(static_cast<double>(pv[static_cast<size_t>(ch)]) + eps);
      inv[static_cast<size_t>(ch)] = static_cast<T>(is);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t q = 0; q < hw; ++q) {
          const auto idx = static_cast<size_t>((i * c + ch) * hw + q);
          const T h = static_cast<T>((px[idx] - pm[static_cast<size_t>(ch)]) * is);
          xh[idx] = h;
          out[idx] = pgm[static_cast<size_t>(ch)] * h + pbt[static_cast<size_t>(ch)];
        }
    }
    xhat = Tensor(xv.shape(), std::move(xh));
    invstd = Tensor(Shape{c}, std::move(inv));
    return Tensor(xv.shape(), std::move(out));
  });

  return x.tape()->record(y, {x, gamma, beta}, [=](const Tensor& grad, const std::vector<bool>& needs) {
    std::vector<Tensor> grads(3);
    visit_dtype(xv.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = grad.data<T>();
      auto ph = xhat.data<T>();
      auto pgm = gv.data<T>();
      auto pinv = invstd.data<T>();
      std::vector<T> gx(needs[0] ? pg.size() : 0);
      std::vector<T> ggm(static_cast<size_t>(c));
      std::vector<T> gbt(static_cast<size_t>(c));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0;
        double sum_gh = 0.0;
        const T k = pgm[static_cast<size_t>(ch)] * pinv[static_cast<size_t>(ch)];
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t q = 0; q < hw; ++q) {
            const auto idx = static_cast<size_t>((i * c + ch) * hw + q);
            sum_g += pg[idx];
            sum_gh += static_cast<double>(pg[idx]) * ph[idx];
            if (needs[0]) gx[idx] = pg[idx] * k;
          }
        ggm[static_cast<size_t>(ch)] = static_cast<T>(sum_gh);
        gbt[static_cast<size_t>(ch)] = static_cast<T>(sum_g);
      }
      if (needs[0]) grads[0] = Tensor(xv.shape(), std::move(gx));
      if (needs[1]) grads[1] = Tensor(gv.shape(), std::move(ggm));
      if (needs[2]) grads[2] = Tensor(bv.shape(), std::move(gbt));
      return 0;
    });
    return grads;
  });
}

Var max_pool2d(const Var& x, int kernel, int stride) {
  require(x, "max_pool2d");
  const Tensor xv = x.value();
  require_rank(xv, 4, "max_pool2d", "input");
  if (kernel < 1 || stride < 1) throw std::invalid_argument("max_pool2d: kernel and stride must be >= 1");
  const auto n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h < kernel || w < kernel) throw ShapeError("max_pool2d: input smaller than window " + shape_str(xv.shape()));
  const auto oh = (h - kernel) / stride + 1;
  const auto ow = (w - kernel) / stride + 1;
  const Shape out_shape{n, c, oh, ow};
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(numel_of(out_shape)));

  Tensor y = visit_dtype(xv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = xv.data<T>();
    std::vector<T> out(argmax->size());
    size_t o = 0;
    for (std::int64_t plane = 0; plane < n * c; ++plane) {
      const std::int64_t base = plane * h * w;
      for (std::int64_t oy = 0; oy < oh; ++oy)
        for (std::int64_t ox = 0; ox < ow; ++ox, ++o) {
          std::int64_t best = base + (oy * stride) * w + ox * stride;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
              const std::int64_t idx = base + (oy * stride + ky) * w + ox * stride + kx;
              if (px[static_cast<size_t>(idx)] > px[static_cast<size_t>(best)]) best = idx;
            }
          (*argmax)[o] = best;
          out[o] = px[static_cast<size_t>(best)];
        }
    }
    return Tensor(out_shape, std::move(out));
  });

  return x.tape()->record(y, {x}, [xv, argmax](const Tensor& grad, const std::vector<bool>&) {
    return std::vector<Tensor>{visit_dtype(xv.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = grad.data<T>();
      auto gx = zeros_like<T>(xv);
      for (size_t o = 0; o < argmax->size(); ++o) gx[static_cast<size_t>((*argmax)[o])] += pg[o];
      return Tensor(xv.shape(), std::move(gx));
    })};
  });
}

Var global_avg_pool(const Var& x) {
  require(x, "global_avg_pool");
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("global_avg_pool: input must have rank 4, got " + shape_str(s));
  const auto n = s[0], c = s[1];
  return reshape(mean_rows(reshape(x, {n * c, s[2] * s[3]})), {n, c});
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  for (const auto& p : parts) require(p, "concat_channels");
  const Tensor first = parts[0].value();
  require_rank(first, 4, "concat_channels", "input");
  std::vector<Tensor> values;
  std::vector<std::int64_t> channels;
  std::int64_t total_c = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    require_rank(v, 4, "concat_channels", "input");
    require_same_dtype(first, v, "concat_channels");
    if (v.dim(0) != first.dim(0) || v.dim(2) != first.dim(2) || v.dim(3) != first.dim(3))
      throw ShapeError("concat_channels: " + shape_str(v.shape()) + " incompatible with " + shape_str(first.shape()));
    values.push_back(v);
    channels.push_back(v.dim(1));
    total_c += v.dim(1);
  }
  const auto n = first.dim(0);
  const auto hw = first.dim(2) * first.dim(3);
  const Shape out_shape{n, total_c, first.dim(2), first.dim(3)};

  Tensor y = visit_dtype(first.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> out(static_cast<size_t>(numel_of(out_shape)));
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t offset = 0;
      for (size_t k = 0; k < values.size(); ++k) {
        auto src = values[k].template data<T>();
        const auto len = channels[k] * hw;
        std::copy_n(src.begin() + i * len, len, out.begin() + (i * total_c + offset) * hw);
        offset += channels[k];
      }
    }
    return Tensor(out_shape, std::move(out));
  });

  std::vector<Var> inputs(parts.begin(), parts.end());
  return inputs[0].tape()->record(y, inputs, [=](const Tensor& grad, const std::vector<bool>& needs) {
    std::vector<Tensor> grads(values.size());
    visit_dtype(first.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = grad.data<T>();
      std::int64_t offset = 0;
      for (size_t k = 0; k < values.size(); ++k) {
        const auto len = channels[k] * hw;
        if (needs[k]) {
          std::vector<T> g(static_cast<size_t>(n * len));
          for (std::int64_t i = 0; i < n; ++i)
            std::copy_n(pg.begin() + (i * total_c + offset) * hw, len, g.begin() + i * len);
          grads[k] = Tensor(values[k].shape(), std::move(g));
        }
        offset += channels[k];
      }
      return 0;
    });
    return grads;
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require(logits, "cross_entropy");
  const Tensor zv = logits.value();
  require_rank(zv, 2, "cross_entropy", "logits");
  const auto n = zv.dim(0);
  const auto c = zv.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  for (int l : labels)
    if (l < 0 || l >= c) throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " out of range");
  std::vector<int> lab(labels.begin(), labels.end());

  Tensor probs;
  Tensor y = visit_dtype(zv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pz = zv.data<T>();
    std::vector<T> p(pz.size());
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T* row = pz.data() + i * c;
      const double mx = *std::max_element(row, row + c);
      double z = 0.0;
      for (std::int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
      const double lse = mx + std::log(z);
      for (std::int64_t j = 0; j < c; ++j) p[static_cast<size_t>(i * c + j)] = static_cast<T>(std::exp(row[j] - lse));
      loss += lse - row[lab[static_cast<size_t>(i)]];
    }
    probs = Tensor(zv.shape(), std::move(p));
    return Tensor(Shape{}, std::vector<T>{static_cast<T>(loss / static_cast<double>(n))});
  });

  return logits.tape()->record(y, {logits}, [=](const Tensor& grad, const std::vector<bool>&) {
    return std::vector<Tensor>{visit_dtype(zv.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pp = probs.data<T>();
      const double k = grad.item() / static_cast<double>(n);
      std::vector<T> gz(pp.size());
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
          const auto idx = static_cast<size_t>(i * c + j);
          const double onehot = (j == lab[static_cast<size_t>(i)]) ? 1.0 : 0.0;
          gz[idx] = static_cast<T>(k * (pp[idx] - onehot));
        }
      return Tensor(zv.shape(), std::move(gz));
    })};
  });
}

Var resize_pad(const Var& x, int height, int width, int top, int left) {
  require(x, "resize_pad");
  const Tensor xv = x.value();
  require_rank(xv, 4, "resize_pad", "input");
  const auto n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (height < 1 || width < 1 || top < 0 || left < 0 || top + height > h || left + width > w)
    throw std::invalid_argument("resize_pad: placement does not fit the canvas");
  // source flat index for every destination pixel within one plane; -1 = padding
  auto src_of = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(h * w), -1);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      const std::int64_t sy = static_cast<std::int64_t>(i) * h / height;
      const std::int64_t sx = static_cast<std::int64_t>(j) * w / width;
      (*src_of)[static_cast<size_t>((top + i) * w + left + j)] = sy * w + sx;
    }

  Tensor y = visit_dtype(xv.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = xv.data<T>();
    std::vector<T> out(px.size(), T(0));
    for (std::int64_t plane = 0; plane < n * c; ++plane) {
      const auto base = static_cast<size_t>(plane * h * w);
      for (size_t q = 0; q < src_of->size(); ++q)
        if ((*src_of)[q] >= 0) out[base + q] = px[base + static_cast<size_t>((*src_of)[q])];
    }
    return Tensor(xv.shape(), std::move(out));
  });

  return x.tape()->record(y, {x}, [xv, src_of, n, c, h, w](const Tensor& grad, const std::vector<bool>&) {
    return std::vector<Tensor>{visit_dtype(xv.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = grad.data<T>();
      auto gx = zeros_like<T>(xv);
      for (std::int64_t plane = 0; plane < n * c; ++plane) {
        const auto base = static_cast<size_t>(plane * h * w);
        for (size_t q = 0; q < src_of->size(); ++q)
          if ((*src_of)[q] >= 0) gx[base + static_cast<size_t>((*src_of)[q])] += pg[base + q];
      }
      return Tensor(xv.shape(), std::move(gx));
    })};
  });
}

Var straight_through(const Var& x, const Tensor& value) {
  require(x, "straight_through");
  if (value.shape() != x.shape() || value.dtype() != x.dtype())
    throw ShapeError("straight_through: value " + shape_str(value.shape()) + " does not match " +
                     shape_str(x.shape()));
  return x.tape()->record(value, {x}, [](const Tensor& grad, const std::vector<bool>&) {
    return std::vector<Tensor>{grad};
  });
}

Var detach(const Var& x) {
  require(x, "detach");
  return x.tape()->constant(x.value());
}

}  // namespace nrp::ops
