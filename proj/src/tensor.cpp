#include "artstvg/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace artstvg {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local AllocationStats g_stats;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct View {
  std::size_t r;
  std::size_t c;
};

View view_of(const Shape& s) {
  switch (s.size()) {
    case 0:
      return {1, 1};
    case 1:
      return {1, s[0]};
    case 2:
      return {s[0], s[1]};
    default:
      throw ShapeError("expected a tensor of rank <= 2, got " + shape_str(s));
  }
}

View matrix_view(const Tensor& t, const char* op) {
  if (t.rank() > 2) {
    throw ShapeError(std::string(op) + ": expected rank <= 2, got " + shape_str(t.shape()));
  }
  return view_of(t.shape());
}

void check_finite(const std::vector<double>& data, const char* op) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

Tensor make(Shape shape, std::vector<double> data, const char* op) {
  check_finite(data, op);
  return Tensor(std::make_shared<TensorImpl>(std::move(shape), std::move(data)));
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

bool tracking(const std::vector<Tensor>& inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

void record(Tensor& out, Tape::Backward fn) {
  out.set_requires_grad(true);
  g_active_tape->record(out.impl_ptr(), std::move(fn));
}

// Broadcasting binary op. dfa/dfb return d(out)/d(a), d(out)/d(b) given
// (a, b, out) element values.
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA dfa, DB dfb) {
  const View va = matrix_view(a, op);
  const View vb = matrix_view(b, op);
  const auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                     shape_str(b.shape()));
  };
  const std::size_t R = dim(va.r, vb.r);
  const std::size_t C = dim(va.c, vb.c);
  Shape out_shape;
  if (R == va.r && C == va.c) {
    out_shape = a.shape();
  } else if (R == vb.r && C == vb.c) {
    out_shape = b.shape();
  } else {
    out_shape = {R, C};
  }
  const auto ai = [va](std::size_t r, std::size_t c) {
    return (va.r == 1 ? 0 : r) * va.c + (va.c == 1 ? 0 : c);
  };
  const auto bi = [vb](std::size_t r, std::size_t c) {
    return (vb.r == 1 ? 0 : r) * vb.c + (vb.c == 1 ? 0 : c);
  };
  std::vector<double> out(R * C);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      out[r * C + c] = f(ad[ai(r, c)], bd[bi(r, c)]);
    }
  }
  Tensor result = make(std::move(out_shape), std::move(out), op);
  if (tracking({&a, &b})) {
    auto pa = a.impl_ptr();
    auto pb = b.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() {
      const auto& g = po->grad;
      const auto& od = po->data;
      std::vector<double> ga(pa->requires_grad ? pa->data.size() : 0, 0.0);
      std::vector<double> gb(pb->requires_grad ? pb->data.size() : 0, 0.0);
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t o = r * C + c;
          const double x = pa->data[ai(r, c)];
          const double y = pb->data[bi(r, c)];
          if (!ga.empty()) ga[ai(r, c)] += g[o] * dfa(x, y, od[o]);
          if (!gb.empty()) gb[bi(r, c)] += g[o] * dfb(x, y, od[o]);
        }
      }
      if (!ga.empty()) pa->accumulate(ga);
      if (!gb.empty()) pb->accumulate(gb);
    });
  }
  return result;
}

// Elementwise unary op; df receives (x, y).
template <typename F, typename D>
Tensor unary(const Tensor& x, const char* op, F f, D df) {
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tensor result = make(x.shape(), std::move(out), op);
  if (tracking({&x})) {
    auto px = x.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() {
      std::vector<double> g(px->data.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = po->grad[i] * df(px->data[i], po->data[i]);
      }
      px->accumulate(g);
    });
  }
  return result;
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

// ---------------------------------------------------------------------------
// TensorImpl / Tensor

TensorImpl::TensorImpl(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (product(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  g_stats.live_bytes += data.size() * sizeof(double);
  g_stats.peak_bytes = std::max(g_stats.peak_bytes, g_stats.live_bytes);
}

TensorImpl::~TensorImpl() {
  const std::size_t bytes = data.size() * sizeof(double);
  g_stats.live_bytes = g_stats.live_bytes >= bytes ? g_stats.live_bytes - bytes : 0;
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

void TensorImpl::accumulate(std::span<const double> g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  return make(std::move(shape), std::move(data), "Tensor::from");
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = product(shape);
  return make(std::move(shape), std::vector<double>(n, value), "Tensor::full");
}

Tensor Tensor::scalar(double value) { return make({}, {value}, "Tensor::scalar"); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

std::size_t Tensor::rows() const { return view_of(shape()).r; }
std::size_t Tensor::cols() const { return view_of(shape()).c; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  const View v = view_of(shape());
  if (r >= v.r || c >= v.c) throw ShapeError("index out of range in at()");
  return impl_->data[r * v.c + c];
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(std::make_shared<TensorImpl>(shape(), impl_->data));
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::shared_ptr<TensorImpl> output, Backward fn) {
  nodes_.push_back({std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  loss.impl()->grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->grad.empty()) it->fn();
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) throw std::logic_error("backward() with no active tape");
  g_active_tape->backward(loss);
}

AllocationStats allocation_stats() { return g_stats; }
void reset_allocation_peak() { g_stats.peak_bytes = g_stats.live_bytes; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

// Ties send the gradient to the first operand.
Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "minimum", [](double x, double y) { return std::min(x, y); },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "maximum", [](double x, double y) { return std::max(x, y); },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
Tensor operator-(double s, const Tensor& a) { return add_scalar(scale(a, -1.0), s); }
Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& x, double s) {
  return unary(
      x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor smooth_l1(const Tensor& x, double beta) {
  return unary(
      x, "smooth_l1",
      [beta](double v) {
        const double a = std::abs(v);
        return a < beta ? 0.5 * v * v / beta : a - 0.5 * beta;
      },
      [beta](double v, double) {
        if (std::abs(v) < beta) return v / beta;
        return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const View va = matrix_view(a, "matmul");
  const View vb = matrix_view(b, "matmul");
  if (va.c != vb.r) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(va.r * vb.c);
  MutMap(out.data(), va.r, vb.c).noalias() =
      ConstMap(a.data().data(), va.r, va.c) * ConstMap(b.data().data(), vb.r, vb.c);
  Tensor result = make({va.r, vb.c}, std::move(out), "matmul");
  if (tracking({&a, &b})) {
    auto pa = a.impl_ptr();
    auto pb = b.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() {
      ConstMap g(po->grad.data(), va.r, vb.c);
      if (pa->requires_grad) {
        MutMap ga(pa->grad_buffer().data(), va.r, va.c);
        ga.noalias() += g * ConstMap(pb->data.data(), vb.r, vb.c).transpose();
      }
      if (pb->requires_grad) {
        MutMap gb(pb->grad_buffer().data(), vb.r, vb.c);
        gb.noalias() += ConstMap(pa->data.data(), va.r, va.c).transpose() * g;
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& x) {
  const View v = matrix_view(x, "transpose");
  std::vector<double> out(x.size());
  MutMap(out.data(), v.c, v.r) = ConstMap(x.data().data(), v.r, v.c).transpose();
  Tensor result = make({v.c, v.r}, std::move(out), "transpose");
  if (tracking({&x})) {
    auto px = x.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() {
      MutMap(px->grad_buffer().data(), v.r, v.c) += ConstMap(po->grad.data(), v.c, v.r).transpose();
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (product(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor result = make(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
                       "reshape");
  if (tracking({&x})) {
    auto px = x.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() { px->accumulate(po->grad); });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Normalizations

namespace {

struct AxisLayout {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                     shape_str(shape));
  }
  if (shape[axis] == 0) throw ShapeError(std::string(op) + ": empty axis");
  AxisLayout l{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisLayout l = axis_layout(x.shape(), axis, "softmax");
  const auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const auto idx = [&](std::size_t j) { return (o * l.n + j) * l.inner + i; };
      double mx = xd[idx(0)];
      for (std::size_t j = 1; j < l.n; ++j) mx = std::max(mx, xd[idx(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < l.n; ++j) z += (out[idx(j)] = std::exp(xd[idx(j)] - mx));
      for (std::size_t j = 0; j < l.n; ++j) out[idx(j)] /= z;
    }
  }
  Tensor result = make(x.shape(), std::move(out), "softmax");
  if (tracking({&x})) {
    auto px = x.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() {
      std::vector<double> g(px->data.size());
      for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t i = 0; i < l.inner; ++i) {
          const auto idx = [&](std::size_t j) { return (o * l.n + j) * l.inner + i; };
          double dot = 0.0;
          for (std::size_t j = 0; j < l.n; ++j) dot += po->grad[idx(j)] * po->data[idx(j)];
          for (std::size_t j = 0; j < l.n; ++j) {
            g[idx(j)] = po->data[idx(j)] * (po->grad[idx(j)] - dot);
          }
        }
      }
      px->accumulate(g);
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisLayout l = axis_layout(x.shape(), axis, "log_softmax");
  const auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const auto idx = [&](std::size_t j) { return (o * l.n + j) * l.inner + i; };
      double mx = xd[idx(0)];
      for (std::size_t j = 1; j < l.n; ++j) mx = std::max(mx, xd[idx(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < l.n; ++j) z += std::exp(xd[idx(j)] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < l.n; ++j) out[idx(j)] = xd[idx(j)] - lz;
    }
  }
  Tensor result = make(x.shape(), std::move(out), "log_softmax");
  if (tracking({&x})) {
    auto px = x.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() {
      std::vector<double> g(px->data.size());
      for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t i = 0; i < l.inner; ++i) {
          const auto idx = [&](std::size_t j) { return (o * l.n + j) * l.inner + i; };
          double gs = 0.0;
          for (std::size_t j = 0; j < l.n; ++j) gs += po->grad[idx(j)];
          for (std::size_t j = 0; j < l.n; ++j) {
            g[idx(j)] = po->grad[idx(j)] - std::exp(po->data[idx(j)]) * gs;
          }
        }
      }
      px->accumulate(g);
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0 || x.shape().back() < 1) {
    throw ShapeError("layer_norm: last axis must have size >= 1, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  if (gamma.size() != n || beta.size() != n) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match last axis of " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / n;
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv_std[r];
      xhat[r * n + j] = h;
      out[r * n + j] = gd[j] * h + bd[j];
    }
  }
  Tensor result = make(x.shape(), std::move(out), "layer_norm");
  if (tracking({&x, &gamma, &beta})) {
    auto px = x.impl_ptr();
    auto pg = gamma.impl_ptr();
    auto pb = beta.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      const auto& g = po->grad;
      if (pg->requires_grad || pb->requires_grad) {
        std::vector<double> gg(n, 0.0);
        std::vector<double> gb(n, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) {
            gg[j] += g[r * n + j] * xhat[r * n + j];
            gb[j] += g[r * n + j];
          }
        }
        if (pg->requires_grad) pg->accumulate(gg);
        if (pb->requires_grad) pb->accumulate(gb);
      }
      if (px->requires_grad) {
        std::vector<double> gx(px->data.size());
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0;
          double m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dh = g[r * n + j] * pg->data[j];
            m1 += dh;
            m2 += dh * xhat[r * n + j];
          }
          m1 *= inv_n;
          m2 *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double dh = g[r * n + j] * pg->data[j];
            gx[r * n + j] = inv_std[r] * (dh - m1 - xhat[r * n + j] * m2);
          }
        }
        px->accumulate(gx);
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const auto xd = x.data();
  Tensor result = make({}, {std::accumulate(xd.begin(), xd.end(), 0.0)}, "sum");
  if (tracking({&x})) {
    auto px = x.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() {
      px->accumulate(std::vector<double>(px->data.size(), po->grad[0]));
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t C = matrix_view(parts[0], "concat_rows").c;
  std::size_t R = 0;
  for (const auto& p : parts) {
    const View v = matrix_view(p, "concat_rows");
    if (v.c != C) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    R += v.r;
  }
  std::vector<double> out;
  out.reserve(R * C);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor result = make({R, C}, std::move(out), "concat_rows");
  if (tracking(parts)) {
    std::vector<std::shared_ptr<TensorImpl>> ps;
    for (const auto& p : parts) ps.push_back(p.impl_ptr());
    TensorImpl* po = result.impl();
    record(result, [=]() {
      std::size_t offset = 0;
      for (const auto& p : ps) {
        const std::size_t n = p->data.size();
        if (p->requires_grad) {
          p->accumulate(std::span<const double>(po->grad.data() + offset, n));
        }
        offset += n;
      }
    });
  }
  return result;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t R = matrix_view(parts[0], "concat_cols").r;
  std::vector<std::size_t> widths;
  std::size_t C = 0;
  for (const auto& p : parts) {
    const View v = matrix_view(p, "concat_cols");
    if (v.r != R) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    widths.push_back(v.c);
    C += v.c;
  }
  std::vector<double> out(R * C);
  std::size_t c0 = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pd = parts[k].data();
    for (std::size_t r = 0; r < R; ++r) {
      std::copy_n(pd.begin() + r * widths[k], widths[k], out.begin() + r * C + c0);
    }
    c0 += widths[k];
  }
  Tensor result = make({R, C}, std::move(out), "concat_cols");
  if (tracking(parts)) {
    std::vector<std::shared_ptr<TensorImpl>> ps;
    for (const auto& p : parts) ps.push_back(p.impl_ptr());
    TensorImpl* po = result.impl();
    record(result, [=]() {
      std::size_t c = 0;
      for (std::size_t k = 0; k < ps.size(); ++k) {
        if (ps[k]->requires_grad) {
          auto& g = ps[k]->grad_buffer();
          for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t j = 0; j < widths[k]; ++j) g[r * widths[k] + j] += po->grad[r * C + c + j];
          }
        }
        c += widths[k];
      }
    });
  }
  return result;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  const View v = matrix_view(x, "slice_rows");
  if (begin + count > v.r) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin() + begin * v.c, x.data().begin() + (begin + count) * v.c);
  Tensor result = make({count, v.c}, std::move(out), "slice_rows");
  if (tracking({&x})) {
    auto px = x.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < po->grad.size(); ++i) g[begin * v.c + i] += po->grad[i];
    });
  }
  return result;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  const View v = matrix_view(x, "slice_cols");
  if (begin + count > v.c) {
    throw ShapeError("slice_cols: cols [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + shape_str(x.shape()));
  }
  std::vector<double> out(v.r * count);
  const auto xd = x.data();
  for (std::size_t r = 0; r < v.r; ++r) {
    std::copy_n(xd.begin() + r * v.c + begin, count, out.begin() + r * count);
  }
  Tensor result = make({v.r, count}, std::move(out), "slice_cols");
  if (tracking({&x})) {
    auto px = x.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=]() {
      auto& g = px->grad_buffer();
      for (std::size_t r = 0; r < v.r; ++r) {
        for (std::size_t j = 0; j < count; ++j) g[r * v.c + begin + j] += po->grad[r * count + j];
      }
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  const View v = matrix_view(table, "gather_rows");
  std::vector<double> out(indices.size() * v.c);
  const auto td = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v.r) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) +
                       " out of range for " + shape_str(table.shape()));
    }
    std::copy_n(td.begin() + indices[i] * v.c, v.c, out.begin() + i * v.c);
  }
  Tensor result = make({indices.size(), v.c}, std::move(out), "gather_rows");
  if (tracking({&table})) {
    auto pt = table.impl_ptr();
    TensorImpl* po = result.impl();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    record(result, [=, idx = std::move(idx)]() {
      auto& g = pt->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < v.c; ++j) g[idx[i] * v.c + j] += po->grad[i * v.c + j];
      }
    });
  }
  return result;
}

Tensor scale_rows(const Tensor& x, std::span<const double> weights) {
  const View v = matrix_view(x, "scale_rows");
  if (weights.size() != v.r) {
    throw ShapeError("scale_rows: " + std::to_string(weights.size()) + " weights for " +
                     shape_str(x.shape()));
  }
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t r = 0; r < v.r; ++r) {
    for (std::size_t j = 0; j < v.c; ++j) out[r * v.c + j] = xd[r * v.c + j] * weights[r];
  }
  Tensor result = make(x.shape(), std::move(out), "scale_rows");
  if (tracking({&x})) {
    auto px = x.impl_ptr();
    TensorImpl* po = result.impl();
    std::vector<double> w(weights.begin(), weights.end());
    record(result, [=, w = std::move(w)]() {
      auto& g = px->grad_buffer();
      for (std::size_t r = 0; r < v.r; ++r) {
        for (std::size_t j = 0; j < v.c; ++j) g[r * v.c + j] += po->grad[r * v.c + j] * w[r];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Attention

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const double> key_bias, std::vector<std::vector<double>>* weights_out) {
  const View vq = matrix_view(q, "attention");
  const View vk = matrix_view(k, "attention");
  const View vv = matrix_view(v, "attention");
  if (vq.c != vk.c || vk.c != vv.c || vk.r != vv.r) {
    throw ShapeError("attention: incompatible q/k/v shapes " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (vk.r == 0) throw ShapeError("attention: no keys");
  if (heads == 0 || vq.c % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(vq.c) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  if (!key_bias.empty() && key_bias.size() != vk.r) {
    throw ShapeError("attention: key bias length " + std::to_string(key_bias.size()) +
                     " != key count " + std::to_string(vk.r));
  }
  const std::size_t n = vq.r;
  const std::size_t m = vk.r;
  const std::size_t C = vq.c;
  const std::size_t d = C / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));

  ConstMap Q(q.data().data(), n, C);
  ConstMap K(k.data().data(), m, C);
  ConstMap V(v.data().data(), m, C);
  std::vector<double> out(n * C);
  MutMap O(out.data(), n, C);

  const bool track = tracking({&q, &k, &v});
  std::vector<RowMatrix> probs;
  if (track) probs.reserve(heads);
  if (weights_out) weights_out->clear();

  // Vectorized exp leaves denormals rather than zeros far below the max, so
  // masked keys are cleared explicitly (unless the whole row is masked).
  std::vector<std::size_t> masked;
  for (std::size_t j = 0; j < key_bias.size(); ++j) {
    if (key_bias[j] <= 0.5 * kMaskedScore) masked.push_back(j);
  }
  for (std::size_t h = 0; h < heads; ++h) {
    RowMatrix S = (Q.middleCols(h * d, d) * K.middleCols(h * d, d).transpose()) * s;
    if (!key_bias.empty()) {
      for (std::size_t j = 0; j < m; ++j) S.col(j).array() += key_bias[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto row = S.row(i);
      const double mx = row.maxCoeff();
      row = (row.array() - mx).exp();
      if (mx > 0.5 * kMaskedScore) {
        for (auto j : masked) row(j) = 0.0;
      }
      row /= row.sum();
    }
    O.middleCols(h * d, d).noalias() = S * V.middleCols(h * d, d);
    if (weights_out) weights_out->emplace_back(S.data(), S.data() + S.size());
    if (track) probs.push_back(std::move(S));
  }

  Tensor result = make({n, C}, std::move(out), "attention");
  if (track) {
    auto pq = q.impl_ptr();
    auto pk = k.impl_ptr();
    auto pv = v.impl_ptr();
    TensorImpl* po = result.impl();
    record(result, [=, probs = std::move(probs)]() {
      ConstMap G(po->grad.data(), n, C);
      ConstMap Qd(pq->data.data(), n, C);
      ConstMap Kd(pk->data.data(), m, C);
      ConstMap Vd(pv->data.data(), m, C);
      for (std::size_t h = 0; h < heads; ++h) {
        const RowMatrix& P = probs[h];
        const auto Gh = G.middleCols(h * d, d);
        if (pv->requires_grad) {
          MutMap gv(pv->grad_buffer().data(), m, C);
          gv.middleCols(h * d, d).noalias() += P.transpose() * Gh;
        }
        if (!pq->requires_grad && !pk->requires_grad) continue;
        RowMatrix dP = Gh * Vd.middleCols(h * d, d).transpose();
        RowMatrix dS = P.array() * (dP.colwise() - (dP.array() * P.array()).rowwise().sum().matrix()).array();
        dS *= s;
        if (pq->requires_grad) {
          MutMap gq(pq->grad_buffer().data(), n, C);
          gq.middleCols(h * d, d).noalias() += dS * Kd.middleCols(h * d, d);
        }
        if (pk->requires_grad) {
          MutMap gk(pk->grad_buffer().data(), m, C);
          gk.middleCols(h * d, d).noalias() += dS.transpose() * Qd.middleCols(h * d, d);
        }
      }
    });
  }
  return result;
}

}  // namespace artstvg
