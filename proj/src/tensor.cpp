#include "setvec/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace setvec {

namespace {

std::atomic<bool> g_debug_checks{false};

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

void check_finite_input(const char* op, const Tensor& t) {
  if (!debug_checks()) return;
  if (!t.all_finite())
    throw std::runtime_error(std::string("non-finite input to op '") + op + "'");
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string("shape mismatch in op '") + op + "': " +
                              a.shape_str() + " vs " + b.shape_str());
}

[[noreturn]] void shape_error1(const char* op, const Tensor& a, const std::string& why) {
  throw std::invalid_argument(std::string("bad shape in op '") + op + "': " + a.shape_str() +
                              " (" + why + ")");
}

}  // namespace

void set_debug_checks(bool on) { g_debug_checks.store(on); }
bool debug_checks() { return g_debug_checks.load(); }

Tensor::Tensor(std::vector<int> shape_, std::vector<double> values)
    : shape(std::move(shape_)), data(std::make_shared<std::vector<double>>(std::move(values))) {
  for (int d : shape)
    if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
  if (shape_numel(shape) != data->size())
    throw std::invalid_argument("Tensor: shape " + shape_to_str(shape) + " does not match " +
                                std::to_string(data->size()) + " values");
}

Tensor Tensor::zeros(const std::vector<int>& shape) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), 0.0));
}

Tensor Tensor::full(const std::vector<int>& shape, double value) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value));
}

size_t Tensor::numel() const { return data->size(); }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
  return (*data)[0];
}

bool Tensor::all_finite() const {
  for (double v : *data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string shape_to_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

std::string Tensor::shape_str() const { return shape_to_str(shape); }

// ---------------------------------------------------------------------------
// Tape

int Tape::watch(Tensor& t) {
  if (t.node >= 0) return t.node;
  nodes_.push_back(Node{t.shape, nullptr});
  t.node = static_cast<int>(nodes_.size()) - 1;
  return t.node;
}

int Tape::record(const std::vector<int>& shape, BackFn back) {
  nodes_.push_back(Node{shape, std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buf(int node) {
  if (node < 0 || static_cast<size_t>(node) >= nodes_.size())
    throw std::logic_error("grad_buf: node id does not belong to this tape");
  auto& g = grads_[static_cast<size_t>(node)];
  if (g.empty()) g.assign(shape_numel(nodes_[static_cast<size_t>(node)].shape), 0.0);
  return g;
}

void Tape::backward(const Tensor& loss) {
  if (nodes_.empty()) throw std::invalid_argument("backward: tape is empty");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape_str());
  if (loss.node < 0) throw std::invalid_argument("backward: loss is not on this tape");
  grads_.assign(nodes_.size(), {});
  grad_buf(loss.node)[0] = 1.0;
  for (int i = loss.node; i >= 0; --i) {
    auto& g = grads_[static_cast<size_t>(i)];
    if (g.empty()) continue;
    if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this, g);
  }
  ran_backward_ = true;
}

Tensor Tape::grad(const Tensor& t) const {
  if (t.node < 0) throw std::invalid_argument("grad: tensor was never recorded on this tape");
  if (!ran_backward_) throw std::logic_error("grad: backward() has not been run");
  const auto& g = grads_[static_cast<size_t>(t.node)];
  if (g.empty()) return Tensor::zeros(t.shape);
  return Tensor(t.shape, g);
}

// ---------------------------------------------------------------------------
// op helpers

namespace {

// Makes `out` the result of an op over `ins`; records the node when any
// input is tracked. Inputs that are not tracked are treated as constants.
Tensor finish(Tape* tape, Tensor out, const std::vector<const Tensor*>& ins, BackFn back) {
  if (!tape) return out;
  bool any = false;
  for (const Tensor* t : ins)
    if (t->node >= 0) any = true;
  if (!any) return out;
  out.node = tape->record(out.shape, std::move(back));
  return out;
}

void accumulate(Tape& tape, int node, const std::vector<double>& g) {
  if (node < 0) return;
  auto& buf = tape.grad_buf(node);
  for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

Tensor unary_elementwise(const char* name, const Tensor& x, Tape* tape,
                         double (*f)(double), double (*df)(double)) {
  check_finite_input(name, x);
  std::vector<double> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f((*x.data)[i]);
  Tensor y(x.shape, std::move(out));
  int xn = x.node;
  auto xd = x.data;
  return finish(tape, std::move(y), {&x}, [xn, xd, df](Tape& t, const std::vector<double>& og) {
    if (xn < 0) return;
    auto& buf = t.grad_buf(xn);
    for (size_t i = 0; i < og.size(); ++i) buf[i] += og[i] * df((*xd)[i]);
  });
}

double sigmoid_s(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

// ---------------------------------------------------------------------------
// elementwise / reduction ops

Tensor relu(const Tensor& x, Tape* tape) {
  return unary_elementwise(
      "relu", x, tape, [](double v) { return v > 0 ? v : 0.0; },
      [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x, Tape* tape) {
  return unary_elementwise(
      "sigmoid", x, tape, [](double v) { return sigmoid_s(v); },
      [](double v) {
        double s = sigmoid_s(v);
        return s * (1.0 - s);
      });
}

Tensor tanh_op(const Tensor& x, Tape* tape) {
  return unary_elementwise(
      "tanh", x, tape, [](double v) { return std::tanh(v); },
      [](double v) {
        double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

Tensor log_op(const Tensor& x, Tape* tape) {
  return unary_elementwise(
      "log", x, tape, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor exp_op(const Tensor& x, Tape* tape) {
  return unary_elementwise(
      "exp", x, tape, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

namespace {

Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b, Tape* tape,
                          double (*f)(double, double), double (*dfa)(double, double),
                          double (*dfb)(double, double)) {
  check_finite_input(name, a);
  check_finite_input(name, b);
  // bias-style broadcast: b's shape equals a's shape minus the leading
  // (batch) dimension; no other broadcasting.
  bool bias_bcast = false;
  if (a.shape != b.shape) {
    if (a.shape.size() == b.shape.size() + 1 &&
        std::equal(b.shape.begin(), b.shape.end(), a.shape.begin() + 1))
      bias_bcast = true;
    else
      shape_error(name, a, b);
  }
  size_t bn = b.numel();
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f((*a.data)[i], (*b.data)[i % bn]);
  Tensor y(a.shape, std::move(out));
  int an = a.node, bnode = b.node;
  auto ad = a.data, bd = b.data;
  (void)bias_bcast;
  return finish(tape, std::move(y), {&a, &b},
                [an, bnode, ad, bd, bn, dfa, dfb](Tape& t, const std::vector<double>& og) {
                  if (an >= 0) {
                    auto& ga = t.grad_buf(an);
                    for (size_t i = 0; i < og.size(); ++i)
                      ga[i] += og[i] * dfa((*ad)[i], (*bd)[i % bn]);
                  }
                  if (bnode >= 0) {
                    auto& gb = t.grad_buf(bnode);
                    for (size_t i = 0; i < og.size(); ++i)
                      gb[i % bn] += og[i] * dfb((*ad)[i], (*bd)[i % bn]);
                  }
                });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  return binary_elementwise(
      "add", a, b, tape, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor subtract(const Tensor& a, const Tensor& b, Tape* tape) {
  return binary_elementwise(
      "subtract", a, b, tape, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor multiply(const Tensor& a, const Tensor& b, Tape* tape) {
  return binary_elementwise(
      "multiply", a, b, tape, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor, Tape* tape) {
  check_finite_input("scale", x);
  std::vector<double> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = (*x.data)[i] * factor;
  Tensor y(x.shape, std::move(out));
  int xn = x.node;
  return finish(tape, std::move(y), {&x}, [xn, factor](Tape& t, const std::vector<double>& og) {
    if (xn < 0) return;
    auto& g = t.grad_buf(xn);
    for (size_t i = 0; i < og.size(); ++i) g[i] += og[i] * factor;
  });
}

Tensor sum(const Tensor& x, Tape* tape) {
  check_finite_input("sum", x);
  double s = std::accumulate(x.data->begin(), x.data->end(), 0.0);
  Tensor y = Tensor::scalar(s);
  int xn = x.node;
  size_t n = x.numel();
  return finish(tape, std::move(y), {&x}, [xn, n](Tape& t, const std::vector<double>& og) {
    if (xn < 0) return;
    auto& g = t.grad_buf(xn);
    for (size_t i = 0; i < n; ++i) g[i] += og[0];
  });
}

Tensor mean(const Tensor& x, Tape* tape) {
  check_finite_input("mean", x);
  double s = std::accumulate(x.data->begin(), x.data->end(), 0.0);
  size_t n = x.numel();
  Tensor y = Tensor::scalar(s / static_cast<double>(n));
  int xn = x.node;
  return finish(tape, std::move(y), {&x}, [xn, n](Tape& t, const std::vector<double>& og) {
    if (xn < 0) return;
    auto& g = t.grad_buf(xn);
    double inv = 1.0 / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) g[i] += og[0] * inv;
  });
}

Tensor dot(const Tensor& u, const Tensor& v, Tape* tape) {
  check_finite_input("dot", u);
  check_finite_input("dot", v);
  if (u.shape.size() != 1 || v.shape.size() != 1 || u.shape != v.shape)
    shape_error("dot", u, v);
  double s = cblas_ddot(static_cast<int>(u.numel()), u.ptr(), 1, v.ptr(), 1);
  Tensor y = Tensor::scalar(s);
  int un = u.node, vn = v.node;
  auto ud = u.data, vd = v.data;
  return finish(tape, std::move(y), {&u, &v},
                [un, vn, ud, vd](Tape& t, const std::vector<double>& og) {
                  if (un >= 0) {
                    auto& g = t.grad_buf(un);
                    for (size_t i = 0; i < vd->size(); ++i) g[i] += og[0] * (*vd)[i];
                  }
                  if (vn >= 0) {
                    auto& g = t.grad_buf(vn);
                    for (size_t i = 0; i < ud->size(); ++i) g[i] += og[0] * (*ud)[i];
                  }
                });
}

Tensor row(const Tensor& m, int r, Tape* tape) {
  check_finite_input("row", m);
  if (m.shape.size() != 2) shape_error1("row", m, "input must be rank-2");
  if (r < 0 || r >= m.shape[0])
    throw std::invalid_argument("row: index " + std::to_string(r) + " out of range for " +
                                m.shape_str());
  int d = m.shape[1];
  std::vector<double> out(m.data->begin() + static_cast<size_t>(r) * d,
                          m.data->begin() + static_cast<size_t>(r + 1) * d);
  Tensor y({d}, std::move(out));
  int mn = m.node;
  return finish(tape, std::move(y), {&m}, [mn, r, d](Tape& t, const std::vector<double>& og) {
    if (mn < 0) return;
    auto& g = t.grad_buf(mn);
    for (int j = 0; j < d; ++j) g[static_cast<size_t>(r) * d + j] += og[j];
  });
}

Tensor log_sigmoid(const Tensor& x, Tape* tape) {
  return unary_elementwise(
      "log_sigmoid", x, tape,
      [](double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); },
      [](double z) { return 1.0 - sigmoid_s(z); });
}

// ---------------------------------------------------------------------------
// matmul / affine

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  check_finite_input("matmul", a);
  check_finite_input("matmul", b);
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
    shape_error("matmul", a, b);
  int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a.ptr(), k, b.ptr(), n,
              0.0, out.data(), n);
  Tensor y({m, n}, std::move(out));
  int an = a.node, bn = b.node;
  auto ad = a.data, bd = b.data;
  return finish(tape, std::move(y), {&a, &b},
                [an, bn, ad, bd, m, k, n](Tape& t, const std::vector<double>& og) {
                  if (an >= 0) {
                    auto& g = t.grad_buf(an);  // dA = dY * B^T
                    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0, og.data(),
                                n, bd->data(), n, 1.0, g.data(), k);
                  }
                  if (bn >= 0) {
                    auto& g = t.grad_buf(bn);  // dB = A^T * dY
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0, ad->data(),
                                k, og.data(), n, 1.0, g.data(), n);
                  }
                });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape) {
  if (x.shape.size() != 2 || w.shape.size() != 2 || x.shape[1] != w.shape[0])
    shape_error("affine", x, w);
  if (b.shape.size() != 1 || b.shape[0] != w.shape[1]) shape_error("affine", w, b);
  Tensor y = matmul(x, w, tape);
  return add(y, b, tape);
}

// ---------------------------------------------------------------------------
// conv2d (im2col + gemm)

namespace {

struct ConvDims {
  int n, c, h, w, oc, kh, kw, oh, ow;
};

ConvDims conv_dims(const char* op, const Tensor& x, const Tensor& wt, int stride, int pad) {
  if (x.shape.size() != 4) shape_error1(op, x, "input must be rank-4 (N,C,H,W)");
  if (wt.shape.size() != 4) shape_error1(op, wt, "kernel must be rank-4 (OC,C,kh,kw)");
  if (wt.shape[1] != x.shape[1]) shape_error(op, x, wt);
  if (stride < 1 || pad < 0) throw std::invalid_argument(std::string(op) + ": bad stride/pad");
  ConvDims d;
  d.n = x.shape[0];
  d.c = x.shape[1];
  d.h = x.shape[2];
  d.w = x.shape[3];
  d.oc = wt.shape[0];
  d.kh = wt.shape[2];
  d.kw = wt.shape[3];
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.oh < 1 || d.ow < 1) shape_error(op, x, wt);
  return d;
}

void im2col(const double* img, const ConvDims& d, int stride, int pad, double* col) {
  // col: (C*kh*kw, oh*ow)
  int span = d.oh * d.ow;
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        double* row = col + (static_cast<size_t>(c) * d.kh * d.kw + ki * d.kw + kj) * span;
        for (int oi = 0; oi < d.oh; ++oi) {
          int ii = oi * stride + ki - pad;
          for (int oj = 0; oj < d.ow; ++oj) {
            int jj = oj * stride + kj - pad;
            row[oi * d.ow + oj] =
                (ii >= 0 && ii < d.h && jj >= 0 && jj < d.w)
                    ? img[(static_cast<size_t>(c) * d.h + ii) * d.w + jj]
                    : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, int stride, int pad, double* img) {
  int span = d.oh * d.ow;
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const double* row = col + (static_cast<size_t>(c) * d.kh * d.kw + ki * d.kw + kj) * span;
        for (int oi = 0; oi < d.oh; ++oi) {
          int ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= d.h) continue;
          for (int oj = 0; oj < d.ow; ++oj) {
            int jj = oj * stride + kj - pad;
            if (jj < 0 || jj >= d.w) continue;
            img[(static_cast<size_t>(c) * d.h + ii) * d.w + jj] += row[oi * d.ow + oj];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad,
              Tape* tape) {
  check_finite_input("conv2d", x);
  check_finite_input("conv2d", w);
  if (bias) {
    check_finite_input("conv2d", *bias);
    if (bias->shape.size() != 1 || bias->shape[0] != w.shape[0]) shape_error("conv2d", w, *bias);
  }
  ConvDims d = conv_dims("conv2d", x, w, stride, pad);
  int kdim = d.c * d.kh * d.kw;
  int span = d.oh * d.ow;
  std::vector<double> out(static_cast<size_t>(d.n) * d.oc * span, 0.0);
  std::vector<double> col(static_cast<size_t>(kdim) * span);
  for (int n = 0; n < d.n; ++n) {
    im2col(x.ptr() + static_cast<size_t>(n) * d.c * d.h * d.w, d, stride, pad, col.data());
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, d.oc, span, kdim, 1.0, w.ptr(), kdim,
                col.data(), span, 0.0, out.data() + static_cast<size_t>(n) * d.oc * span, span);
  }
  if (bias) {
    for (int n = 0; n < d.n; ++n)
      for (int oc = 0; oc < d.oc; ++oc) {
        double bv = (*bias->data)[oc];
        double* dst = out.data() + (static_cast<size_t>(n) * d.oc + oc) * span;
        for (int i = 0; i < span; ++i) dst[i] += bv;
      }
  }
  Tensor y({d.n, d.oc, d.oh, d.ow}, std::move(out));
  int xn = x.node, wn = w.node, bn = bias ? bias->node : -1;
  auto xd = x.data, wd = w.data;
  std::vector<const Tensor*> ins{&x, &w};
  if (bias) ins.push_back(bias);
  return finish(tape, std::move(y), ins,
                [xn, wn, bn, xd, wd, d, stride, pad, kdim, span](Tape& t,
                                                                const std::vector<double>& og) {
                  std::vector<double> col(static_cast<size_t>(kdim) * span);
                  std::vector<double> dcol(static_cast<size_t>(kdim) * span);
                  for (int n = 0; n < d.n; ++n) {
                    const double* dy = og.data() + static_cast<size_t>(n) * d.oc * span;
                    if (wn >= 0) {
                      im2col(xd->data() + static_cast<size_t>(n) * d.c * d.h * d.w, d, stride,
                             pad, col.data());
                      auto& gw = t.grad_buf(wn);  // dW += dY * col^T
                      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, d.oc, kdim, span, 1.0,
                                  dy, span, col.data(), span, 1.0, gw.data(), kdim);
                    }
                    if (xn >= 0) {
                      // dcol = W^T * dY, then scatter back
                      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kdim, span, d.oc, 1.0,
                                  wd->data(), kdim, dy, span, 0.0, dcol.data(), span);
                      auto& gx = t.grad_buf(xn);
                      col2im_add(dcol.data(), d, stride, pad,
                                 gx.data() + static_cast<size_t>(n) * d.c * d.h * d.w);
                    }
                    if (bn >= 0) {
                      auto& gb = t.grad_buf(bn);
                      for (int oc = 0; oc < d.oc; ++oc) {
                        double s = 0.0;
                        const double* src = dy + static_cast<size_t>(oc) * span;
                        for (int i = 0; i < span; ++i) s += src[i];
                        gb[oc] += s;
                      }
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// pooling

Tensor max_pool2d(const Tensor& x, int window, Tape* tape) {
  check_finite_input("max_pool2d", x);
  if (x.shape.size() != 4) shape_error1("max_pool2d", x, "input must be rank-4");
  if (window < 1) throw std::invalid_argument("max_pool2d: window must be positive");
  int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  int oh = h / window, ow = w / window;
  if (oh < 1 || ow < 1) shape_error1("max_pool2d", x, "window larger than input");
  std::vector<double> out(static_cast<size_t>(n) * c * oh * ow);
  std::vector<int> argmax(out.size());
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double* img = x.ptr() + (static_cast<size_t>(ni) * c + ci) * h * w;
      double* dst = out.data() + (static_cast<size_t>(ni) * c + ci) * oh * ow;
      int* am = argmax.data() + (static_cast<size_t>(ni) * c + ci) * oh * ow;
      for (int oi = 0; oi < oh; ++oi)
        for (int oj = 0; oj < ow; ++oj) {
          double best = -1e300;
          int besti = 0;
          for (int ki = 0; ki < window; ++ki)
            for (int kj = 0; kj < window; ++kj) {
              int idx = (oi * window + ki) * w + oj * window + kj;
              if (img[idx] > best) {
                best = img[idx];
                besti = idx;
              }
            }
          dst[oi * ow + oj] = best;
          am[oi * ow + oj] = besti;
        }
    }
  Tensor y({n, c, oh, ow}, std::move(out));
  int xn = x.node;
  size_t plane = static_cast<size_t>(h) * w, oplane = static_cast<size_t>(oh) * ow;
  return finish(tape, std::move(y), {&x},
                [xn, argmax = std::move(argmax), n, c, plane, oplane](
                    Tape& t, const std::vector<double>& og) {
                  if (xn < 0) return;
                  auto& g = t.grad_buf(xn);
                  for (size_t p = 0; p < static_cast<size_t>(n) * c; ++p) {
                    const double* dy = og.data() + p * oplane;
                    const int* am = argmax.data() + p * oplane;
                    double* gx = g.data() + p * plane;
                    for (size_t i = 0; i < oplane; ++i) gx[am[i]] += dy[i];
                  }
                });
}

Tensor avg_pool2d(const Tensor& x, int window, Tape* tape) {
  check_finite_input("avg_pool2d", x);
  if (x.shape.size() != 4) shape_error1("avg_pool2d", x, "input must be rank-4");
  if (window < 1) throw std::invalid_argument("avg_pool2d: window must be positive");
  int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  int oh = h / window, ow = w / window;
  if (oh < 1 || ow < 1) shape_error1("avg_pool2d", x, "window larger than input");
  double inv = 1.0 / (window * window);
  std::vector<double> out(static_cast<size_t>(n) * c * oh * ow, 0.0);
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double* img = x.ptr() + (static_cast<size_t>(ni) * c + ci) * h * w;
      double* dst = out.data() + (static_cast<size_t>(ni) * c + ci) * oh * ow;
      for (int oi = 0; oi < oh; ++oi)
        for (int oj = 0; oj < ow; ++oj) {
          double s = 0.0;
          for (int ki = 0; ki < window; ++ki)
            for (int kj = 0; kj < window; ++kj)
              s += img[(oi * window + ki) * w + oj * window + kj];
          dst[oi * ow + oj] = s * inv;
        }
    }
  Tensor y({n, c, oh, ow}, std::move(out));
  int xn = x.node;
  return finish(tape, std::move(y), {&x},
                [xn, n, c, h, w, oh, ow, window, inv](Tape& t, const std::vector<double>& og) {
                  if (xn < 0) return;
                  auto& g = t.grad_buf(xn);
                  for (int ni = 0; ni < n; ++ni)
                    for (int ci = 0; ci < c; ++ci) {
                      const double* dy = og.data() + (static_cast<size_t>(ni) * c + ci) * oh * ow;
                      double* gx = g.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
                      for (int oi = 0; oi < oh; ++oi)
                        for (int oj = 0; oj < ow; ++oj) {
                          double v = dy[oi * ow + oj] * inv;
                          for (int ki = 0; ki < window; ++ki)
                            for (int kj = 0; kj < window; ++kj)
                              gx[(oi * window + ki) * w + oj * window + kj] += v;
                        }
                    }
                });
}

Tensor global_avg_pool(const Tensor& x, Tape* tape) {
  check_finite_input("global_avg_pool", x);
  if (x.shape.size() != 4) shape_error1("global_avg_pool", x, "input must be rank-4");
  int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  size_t plane = static_cast<size_t>(h) * w;
  double inv = 1.0 / static_cast<double>(plane);
  std::vector<double> out(static_cast<size_t>(n) * c);
  for (size_t p = 0; p < out.size(); ++p) {
    const double* img = x.ptr() + p * plane;
    double s = 0.0;
    for (size_t i = 0; i < plane; ++i) s += img[i];
    out[p] = s * inv;
  }
  Tensor y({n, c}, std::move(out));
  int xn = x.node;
  return finish(tape, std::move(y), {&x},
                [xn, plane, inv](Tape& t, const std::vector<double>& og) {
                  if (xn < 0) return;
                  auto& g = t.grad_buf(xn);
                  for (size_t p = 0; p < og.size(); ++p) {
                    double v = og[p] * inv;
                    double* gx = g.data() + p * plane;
                    for (size_t i = 0; i < plane; ++i) gx[i] += v;
                  }
                });
}

// ---------------------------------------------------------------------------
// batch norm

BatchNormState BatchNormState::fresh(int channels, double eps, double momentum) {
  BatchNormState s;
  s.mean = Tensor::zeros({channels});
  s.var = Tensor::full({channels}, 1.0);
  s.eps = eps;
  s.momentum = momentum;
  return s;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool train, Tape* tape) {
  check_finite_input("batch_norm", x);
  check_finite_input("batch_norm", gamma);
  check_finite_input("batch_norm", beta);
  if (x.shape.size() != 2 && x.shape.size() != 4)
    shape_error1("batch_norm", x, "input must be rank-2 or rank-4");
  int c = x.shape[1];
  if (gamma.shape != std::vector<int>{c} || beta.shape != std::vector<int>{c})
    shape_error("batch_norm", x, gamma);
  int n = x.shape[0];
  int spatial = x.shape.size() == 4 ? x.shape[2] * x.shape[3] : 1;
  size_t per_channel = static_cast<size_t>(n) * spatial;
  double eps = state.eps;

  // gather per-channel mean/var
  std::vector<double> mu(c), var(c);
  auto channel_index = [&](size_t flat) { return (flat / spatial) % c; };
  if (train) {
    std::vector<double> s1(c, 0.0), s2(c, 0.0);
    for (size_t i = 0; i < x.numel(); ++i) {
      double v = (*x.data)[i];
      size_t ci = channel_index(i);
      s1[ci] += v;
      s2[ci] += v * v;
    }
    for (int ci = 0; ci < c; ++ci) {
      mu[ci] = s1[ci] / static_cast<double>(per_channel);
      var[ci] = s2[ci] / static_cast<double>(per_channel) - mu[ci] * mu[ci];
      if (var[ci] < 0) var[ci] = 0;
    }
    // update running statistics (not part of the differentiated graph)
    std::vector<double> rm = *state.mean.data, rv = *state.var.data;
    for (int ci = 0; ci < c; ++ci) {
      rm[ci] = state.momentum * rm[ci] + (1.0 - state.momentum) * mu[ci];
      rv[ci] = state.momentum * rv[ci] + (1.0 - state.momentum) * var[ci];
    }
    state.mean = Tensor({c}, std::move(rm));
    state.var = Tensor({c}, std::move(rv));
  } else {
    mu = *state.mean.data;
    var = *state.var.data;
  }

  std::vector<double> xhat(x.numel()), out(x.numel());
  for (size_t i = 0; i < x.numel(); ++i) {
    size_t ci = channel_index(i);
    xhat[i] = ((*x.data)[i] - mu[ci]) / std::sqrt(var[ci] + eps);
    out[i] = (*gamma.data)[ci] * xhat[i] + (*beta.data)[ci];
  }
  Tensor y(x.shape, std::move(out));
  int xn = x.node, gn = gamma.node, bn = beta.node;
  auto gd = gamma.data;
  return finish(
      tape, std::move(y), {&x, &gamma, &beta},
      [xn, gn, bn, gd, xhat = std::move(xhat), var = std::move(var), c, spatial, per_channel,
       eps, train](Tape& t, const std::vector<double>& og) {
        auto channel_index = [&](size_t flat) { return (flat / spatial) % c; };
        // reductions shared by the x-gradient in train mode
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (size_t i = 0; i < og.size(); ++i) {
          size_t ci = channel_index(i);
          sum_dy[ci] += og[i];
          sum_dy_xhat[ci] += og[i] * xhat[i];
        }
        if (gn >= 0) {
          auto& gg = t.grad_buf(gn);
          for (int ci = 0; ci < c; ++ci) gg[ci] += sum_dy_xhat[ci];
        }
        if (bn >= 0) {
          auto& gb = t.grad_buf(bn);
          for (int ci = 0; ci < c; ++ci) gb[ci] += sum_dy[ci];
        }
        if (xn >= 0) {
          auto& gx = t.grad_buf(xn);
          double m = static_cast<double>(per_channel);
          for (size_t i = 0; i < og.size(); ++i) {
            size_t ci = channel_index(i);
            double inv_std = 1.0 / std::sqrt(var[ci] + eps);
            double g = (*gd)[ci];
            if (train) {
              gx[i] += g * inv_std *
                       (og[i] - sum_dy[ci] / m - xhat[i] * sum_dy_xhat[ci] / m);
            } else {
              gx[i] += g * inv_std * og[i];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// dispatcher + grad check

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Matmul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::MaxPool2d: return "max_pool2d";
    case OpKind::AvgPool2d: return "avg_pool2d";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::Add: return "add";
    case OpKind::Multiply: return "multiply";
    case OpKind::Subtract: return "subtract";
    case OpKind::Scale: return "scale";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::Dot: return "dot";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Affine: return "affine";
  }
  return "?";
}

namespace {

void need_inputs(OpKind kind, const std::vector<Tensor>& in, size_t n) {
  if (in.size() != n)
    throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                                " inputs, got " + std::to_string(in.size()));
}

}  // namespace

Tensor apply(OpKind kind, const std::vector<Tensor>& in, const OpParams& p, Tape* tape) {
  switch (kind) {
    case OpKind::Matmul:
      need_inputs(kind, in, 2);
      return matmul(in[0], in[1], tape);
    case OpKind::Conv2d: {
      if (in.size() == 2) return conv2d(in[0], in[1], nullptr, p.stride, p.pad, tape);
      need_inputs(kind, in, 3);
      return conv2d(in[0], in[1], &in[2], p.stride, p.pad, tape);
    }
    case OpKind::MaxPool2d:
      need_inputs(kind, in, 1);
      return max_pool2d(in[0], p.window, tape);
    case OpKind::AvgPool2d:
      need_inputs(kind, in, 1);
      return avg_pool2d(in[0], p.window, tape);
    case OpKind::Relu:
      need_inputs(kind, in, 1);
      return relu(in[0], tape);
    case OpKind::Sigmoid:
      need_inputs(kind, in, 1);
      return sigmoid(in[0], tape);
    case OpKind::Tanh:
      need_inputs(kind, in, 1);
      return tanh_op(in[0], tape);
    case OpKind::Add:
      need_inputs(kind, in, 2);
      return add(in[0], in[1], tape);
    case OpKind::Multiply:
      need_inputs(kind, in, 2);
      return multiply(in[0], in[1], tape);
    case OpKind::Subtract:
      need_inputs(kind, in, 2);
      return subtract(in[0], in[1], tape);
    case OpKind::Scale:
      need_inputs(kind, in, 1);
      return scale(in[0], p.factor, tape);
    case OpKind::Sum:
      need_inputs(kind, in, 1);
      return sum(in[0], tape);
    case OpKind::Mean:
      need_inputs(kind, in, 1);
      return mean(in[0], tape);
    case OpKind::Log:
      need_inputs(kind, in, 1);
      return log_op(in[0], tape);
    case OpKind::Exp:
      need_inputs(kind, in, 1);
      return exp_op(in[0], tape);
    case OpKind::Dot:
      need_inputs(kind, in, 2);
      return dot(in[0], in[1], tape);
    case OpKind::BatchNorm: {
      need_inputs(kind, in, 3);
      BatchNormState state = BatchNormState::fresh(in[0].shape.size() >= 2 ? in[0].shape[1] : 1);
      return batch_norm(in[0], in[1], in[2], state, p.train, tape);
    }
    case OpKind::Affine:
      need_inputs(kind, in, 3);
      return affine(in[0], in[1], in[2], tape);
  }
  throw std::invalid_argument("apply: unknown op kind");
}

namespace {

// Coordinates where the op is locally non-smooth are excluded from the
// finite-difference comparison.
bool skip_coordinate(OpKind kind, const std::vector<Tensor>& inputs, size_t input_idx,
                     size_t flat, const OpParams& p) {
  const Tensor& t = inputs[input_idx];
  double v = (*t.data)[flat];
  if (kind == OpKind::Relu) return std::abs(v) < 1e-6;
  if (kind == OpKind::MaxPool2d && input_idx == 0) {
    // skip if this value is within 1e-6 of its window's max and the max is
    // not unique enough for a stable central difference
    const Tensor& x = inputs[0];
    int c = x.shape[1], h = x.shape[2], w = x.shape[3];
    int win = p.window;
    size_t plane = static_cast<size_t>(h) * w;
    size_t pidx = flat / plane;
    size_t rem = flat % plane;
    int ii = static_cast<int>(rem) / w, jj = static_cast<int>(rem) % w;
    (void)c;
    int oi = ii / win, oj = jj / win;
    if ((oi + 1) * win > h || (oj + 1) * win > w) return false;  // dropped remainder region
    double best = -1e300, second = -1e300;
    for (int ki = 0; ki < win; ++ki)
      for (int kj = 0; kj < win; ++kj) {
        double u = (*x.data)[pidx * plane + (oi * win + ki) * w + oj * win + kj];
        if (u > best) {
          second = best;
          best = u;
        } else if (u > second) {
          second = u;
        }
      }
    return best - second < 1e-6 && std::abs(v - best) < 1e-6;
  }
  return false;
}

double forward_sum(OpKind kind, const std::vector<Tensor>& inputs, const OpParams& p) {
  Tensor out = apply(kind, inputs, p, nullptr);
  double s = 0.0;
  for (double v : *out.data) s += v;
  return s;
}

}  // namespace

double grad_check(OpKind kind, const std::vector<Tensor>& inputs, const OpParams& p,
                  double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-3))
    throw std::invalid_argument("grad_check: epsilon must be in (0, 1e-3]");
  size_t total = 0;
  for (const auto& t : inputs) total += t.numel();
  if (total > 10000)
    throw std::invalid_argument("grad_check: inputs too large (" + std::to_string(total) + ")");

  // analytic gradients of sum(op(inputs))
  Tape tape;
  std::vector<Tensor> tracked = inputs;
  for (auto& t : tracked) tape.watch(t);
  Tensor out = apply(kind, tracked, p, &tape);
  Tensor loss = sum(out, &tape);
  tape.backward(loss);

  double max_err = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor analytic = tape.grad(tracked[ti]);
    for (size_t m = 0; m < inputs[ti].numel(); ++m) {
      if (skip_coordinate(kind, inputs, ti, m, p)) continue;
      std::vector<Tensor> plus = inputs, minus = inputs;
      auto dp = std::make_shared<std::vector<double>>(*inputs[ti].data);
      auto dm = std::make_shared<std::vector<double>>(*inputs[ti].data);
      (*dp)[m] += epsilon;
      (*dm)[m] -= epsilon;
      plus[ti].data = dp;
      minus[ti].data = dm;
      double numeric = (forward_sum(kind, plus, p) - forward_sum(kind, minus, p)) / (2 * epsilon);
      double a = (*analytic.data)[m];
      double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

// ---------------------------------------------------------------------------
// ITF format: magic "ITF1", u8 rank, rank x u32 LE dims, f32 LE values

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("ITF: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_itf(std::ostream& os, const Tensor& t) {
  os.write("ITF1", 4);
  unsigned char rank = static_cast<unsigned char>(t.shape.size());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int d : t.shape) put_u32(os, static_cast<uint32_t>(d));
  for (double v : *t.data) {
    float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
  }
}

Tensor read_itf(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "ITF1", 4) != 0) throw std::runtime_error("ITF: bad magic");
  unsigned char rank;
  is.read(reinterpret_cast<char*>(&rank), 1);
  if (!is) throw std::runtime_error("ITF: truncated file");
  std::vector<int> shape(rank);
  for (auto& d : shape) {
    d = static_cast<int>(get_u32(is));
    if (d <= 0) throw std::runtime_error("ITF: non-positive dimension");
  }
  size_t n = shape_numel(shape);
  std::vector<double> values(n);
  for (size_t i = 0; i < n; ++i) {
    uint32_t bits = get_u32(is);
    float f;
    std::memcpy(&f, &bits, 4);
    values[i] = static_cast<double>(f);
  }
  return Tensor(std::move(shape), std::move(values));
}

void write_itf_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  write_itf(os, t);
  if (!os) throw std::runtime_error("write failed: " + path);
}

Tensor read_itf_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_itf(is);
}

}  // namespace setvec
