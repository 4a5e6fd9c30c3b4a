#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace setvec {

// Row-major n-dimensional array of doubles. Values are immutable once the
// tensor has been handed to an op; `node` ties the tensor to a GradientTape.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  int node = -1;

  Tensor() : data(std::make_shared<std::vector<double>>()) {}
  Tensor(std::vector<int> shape_, std::vector<double> values);
  static Tensor zeros(const std::vector<int>& shape);
  static Tensor full(const std::vector<int>& shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  size_t numel() const;
  // same storage, no tape association; use before re-tracing on a new tape
  Tensor detach() const {
    Tensor t = *this;
    t.node = -1;
    return t;
  }
  const double* ptr() const { return data->data(); }
  double* mut() { return data->data(); }
  double item() const;
  bool all_finite() const;
  std::string shape_str() const;
};

std::string shape_to_str(const std::vector<int>& shape);

// When enabled, every op validates input finiteness and throws on NaN/Inf.
void set_debug_checks(bool on);
bool debug_checks();

class Tape;
using BackFn = std::function<void(Tape&, const std::vector<double>& out_grad)>;

// Reverse-mode gradient tape. Nodes are recorded in execution order, which
// is already a topological order of the subgraph.
class Tape {
 public:
  // Registers a leaf tensor so gradients w.r.t. it can be retrieved later.
  int watch(Tensor& t);

  int record(const std::vector<int>& shape, BackFn back);

  void backward(const Tensor& loss);

  // Gradient of the last backward() loss w.r.t. t. Tensors never reached by
  // the backward sweep get a zero tensor of matching shape.
  Tensor grad(const Tensor& t) const;

  std::vector<double>& grad_buf(int node);
  bool empty() const { return nodes_.empty(); }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> shape;
    BackFn back;  // null for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool ran_backward_ = false;
};

enum class OpKind {
  Matmul,
  Conv2d,
  MaxPool2d,
  AvgPool2d,
  Relu,
  Sigmoid,
  Tanh,
  Add,
  Multiply,
  Subtract,
  Scale,
  Sum,
  Mean,
  Log,
  Exp,
  Dot,
  BatchNorm,
  Affine,
};

const char* op_name(OpKind kind);

struct OpParams {
  int stride = 1;
  int pad = 0;
  int window = 2;       // pooling window (stride == window)
  double factor = 1.0;  // Scale
  bool train = true;    // BatchNorm
};

// Running batch-norm statistics, one value per channel/feature.
struct BatchNormState {
  Tensor mean;
  Tensor var;
  double eps = 1e-5;
  double momentum = 0.9;
  static BatchNormState fresh(int channels, double eps = 1e-5, double momentum = 0.9);
};

// --- forward ops (recorded on the tape when one is supplied) ---
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad,
              Tape* tape = nullptr);
Tensor max_pool2d(const Tensor& x, int window, Tape* tape = nullptr);
Tensor avg_pool2d(const Tensor& x, int window, Tape* tape = nullptr);
Tensor global_avg_pool(const Tensor& x, Tape* tape = nullptr);  // (N,C,H,W) -> (N,C)
Tensor relu(const Tensor& x, Tape* tape = nullptr);
Tensor sigmoid(const Tensor& x, Tape* tape = nullptr);
Tensor tanh_op(const Tensor& x, Tape* tape = nullptr);
Tensor log_op(const Tensor& x, Tape* tape = nullptr);
Tensor exp_op(const Tensor& x, Tape* tape = nullptr);
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor subtract(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor multiply(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& x, double factor, Tape* tape = nullptr);
Tensor sum(const Tensor& x, Tape* tape = nullptr);
Tensor mean(const Tensor& x, Tape* tape = nullptr);
Tensor dot(const Tensor& u, const Tensor& v, Tape* tape = nullptr);
Tensor row(const Tensor& m, int r, Tape* tape = nullptr);       // (n,d) -> (d)
Tensor log_sigmoid(const Tensor& x, Tape* tape = nullptr);      // stable log(sigma(x))
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape = nullptr);
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool train, Tape* tape = nullptr);

// Generic dispatcher; inputs per op as documented in tensor.cpp. BatchNorm
// here runs against fresh statistics (no running-state update).
Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpParams& params = {},
             Tape* tape = nullptr);

// Central-difference verification of the analytic gradients of `apply`.
// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
double grad_check(OpKind kind, const std::vector<Tensor>& inputs, const OpParams& params,
                  double epsilon);

// --- ITF tensor file format ---
void write_itf(std::ostream& os, const Tensor& t);
Tensor read_itf(std::istream& is);
void write_itf_file(const std::string& path, const Tensor& t);
Tensor read_itf_file(const std::string& path);

}  // namespace setvec
