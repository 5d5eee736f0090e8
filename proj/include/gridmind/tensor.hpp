#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

// Reverse-mode autodiff over dense double tensors. Design points:
//  - a Tensor is a shared handle to (shape, values, requires_grad)
//  - operations record backward closures on the currently active Tape
//  - no tape active (or no input tracked) means plain numeric evaluation,
//    which is what rollouts and greedy decoding use
//  - all math is double precision; gradients accumulate in tape-local
//    buffers in recording order, so results are run-to-run deterministic

namespace gridmind {

class Tape;

namespace detail {
struct TensorData {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // leaf grad buffer, filled by Tape::backward
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const std::vector<int>& shape() const;
  int dim(int i) const;
  int ndim() const;
  size_t size() const;
  int rows() const;  // 2-d only
  int cols() const;  // 2-d only

  std::vector<double>& values();
  const std::vector<double>& values() const;
  double at(int r, int c) const;
  double item() const;  // scalar only

  bool requires_grad() const;
  // leaf gradient accumulated by the last backward() over this tensor
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  // deep copy of values; gradient state is not copied
  Tensor clone(bool requires_grad = false) const;

  detail::TensorData* impl() const { return data_.get(); }
  std::shared_ptr<detail::TensorData> handle() const { return data_; }

 private:
  std::shared_ptr<detail::TensorData> data_;
};

// Row-major boolean matrix; row r answers "which columns may row r attend to".
struct BoolMask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> allow;

  BoolMask() = default;
  BoolMask(int r, int c, bool value = false)
      : rows(r), cols(c), allow(size_t(r) * size_t(c), value ? 1 : 0) {}
  bool at(int r, int c) const { return allow[size_t(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { allow[size_t(r) * cols + c] = v ? 1 : 0; }
};

// Wengert list. One active tape at a time (single-threaded build); operations
// check Tape::active() and record themselves when any input is tracked.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Runs reverse accumulation from a recorded scalar. Gradients of every
  // tracked tensor become readable through grad_of(); leaf tensors with
  // requires_grad additionally receive them in Tensor::grad() (accumulating
  // over multiple backward calls on different tapes, as optimizers expect).
  void backward(const Tensor& loss);

  bool tracked(const Tensor& t) const;
  std::span<const double> grad_of(const Tensor& t) const;
  size_t node_count() const { return nodes_.size(); }

  // recording internals, used by the op library
  void register_output(const Tensor& out, std::function<void()> backward_fn);
  void note_input(const Tensor& t);
  // gradient buffer for a tracked tensor, created zeroed on first use
  std::vector<double>& grad_buffer(const std::shared_ptr<detail::TensorData>& d);
  const std::vector<double>* find_grad(const detail::TensorData* d) const;

 private:
  struct Node {
    std::shared_ptr<detail::TensorData> out;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const detail::TensorData*, std::vector<double>> grads_;
  std::unordered_map<const detail::TensorData*, bool> tracked_;
  std::vector<std::shared_ptr<detail::TensorData>> leaves_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// True when a tape is active and t should be recorded through.
bool grad_enabled(const Tensor& t);

// ---- primitive operations ----------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // same shape, elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor gelu(const Tensor& a);
// gradient passes through where lo <= x <= hi, zero outside
Tensor clamp(const Tensor& a, double lo, double hi);
// elementwise min; ties route the gradient to a
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);                          // -> scalar
Tensor mean(const Tensor& a);                         // -> scalar

// [n x m] @ [m x k] -> [n x k], OpenBLAS dgemm behind the scenes
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);                    // 2-d

// broadcast ops used by the transformer blocks
Tensor add_row(const Tensor& mat, const Tensor& row);       // [n x d] + [d]
Tensor mul_row(const Tensor& mat, const Tensor& row);       // [n x d] * [d]

// row gather/scatter; indices may repeat
Tensor select_rows(const Tensor& a, const std::vector<int>& idx);
Tensor slice_cols(const Tensor& a, int start, int count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

// table [V x D], ids in [0, V) -> [n x D]; backward scatter-adds into table
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// per-row normalization with learned gain/bias, population variance
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Softmax over the allowed entries of each row. Disallowed entries come out
// exactly +0.0 (a large negative additive shift would leave them merely tiny,
// so they are zeroed outright after normalization). A row with no allowed
// entry is a caller bug and throws.
Tensor masked_softmax(const Tensor& logits, const BoolMask& mask);

// log softmax over full rows, [n x V] -> [n x V]
Tensor log_softmax(const Tensor& logits);

// Mean negative log likelihood over rows where loss_mask is true. Targets at
// masked-out rows are ignored (and may be -1).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& loss_mask);

// [n x m], ids per row -> [n]; out[i] = a[i, ids[i]]
Tensor gather_cols(const Tensor& a, const std::vector<int>& ids);

// plain helpers (no autodiff involved)
std::vector<double> softmax_row(std::span<const double> logits);
double log_sum_exp(std::span<const double> v);
std::string shape_str(const std::vector<int>& shape);

}  // namespace gridmind
