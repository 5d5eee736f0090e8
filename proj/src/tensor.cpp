#include "gridmind/tensor.hpp"

#include <cblas.h>

#include <cmath>
#include <cstdio>
#include <stdexcept>

extern "C" void openblas_set_num_threads(int);

namespace gridmind {

namespace {

thread_local Tape* g_active_tape = nullptr;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

size_t shape_size(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) fail("tensor shape has negative dimension " + shape_str(shape));
    n *= size_t(d);
  }
  return n;
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) fail(std::string(op) + ": undefined tensor");
}

void check_2d(const Tensor& t, const char* op) {
  check_defined(t, op);
  if (t.ndim() != 2) fail(std::string(op) + ": expected 2-d tensor, got " + shape_str(t.shape()));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check_defined(a, op);
  check_defined(b, op);
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
}

// Tape to record on when at least one input participates in autodiff.
Tape* recording_for(std::initializer_list<const Tensor*> inputs) {
  Tape* tp = Tape::active();
  if (!tp) return nullptr;
  for (const Tensor* t : inputs)
    if (t->defined() && tp->tracked(*t)) return tp;
  return nullptr;
}

void blas_single_thread_once() {
  static bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += " x ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
  size_t n = shape_size(shape);
  if (values.size() != n)
    fail("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  data_ = std::make_shared<detail::TensorData>();
  data_->shape = std::move(shape);
  data_->values = std::move(values);
  data_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const { return data_->shape; }
int Tensor::dim(int i) const { return data_->shape.at(size_t(i)); }
int Tensor::ndim() const { return int(data_->shape.size()); }
size_t Tensor::size() const { return data_->values.size(); }

int Tensor::rows() const {
  check_2d(*this, "rows");
  return data_->shape[0];
}

int Tensor::cols() const {
  check_2d(*this, "cols");
  return data_->shape[1];
}

std::vector<double>& Tensor::values() { return data_->values; }
const std::vector<double>& Tensor::values() const { return data_->values; }

double Tensor::at(int r, int c) const {
  check_2d(*this, "at");
  return data_->values[size_t(r) * data_->shape[1] + c];
}

double Tensor::item() const {
  if (size() != 1) fail("item: tensor has " + std::to_string(size()) + " elements");
  return data_->values[0];
}

bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }

std::vector<double>& Tensor::grad() {
  if (data_->grad.size() != data_->values.size()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (data_->grad.size() != data_->values.size()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

void Tensor::zero_grad() { data_->grad.assign(data_->values.size(), 0.0); }

Tensor Tensor::clone(bool requires_grad) const {
  check_defined(*this, "clone");
  return Tensor(data_->shape, data_->values, requires_grad);
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::tracked(const Tensor& t) const {
  if (!t.defined()) return false;
  return t.requires_grad() || tracked_.count(t.impl()) != 0;
}

void Tape::register_output(const Tensor& out, std::function<void()> backward_fn) {
  tracked_[out.impl()] = true;
  nodes_.push_back(Node{out.handle(), std::move(backward_fn)});
}

void Tape::note_input(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return;
  auto it = tracked_.find(t.impl());
  if (it != tracked_.end() && it->second) return;  // already a node output or noted leaf
  tracked_[t.impl()] = true;
  leaves_.push_back(t.handle());
}

std::vector<double>& Tape::grad_buffer(const std::shared_ptr<detail::TensorData>& d) {
  auto& g = grads_[d.get()];
  if (g.size() != d->values.size()) g.assign(d->values.size(), 0.0);
  return g;
}

const std::vector<double>* Tape::find_grad(const detail::TensorData* d) const {
  auto it = grads_.find(d);
  if (it == grads_.end()) return nullptr;
  return &it->second;
}

std::span<const double> Tape::grad_of(const Tensor& t) const {
  const std::vector<double>* g = find_grad(t.impl());
  if (!g) return {};
  return {g->data(), g->size()};
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::runtime_error("tape: backward called twice");
  check_defined(loss, "backward");
  if (loss.size() != 1)
    fail("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (tracked_.count(loss.impl()) == 0)
    throw std::runtime_error("backward: loss was not recorded on this tape");
  grad_buffer(loss.handle())[0] = 1.0;
  for (size_t i = nodes_.size(); i-- > 0;) nodes_[i].backward_fn();
  for (const auto& leaf : leaves_) {
    const std::vector<double>* g = find_grad(leaf.get());
    if (!g) continue;
    if (leaf->grad.size() != leaf->values.size()) leaf->grad.assign(leaf->values.size(), 0.0);
    for (size_t i = 0; i < g->size(); ++i) leaf->grad[i] += (*g)[i];
  }
  consumed_ = true;
}

bool grad_enabled(const Tensor& t) {
  Tape* tp = Tape::active();
  return tp && tp->tracked(t);
}

// ---- elementwise ops -------------------------------------------------------

namespace {

// Shared recording body for ops whose backward only needs input/output handles
// and the captured closure.
template <typename F>
void record_if_needed(std::initializer_list<const Tensor*> inputs, const Tensor& out, F&& fn) {
  Tape* tp = recording_for(inputs);
  if (!tp) return;
  for (const Tensor* t : inputs) tp->note_input(*t);
  tp->register_output(out, std::forward<F>(fn));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a, &b});
  if (tp) {
    bool na = tp->tracked(a), nb = tp->tracked(b);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    tp->note_input(a);
    tp->note_input(b);
    tp->register_output(out, [tp, ah, bh, oh, na, nb] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      if (na) {
        auto& ga = tp->grad_buffer(ah);
        for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
      }
      if (nb) {
        auto& gb = tp->grad_buffer(bh);
        for (size_t i = 0; i < go->size(); ++i) gb[i] += (*go)[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a, &b});
  if (tp) {
    bool na = tp->tracked(a), nb = tp->tracked(b);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    tp->note_input(a);
    tp->note_input(b);
    tp->register_output(out, [tp, ah, bh, oh, na, nb] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      if (na) {
        auto& ga = tp->grad_buffer(ah);
        for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
      }
      if (nb) {
        auto& gb = tp->grad_buffer(bh);
        for (size_t i = 0; i < go->size(); ++i) gb[i] -= (*go)[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a, &b});
  if (tp) {
    bool na = tp->tracked(a), nb = tp->tracked(b);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    tp->note_input(a);
    tp->note_input(b);
    tp->register_output(out, [tp, ah, bh, oh, na, nb] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      if (na) {
        auto& ga = tp->grad_buffer(ah);
        for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] * bh->values[i];
      }
      if (nb) {
        auto& gb = tp->grad_buffer(bh);
        for (size_t i = 0; i < go->size(); ++i) gb[i] += (*go)[i] * ah->values[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  check_defined(a, "scale");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * c;
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh, c] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] * c;
    });
  }
  return out;
}

Tensor add_const(const Tensor& a, double c) {
  check_defined(a, "add_const");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + c;
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
    });
  }
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  check_defined(a, "exp");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.values()[i]);
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] * oh->values[i];
    });
  }
  return out;
}

Tensor log(const Tensor& a) {
  check_defined(a, "log");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::log(a.values()[i]);
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] / ah->values[i];
    });
  }
  return out;
}

Tensor tanh_op(const Tensor& a) {
  check_defined(a, "tanh");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.values()[i]);
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t i = 0; i < go->size(); ++i) {
        double t = oh->values[i];
        ga[i] += (*go)[i] * (1.0 - t * t);
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& a) {
  check_defined(a, "gelu");
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) {
    double x = a.values()[i];
    v[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t i = 0; i < go->size(); ++i) {
        double x = ah->values[i];
        double t = std::tanh(kC * (x + kA * x * x * x));
        double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
        ga[i] += (*go)[i] * d;
      }
    });
  }
  return out;
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  check_defined(a, "clamp");
  check(lo <= hi, "clamp: lo > hi");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i) {
    double x = a.values()[i];
    v[i] = x < lo ? lo : (x > hi ? hi : x);
  }
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh, lo, hi] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t i = 0; i < go->size(); ++i) {
        double x = ah->values[i];
        if (x >= lo && x <= hi) ga[i] += (*go)[i];
      }
    });
  }
  return out;
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "minimum");
  std::vector<double> v(a.size());
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = a.values()[i] <= b.values()[i] ? a.values()[i] : b.values()[i];
  Tensor out(a.shape(), std::move(v));
  Tape* tp = recording_for({&a, &b});
  if (tp) {
    bool na = tp->tracked(a), nb = tp->tracked(b);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    tp->note_input(a);
    tp->note_input(b);
    tp->register_output(out, [tp, ah, bh, oh, na, nb] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      for (size_t i = 0; i < go->size(); ++i) {
        bool take_a = ah->values[i] <= bh->values[i];
        if (take_a && na)
          tp->grad_buffer(ah)[i] += (*go)[i];
        else if (!take_a && nb)
          tp->grad_buffer(bh)[i] += (*go)[i];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  double s = 0.0;
  for (double x : a.values()) s += x;
  Tensor out = Tensor::scalar(s);
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  check(a.size() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / double(a.size()));
}

// ---- matrix ops ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int n = a.dim(0), m = a.dim(1), k = b.dim(1);
  if (b.dim(0) != m)
    fail("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  blas_single_thread_once();
  std::vector<double> v(size_t(n) * size_t(k), 0.0);
  if (n > 0 && m > 0 && k > 0)
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, n, k, m, 1.0, a.values().data(), m,
                b.values().data(), k, 0.0, v.data(), k);
  Tensor out({n, k}, std::move(v));
  Tape* tp = recording_for({&a, &b});
  if (tp) {
    bool na = tp->tracked(a), nb = tp->tracked(b);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    tp->note_input(a);
    tp->note_input(b);
    tp->register_output(out, [tp, ah, bh, oh, na, nb, n, m, k] {
      const auto* go = tp->find_grad(oh.get());
      if (!go || n == 0 || m == 0 || k == 0) return;
      if (na) {
        auto& ga = tp->grad_buffer(ah);
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, n, m, k, 1.0, go->data(), k,
                    bh->values.data(), k, 1.0, ga.data(), m);
      }
      if (nb) {
        auto& gb = tp->grad_buffer(bh);
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, k, n, 1.0, ah->values.data(), m,
                    go->data(), k, 1.0, gb.data(), k);
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  const int n = a.dim(0), m = a.dim(1);
  std::vector<double> v(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) v[size_t(j) * n + i] = a.values()[size_t(i) * m + j];
  Tensor out({m, n}, std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh, n, m] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (int j = 0; j < m; ++j)
        for (int i = 0; i < n; ++i) ga[size_t(i) * m + j] += (*go)[size_t(j) * n + i];
    });
  }
  return out;
}

Tensor add_row(const Tensor& mat, const Tensor& row) {
  check_2d(mat, "add_row");
  check_defined(row, "add_row");
  const int n = mat.dim(0), d = mat.dim(1);
  if (row.ndim() != 1 || row.dim(0) != d)
    fail("add_row: row shape " + shape_str(row.shape()) + " does not match " +
         shape_str(mat.shape()));
  std::vector<double> v(mat.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      v[size_t(i) * d + j] = mat.values()[size_t(i) * d + j] + row.values()[j];
  Tensor out(mat.shape(), std::move(v));
  Tape* tp = recording_for({&mat, &row});
  if (tp) {
    bool nm = tp->tracked(mat), nr = tp->tracked(row);
    auto mh = mat.handle(), rh = row.handle(), oh = out.handle();
    tp->note_input(mat);
    tp->note_input(row);
    tp->register_output(out, [tp, mh, rh, oh, nm, nr, n, d] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      if (nm) {
        auto& gm = tp->grad_buffer(mh);
        for (size_t i = 0; i < go->size(); ++i) gm[i] += (*go)[i];
      }
      if (nr) {
        auto& gr = tp->grad_buffer(rh);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gr[j] += (*go)[size_t(i) * d + j];
      }
    });
  }
  return out;
}

Tensor mul_row(const Tensor& mat, const Tensor& row) {
  check_2d(mat, "mul_row");
  check_defined(row, "mul_row");
  const int n = mat.dim(0), d = mat.dim(1);
  if (row.ndim() != 1 || row.dim(0) != d)
    fail("mul_row: row shape " + shape_str(row.shape()) + " does not match " +
         shape_str(mat.shape()));
  std::vector<double> v(mat.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      v[size_t(i) * d + j] = mat.values()[size_t(i) * d + j] * row.values()[j];
  Tensor out(mat.shape(), std::move(v));
  Tape* tp = recording_for({&mat, &row});
  if (tp) {
    bool nm = tp->tracked(mat), nr = tp->tracked(row);
    auto mh = mat.handle(), rh = row.handle(), oh = out.handle();
    tp->note_input(mat);
    tp->note_input(row);
    tp->register_output(out, [tp, mh, rh, oh, nm, nr, n, d] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      if (nm) {
        auto& gm = tp->grad_buffer(mh);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            gm[size_t(i) * d + j] += (*go)[size_t(i) * d + j] * rh->values[j];
      }
      if (nr) {
        auto& gr = tp->grad_buffer(rh);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j)
            gr[j] += (*go)[size_t(i) * d + j] * mh->values[size_t(i) * d + j];
      }
    });
  }
  return out;
}

Tensor select_rows(const Tensor& a, const std::vector<int>& idx) {
  check_2d(a, "select_rows");
  const int n = a.dim(0), m = a.dim(1);
  for (int i : idx)
    if (i < 0 || i >= n) fail("select_rows: index " + std::to_string(i) + " out of range");
  std::vector<double> v(idx.size() * size_t(m));
  for (size_t r = 0; r < idx.size(); ++r)
    for (int j = 0; j < m; ++j) v[r * m + j] = a.values()[size_t(idx[r]) * m + j];
  Tensor out({int(idx.size()), m}, std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh, idx, m] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < m; ++j) ga[size_t(idx[r]) * m + j] += (*go)[r * m + j];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int start, int count) {
  check_2d(a, "slice_cols");
  const int n = a.dim(0), m = a.dim(1);
  check(start >= 0 && count > 0 && start + count <= m,
        "slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
            ") out of " + std::to_string(m) + " columns");
  std::vector<double> v(size_t(n) * count);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < count; ++j) v[size_t(i) * count + j] = a.values()[size_t(i) * m + start + j];
  Tensor out({n, count}, std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh, n, m, start, count] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < count; ++j)
          ga[size_t(i) * m + start + j] += (*go)[size_t(i) * count + j];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: no parts");
  const int n = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    check_2d(p, "concat_cols");
    check(p.dim(0) == n, "concat_cols: row count mismatch");
    total += p.dim(1);
  }
  std::vector<double> v(size_t(n) * total);
  int off = 0;
  for (const Tensor& p : parts) {
    const int m = p.dim(1);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) v[size_t(i) * total + off + j] = p.values()[size_t(i) * m + j];
    off += m;
  }
  Tensor out({n, total}, std::move(v));
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  Tape* tp = Tape::active();
  bool any = false;
  if (tp)
    for (const Tensor& p : parts) any = any || tp->tracked(p);
  if (tp && any) {
    std::vector<std::shared_ptr<detail::TensorData>> hs;
    std::vector<uint8_t> need;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
      need.push_back(tp->tracked(p) ? 1 : 0);
      hs.push_back(p.handle());
      widths.push_back(p.dim(1));
      tp->note_input(p);
    }
    auto oh = out.handle();
    tp->register_output(out, [tp, hs, oh, need, widths, n, total] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      int off2 = 0;
      for (size_t p = 0; p < hs.size(); ++p) {
        const int m = widths[p];
        if (need[p]) {
          auto& gp = tp->grad_buffer(hs[p]);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) gp[size_t(i) * m + j] += (*go)[size_t(i) * total + off2 + j];
        }
        off2 += m;
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows: no parts");
  const int m = parts[0].dim(1);
  int total = 0;
  for (const Tensor& p : parts) {
    check_2d(p, "concat_rows");
    check(p.dim(1) == m, "concat_rows: column count mismatch");
    total += p.dim(0);
  }
  std::vector<double> v;
  v.reserve(size_t(total) * m);
  for (const Tensor& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  Tensor out({total, m}, std::move(v));
  Tape* tp = Tape::active();
  bool any = false;
  if (tp)
    for (const Tensor& p : parts) any = any || tp->tracked(p);
  if (tp && any) {
    std::vector<std::shared_ptr<detail::TensorData>> hs;
    std::vector<uint8_t> need;
    std::vector<int> heights;
    for (const Tensor& p : parts) {
      need.push_back(tp->tracked(p) ? 1 : 0);
      hs.push_back(p.handle());
      heights.push_back(p.dim(0));
      tp->note_input(p);
    }
    auto oh = out.handle();
    tp->register_output(out, [tp, hs, oh, need, heights, m] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      size_t off = 0;
      for (size_t p = 0; p < hs.size(); ++p) {
        const size_t cnt = size_t(heights[p]) * m;
        if (need[p]) {
          auto& gp = tp->grad_buffer(hs[p]);
          for (size_t i = 0; i < cnt; ++i) gp[i] += (*go)[off + i];
        }
        off += cnt;
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "embedding");
  const int V = table.dim(0), D = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      fail("embedding: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(V));
  std::vector<double> v(ids.size() * size_t(D));
  for (size_t i = 0; i < ids.size(); ++i)
    for (int j = 0; j < D; ++j) v[i * D + j] = table.values()[size_t(ids[i]) * D + j];
  Tensor out({int(ids.size()), D}, std::move(v));
  Tape* tp = recording_for({&table});
  if (tp) {
    auto th = table.handle(), oh = out.handle();
    tp->note_input(table);
    tp->register_output(out, [tp, th, oh, ids, D] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& gt = tp->grad_buffer(th);
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < D; ++j) gt[size_t(ids[i]) * D + j] += (*go)[i * D + j];
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_2d(x, "layer_norm");
  const int n = x.dim(0), d = x.dim(1);
  check(gain.defined() && gain.ndim() == 1 && gain.dim(0) == d, "layer_norm: bad gain shape");
  check(bias.defined() && bias.ndim() == 1 && bias.dim(0) == d, "layer_norm: bad bias shape");
  check(d > 0, "layer_norm: empty rows");
  std::vector<double> v(x.size());
  for (int i = 0; i < n; ++i) {
    const double* xr = x.values().data() + size_t(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    double r = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j)
      v[size_t(i) * d + j] = (xr[j] - mu) * r * gain.values()[j] + bias.values()[j];
  }
  Tensor out(x.shape(), std::move(v));
  Tape* tp = recording_for({&x, &gain, &bias});
  if (tp) {
    bool nx = tp->tracked(x), ng = tp->tracked(gain), nb = tp->tracked(bias);
    auto xh = x.handle(), gh = gain.handle(), bh = bias.handle(), oh = out.handle();
    tp->note_input(x);
    tp->note_input(gain);
    tp->note_input(bias);
    tp->register_output(out, [tp, xh, gh, bh, oh, nx, ng, nb, n, d, eps] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      std::vector<double> xhat(d), ghat(d);
      for (int i = 0; i < n; ++i) {
        const double* xr = xh->values.data() + size_t(i) * d;
        const double* gor = go->data() + size_t(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= d;
        double r = 1.0 / std::sqrt(var + eps);
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
          xhat[j] = (xr[j] - mu) * r;
          ghat[j] = gor[j] * gh->values[j];
          m1 += ghat[j];
          m2 += ghat[j] * xhat[j];
        }
        m1 /= d;
        m2 /= d;
        if (nx) {
          auto& gx = tp->grad_buffer(xh);
          for (int j = 0; j < d; ++j)
            gx[size_t(i) * d + j] += r * (ghat[j] - m1 - xhat[j] * m2);
        }
        if (ng) {
          auto& gg = tp->grad_buffer(gh);
          for (int j = 0; j < d; ++j) gg[j] += gor[j] * xhat[j];
        }
        if (nb) {
          auto& gb = tp->grad_buffer(bh);
          for (int j = 0; j < d; ++j) gb[j] += gor[j];
        }
      }
    });
  }
  return out;
}

Tensor masked_softmax(const Tensor& logits, const BoolMask& mask) {
  check_2d(logits, "masked_softmax");
  const int n = logits.dim(0), m = logits.dim(1);
  check(mask.rows == n && mask.cols == m,
        "masked_softmax: mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
            " vs logits " + shape_str(logits.shape()));
  std::vector<double> v(logits.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    const double* lr = logits.values().data() + size_t(i) * m;
    double mx = -1e300;
    bool any = false;
    for (int j = 0; j < m; ++j)
      if (mask.at(i, j)) {
        any = true;
        if (lr[j] > mx) mx = lr[j];
      }
    if (!any)
      throw std::domain_error("masked_softmax: row " + std::to_string(i) +
                              " has no allowed positions");
    double denom = 0.0;
    for (int j = 0; j < m; ++j)
      if (mask.at(i, j)) denom += std::exp(lr[j] - mx);
    for (int j = 0; j < m; ++j)
      v[size_t(i) * m + j] = mask.at(i, j) ? std::exp(lr[j] - mx) / denom : 0.0;
  }
  Tensor out(logits.shape(), std::move(v));
  Tape* tp = recording_for({&logits});
  if (tp) {
    auto lh = logits.handle(), oh = out.handle();
    tp->note_input(logits);
    tp->register_output(out, [tp, lh, oh, mask, n, m] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& gl = tp->grad_buffer(lh);
      for (int i = 0; i < n; ++i) {
        const double* pr = oh->values.data() + size_t(i) * m;
        const double* gor = go->data() + size_t(i) * m;
        double s = 0.0;
        for (int j = 0; j < m; ++j)
          if (mask.at(i, j)) s += pr[j] * gor[j];
        for (int j = 0; j < m; ++j)
          if (mask.at(i, j)) gl[size_t(i) * m + j] += pr[j] * (gor[j] - s);
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  check_2d(logits, "log_softmax");
  const int n = logits.dim(0), m = logits.dim(1);
  check(m > 0, "log_softmax: empty rows");
  std::vector<double> v(logits.size());
  for (int i = 0; i < n; ++i) {
    const double* lr = logits.values().data() + size_t(i) * m;
    double lse = log_sum_exp({lr, size_t(m)});
    for (int j = 0; j < m; ++j) v[size_t(i) * m + j] = lr[j] - lse;
  }
  Tensor out(logits.shape(), std::move(v));
  Tape* tp = recording_for({&logits});
  if (tp) {
    auto lh = logits.handle(), oh = out.handle();
    tp->note_input(logits);
    tp->register_output(out, [tp, lh, oh, n, m] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& gl = tp->grad_buffer(lh);
      for (int i = 0; i < n; ++i) {
        const double* yr = oh->values.data() + size_t(i) * m;
        const double* gor = go->data() + size_t(i) * m;
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += gor[j];
        for (int j = 0; j < m; ++j) gl[size_t(i) * m + j] += gor[j] - std::exp(yr[j]) * s;
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& loss_mask) {
  check_2d(logits, "cross_entropy");
  const int n = logits.dim(0), V = logits.dim(1);
  check(int(targets.size()) == n, "cross_entropy: targets size " +
                                      std::to_string(targets.size()) + " vs " + std::to_string(n) +
                                      " rows");
  check(loss_mask.size() == targets.size(), "cross_entropy: loss_mask size mismatch");
  int count = 0;
  for (int i = 0; i < n; ++i)
    if (loss_mask[i]) {
      ++count;
      if (targets[i] < 0 || targets[i] >= V)
        fail("cross_entropy: target " + std::to_string(targets[i]) + " at row " +
             std::to_string(i) + " outside vocabulary of " + std::to_string(V));
    }
  check(count > 0, "cross_entropy: loss mask selects no positions");
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!loss_mask[i]) continue;
    const double* lr = logits.values().data() + size_t(i) * V;
    loss += log_sum_exp({lr, size_t(V)}) - lr[targets[i]];
  }
  Tensor out = Tensor::scalar(loss / count);
  Tape* tp = recording_for({&logits});
  if (tp) {
    auto lh = logits.handle(), oh = out.handle();
    tp->note_input(logits);
    tp->register_output(out, [tp, lh, oh, targets, loss_mask, n, V, count] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& gl = tp->grad_buffer(lh);
      const double s = (*go)[0] / count;
      for (int i = 0; i < n; ++i) {
        if (!loss_mask[i]) continue;
        const double* lr = lh->values.data() + size_t(i) * V;
        std::vector<double> p = softmax_row({lr, size_t(V)});
        for (int j = 0; j < V; ++j) gl[size_t(i) * V + j] += s * (p[j] - (j == targets[i] ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

Tensor gather_cols(const Tensor& a, const std::vector<int>& ids) {
  check_2d(a, "gather_cols");
  const int n = a.dim(0), m = a.dim(1);
  check(int(ids.size()) == n, "gather_cols: ids size mismatch");
  for (int id : ids)
    if (id < 0 || id >= m) fail("gather_cols: index " + std::to_string(id) + " out of range");
  std::vector<double> v(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) v[i] = a.values()[size_t(i) * m + ids[i]];
  Tensor out({n}, std::move(v));
  Tape* tp = recording_for({&a});
  if (tp) {
    auto ah = a.handle(), oh = out.handle();
    tp->note_input(a);
    tp->register_output(out, [tp, ah, oh, ids, m] {
      const auto* go = tp->find_grad(oh.get());
      if (!go) return;
      auto& ga = tp->grad_buffer(ah);
      for (size_t i = 0; i < ids.size(); ++i) ga[i * m + ids[i]] += (*go)[i];
    });
  }
  return out;
}

// ---- plain helpers ----------------------------------------------------------

double log_sum_exp(std::span<const double> v) {
  double mx = v[0];
  for (double x : v)
    if (x > mx) mx = x;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

std::vector<double> softmax_row(std::span<const double> logits) {
  double mx = logits[0];
  for (double x : logits)
    if (x > mx) mx = x;
  double denom = 0.0;
  std::vector<double> p(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    denom += p[i];
  }
  for (double& x : p) x /= denom;
  return p;
}

}  // namespace gridmind
