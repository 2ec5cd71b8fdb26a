// Dense f32 tensors with reverse-mode autodiff on an explicit tape.
//
// Tensors are cheap shared handles. Ops are free functions that compute
// eagerly and, when a Tape is active and an input wants gradients, record
// a backward closure. backward() replays the tape in reverse and frees it.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace knowla {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<float> v;  // row-major values, size == product(shape)
  std::vector<float> g;  // gradient, same size as v when requires_grad
  bool requires_grad = false;
  int64_t node = -1;  // index of the tape node that produced this tensor
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor scalar(float value);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->v.size()); }

  std::span<float> values() { return d_->v; }
  std::span<const float> values() const { return d_->v; }
  std::span<float> grad() { return d_->g; }
  std::span<const float> grad() const { return d_->g; }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  void zero_grad();

  // Scalar (rank-0 or single-element) value.
  float item() const;
  float at(int64_t i) const { return d_->v[static_cast<size_t>(i)]; }
  float at(int64_t i, int64_t j) const {
    return d_->v[static_cast<size_t>(i * d_->shape[1] + j)];
  }

  // Deep copy, detached from any tape, gradient not carried over.
  Tensor clone() const;

  std::shared_ptr<TensorData> ptr() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

// Tape of recorded primitive applications. Nodes are appended in execution
// order; every node's inputs precede it, so one reverse sweep is a valid
// backpropagation schedule.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  int64_t record(const char* op, std::function<void()> backward);
  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
  void clear();

 private:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;

  friend void backward(Tape& tape, const Tensor& root);
};

// Makes `tape` the active tape for the current thread while in scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Populates leaf gradients of everything reachable from `root` (a scalar on
// `tape`), accumulating additively. The tape is freed afterwards.
void backward(Tape& tape, const Tensor& root);

// ---- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_bias(const Tensor& x, const Tensor& bias);  // [R x C] + [C]
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, float c);
Tensor scale_by(const Tensor& a, const Tensor& s);  // s is a trainable scalar

Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] . [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m x k] . [n x k]^T
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps);
Tensor silu(const Tensor& x);
Tensor softmax(const Tensor& x);                // rows of the last axis
Tensor causal_softmax(const Tensor& scores);    // [T x T], row i over j <= i

// Mean over unmasked positions of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> mask);

Tensor embedding(const Tensor& table, std::span<const int> ids);
// Rotary position map applied per `head_dim` segment of every row.
Tensor rope(const Tensor& x, int head_dim, float base);

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat(const Tensor& a, const Tensor& b);  // 1-D
Tensor gather_rows(const Tensor& x, std::span<const int> rows);
Tensor mean_rows(const Tensor& x);  // [k x C] -> [C]
Tensor stack_rows(const std::vector<Tensor>& rows);
// base with `vec` added to every row index in `rows`.
Tensor row_scatter_add(const Tensor& base, const Tensor& vec,
                       std::span<const int> rows);

Tensor dot(const Tensor& a, const Tensor& b);  // 1-D, scalar result
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace knowla
