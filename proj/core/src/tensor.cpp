#include "knowla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "knowla/util.hpp"

namespace knowla {

using detail::fail;
using detail::require;
using detail::str;

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

static std::shared_ptr<TensorData> make_data(Shape shape, std::vector<float> v) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->v = std::move(v);
  return d;
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(make_data(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.f)));
}

Tensor Tensor::full(Shape shape, float value) {
  auto n = shape_numel(shape);
  return Tensor(make_data(std::move(shape), std::vector<float>(static_cast<size_t>(n), value)));
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  require(shape_numel(shape) == static_cast<int64_t>(values.size()),
          "tensor: shape ", shape_str(shape), " does not hold ", values.size(), " values");
  return Tensor(make_data(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

Tensor& Tensor::set_requires_grad(bool on) {
  d_->requires_grad = on;
  if (on) {
    d_->g.assign(d_->v.size(), 0.f);
  } else {
    d_->g.clear();
  }
  return *this;
}

void Tensor::zero_grad() {
  if (d_ && d_->requires_grad) std::fill(d_->g.begin(), d_->g.end(), 0.f);
}

float Tensor::item() const {
  require(numel() == 1, "item: tensor ", shape_str(shape()), " is not a scalar");
  return d_->v[0];
}

Tensor Tensor::clone() const {
  return Tensor(make_data(d_->shape, d_->v));
}

// ---- tape ------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() = default;
Tape::~Tape() = default;

Tape* Tape::active() { return g_active_tape; }

int64_t Tape::record(const char* op, std::function<void()> backward) {
  nodes_.push_back(Node{op, std::move(backward)});
  return static_cast<int64_t>(nodes_.size()) - 1;
}

void Tape::clear() { nodes_.clear(); }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

void backward(Tape& tape, const Tensor& root) {
  require(root.defined() && root.numel() == 1,
          "backward: root must be a scalar, got ",
          root.defined() ? shape_str(root.shape()) : "<empty>");
  auto rd = root.ptr();
  require(rd->node >= 0 && rd->node < tape.size(), "backward: root is not on this tape");
  require(rd->requires_grad, "backward: root does not require grad");
  rd->g[0] = 1.f;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
    it->backward();
  }
  tape.clear();
}

// ---- op helpers -------------------------------------------------------------

namespace {

bool grad_wanted(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks `out` as a tape intermediate and records the backward closure.
void record(const char* op, Tensor& out, std::function<void()> bw) {
  out.set_requires_grad(true);
  out.ptr()->node = Tape::active()->record(op, std::move(bw));
}

void accum(const std::shared_ptr<TensorData>& t, size_t i, float v) {
  if (t->requires_grad) t->g[i] += v;
}

}  // namespace

// ---- arithmetic -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()),
          " vs ", shape_str(b.shape()));
  auto out = Tensor::zeros(a.shape());
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
  if (grad_wanted({&a, &b})) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    record("add", out, [=] {
      for (size_t i = 0; i < od->g.size(); ++i) {
        accum(ad, i, od->g[i]);
        accum(bd, i, od->g[i]);
      }
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require(x.rank() == 2 && bias.rank() == 1 && x.dim(1) == bias.dim(0),
          "add_bias: shape mismatch ", shape_str(x.shape()), " vs ",
          shape_str(bias.shape()));
  const int64_t rows = x.dim(0), cols = x.dim(1);
  auto out = Tensor::zeros(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c)
      out.values()[static_cast<size_t>(r * cols + c)] =
          x.at(r, c) + bias.at(c);
  if (grad_wanted({&x, &bias})) {
    auto xd = x.ptr(), bd = bias.ptr(), od = out.ptr();
    record("add_bias", out, [=] {
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
          const float g = od->g[static_cast<size_t>(r * cols + c)];
          accum(xd, static_cast<size_t>(r * cols + c), g);
          accum(bd, static_cast<size_t>(c), g);
        }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()),
          " vs ", shape_str(b.shape()));
  auto out = Tensor::zeros(a.shape());
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
  if (grad_wanted({&a, &b})) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    record("mul", out, [=] {
      for (size_t i = 0; i < od->g.size(); ++i) {
        accum(ad, i, bd->v[i] * od->g[i]);
        accum(bd, i, ad->v[i] * od->g[i]);
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float c) {
  auto out = Tensor::zeros(a.shape());
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * c;
  if (grad_wanted({&a})) {
    auto ad = a.ptr(), od = out.ptr();
    record("scale", out, [=] {
      for (size_t i = 0; i < od->g.size(); ++i) accum(ad, i, c * od->g[i]);
    });
  }
  return out;
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  require(s.numel() == 1, "scale_by: scale must be a scalar, got ",
          shape_str(s.shape()));
  const float c = s.values()[0];
  auto out = Tensor::zeros(a.shape());
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * c;
  if (grad_wanted({&a, &s})) {
    auto ad = a.ptr(), sd = s.ptr(), od = out.ptr();
    record("scale_by", out, [=] {
      double sg = 0.0;
      for (size_t i = 0; i < od->g.size(); ++i) {
        accum(ad, i, sd->v[0] * od->g[i]);
        sg += static_cast<double>(ad->v[i]) * od->g[i];
      }
      if (sd->requires_grad) sd->g[0] += static_cast<float>(sg);
    });
  }
  return out;
}

// ---- matrix ops -------------------------------------------------------------

namespace {

// C[m x n] (+)= A[m x k] . B[k x n], plain i-k-j loops.
void mm_acc(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const float av = ai[p];
      if (av == 0.f) continue;
      const float* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m x n] (+)= A[m x k] . B[n x k]^T.
void mm_nt_acc(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const float* bj = b + j * k;
      float acc = 0.f;
      for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C[m x n] (+)= A[k x m]^T . B[k x n].
void mm_tn_acc(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const float* ap = a + p * m;
    const float* bp = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const float av = ap[i];
      if (av == 0.f) continue;
      float* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = Tensor::zeros({m, n});
  mm_acc(a.values().data(), b.values().data(), out.values().data(), m, k, n);
  if (grad_wanted({&a, &b})) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    record("matmul", out, [=] {
      // dA = dC . B^T, dB = A^T . dC
      if (ad->requires_grad)
        mm_nt_acc(od->g.data(), bd->v.data(), ad->g.data(), m, n, k);
      if (bd->requires_grad)
        mm_tn_acc(ad->v.data(), od->g.data(), bd->g.data(), n, m, k);
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: incompatible shapes ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto out = Tensor::zeros({m, n});
  mm_nt_acc(a.values().data(), b.values().data(), out.values().data(), m, k, n);
  if (grad_wanted({&a, &b})) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    record("matmul_nt", out, [=] {
      // C = A . B^T: dA = dC . B, dB = dC^T . A
      if (ad->requires_grad)
        mm_acc(od->g.data(), bd->v.data(), ad->g.data(), m, n, k);
      if (bd->requires_grad)
        mm_tn_acc(od->g.data(), ad->v.data(), bd->g.data(), k, m, n);
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: expected rank 2, got ", shape_str(a.shape()));
  const int64_t m = a.dim(0), n = a.dim(1);
  auto out = Tensor::zeros({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.values()[static_cast<size_t>(j * m + i)] = a.at(i, j);
  if (grad_wanted({&a})) {
    auto ad = a.ptr(), od = out.ptr();
    record("transpose", out, [=] {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
          accum(ad, static_cast<size_t>(i * n + j), od->g[static_cast<size_t>(j * m + i)]);
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), "reshape: ", shape_str(a.shape()),
          " cannot become ", shape_str(shape));
  auto out = Tensor::from(std::move(shape), std::vector<float>(a.values().begin(), a.values().end()));
  if (grad_wanted({&a})) {
    auto ad = a.ptr(), od = out.ptr();
    record("reshape", out, [=] {
      for (size_t i = 0; i < od->g.size(); ++i) accum(ad, i, od->g[i]);
    });
  }
  return out;
}

// ---- normalization / activations ---------------------------------------------

namespace {

// Rows view: any tensor is [rows x cols] over its last axis.
void last_axis(const Tensor& t, int64_t& rows, int64_t& cols) {
  require(t.rank() >= 1, "expected rank >= 1, got ", shape_str(t.shape()));
  cols = t.dim(t.rank() - 1);
  rows = t.numel() / cols;
}

}  // namespace

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  require(eps >= 0.f, "rms_norm: eps must be >= 0");
  int64_t rows, cols;
  last_axis(x, rows, cols);
  require(gain.rank() == 1 && gain.dim(0) == cols, "rms_norm: gain ",
          shape_str(gain.shape()), " does not match last axis of ",
          shape_str(x.shape()));
  auto out = Tensor::zeros(x.shape());
  std::vector<float> inv_rms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x.values().data() + r * cols;
    double ms = 0.0;
    for (int64_t c = 0; c < cols; ++c) ms += static_cast<double>(xr[c]) * xr[c];
    ms = ms / static_cast<double>(cols) + eps;
    const float s = ms > 0.0 ? static_cast<float>(1.0 / std::sqrt(ms)) : 0.f;
    inv_rms[static_cast<size_t>(r)] = s;
    float* yr = out.values().data() + r * cols;
    for (int64_t c = 0; c < cols; ++c) yr[c] = gain.at(c) * xr[c] * s;
  }
  if (grad_wanted({&x, &gain})) {
    auto xd = x.ptr(), gd = gain.ptr(), od = out.ptr();
    record("rms_norm", out, [=] {
      for (int64_t r = 0; r < rows; ++r) {
        const float* xr = xd->v.data() + r * cols;
        const float* dyr = od->g.data() + r * cols;
        const float s = inv_rms[static_cast<size_t>(r)];
        double dot = 0.0;  // sum_j dy_j * g_j * x_j
        for (int64_t c = 0; c < cols; ++c)
          dot += static_cast<double>(dyr[c]) * gd->v[static_cast<size_t>(c)] * xr[c];
        const float k = static_cast<float>(dot) * s * s * s / static_cast<float>(cols);
        for (int64_t c = 0; c < cols; ++c) {
          accum(xd, static_cast<size_t>(r * cols + c),
                s * gd->v[static_cast<size_t>(c)] * dyr[c] - k * xr[c]);
          accum(gd, static_cast<size_t>(c), dyr[c] * xr[c] * s);
        }
      }
    });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  auto out = Tensor::zeros(x.shape());
  const size_t n = x.values().size();
  for (size_t i = 0; i < n; ++i) {
    const float v = x.values()[i];
    out.values()[i] = v / (1.f + std::exp(-v));
  }
  if (grad_wanted({&x})) {
    auto xd = x.ptr(), od = out.ptr();
    record("silu", out, [=] {
      for (size_t i = 0; i < od->g.size(); ++i) {
        const float v = xd->v[i];
        const float sig = 1.f / (1.f + std::exp(-v));
        accum(xd, i, od->g[i] * sig * (1.f + v * (1.f - sig)));
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  int64_t rows, cols;
  last_axis(x, rows, cols);
  require(cols >= 1, "softmax: empty last axis");
  auto out = Tensor::zeros(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x.values().data() + r * cols;
    float* yr = out.values().data() + r * cols;
    float mx = xr[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      z += yr[c];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (int64_t c = 0; c < cols; ++c) yr[c] *= inv;
  }
  if (grad_wanted({&x})) {
    auto xd = x.ptr(), od = out.ptr();
    record("softmax", out, [=] {
      for (int64_t r = 0; r < rows; ++r) {
        const float* yr = od->v.data() + r * cols;
        const float* dyr = od->g.data() + r * cols;
        double d = 0.0;
        for (int64_t c = 0; c < cols; ++c) d += static_cast<double>(yr[c]) * dyr[c];
        for (int64_t c = 0; c < cols; ++c)
          accum(xd, static_cast<size_t>(r * cols + c),
                yr[c] * (dyr[c] - static_cast<float>(d)));
      }
    });
  }
  return out;
}

Tensor causal_softmax(const Tensor& scores) {
  require(scores.rank() == 2 && scores.dim(0) == scores.dim(1),
          "causal_softmax: expected square [T x T], got ", shape_str(scores.shape()));
  const int64_t t = scores.dim(0);
  auto out = Tensor::zeros(scores.shape());
  for (int64_t r = 0; r < t; ++r) {
    const float* xr = scores.values().data() + r * t;
    float* yr = out.values().data() + r * t;
    float mx = xr[0];
    for (int64_t c = 1; c <= r; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (int64_t c = 0; c <= r; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      z += yr[c];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (int64_t c = 0; c <= r; ++c) yr[c] *= inv;
  }
  if (grad_wanted({&scores})) {
    auto xd = scores.ptr(), od = out.ptr();
    record("causal_softmax", out, [=] {
      for (int64_t r = 0; r < t; ++r) {
        const float* yr = od->v.data() + r * t;
        const float* dyr = od->g.data() + r * t;
        double d = 0.0;
        for (int64_t c = 0; c <= r; ++c) d += static_cast<double>(yr[c]) * dyr[c];
        for (int64_t c = 0; c <= r; ++c)
          accum(xd, static_cast<size_t>(r * t + c),
                yr[c] * (dyr[c] - static_cast<float>(d)));
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> mask) {
  require(logits.rank() == 2, "cross_entropy: logits must be [T x V], got ",
          shape_str(logits.shape()));
  const int64_t t = logits.dim(0), v = logits.dim(1);
  require(static_cast<int64_t>(targets.size()) == t &&
              static_cast<int64_t>(mask.size()) == t,
          "cross_entropy: targets/mask length must equal ", t);
  int64_t n_active = 0;
  for (int64_t i = 0; i < t; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    ++n_active;
    require(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < v,
            "cross_entropy: target index ", targets[static_cast<size_t>(i)],
            " out of range [0,", v, ") at position ", i);
  }
  require(n_active > 0, "cross_entropy: empty loss support");

  // log-softmax per active row, mean of -log p[target]
  std::vector<float> probs(static_cast<size_t>(t * v), 0.f);
  double loss = 0.0;
  for (int64_t i = 0; i < t; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const float* row = logits.values().data() + i * v;
    float mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const double logz = std::log(z) + mx;
    loss += logz - row[targets[static_cast<size_t>(i)]];
    float* pr = probs.data() + i * v;
    for (int64_t j = 0; j < v; ++j)
      pr[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - logz));
  }
  auto out = Tensor::scalar(static_cast<float>(loss / static_cast<double>(n_active)));
  if (grad_wanted({&logits})) {
    auto ld = logits.ptr(), od = out.ptr();
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<uint8_t> mk(mask.begin(), mask.end());
    record("cross_entropy", out, [=, probs = std::move(probs)] {
      const float go = od->g[0] / static_cast<float>(n_active);
      for (int64_t i = 0; i < t; ++i) {
        if (!mk[static_cast<size_t>(i)]) continue;
        const float* pr = probs.data() + i * v;
        for (int64_t j = 0; j < v; ++j)
          accum(ld, static_cast<size_t>(i * v + j),
                go * (pr[j] - (j == tg[static_cast<size_t>(i)] ? 1.f : 0.f)));
      }
    });
  }
  return out;
}

// ---- lookup / layout ----------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require(table.rank() == 2, "embedding: table must be [V x d]");
  const int64_t v = table.dim(0), d = table.dim(1);
  const int64_t t = static_cast<int64_t>(ids.size());
  auto out = Tensor::zeros({t, d});
  for (int64_t i = 0; i < t; ++i) {
    const int id = ids[static_cast<size_t>(i)];
    require(id >= 0 && id < v, "embedding: id ", id, " out of range [0,", v, ")");
    std::memcpy(out.values().data() + i * d, table.values().data() + id * d,
                static_cast<size_t>(d) * sizeof(float));
  }
  if (grad_wanted({&table})) {
    auto td = table.ptr(), od = out.ptr();
    std::vector<int> idv(ids.begin(), ids.end());
    record("embedding", out, [=] {
      for (int64_t i = 0; i < t; ++i) {
        const int64_t id = idv[static_cast<size_t>(i)];
        for (int64_t c = 0; c < d; ++c)
          accum(td, static_cast<size_t>(id * d + c), od->g[static_cast<size_t>(i * d + c)]);
      }
    });
  }
  return out;
}

Tensor rope(const Tensor& x, int head_dim, float base) {
  require(x.rank() == 2, "rope: expected [T x d]");
  const int64_t t = x.dim(0), d = x.dim(1);
  require(head_dim > 0 && head_dim % 2 == 0 && d % head_dim == 0,
          "rope: head_dim ", head_dim, " must be even and divide ", d);
  auto out = Tensor::zeros(x.shape());
  const int64_t half = head_dim / 2;
  // Rotation angles depend only on (position, pair index); cache cos/sin.
  std::vector<float> cs(static_cast<size_t>(t * half)), sn(static_cast<size_t>(t * half));
  for (int64_t p = 0; p < t; ++p) {
    for (int64_t i = 0; i < half; ++i) {
      const double theta =
          static_cast<double>(p) *
          std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / head_dim);
      cs[static_cast<size_t>(p * half + i)] = static_cast<float>(std::cos(theta));
      sn[static_cast<size_t>(p * half + i)] = static_cast<float>(std::sin(theta));
    }
  }
  const int64_t n_heads = d / head_dim;
  for (int64_t p = 0; p < t; ++p) {
    const float* xr = x.values().data() + p * d;
    float* yr = out.values().data() + p * d;
    for (int64_t h = 0; h < n_heads; ++h) {
      const float* xh = xr + h * head_dim;
      float* yh = yr + h * head_dim;
      for (int64_t i = 0; i < half; ++i) {
        const float c = cs[static_cast<size_t>(p * half + i)];
        const float s = sn[static_cast<size_t>(p * half + i)];
        const float a = xh[2 * i], b = xh[2 * i + 1];
        yh[2 * i] = a * c - b * s;
        yh[2 * i + 1] = a * s + b * c;
      }
    }
  }
  if (grad_wanted({&x})) {
    auto xd = x.ptr(), od = out.ptr();
    record("rope", out, [=, cs = std::move(cs), sn = std::move(sn)] {
      for (int64_t p = 0; p < t; ++p) {
        const float* gr = od->g.data() + p * d;
        for (int64_t h = 0; h < n_heads; ++h) {
          const float* gh = gr + h * head_dim;
          for (int64_t i = 0; i < half; ++i) {
            const float c = cs[static_cast<size_t>(p * half + i)];
            const float s = sn[static_cast<size_t>(p * half + i)];
            const float ga = gh[2 * i], gb = gh[2 * i + 1];
            // inverse rotation on the gradient
            accum(xd, static_cast<size_t>(p * d + h * head_dim + 2 * i), ga * c + gb * s);
            accum(xd, static_cast<size_t>(p * d + h * head_dim + 2 * i + 1), -ga * s + gb * c);
          }
        }
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  require(x.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.dim(1),
          "slice_cols: bad range [", c0, ",", c1, ") for ", shape_str(x.shape()));
  const int64_t rows = x.dim(0), cols = x.dim(1), w = c1 - c0;
  auto out = Tensor::zeros({rows, w});
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(out.values().data() + r * w, x.values().data() + r * cols + c0,
                static_cast<size_t>(w) * sizeof(float));
  if (grad_wanted({&x})) {
    auto xd = x.ptr(), od = out.ptr();
    record("slice_cols", out, [=] {
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < w; ++c)
          accum(xd, static_cast<size_t>(r * cols + c0 + c), od->g[static_cast<size_t>(r * w + c)]);
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  const int64_t rows = parts[0].dim(0);
  int64_t cols = 0;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.dim(0) == rows, "concat_cols: row mismatch");
    cols += p.dim(1);
  }
  auto out = Tensor::zeros({rows, cols});
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.dim(1);
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(out.values().data() + r * cols + off, p.values().data() + r * w,
                  static_cast<size_t>(w) * sizeof(float));
    off += w;
  }
  bool wants = false;
  for (const auto& p : parts) wants = wants || p.requires_grad();
  if (Tape::active() && wants) {
    std::vector<std::shared_ptr<TensorData>> pd;
    pd.reserve(parts.size());
    for (const auto& p : parts) pd.push_back(p.ptr());
    auto od = out.ptr();
    record("concat_cols", out, [=] {
      int64_t o = 0;
      for (const auto& p : pd) {
        const int64_t w = p->shape[1];
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < w; ++c)
            accum(p, static_cast<size_t>(r * w + c), od->g[static_cast<size_t>(r * cols + o + c)]);
        o += w;
      }
    });
  }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  require(a.rank() == 1 && b.rank() == 1, "concat: expected 1-D inputs");
  const int64_t na = a.dim(0), nb = b.dim(0);
  auto out = Tensor::zeros({na + nb});
  std::memcpy(out.values().data(), a.values().data(), static_cast<size_t>(na) * sizeof(float));
  std::memcpy(out.values().data() + na, b.values().data(), static_cast<size_t>(nb) * sizeof(float));
  if (grad_wanted({&a, &b})) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    record("concat", out, [=] {
      for (int64_t i = 0; i < na; ++i) accum(ad, static_cast<size_t>(i), od->g[static_cast<size_t>(i)]);
      for (int64_t i = 0; i < nb; ++i) accum(bd, static_cast<size_t>(i), od->g[static_cast<size_t>(na + i)]);
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
  require(x.rank() == 2, "gather_rows: expected [R x C]");
  const int64_t r_in = x.dim(0), cols = x.dim(1);
  const int64_t k = static_cast<int64_t>(rows.size());
  auto out = Tensor::zeros({k, cols});
  for (int64_t i = 0; i < k; ++i) {
    const int r = rows[static_cast<size_t>(i)];
    require(r >= 0 && r < r_in, "gather_rows: row ", r, " out of range [0,", r_in, ")");
    std::memcpy(out.values().data() + i * cols, x.values().data() + r * cols,
                static_cast<size_t>(cols) * sizeof(float));
  }
  if (grad_wanted({&x})) {
    auto xd = x.ptr(), od = out.ptr();
    std::vector<int> rv(rows.begin(), rows.end());
    record("gather_rows", out, [=] {
      for (int64_t i = 0; i < k; ++i) {
        const int64_t r = rv[static_cast<size_t>(i)];
        for (int64_t c = 0; c < cols; ++c)
          accum(xd, static_cast<size_t>(r * cols + c), od->g[static_cast<size_t>(i * cols + c)]);
      }
    });
  }
  return out;
}

Tensor mean_rows(const Tensor& x) {
  require(x.rank() == 2 && x.dim(0) >= 1, "mean_rows: expected non-empty [k x C], got ",
          shape_str(x.shape()));
  const int64_t k = x.dim(0), cols = x.dim(1);
  auto out = Tensor::zeros({cols});
  for (int64_t c = 0; c < cols; ++c) {
    double s = 0.0;
    for (int64_t r = 0; r < k; ++r) s += x.at(r, c);
    out.values()[static_cast<size_t>(c)] = static_cast<float>(s / static_cast<double>(k));
  }
  if (grad_wanted({&x})) {
    auto xd = x.ptr(), od = out.ptr();
    record("mean_rows", out, [=] {
      const float inv = 1.f / static_cast<float>(k);
      for (int64_t r = 0; r < k; ++r)
        for (int64_t c = 0; c < cols; ++c)
          accum(xd, static_cast<size_t>(r * cols + c), od->g[static_cast<size_t>(c)] * inv);
    });
  }
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  require(!rows.empty(), "stack_rows: no rows");
  const int64_t cols = rows[0].numel();
  for (const auto& r : rows)
    require(r.rank() == 1 && r.numel() == cols, "stack_rows: row length mismatch");
  const int64_t k = static_cast<int64_t>(rows.size());
  auto out = Tensor::zeros({k, cols});
  for (int64_t i = 0; i < k; ++i)
    std::memcpy(out.values().data() + i * cols, rows[static_cast<size_t>(i)].values().data(),
                static_cast<size_t>(cols) * sizeof(float));
  bool wants = false;
  for (const auto& r : rows) wants = wants || r.requires_grad();
  if (Tape::active() && wants) {
    std::vector<std::shared_ptr<TensorData>> rd;
    rd.reserve(rows.size());
    for (const auto& r : rows) rd.push_back(r.ptr());
    auto od = out.ptr();
    record("stack_rows", out, [=] {
      for (int64_t i = 0; i < k; ++i)
        for (int64_t c = 0; c < cols; ++c)
          accum(rd[static_cast<size_t>(i)], static_cast<size_t>(c),
                od->g[static_cast<size_t>(i * cols + c)]);
    });
  }
  return out;
}

Tensor row_scatter_add(const Tensor& base, const Tensor& vec, std::span<const int> rows) {
  require(base.rank() == 2 && vec.rank() == 1 && vec.dim(0) == base.dim(1),
          "row_scatter_add: base ", shape_str(base.shape()), " vs vec ",
          shape_str(vec.shape()));
  const int64_t r_in = base.dim(0), cols = base.dim(1);
  auto out = base.clone();
  for (int r : rows) {
    require(r >= 0 && r < r_in, "row_scatter_add: row ", r, " out of range");
    for (int64_t c = 0; c < cols; ++c)
      out.values()[static_cast<size_t>(r) * cols + static_cast<size_t>(c)] += vec.at(c);
  }
  if (grad_wanted({&base, &vec})) {
    auto bd = base.ptr(), vd = vec.ptr(), od = out.ptr();
    std::vector<int> rv(rows.begin(), rows.end());
    record("row_scatter_add", out, [=] {
      if (bd->requires_grad)
        for (size_t i = 0; i < od->g.size(); ++i) bd->g[i] += od->g[i];
      if (vd->requires_grad)
        for (int r : rv)
          for (int64_t c = 0; c < cols; ++c)
            vd->g[static_cast<size_t>(c)] += od->g[static_cast<size_t>(r) * cols + static_cast<size_t>(c)];
    });
  }
  return out;
}

// ---- reductions ---------------------------------------------------------------

Tensor dot(const Tensor& a, const Tensor& b) {
  require(a.rank() == 1 && b.rank() == 1 && a.dim(0) == b.dim(0),
          "dot: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  double s = 0.0;
  for (int64_t i = 0; i < a.dim(0); ++i)
    s += static_cast<double>(a.at(i)) * b.at(i);
  auto out = Tensor::scalar(static_cast<float>(s));
  if (grad_wanted({&a, &b})) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    record("dot", out, [=] {
      const float g = od->g[0];
      for (size_t i = 0; i < ad->v.size(); ++i) {
        accum(ad, i, g * bd->v[i]);
        accum(bd, i, g * ad->v[i]);
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.values()) s += v;
  auto out = Tensor::scalar(static_cast<float>(s));
  if (grad_wanted({&x})) {
    auto xd = x.ptr(), od = out.ptr();
    record("sum", out, [=] {
      for (size_t i = 0; i < xd->v.size(); ++i) accum(xd, i, od->g[0]);
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const auto n = static_cast<float>(x.numel());
  auto s = sum(x);
  return scale(s, 1.f / n);
}

}  // namespace knowla
