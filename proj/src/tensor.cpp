#include "oodcp/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace oodcp {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

static void validate_shape(const Shape& s) {
  if (s.empty()) throw DimensionError("empty shape");
  for (int d : s)
    if (d <= 0) throw DimensionError("non-positive dim in shape " + shape_str(s));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  Tensor t;
  t.n_ = std::make_shared<Node>();
  t.n_->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  t.n_->shape = std::move(shape);
  t.n_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) { return full({1}, value, requires_grad); }

Tensor Tensor::from(std::vector<float> values, Shape shape, bool requires_grad) {
  validate_shape(shape);
  if (static_cast<int64_t>(values.size()) != shape_numel(shape))
    throw DimensionError("value count " + std::to_string(values.size()) + " does not fill " +
                         shape_str(shape));
  Tensor t;
  t.n_ = std::make_shared<Node>();
  t.n_->shape = std::move(shape);
  t.n_->data = std::move(values);
  t.n_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (float& v : t.data()) v = rng.normal_f() * stddev;
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

std::span<float> Tensor::grad() {
  Node& n = node();
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0f);
  return n.grad;
}

std::span<const float> Tensor::grad() const {
  const Node& n = node();
  if (n.grad.empty()) throw ContractError("grad not populated");
  return n.grad;
}

void Tensor::zero_grad() {
  Node& n = node();
  n.grad.assign(n.data.size(), 0.0f);
}

float Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node().data[0];
}

float Tensor::at(std::initializer_list<int> idx) const {
  const Node& n = node();
  if (idx.size() != n.shape.size())
    throw DimensionError("index rank mismatch for shape " + shape_str(n.shape));
  int64_t flat = 0;
  size_t k = 0;
  for (int i : idx) {
    if (i < 0 || i >= n.shape[k]) throw DimensionError("index out of range");
    flat = flat * n.shape[k] + i;
    ++k;
  }
  return n.data[static_cast<size_t>(flat)];
}

void Tensor::set(std::initializer_list<int> idx, float v) {
  const Node& n = node();
  if (idx.size() != n.shape.size())
    throw DimensionError("index rank mismatch for shape " + shape_str(n.shape));
  int64_t flat = 0;
  size_t k = 0;
  for (int i : idx) {
    if (i < 0 || i >= n.shape[k]) throw DimensionError("index out of range");
    flat = flat * n.shape[k] + i;
    ++k;
  }
  node().data[static_cast<size_t>(flat)] = v;
}

bool Tensor::all_finite() const {
  for (float v : node().data)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::clone() const {
  const Node& n = node();
  Tensor t;
  t.n_ = std::make_shared<Node>();
  t.n_->shape = n.shape;
  t.n_->data = n.data;
  t.n_->requires_grad = n.requires_grad;
  return t;
}

void Tape::backward(Tensor loss) {
  if (loss.size() != 1)
    throw ContractError("backward expects a scalar loss, got shape " + shape_str(loss.shape()));
  if (ops_.empty()) throw ContractError("backward on an empty tape");
  loss.grad()[0] = 1.0f;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

// --- matmul --------------------------------------------------------------

Tensor matmul(Tape& tape, Tensor a, Tensor b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul inner dims differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n}, a.requires_grad() || b.requires_grad());
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f, a.raw(), k, b.raw(), n,
              0.0f, out.raw(), n);
  if (tape.should_record(out.requires_grad())) {
    tape.record([a, b, out, m, n, k]() mutable {
      const float* g = out.grad().data();
      if (a.requires_grad())
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0f, g, n, b.raw(), n, 1.0f,
                    a.grad().data(), k);
      if (b.requires_grad())
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0f, a.raw(), k, g, n, 1.0f,
                    b.grad().data(), n);
    });
  }
  return out;
}

// --- conv2d / deconv2d ----------------------------------------------------

static int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// cols is [C*kh*kw, oh*ow] for a single sample.
static void im2col(const float* in, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int OH, int OW, float* cols) {
  const int L = OH * OW;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        float* row = cols + ((static_cast<int64_t>(c) * kh + i) * kw + j) * L;
        for (int oh = 0; oh < OH; ++oh) {
          const int h = oh * stride - pad + i;
          if (h < 0 || h >= H) {
            std::memset(row + oh * OW, 0, sizeof(float) * static_cast<size_t>(OW));
            continue;
          }
          const float* src = in + (static_cast<int64_t>(c) * H + h) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int w = ow * stride - pad + j;
            row[oh * OW + ow] = (w >= 0 && w < W) ? src[w] : 0.0f;
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col; accumulates into `out`.
static void col2im(const float* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int OH, int OW, float* out) {
  const int L = OH * OW;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const float* row = cols + ((static_cast<int64_t>(c) * kh + i) * kw + j) * L;
        for (int oh = 0; oh < OH; ++oh) {
          const int h = oh * stride - pad + i;
          if (h < 0 || h >= H) continue;
          float* dst = out + (static_cast<int64_t>(c) * H + h) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int w = ow * stride - pad + j;
            if (w >= 0 && w < W) dst[w] += row[oh * OW + ow];
          }
        }
      }
    }
  }
}

Tensor conv2d(Tape& tape, Tensor input, Tensor kernels, int stride, int padding) {
  if (kernels.rank() != 4)
    throw DimensionError("conv2d kernels must be [F,C,kh,kw], got " + shape_str(kernels.shape()));
  if (input.rank() != 3 && input.rank() != 4)
    throw DimensionError("conv2d input must be [C,H,W] or [N,C,H,W], got " +
                         shape_str(input.shape()));
  if (stride < 1 || padding < 0) throw DimensionError("conv2d bad stride/padding");
  const bool batched = input.rank() == 4;
  const int N = batched ? input.dim(0) : 1;
  const int C = input.dim(batched ? 1 : 0);
  const int H = input.dim(batched ? 2 : 1);
  const int W = input.dim(batched ? 3 : 2);
  const int F = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != C)
    throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         " kernels " + shape_str(kernels.shape()));
  const int OH = conv_out_size(H, kh, stride, padding);
  const int OW = conv_out_size(W, kw, stride, padding);
  if (OH < 1 || OW < 1) throw DimensionError("conv2d output would be empty");
  const int CKK = C * kh * kw, L = OH * OW;

  Shape out_shape = batched ? Shape{N, F, OH, OW} : Shape{F, OH, OW};
  Tensor out = Tensor::zeros(out_shape, input.requires_grad() || kernels.requires_grad());
  std::vector<float> cols(static_cast<size_t>(CKK) * L);
  const int64_t in_stride = static_cast<int64_t>(C) * H * W;
  const int64_t out_stride = static_cast<int64_t>(F) * L;
  for (int n = 0; n < N; ++n) {
    im2col(input.raw() + n * in_stride, C, H, W, kh, kw, stride, padding, OH, OW, cols.data());
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, F, L, CKK, 1.0f, kernels.raw(), CKK,
                cols.data(), L, 0.0f, out.raw() + n * out_stride, L);
  }

  if (tape.should_record(out.requires_grad())) {
    tape.record([input, kernels, out, N, C, H, W, F, kh, kw, stride, padding, OH, OW]() mutable {
      const int CKK = C * kh * kw, L = OH * OW;
      const int64_t in_stride = static_cast<int64_t>(C) * H * W;
      const int64_t out_stride = static_cast<int64_t>(F) * L;
      std::vector<float> cols(static_cast<size_t>(CKK) * L);
      std::vector<float> dcols;
      if (input.requires_grad()) dcols.resize(static_cast<size_t>(CKK) * L);
      for (int n = 0; n < N; ++n) {
        const float* g = out.grad().data() + n * out_stride;
        if (kernels.requires_grad() || input.requires_grad())
          im2col(input.raw() + n * in_stride, C, H, W, kh, kw, stride, padding, OH, OW,
                 cols.data());
        if (kernels.requires_grad())
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, F, CKK, L, 1.0f, g, L, cols.data(),
                      L, 1.0f, kernels.grad().data(), CKK);
        if (input.requires_grad()) {
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, CKK, L, F, 1.0f, kernels.raw(), CKK,
                      g, L, 0.0f, dcols.data(), L);
          col2im(dcols.data(), C, H, W, kh, kw, stride, padding, OH, OW,
                 input.grad().data() + n * in_stride);
        }
      }
    });
  }
  return out;
}

Tensor deconv2d(Tape& tape, Tensor input, Tensor kernels, int stride, int padding,
                int out_h, int out_w) {
  if (kernels.rank() != 4)
    throw DimensionError("deconv2d kernels must be [C_in,C_out,kh,kw], got " +
                         shape_str(kernels.shape()));
  if (input.rank() != 3 && input.rank() != 4)
    throw DimensionError("deconv2d input must be [C,H,W] or [N,C,H,W], got " +
                         shape_str(input.shape()));
  const bool batched = input.rank() == 4;
  const int N = batched ? input.dim(0) : 1;
  const int Cin = input.dim(batched ? 1 : 0);
  const int H = input.dim(batched ? 2 : 1);
  const int W = input.dim(batched ? 3 : 2);
  const int Cout = kernels.dim(1), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(0) != Cin)
    throw DimensionError("deconv2d channel mismatch: input " + shape_str(input.shape()) +
                         " kernels " + shape_str(kernels.shape()));
  if (conv_out_size(out_h, kh, stride, padding) != H ||
      conv_out_size(out_w, kw, stride, padding) != W)
    throw DimensionError("deconv2d target " + std::to_string(out_h) + "x" +
                         std::to_string(out_w) + " unreachable from " + shape_str(input.shape()));
  const int COKK = Cout * kh * kw, L = H * W;

  Shape out_shape = batched ? Shape{N, Cout, out_h, out_w} : Shape{Cout, out_h, out_w};
  Tensor out = Tensor::zeros(out_shape, input.requires_grad() || kernels.requires_grad());
  std::vector<float> cols(static_cast<size_t>(COKK) * L);
  const int64_t in_stride = static_cast<int64_t>(Cin) * L;
  const int64_t out_stride = static_cast<int64_t>(Cout) * out_h * out_w;
  for (int n = 0; n < N; ++n) {
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, COKK, L, Cin, 1.0f, kernels.raw(), COKK,
                input.raw() + n * in_stride, L, 0.0f, cols.data(), L);
    col2im(cols.data(), Cout, out_h, out_w, kh, kw, stride, padding, H, W,
           out.raw() + n * out_stride);
  }

  if (tape.should_record(out.requires_grad())) {
    tape.record([input, kernels, out, N, Cin, Cout, H, W, kh, kw, stride, padding, out_h,
                 out_w]() mutable {
      const int COKK = Cout * kh * kw, L = H * W;
      const int64_t in_stride = static_cast<int64_t>(Cin) * L;
      const int64_t out_stride = static_cast<int64_t>(Cout) * out_h * out_w;
      std::vector<float> gcols(static_cast<size_t>(COKK) * L);
      for (int n = 0; n < N; ++n) {
        im2col(out.grad().data() + n * out_stride, Cout, out_h, out_w, kh, kw, stride, padding, H,
               W, gcols.data());
        if (input.requires_grad())
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, Cin, L, COKK, 1.0f, kernels.raw(),
                      COKK, gcols.data(), L, 1.0f, input.grad().data() + n * in_stride, L);
        if (kernels.requires_grad())
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, Cin, COKK, L, 1.0f,
                      input.raw() + n * in_stride, L, gcols.data(), L, 1.0f,
                      kernels.grad().data(), COKK);
      }
    });
  }
  return out;
}

// --- elementwise binary ----------------------------------------------------

namespace {

// Same shape, or either side is a single element broadcast against the other.
void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape() || a.size() == 1 || b.size() == 1) return;
  throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

void accum_scalar_grad(Tensor& t, const std::vector<double>& contrib) {
  double total = 0.0;
  for (double v : contrib) total += v;
  t.grad()[0] += static_cast<float>(total);
}

}  // namespace

Tensor add(Tape& tape, Tensor a, Tensor b) {
  check_broadcast(a, b, "add");
  const Tensor& big = a.size() >= b.size() ? a : b;
  Tensor out = Tensor::zeros(big.shape(), a.requires_grad() || b.requires_grad());
  const int64_t n = out.size();
  const bool as = a.size() == 1 && n > 1, bs = b.size() == 1 && n > 1;
  for (int64_t i = 0; i < n; ++i)
    out.raw()[i] = a.raw()[as ? 0 : i] + b.raw()[bs ? 0 : i];
  if (tape.should_record(out.requires_grad())) {
    tape.record([a, b, out, n, as, bs]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        if (as) {
          std::vector<double> c(g.begin(), g.end());
          accum_scalar_grad(a, c);
        } else {
          auto da = a.grad();
          for (int64_t i = 0; i < n; ++i) da[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        if (bs) {
          std::vector<double> c(g.begin(), g.end());
          accum_scalar_grad(b, c);
        } else {
          auto db = b.grad();
          for (int64_t i = 0; i < n; ++i) db[i] += g[i];
        }
      }
    });
  }
  return out;
}

Tensor sub(Tape& tape, Tensor a, Tensor b) {
  check_broadcast(a, b, "sub");
  const Tensor& big = a.size() >= b.size() ? a : b;
  Tensor out = Tensor::zeros(big.shape(), a.requires_grad() || b.requires_grad());
  const int64_t n = out.size();
  const bool as = a.size() == 1 && n > 1, bs = b.size() == 1 && n > 1;
  for (int64_t i = 0; i < n; ++i)
    out.raw()[i] = a.raw()[as ? 0 : i] - b.raw()[bs ? 0 : i];
  if (tape.should_record(out.requires_grad())) {
    tape.record([a, b, out, n, as, bs]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        if (as) {
          std::vector<double> c(g.begin(), g.end());
          accum_scalar_grad(a, c);
        } else {
          auto da = a.grad();
          for (int64_t i = 0; i < n; ++i) da[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        if (bs) {
          std::vector<double> c(g.size());
          for (int64_t i = 0; i < n; ++i) c[static_cast<size_t>(i)] = -g[i];
          accum_scalar_grad(b, c);
        } else {
          auto db = b.grad();
          for (int64_t i = 0; i < n; ++i) db[i] -= g[i];
        }
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, Tensor a, Tensor b) {
  check_broadcast(a, b, "mul");
  const Tensor& big = a.size() >= b.size() ? a : b;
  Tensor out = Tensor::zeros(big.shape(), a.requires_grad() || b.requires_grad());
  const int64_t n = out.size();
  const bool as = a.size() == 1 && n > 1, bs = b.size() == 1 && n > 1;
  for (int64_t i = 0; i < n; ++i)
    out.raw()[i] = a.raw()[as ? 0 : i] * b.raw()[bs ? 0 : i];
  if (tape.should_record(out.requires_grad())) {
    tape.record([a, b, out, n, as, bs]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        if (as) {
          std::vector<double> c(static_cast<size_t>(n));
          for (int64_t i = 0; i < n; ++i)
            c[static_cast<size_t>(i)] = static_cast<double>(g[i]) * b.raw()[bs ? 0 : i];
          accum_scalar_grad(a, c);
        } else {
          auto da = a.grad();
          for (int64_t i = 0; i < n; ++i) da[i] += g[i] * b.raw()[bs ? 0 : i];
        }
      }
      if (b.requires_grad()) {
        if (bs) {
          std::vector<double> c(static_cast<size_t>(n));
          for (int64_t i = 0; i < n; ++i)
            c[static_cast<size_t>(i)] = static_cast<double>(g[i]) * a.raw()[as ? 0 : i];
          accum_scalar_grad(b, c);
        } else {
          auto db = b.grad();
          for (int64_t i = 0; i < n; ++i) db[i] += g[i] * a.raw()[as ? 0 : i];
        }
      }
    });
  }
  return out;
}

Tensor add_scalar(Tape& tape, Tensor a, float c) {
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] + c;
  if (tape.should_record(out.requires_grad())) {
    tape.record([a, out, n]() mutable {
      auto g = out.grad();
      auto da = a.grad();
      for (int64_t i = 0; i < n; ++i) da[i] += g[i];
    });
  }
  return out;
}

Tensor mul_scalar(Tape& tape, Tensor a, float c) {
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.raw()[i] = a.raw()[i] * c;
  if (tape.should_record(out.requires_grad())) {
    tape.record([a, out, n, c]() mutable {
      auto g = out.grad();
      auto da = a.grad();
      for (int64_t i = 0; i < n; ++i) da[i] += g[i] * c;
    });
  }
  return out;
}

// --- elementwise unary ------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(Tape& tape, Tensor x, Fwd fwd, Bwd bwd) {
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) out.raw()[i] = fwd(x.raw()[i]);
  if (tape.should_record(out.requires_grad())) {
    tape.record([x, out, n, bwd]() mutable {
      auto g = out.grad();
      auto dx = x.grad();
      for (int64_t i = 0; i < n; ++i) dx[i] += g[i] * bwd(x.raw()[i], out.raw()[i]);
    });
  }
  return out;
}

float stable_sigmoid(float v) {
  if (v >= 0.0f) {
    const float e = std::exp(-v);
    return 1.0f / (1.0f + e);
  }
  const float e = std::exp(v);
  return e / (1.0f + e);
}

}  // namespace

Tensor relu(Tape& tape, Tensor x) {
  return unary_op(
      tape, x, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(Tape& tape, Tensor x) {
  return unary_op(
      tape, x, [](float v) { return stable_sigmoid(v); },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor tanh(Tape& tape, Tensor x) {
  return unary_op(
      tape, x, [](float v) { return std::tanh(v); },
      [](float, float y) { return 1.0f - y * y; });
}

Tensor softplus(Tape& tape, Tensor x) {
  return unary_op(
      tape, x,
      [](float v) { return std::max(v, 0.0f) + std::log1p(std::exp(-std::fabs(v))); },
      [](float v, float) { return stable_sigmoid(v); });
}

Tensor exp(Tape& tape, Tensor x) {
  return unary_op(
      tape, x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor log(Tape& tape, Tensor x) {
  for (float v : x.data())
    if (v <= 0.0f) throw DomainError("log of non-positive value " + std::to_string(v));
  return unary_op(
      tape, x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor clamp(Tape& tape, Tensor x, float lo, float hi) {
  if (lo > hi) throw DomainError("clamp with lo > hi");
  return unary_op(
      tape, x, [lo, hi](float v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](float v, float) { return (v >= lo && v <= hi) ? 1.0f : 0.0f; });
}

Tensor reshape(Tape& tape, Tensor x, Shape new_shape) {
  validate_shape(new_shape);
  if (shape_numel(new_shape) != x.size())
    throw DimensionError("reshape " + shape_str(x.shape()) + " to incompatible " +
                         shape_str(new_shape));
  Tensor out = Tensor::from(std::vector<float>(x.data().begin(), x.data().end()),
                            std::move(new_shape), x.requires_grad());
  if (tape.should_record(out.requires_grad())) {
    tape.record([x, out]() mutable {
      auto g = out.grad();
      auto dx = x.grad();
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
    });
  }
  return out;
}

Tensor sum(Tape& tape, Tensor x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc), x.requires_grad());
  if (tape.should_record(out.requires_grad())) {
    tape.record([x, out]() mutable {
      const float g = out.grad()[0];
      auto dx = x.grad();
      for (float& v : dx) v += g;
    });
  }
  return out;
}

Tensor mean(Tape& tape, Tensor x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const double n = static_cast<double>(x.size());
  Tensor out = Tensor::scalar(static_cast<float>(acc / n), x.requires_grad());
  if (tape.should_record(out.requires_grad())) {
    tape.record([x, out, n]() mutable {
      const float g = static_cast<float>(out.grad()[0] / n);
      auto dx = x.grad();
      for (float& v : dx) v += g;
    });
  }
  return out;
}

Tensor slice_cols(Tape& tape, Tensor x, int col0, int col1) {
  if (x.rank() != 2)
    throw DimensionError("slice_cols expects [R,C], got " + shape_str(x.shape()));
  const int R = x.dim(0), C = x.dim(1);
  if (col0 < 0 || col1 > C || col0 >= col1)
    throw DimensionError("slice_cols bad range [" + std::to_string(col0) + "," +
                         std::to_string(col1) + ") for " + shape_str(x.shape()));
  const int Cn = col1 - col0;
  Tensor out = Tensor::zeros({R, Cn}, x.requires_grad());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < Cn; ++c) out.raw()[r * Cn + c] = x.raw()[r * C + col0 + c];
  if (tape.should_record(out.requires_grad())) {
    tape.record([x, out, R, C, Cn, col0]() mutable {
      auto g = out.grad();
      auto dx = x.grad();
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < Cn; ++c) dx[r * C + col0 + c] += g[r * Cn + c];
    });
  }
  return out;
}

Tensor bias_add_channel(Tape& tape, Tensor x, Tensor b) {
  if (x.rank() != 3 && x.rank() != 4)
    throw DimensionError("bias_add_channel expects [C,H,W] or [N,C,H,W], got " +
                         shape_str(x.shape()));
  const bool batched = x.rank() == 4;
  const int N = batched ? x.dim(0) : 1;
  const int C = x.dim(batched ? 1 : 0);
  const int64_t HW = static_cast<int64_t>(x.dim(batched ? 2 : 1)) * x.dim(batched ? 3 : 2);
  if (b.rank() != 1 || b.dim(0) != C)
    throw DimensionError("bias_add_channel bias " + shape_str(b.shape()) + " for input " +
                         shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad() || b.requires_grad());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float bias = b.raw()[c];
      const int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) out.raw()[base + i] = x.raw()[base + i] + bias;
    }
  if (tape.should_record(out.requires_grad())) {
    tape.record([x, b, out, N, C, HW]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto dx = x.grad();
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int n = 0; n < N; ++n) {
            const int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) acc += g[base + i];
          }
          db[c] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor bias_add_row(Tape& tape, Tensor x, Tensor b) {
  if (x.rank() != 2)
    throw DimensionError("bias_add_row expects [R,C], got " + shape_str(x.shape()));
  const int R = x.dim(0), C = x.dim(1);
  if (b.rank() != 1 || b.dim(0) != C)
    throw DimensionError("bias_add_row bias " + shape_str(b.shape()) + " for input " +
                         shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad() || b.requires_grad());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.raw()[r * C + c] = x.raw()[r * C + c] + b.raw()[c];
  if (tape.should_record(out.requires_grad())) {
    tape.record([x, b, out, R, C]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto dx = x.grad();
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int r = 0; r < R; ++r) acc += g[r * C + c];
          db[c] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

// --- gradient check ---------------------------------------------------------

double gradient_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& point,
                      float h) {
  Tensor x = point.clone();
  x.set_requires_grad(true);
  x.zero_grad();
  Tape tape;
  Tensor y = f(tape, x);
  if (y.size() != 1)
    throw ContractError("gradient_check needs a scalar-valued function, got shape " +
                        shape_str(y.shape()));
  tape.backward(y);
  std::vector<double> analytic(x.grad().begin(), x.grad().end());

  Tape quiet;
  quiet.set_enabled(false);
  Tensor xp = point.clone();
  double worst = 0.0;
  const int64_t n = xp.size();
  for (int64_t i = 0; i < n; ++i) {
    const float orig = xp.raw()[i];
    xp.raw()[i] = orig + h;
    const double fp = f(quiet, xp).item();
    xp.raw()[i] = orig - h;
    const double fm = f(quiet, xp).item();
    xp.raw()[i] = orig;
    const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
    const double a = analytic[static_cast<size_t>(i)];
    const double rel = std::fabs(a - fd) / (std::fabs(a) + std::fabs(fd) + 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

// --- ParamSet / Adam ----------------------------------------------------------

Tensor& ParamSet::add(const std::string& name, Tensor t) {
  if (contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  t.set_requires_grad(true);
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamSet::at(const std::string& name) {
  for (auto& [k, v] : items_)
    if (k == name) return v;
  throw ContractError("no parameter '" + name + "'");
}

const Tensor& ParamSet::at(const std::string& name) const {
  for (auto& [k, v] : items_)
    if (k == name) return v;
  throw ContractError("no parameter '" + name + "'");
}

bool ParamSet::contains(const std::string& name) const {
  for (auto& [k, v] : items_)
    if (k == name) return true;
  return false;
}

void ParamSet::zero_grad() {
  for (auto& [k, v] : items_) v.zero_grad();
}

int64_t ParamSet::total_size() const {
  int64_t n = 0;
  for (auto& [k, v] : items_) n += v.size();
  return n;
}

void adam_step(ParamSet& params, AdamState& state, const AdamConfig& cfg) {
  auto& items = params.items();
  if (state.m.empty()) {
    state.m.resize(items.size());
    state.v.resize(items.size());
    for (size_t p = 0; p < items.size(); ++p) {
      state.m[p].assign(static_cast<size_t>(items[p].second.size()), 0.0f);
      state.v[p].assign(static_cast<size_t>(items[p].second.size()), 0.0f);
    }
  }
  if (state.m.size() != items.size())
    throw ContractError("adam state does not match parameter set");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
  for (size_t p = 0; p < items.size(); ++p) {
    auto& [name, t] = items[p];
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto w = t.data();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (size_t i = 0; i < g.size(); ++i) {
      if (std::isnan(g[i]))
        throw NumericError("nan gradient in parameter '" + name + "'");
      if (!std::isfinite(g[i]))
        throw NumericError("non-finite gradient in parameter '" + name + "'");
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// --- serialization -------------------------------------------------------------

namespace {

constexpr uint32_t kWeightsVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

struct Reader {
  const uint8_t* p;
  size_t n;
  size_t pos = 0;
  const std::string& path;

  uint32_t u32() {
    if (pos + 4 > n) throw IoError("truncated weights file " + path);
    uint32_t v = static_cast<uint32_t>(p[pos]) | (static_cast<uint32_t>(p[pos + 1]) << 8) |
                 (static_cast<uint32_t>(p[pos + 2]) << 16) |
                 (static_cast<uint32_t>(p[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  float f32() {
    uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string str(size_t len) {
    if (pos + len > n) throw IoError("truncated weights file " + path);
    std::string s(reinterpret_cast<const char*>(p + pos), len);
    pos += len;
    return s;
  }
};

}  // namespace

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::vector<uint8_t> buf;
  buf.push_back('O');
  buf.push_back('O');
  buf.push_back('D');
  buf.push_back('W');
  put_u32(buf, kWeightsVersion);
  for (const auto& [name, t] : tensors) {
    put_u32(buf, static_cast<uint32_t>(name.size()));
    for (char c : name) buf.push_back(static_cast<uint8_t>(c));
    put_u32(buf, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(buf, static_cast<uint32_t>(d));
    for (float v : t.data()) put_f32(buf, v);
  }
  write_file_bytes(path, buf);
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path) {
  const std::vector<uint8_t> buf = read_file_bytes(path);
  Reader r{buf.data(), buf.size(), 0, path};
  if (buf.size() < 8 || buf[0] != 'O' || buf[1] != 'O' || buf[2] != 'D' || buf[3] != 'W')
    throw IoError("bad magic in weights file " + path);
  r.pos = 4;
  const uint32_t version = r.u32();
  if (version != kWeightsVersion)
    throw IoError("unsupported weights version " + std::to_string(version) + " in " + path);
  std::vector<std::pair<std::string, Tensor>> out;
  while (r.pos < r.n) {
    const uint32_t name_len = r.u32();
    if (name_len > 4096) throw IoError("implausible name length in " + path);
    std::string name = r.str(name_len);
    const uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw IoError("implausible rank in " + path);
    Shape shape;
    int64_t numel = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      const uint32_t d = r.u32();
      if (d == 0 || d > (1u << 28)) throw IoError("implausible dim in " + path);
      shape.push_back(static_cast<int>(d));
      numel *= d;
    }
    if (r.pos + static_cast<size_t>(numel) * 4 > r.n)
      throw IoError("truncated weights file " + path);
    std::vector<float> data(static_cast<size_t>(numel));
    for (auto& v : data) v = r.f32();
    out.emplace_back(std::move(name), Tensor::from(std::move(data), std::move(shape)));
  }
  return out;
}

void save_params(const std::string& path, const ParamSet& params) {
  save_tensors(path, params.items());
}

void load_params(const std::string& path, ParamSet& params) {
  auto loaded = load_tensors(path);
  if (loaded.size() != params.items().size())
    throw IoError("weights file " + path + " has " + std::to_string(loaded.size()) +
                  " tensors, expected " + std::to_string(params.items().size()));
  for (auto& [name, t] : loaded) {
    Tensor& dst = params.at(name);
    if (dst.shape() != t.shape())
      throw IoError("shape mismatch for '" + name + "' in " + path + ": file " +
                    shape_str(t.shape()) + " vs model " + shape_str(dst.shape()));
    std::copy(t.data().begin(), t.data().end(), dst.data().begin());
  }
}

}  // namespace oodcp
