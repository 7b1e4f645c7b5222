#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oodcp/common.hpp"

namespace oodcp {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major float32 tensor. Tensor is a cheap handle: copies share the
// underlying buffer, which is what ties the autodiff graph together. Use
// clone() for an independent buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor from(std::vector<float> values, Shape shape, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, bool requires_grad = false);
  static Tensor uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int64_t size() const { return static_cast<int64_t>(node().data.size()); }
  int dim(int i) const { return node().shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node().shape.size()); }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node().requires_grad = v;
    return *this;
  }

  std::span<float> data() { return node().data; }
  std::span<const float> data() const { return node().data; }
  float* raw() { return node().data.data(); }
  const float* raw() const { return node().data.data(); }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<float> grad();  // allocates zeros on first use
  std::span<const float> grad() const;
  void zero_grad();

  float item() const;
  float at(std::initializer_list<int> idx) const;
  void set(std::initializer_list<int> idx, float v);

  bool all_finite() const;
  Tensor clone() const;

  bool same_node(const Tensor& other) const { return n_ == other.n_; }

 private:
  struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  Node& node() {
    if (!n_) throw ContractError("use of undefined tensor");
    return *n_;
  }
  const Node& node() const {
    if (!n_) throw ContractError("use of undefined tensor");
    return *n_;
  }
  std::shared_ptr<Node> n_;
};

// Records executed ops in order; backward() replays them in reverse, which is
// a valid reverse topological order because every op's inputs precede it.
// One tape per model instance; never shared across threads.
class Tape {
 public:
  bool enabled() const { return enabled_; }
  void set_enabled(bool v) { enabled_ = v; }

  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }
  bool should_record(bool out_requires_grad) const { return enabled_ && out_requires_grad; }

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  // Populates grad buffers of every requires_grad tensor reachable from loss
  // with d(loss)/d(tensor), then consumes the tape.
  void backward(Tensor loss);

 private:
  std::vector<std::function<void()>> ops_;
  bool enabled_ = true;
};

// --- ops ---------------------------------------------------------------

Tensor matmul(Tape& tape, Tensor a, Tensor b);

// Cross-correlation. input [C,H,W] or [N,C,H,W]; kernels [F,C,kh,kw].
Tensor conv2d(Tape& tape, Tensor input, Tensor kernels, int stride, int padding);

// Transposed convolution. input [C,H,W] or [N,C,H,W]; kernels [C_in,C_out,kh,kw].
// out_h/out_w pick the exact output size among the stride-ambiguous choices.
Tensor deconv2d(Tape& tape, Tensor input, Tensor kernels, int stride, int padding,
                int out_h, int out_w);

Tensor add(Tape& tape, Tensor a, Tensor b);
Tensor sub(Tape& tape, Tensor a, Tensor b);
Tensor mul(Tape& tape, Tensor a, Tensor b);
Tensor add_scalar(Tape& tape, Tensor a, float c);
Tensor mul_scalar(Tape& tape, Tensor a, float c);

Tensor relu(Tape& tape, Tensor x);
Tensor sigmoid(Tape& tape, Tensor x);
Tensor tanh(Tape& tape, Tensor x);
Tensor softplus(Tape& tape, Tensor x);
Tensor exp(Tape& tape, Tensor x);
Tensor log(Tape& tape, Tensor x);
Tensor clamp(Tape& tape, Tensor x, float lo, float hi);

Tensor reshape(Tape& tape, Tensor x, Shape new_shape);
Tensor sum(Tape& tape, Tensor x);
Tensor mean(Tape& tape, Tensor x);

// Columns [col0, col1) of a rank-2 tensor.
Tensor slice_cols(Tape& tape, Tensor x, int col0, int col1);

// b has one entry per channel of x ([C,H,W] or [N,C,H,W]).
Tensor bias_add_channel(Tape& tape, Tensor x, Tensor b);
// b has one entry per column of x [R,C].
Tensor bias_add_row(Tape& tape, Tensor x, Tensor b);

inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

// Max over coordinates of |analytic - central difference| / (|analytic| + |fd| + 1e-8).
double gradient_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& point,
                      float h);

// --- named parameters & optimizer ---------------------------------------

class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  void zero_grad();
  int64_t total_size() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

// Standard Adam with bias correction over params' grad buffers.
// Throws NumericError naming the parameter if its gradient contains NaN.
void adam_step(ParamSet& params, AdamState& state, const AdamConfig& cfg);

// --- weight serialization ("OODW") ---------------------------------------

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path);

void save_params(const std::string& path, const ParamSet& params);
// Loads by name into an existing ParamSet; shapes must match.
void load_params(const std::string& path, ParamSet& params);

}  // namespace oodcp
