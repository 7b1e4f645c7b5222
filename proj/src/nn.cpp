#include "oodcp/nn.hpp"

#include <cmath>

namespace oodcp {

Tensor apply_activation(Tape& tape, Tensor x, Activation act) {
  switch (act) {
    case Activation::identity: return x;
    case Activation::relu: return relu(tape, x);
    case Activation::sigmoid: return sigmoid(tape, x);
    case Activation::tanh: return tanh(tape, x);
    case Activation::softplus: return softplus(tape, x);
  }
  throw ContractError("unknown activation");
}

int conv_output_size(int in, int kernel, int stride, int padding) {
  if (stride < 1 || kernel < 1 || padding < 0) throw DimensionError("bad conv geometry");
  const int out = (in + 2 * padding - kernel) / stride + 1;
  if (out < 1) throw DimensionError("conv output would be empty");
  return out;
}

Shape LayerSpec::output_shape(const Shape& in) const {
  switch (kind) {
    case Kind::dense: {
      if (in.size() == 1) return {units};
      if (in.size() == 2) return {in[0], units};
      throw DimensionError("dense input must be [in] or [B,in], got " + shape_str(in));
    }
    case Kind::conv: {
      if (in.size() != 3 && in.size() != 4)
        throw DimensionError("conv input must be [C,H,W] or [N,C,H,W], got " + shape_str(in));
      const bool batched = in.size() == 4;
      const int H = in[batched ? 2 : 1], W = in[batched ? 3 : 2];
      const int oh = conv_output_size(H, kernel, stride, padding);
      const int ow = conv_output_size(W, kernel, stride, padding);
      if (batched) return {in[0], filters, oh, ow};
      return {filters, oh, ow};
    }
    case Kind::deconv: {
      if (in.size() != 3 && in.size() != 4)
        throw DimensionError("deconv input must be [C,H,W] or [N,C,H,W], got " + shape_str(in));
      const bool batched = in.size() == 4;
      const int H = in[batched ? 2 : 1], W = in[batched ? 3 : 2];
      if (conv_output_size(out_h, kernel, stride, padding) != H ||
          conv_output_size(out_w, kernel, stride, padding) != W)
        throw DimensionError("deconv target unreachable from " + shape_str(in));
      if (batched) return {in[0], filters, out_h, out_w};
      return {filters, out_h, out_w};
    }
    case Kind::lstm_cell: {
      if (in.size() == 1) return {units};
      if (in.size() == 2) return {in[0], units};
      throw DimensionError("lstm input must be [in] or [B,in], got " + shape_str(in));
    }
    case Kind::dropout: return in;
  }
  throw ContractError("unknown layer kind");
}

Tensor dense_forward(Tape& tape, Tensor x, Tensor W, Tensor b, Activation act) {
  const bool vec = x.rank() == 1;
  if (vec) x = reshape(tape, x, {1, x.dim(0)});
  if (x.rank() != 2)
    throw DimensionError("dense input must be [in] or [B,in], got " + shape_str(x.shape()));
  Tensor y = bias_add_row(tape, matmul(tape, x, W), b);
  y = apply_activation(tape, y, act);
  if (vec) y = reshape(tape, y, {y.dim(1)});
  return y;
}

RecurrentState make_lstm_state(int batch, int hidden) {
  return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
}

std::pair<Tensor, RecurrentState> lstm_step(Tape& tape, Tensor x_t, const RecurrentState& state,
                                            const LstmParams& params) {
  if (state.hidden.shape() != state.cell.shape())
    throw DimensionError("recurrent state length mismatch: hidden " +
                         shape_str(state.hidden.shape()) + " cell " +
                         shape_str(state.cell.shape()));
  if (x_t.rank() != 2 || state.hidden.rank() != 2)
    throw DimensionError("lstm_step expects batched [B,*] tensors");
  const int h = state.hidden.dim(1);
  if (params.wh.dim(0) != h || params.wx.dim(1) != 4 * h || params.wh.dim(1) != 4 * h ||
      params.b.dim(0) != 4 * h)
    throw DimensionError("lstm params do not match hidden size " + std::to_string(h));

  Tensor z = bias_add_row(
      tape, add(tape, matmul(tape, x_t, params.wx), matmul(tape, state.hidden, params.wh)),
      params.b);
  Tensor i = sigmoid(tape, slice_cols(tape, z, 0, h));
  Tensor f = sigmoid(tape, slice_cols(tape, z, h, 2 * h));
  Tensor g = oodcp::tanh(tape, slice_cols(tape, z, 2 * h, 3 * h));
  Tensor o = sigmoid(tape, slice_cols(tape, z, 3 * h, 4 * h));
  Tensor c_new = add(tape, mul(tape, f, state.cell), mul(tape, i, g));
  Tensor h_new = mul(tape, o, oodcp::tanh(tape, c_new));
  return {h_new, RecurrentState{h_new, c_new}};
}

Tensor bce_loss(Tape& tape, Tensor probs, Tensor labels) {
  if (probs.shape() != labels.shape())
    throw DimensionError("bce_loss shapes differ: " + shape_str(probs.shape()) + " vs " +
                         shape_str(labels.shape()));
  for (float y : labels.data())
    if (y != 0.0f && y != 1.0f)
      throw DomainError("bce_loss labels must be 0 or 1, got " + std::to_string(y));
  Tensor p = clamp(tape, probs, 1e-6f, 1.0f - 1e-6f);
  Tensor one = Tensor::scalar(1.0f);
  Tensor ll = add(tape, mul(tape, labels, log(tape, p)),
                  mul(tape, sub(tape, one, labels), log(tape, sub(tape, one, p))));
  return mul_scalar(tape, mean(tape, ll), -1.0f);
}

Tensor concrete_dropout_gate(Tape& tape, Tensor pre_activations, Tensor p_logit,
                             float temperature, Tensor u) {
  if (temperature <= 0.0f) throw DomainError("concrete dropout temperature must be positive");
  if (p_logit.size() != 1)
    throw ContractError("p_logit must be a scalar, got " + shape_str(p_logit.shape()));
  if (!p_logit.all_finite())
    throw ContractError("p_logit is not finite, so the dropout rate leaves (0,1)");
  if (u.shape() != pre_activations.shape())
    throw DimensionError("noise shape " + shape_str(u.shape()) + " does not match activations " +
                         shape_str(pre_activations.shape()));
  for (float v : u.data())
    if (!(v > 0.0f && v < 1.0f)) throw DomainError("dropout noise must lie strictly in (0,1)");

  Tensor one = Tensor::scalar(1.0f);
  Tensor logit_u = sub(tape, log(tape, u), log(tape, sub(tape, one, u)));
  Tensor drop = sigmoid(tape, mul_scalar(tape, add(tape, logit_u, p_logit), 1.0f / temperature));
  Tensor keep = sub(tape, one, drop);
  // 1/(1-p) with p = sigmoid(p_logit) is exactly 1 + exp(p_logit).
  Tensor inv_keep_rate = add_scalar(tape, exp(tape, p_logit), 1.0f);
  return mul(tape, mul(tape, pre_activations, keep), inv_keep_rate);
}

Tensor concrete_dropout_gate(Tape& tape, Tensor pre_activations, Tensor p_logit,
                             float temperature, Rng& rng) {
  Tensor u = Tensor::zeros(pre_activations.shape());
  for (float& v : u.data()) v = static_cast<float>(rng.uniform(1e-6, 1.0 - 1e-6));
  return concrete_dropout_gate(tape, pre_activations, p_logit, temperature, u);
}

}  // namespace oodcp
