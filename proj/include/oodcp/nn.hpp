#pragma once

#include <utility>

#include "oodcp/tensor.hpp"

namespace oodcp {

enum class Activation { identity, relu, sigmoid, tanh, softplus };

Tensor apply_activation(Tape& tape, Tensor x, Activation act);

// Static layer description; shape arithmetic only, no weights.
struct LayerSpec {
  enum class Kind { dense, conv, deconv, lstm_cell, dropout };
  Kind kind = Kind::dense;
  int units = 0;              // dense out, lstm hidden
  int filters = 0;            // conv/deconv out channels
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int out_h = 0, out_w = 0;   // deconv target size
  Activation activation = Activation::identity;

  // Output shape from an input shape, without running data.
  Shape output_shape(const Shape& in) const;
};

int conv_output_size(int in, int kernel, int stride, int padding);

// x [B,in] (or [in]); W [in,out]; b [out]. Returns activation(xW + b).
Tensor dense_forward(Tape& tape, Tensor x, Tensor W, Tensor b, Activation act);

struct RecurrentState {
  Tensor hidden;  // [B,h]
  Tensor cell;    // [B,h]
};

// Packed gate order along the 4h axis: input, forget, candidate, output.
struct LstmParams {
  Tensor wx;  // [in, 4h]
  Tensor wh;  // [h, 4h]
  Tensor b;   // [4h]
};

RecurrentState make_lstm_state(int batch, int hidden);

// Standard LSTM cell equations; output is the new hidden state.
std::pair<Tensor, RecurrentState> lstm_step(Tape& tape, Tensor x_t, const RecurrentState& state,
                                            const LstmParams& params);

// Mean over all entries of -(y log p + (1-y) log(1-p)), with probs clamped
// to [1e-6, 1-1e-6]. Labels must be exactly 0 or 1.
Tensor bce_loss(Tape& tape, Tensor probs, Tensor labels);

// Concrete relaxation of dropout with drop rate p = sigmoid(p_logit):
// drop mask sigmoid((p_logit + log u - log(1-u))/t), output scaled by
// (1 - mask)/(1 - p) so its expectation matches the input. Gradients flow
// to p_logit and to the activations; u carries none.
Tensor concrete_dropout_gate(Tape& tape, Tensor pre_activations, Tensor p_logit,
                             float temperature, Tensor u);
// Same, sampling u per unit from rng.
Tensor concrete_dropout_gate(Tape& tape, Tensor pre_activations, Tensor p_logit,
                             float temperature, Rng& rng);

}  // namespace oodcp
