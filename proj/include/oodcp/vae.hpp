#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oodcp/sim.hpp"
#include "oodcp/tensor.hpp"

namespace oodcp {

// Diagonal Gaussian over the latent code. Tensors so gradients flow through
// both heads; rank 1 [L] for a single image, [N,L] for a batch.
struct LatentDistribution {
  Tensor mean;
  Tensor logvar;  // clamped to [-10, 10] by encoders
};

// Encoder/decoder pair with a fixed-scale Gaussian likelihood over pixels.
// elbo and nll_estimate only rely on this interface, so tests can plug in
// tiny analytic models next to the convolutional one.
class Vae {
 public:
  virtual ~Vae() = default;
  // x01: pixels already scaled to [0,1], [C,H,W] or [N,C,H,W].
  virtual LatentDistribution encode01(Tape& tape, Tensor x01) const = 0;
  // z: [L] or [N,L]; returns the decoder mean with the input's layout.
  virtual Tensor decode(Tape& tape, Tensor z) const = 0;
  virtual int latent_dim() const = 0;
  virtual float sigma_x() const = 0;
};

// Scales interleaved CHW bytes to a float tensor in [0,1].
Tensor image_to_tensor(const std::vector<uint8_t>& pixels, int c, int h, int w);

// z = mean + exp(logvar/2) * noise; gradients reach both heads.
Tensor reparameterize(Tape& tape, const LatentDistribution& dist, Tensor noise);

// KL(N(mean, diag exp(logvar)) || N(0, I)) in nats, summed over every element
// (so a batched distribution yields the batch total).
Tensor kl_diag_gaussian(Tape& tape, const LatentDistribution& dist);

struct ElboParts {
  Tensor total;  // recon - kl
  Tensor recon;  // sum of per-pixel Gaussian log-likelihood at scale sigma_x
  Tensor kl;
};

// Single-sample evidence lower bound for one image; noise is the externally
// seeded standard normal driving the reparameterized latent draw.
ElboParts elbo(Tape& tape, const Vae& model, Tensor x01, Tensor noise);

// Importance-weighted NLL bound with k latent draws, log-sum-exp guarded.
// k=1 reduces to the negative single-sample ELBO estimate.
double nll_estimate(const Vae& model, Tensor x01, int k, uint64_t seed);
// Same, with caller-supplied standard-normal draws (one tensor per sample).
double nll_estimate_with_noise(const Vae& model, Tensor x01,
                               const std::vector<Tensor>& noises);

// Convolutional VAE: three 5x5 stride-2 conv layers with 32/64/128 filters
// and ReLU, dense mean/logvar heads, and a mirror-image deconv decoder whose
// final activation is a sigmoid, keeping decoder means inside [0,1].
class ConvVae : public Vae {
 public:
  ConvVae(int c, int h, int w, int latent_dim, float sigma_x, uint64_t seed);

  ConvVae(const ConvVae&) = delete;  // copies would share weight buffers
  ConvVae& operator=(const ConvVae&) = delete;
  ConvVae(ConvVae&&) = default;
  ConvVae& operator=(ConvVae&&) = default;

  LatentDistribution encode01(Tape& tape, Tensor x01) const override;
  Tensor decode(Tape& tape, Tensor z) const override;
  int latent_dim() const override { return latent_dim_; }
  float sigma_x() const override { return sigma_x_; }

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  int c_, h_, w_;
  int latent_dim_;
  float sigma_x_;
  int e1h_, e1w_, e2h_, e2w_, e3h_, e3w_;  // conv stack output sizes
  int flat_;
  ParamSet params_;
};

struct VaeTrainConfig {
  int epochs = 10;
  int batch = 32;
  float lr = 1e-3f;
  uint64_t seed = 1;
};

struct VaeEpochStats {
  int epoch = 0;
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

// Minibatch ascent on the ELBO with Adam; deterministic for a fixed seed.
// Throws NumericError with the epoch in the message if the ELBO goes
// non-finite.
std::vector<VaeEpochStats> train_vae(ConvVae& model, const Dataset& data,
                                     const VaeTrainConfig& cfg);

// CSV: epoch, elbo, recon, kl.
void save_loss_trace(const std::string& path, const std::vector<VaeEpochStats>& trace);

void save_vae(const std::string& path, const ConvVae& model);
ConvVae load_vae(const std::string& path);

}  // namespace oodcp
