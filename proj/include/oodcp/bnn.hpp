#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "oodcp/nn.hpp"
#include "oodcp/sim.hpp"
#include "oodcp/tensor.hpp"

namespace oodcp {

// Right-censoring sentinel: one step beyond the prediction horizon.
constexpr float kTtcSentinel = (kHorizon + 1) * kDt;

struct CollisionProfile {
  std::array<float, kHorizon> probs{};
};

// dt * (1 + index of first step with prob > p_thresh); sentinel if none.
float ttc_from_profile(const CollisionProfile& profile, float dt, float p_thresh);

struct RiskEstimate {
  std::vector<float> ttc_samples;
  float mu = 0.0f;
  float sigma = 0.0f;  // population std over the samples
  int n_z = 1;
  int n_w = 1;
  float censored_fraction = 0.0f;  // fraction of samples at the sentinel
};

RiskEstimate risk_from_ttcs(std::vector<float> ttcs, int n_z, int n_w);

// Fixed predictor architecture: four convs, a dense image head, an LSTM over
// the action steps, two dense heads, and a per-step sigmoid output. Wide
// inputs use the full stride plan 4/2/2/2; small inputs shrink it to 2/2/1/1
// so the deep layers keep a usable spatial extent.
struct PredictorShape {
  int c = 0, h = 0, w = 0;
  std::array<int, 4> channels{8, 16, 16, 16};
  std::array<int, 4> kernels{8, 4, 3, 3};
  std::array<int, 4> strides{};
  std::array<int, 4> paddings{3, 1, 1, 1};
  std::array<int, 4> oh{}, ow{};
  int flat = 0;
  int fc_units = 256;
  int hidden = 16;
  int head_units = 16;

  PredictorShape() = default;
  PredictorShape(int c, int h, int w);
};

ParamSet init_predictor_params(const PredictorShape& shape, uint64_t seed);

// Names of the per-layer concrete dropout gates, in forward order.
const std::vector<std::string>& dropout_gate_names();
ParamSet init_dropout_logits(float p0);

struct DropoutPlan {
  const ParamSet* logits = nullptr;
  float temperature = 0.1f;
  Rng* rng = nullptr;
  // One gate draw shared by every batch row (one weight sample for a batch),
  // instead of an independent draw per row.
  bool shared_across_batch = false;
};

// images [B,c,h,w] or [c,h,w]; actions [B,16] or [16], already normalized to
// [-1,1]. Returns 16 per-step probability tensors, each [B,1] (or [1]).
std::vector<Tensor> predictor_forward(Tape& tape, const PredictorShape& shape, const ParamSet& w,
                                      Tensor images, Tensor actions,
                                      const DropoutPlan* dropout = nullptr);

enum class PosteriorKind { deterministic, ensemble, concrete_dropout, bayes_backprop };

// members layout by kind: deterministic {w}; ensemble {w_0..w_{M-1}};
// concrete_dropout {w} plus dropout_logits; bayes_backprop {mu, rho}.
struct Posterior {
  PosteriorKind kind = PosteriorKind::deterministic;
  PredictorShape shape;
  std::vector<ParamSet> members;
  ParamSet dropout_logits;
  float dropout_temperature = 0.1f;
  float prior_sigma = 1.0f;
  bool trained = false;
};

// One draw of the predictive integrand: deterministic ignores the seed;
// ensemble picks one member; dropout samples gates; BBB samples weights.
CollisionProfile predict(const Posterior& posterior, const Tensor& x01,
                         const std::array<float, 16>& actions_deg, uint64_t w_sample_seed);

// n_w predict draws -> TTC sample statistics. Seeds are derived per draw, so
// results are independent of evaluation order.
RiskEstimate mc_predict_direct(const Posterior& posterior, const Tensor& x01,
                               const std::array<float, 16>& actions_deg, int n_w, uint64_t seed);

struct TrainHyper {
  int epochs = 20;
  int batch = 64;
  float lr = 1e-3f;
  int ensemble_m = 5;
  bool bootstrap = false;
  float prior_sigma = 1.0f;        // BBB prior std
  float bbb_init_sigma = 0.05f;    // initial posterior std
  float dropout_p0 = 0.1f;
  float dropout_temperature = 0.1f;
  float dropout_weight_decay = 1e-4f;
  uint64_t seed = 1;
};

struct TrainEpochStats {
  int epoch = 0;
  double bce = 0.0;    // mean data term over the epoch
  double extra = 0.0;  // mean regularizer / KL weight term (zero when unused)
};

struct TrainResult {
  Posterior posterior;
  std::vector<std::vector<TrainEpochStats>> traces;  // one per trained member
};

TrainResult train_posterior(PosteriorKind kind, const Dataset& data, const TrainHyper& hyper);

// KL(q(w) || N(0, prior_sigma^2 I)) for the factorized Gaussian posterior
// with std = softplus(rho), summed over all parameters. Recorded on tape.
Tensor bbb_kl(Tape& tape, const ParamSet& mu, const ParamSet& rho, float prior_sigma);

void save_posterior(const std::string& path, const Posterior& posterior);
Posterior load_posterior(const std::string& path);

}  // namespace oodcp
