#include "oodcp/bnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "oodcp/common.hpp"

namespace oodcp {

namespace {

float softplusf(float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); }

}  // namespace

float ttc_from_profile(const CollisionProfile& profile, float dt, float p_thresh) {
  if (!(dt > 0.0f)) throw ContractError("ttc_from_profile needs dt > 0");
  if (!(p_thresh > 0.0f && p_thresh < 1.0f))
    throw ContractError("ttc_from_profile needs p_thresh in (0,1)");
  for (int i = 0; i < kHorizon; ++i)
    if (profile.probs[static_cast<size_t>(i)] > p_thresh) return dt * static_cast<float>(i + 1);
  return dt * static_cast<float>(kHorizon + 1);
}

RiskEstimate risk_from_ttcs(std::vector<float> ttcs, int n_z, int n_w) {
  if (ttcs.empty()) throw ContractError("risk_from_ttcs needs at least one sample");
  RiskEstimate est;
  est.n_z = n_z;
  est.n_w = n_w;
  double s1 = 0.0, s2 = 0.0;
  int censored = 0;
  for (float t : ttcs) {
    s1 += t;
    s2 += static_cast<double>(t) * t;
    if (t >= kTtcSentinel) ++censored;
  }
  const double n = static_cast<double>(ttcs.size());
  const double mu = s1 / n;
  est.mu = static_cast<float>(mu);
  est.sigma = static_cast<float>(std::sqrt(std::max(0.0, s2 / n - mu * mu)));
  est.censored_fraction = static_cast<float>(censored / n);
  est.ttc_samples = std::move(ttcs);
  return est;
}

PredictorShape::PredictorShape(int c_in, int h_in, int w_in) : c(c_in), h(h_in), w(w_in) {
  if (c < 1 || h < 1 || w < 1) throw ConfigError("predictor dims must be positive");
  strides = (w >= 64) ? std::array<int, 4>{4, 2, 2, 2} : std::array<int, 4>{2, 2, 1, 1};
  int ch = h, cw = w;
  for (int i = 0; i < 4; ++i) {
    ch = conv_output_size(ch, kernels[static_cast<size_t>(i)], strides[static_cast<size_t>(i)],
                          paddings[static_cast<size_t>(i)]);
    cw = conv_output_size(cw, kernels[static_cast<size_t>(i)], strides[static_cast<size_t>(i)],
                          paddings[static_cast<size_t>(i)]);
    if (ch < 1 || cw < 1)
      throw ConfigError("observation " + std::to_string(h) + "x" + std::to_string(w) +
                        " is too small for the conv stack");
    oh[static_cast<size_t>(i)] = ch;
    ow[static_cast<size_t>(i)] = cw;
  }
  flat = channels[3] * oh[3] * ow[3];
}

ParamSet init_predictor_params(const PredictorShape& s, uint64_t seed) {
  ParamSet p;
  auto he = [](int fan_in) { return std::sqrt(2.0f / static_cast<float>(fan_in)); };
  int layer = 0;
  auto rng_for = [&]() { return Rng(derive_seed(seed, 0xB1, static_cast<uint64_t>(layer++))); };

  int in_ch = s.c;
  for (int i = 0; i < 4; ++i) {
    Rng rng = rng_for();
    const int f = s.channels[static_cast<size_t>(i)];
    const int k = s.kernels[static_cast<size_t>(i)];
    const std::string base = "conv" + std::to_string(i + 1);
    p.add(base + ".k", Tensor::randn({f, in_ch, k, k}, rng, he(in_ch * k * k)));
    p.add(base + ".b", Tensor::zeros({f}));
    in_ch = f;
  }
  {
    Rng rng = rng_for();
    p.add("fc.w", Tensor::randn({s.flat, s.fc_units}, rng, he(s.flat)));
    p.add("fc.b", Tensor::zeros({s.fc_units}));
  }
  {
    Rng rng = rng_for();
    const float sc = std::sqrt(1.0f / static_cast<float>(s.fc_units));
    p.add("h0.w", Tensor::randn({s.fc_units, s.hidden}, rng, sc));
    p.add("h0.b", Tensor::zeros({s.hidden}));
    p.add("c0.w", Tensor::randn({s.fc_units, s.hidden}, rng, sc));
    p.add("c0.b", Tensor::zeros({s.hidden}));
  }
  {
    Rng rng = rng_for();
    p.add("lstm.wx", Tensor::randn({1, 4 * s.hidden}, rng, 1.0f));
    p.add("lstm.wh",
          Tensor::randn({s.hidden, 4 * s.hidden}, rng,
                        std::sqrt(1.0f / static_cast<float>(s.hidden))));
    // Forget-gate bias starts at one so early training does not wipe the
    // image-derived state. Gate order: input, forget, candidate, output.
    Tensor b = Tensor::zeros({4 * s.hidden});
    for (int i = s.hidden; i < 2 * s.hidden; ++i) b.raw()[i] = 1.0f;
    p.add("lstm.b", b);
  }
  {
    Rng rng = rng_for();
    p.add("head1.w", Tensor::randn({s.hidden, s.head_units}, rng, he(s.hidden)));
    p.add("head1.b", Tensor::zeros({s.head_units}));
    p.add("head2.w", Tensor::randn({s.head_units, s.head_units}, rng, he(s.head_units)));
    p.add("head2.b", Tensor::zeros({s.head_units}));
    p.add("out.w", Tensor::randn({s.head_units, 1}, rng, he(s.head_units)));
    p.add("out.b", Tensor::zeros({1}));
  }
  return p;
}

const std::vector<std::string>& dropout_gate_names() {
  static const std::vector<std::string> names = {"drop.conv1", "drop.conv2", "drop.conv3",
                                                 "drop.conv4", "drop.fc",    "drop.head1",
                                                 "drop.head2"};
  return names;
}

ParamSet init_dropout_logits(float p0) {
  if (!(p0 > 0.0f && p0 < 1.0f)) throw ConfigError("dropout p0 must be in (0,1)");
  const float logit = std::log(p0 / (1.0f - p0));
  ParamSet set;
  for (const auto& name : dropout_gate_names()) set.add(name, Tensor::full({1}, logit));
  return set;
}

namespace {

// Uniform noise for one gate draw; when shared, one row is tiled across the
// batch so every row sees the same gate (a single weight sample).
Tensor gate_noise(const Shape& act_shape, const DropoutPlan& plan) {
  Tensor u = Tensor::zeros(act_shape);
  int64_t row = 1;
  for (size_t i = 1; i < act_shape.size(); ++i) row *= act_shape[i];
  const int64_t rows = act_shape.empty() ? 1 : act_shape[0];
  if (plan.shared_across_batch) {
    std::vector<float> one(static_cast<size_t>(row));
    for (auto& v : one) v = static_cast<float>(plan.rng->uniform(1e-6, 1.0 - 1e-6));
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(u.raw() + r * row, one.data(), sizeof(float) * static_cast<size_t>(row));
  } else {
    for (int64_t i = 0; i < u.size(); ++i)
      u.raw()[i] = static_cast<float>(plan.rng->uniform(1e-6, 1.0 - 1e-6));
  }
  return u;
}

}  // namespace

std::vector<Tensor> predictor_forward(Tape& tape, const PredictorShape& s, const ParamSet& w,
                                      Tensor images, Tensor actions, const DropoutPlan* dropout) {
  if (images.rank() != 3 && images.rank() != 4)
    throw DimensionError("predictor images must be [C,H,W] or [N,C,H,W], got " +
                         shape_str(images.shape()));
  const bool batched = images.rank() == 4;
  Tensor x = batched ? images : reshape(tape, images, {1, s.c, s.h, s.w});
  if (x.dim(1) != s.c || x.dim(2) != s.h || x.dim(3) != s.w)
    throw DimensionError("predictor image shape " + shape_str(images.shape()) +
                         " does not match the model");
  const int B = x.dim(0);
  Tensor acts = actions.rank() == 1 ? reshape(tape, actions, {1, kHorizon}) : actions;
  if (acts.rank() != 2 || acts.dim(0) != B || acts.dim(1) != kHorizon)
    throw DimensionError("predictor actions must be [N,16] matching the image batch");

  auto gated = [&](Tensor act, const std::string& gate) {
    if (dropout == nullptr) return act;
    Tensor u = gate_noise(act.shape(), *dropout);
    return concrete_dropout_gate(tape, act, dropout->logits->at(gate), dropout->temperature, u);
  };

  for (int i = 0; i < 4; ++i) {
    const std::string base = "conv" + std::to_string(i + 1);
    x = conv2d(tape, x, w.at(base + ".k"), s.strides[static_cast<size_t>(i)],
               s.paddings[static_cast<size_t>(i)]);
    x = relu(tape, bias_add_channel(tape, x, w.at(base + ".b")));
    x = gated(x, "drop." + base);
  }
  x = reshape(tape, x, {B, s.flat});
  x = dense_forward(tape, x, w.at("fc.w"), w.at("fc.b"), Activation::relu);
  x = gated(x, "drop.fc");

  RecurrentState state{dense_forward(tape, x, w.at("h0.w"), w.at("h0.b"), Activation::identity),
                       dense_forward(tape, x, w.at("c0.w"), w.at("c0.b"), Activation::identity)};
  LstmParams lstm{w.at("lstm.wx"), w.at("lstm.wh"), w.at("lstm.b")};

  // One gate draw per head layer, shared across the unrolled steps.
  Tensor u_head1, u_head2;
  if (dropout != nullptr) {
    u_head1 = gate_noise({B, s.head_units}, *dropout);
    u_head2 = gate_noise({B, s.head_units}, *dropout);
  }

  std::vector<Tensor> probs;
  probs.reserve(kHorizon);
  for (int t = 0; t < kHorizon; ++t) {
    Tensor x_t = slice_cols(tape, acts, t, t + 1);
    auto [h_t, next] = lstm_step(tape, x_t, state, lstm);
    state = next;
    Tensor a = dense_forward(tape, h_t, w.at("head1.w"), w.at("head1.b"), Activation::relu);
    if (dropout != nullptr)
      a = concrete_dropout_gate(tape, a, dropout->logits->at("drop.head1"),
                                dropout->temperature, u_head1);
    a = dense_forward(tape, a, w.at("head2.w"), w.at("head2.b"), Activation::relu);
    if (dropout != nullptr)
      a = concrete_dropout_gate(tape, a, dropout->logits->at("drop.head2"),
                                dropout->temperature, u_head2);
    a = dense_forward(tape, a, w.at("out.w"), w.at("out.b"), Activation::sigmoid);
    probs.push_back(batched ? a : reshape(tape, a, {1}));
  }
  return probs;
}

namespace {

ParamSet sample_bbb_weights(const ParamSet& mu, const ParamSet& rho, Rng& rng) {
  ParamSet sampled;
  for (const auto& [name, m] : mu.items()) {
    const Tensor& r = rho.at(name);
    Tensor w = Tensor::zeros(m.shape());
    for (int64_t i = 0; i < w.size(); ++i)
      w.raw()[i] = m.raw()[i] + softplusf(r.raw()[i]) * rng.normal_f();
    sampled.add(name, w);
  }
  return sampled;
}

Tensor normalized_actions(const std::array<float, 16>& actions_deg) {
  Tensor t = Tensor::zeros({kHorizon});
  for (int i = 0; i < kHorizon; ++i)
    t.raw()[i] = actions_deg[static_cast<size_t>(i)] / kMaxSteeringDeg;
  return t;
}

CollisionProfile profile_from(const std::vector<Tensor>& probs, int row) {
  CollisionProfile profile;
  for (int t = 0; t < kHorizon; ++t) {
    float p = probs[static_cast<size_t>(t)].raw()[row];
    p = std::min(std::max(p, 1e-6f), 1.0f - 1e-6f);
    profile.probs[static_cast<size_t>(t)] = p;
  }
  return profile;
}

}  // namespace

CollisionProfile predict(const Posterior& posterior, const Tensor& x01,
                         const std::array<float, 16>& actions_deg, uint64_t w_sample_seed) {
  if (!posterior.trained) throw ContractError("posterior is not trained");
  if (posterior.members.empty()) throw ContractError("posterior has no weights");
  Tape tape;
  tape.set_enabled(false);
  Tensor acts = normalized_actions(actions_deg);

  std::vector<Tensor> probs;
  switch (posterior.kind) {
    case PosteriorKind::deterministic:
      probs = predictor_forward(tape, posterior.shape, posterior.members[0], x01, acts);
      break;
    case PosteriorKind::ensemble: {
      Rng rng(derive_seed(w_sample_seed, 0xE5ULL));
      const size_t idx = rng.uniform_index(posterior.members.size());
      probs = predictor_forward(tape, posterior.shape, posterior.members[idx], x01, acts);
      break;
    }
    case PosteriorKind::concrete_dropout: {
      Rng rng(derive_seed(w_sample_seed, 0xD0ULL));
      DropoutPlan plan{&posterior.dropout_logits, posterior.dropout_temperature, &rng, true};
      probs = predictor_forward(tape, posterior.shape, posterior.members[0], x01, acts, &plan);
      break;
    }
    case PosteriorKind::bayes_backprop: {
      if (posterior.members.size() != 2)
        throw ContractError("bayes-by-backprop posterior needs mu and rho sets");
      Rng rng(derive_seed(w_sample_seed, 0xBBULL));
      ParamSet w = sample_bbb_weights(posterior.members[0], posterior.members[1], rng);
      probs = predictor_forward(tape, posterior.shape, w, x01, acts);
      break;
    }
  }
  return profile_from(probs, 0);
}

RiskEstimate mc_predict_direct(const Posterior& posterior, const Tensor& x01,
                               const std::array<float, 16>& actions_deg, int n_w, uint64_t seed) {
  if (n_w < 1) throw ContractError("mc_predict_direct needs n_w >= 1");
  std::vector<float> ttcs(static_cast<size_t>(n_w));

  // Deterministic and ensemble draws repeat a small set of distinct
  // profiles, so those are computed once and indexed per draw; the result is
  // identical to calling predict per draw.
  if (posterior.kind == PosteriorKind::deterministic) {
    const float t = ttc_from_profile(predict(posterior, x01, actions_deg, seed), kDt, 0.5f);
    std::fill(ttcs.begin(), ttcs.end(), t);
  } else if (posterior.kind == PosteriorKind::ensemble) {
    if (!posterior.trained) throw ContractError("posterior is not trained");
    std::vector<float> member_ttc(posterior.members.size(), -1.0f);
    Tape tape;
    tape.set_enabled(false);
    Tensor acts = normalized_actions(actions_deg);
    for (int i = 0; i < n_w; ++i) {
      Rng rng(derive_seed(derive_seed(seed, 0, static_cast<uint64_t>(i)), 0xE5ULL));
      const size_t idx = rng.uniform_index(posterior.members.size());
      if (member_ttc[idx] < 0.0f) {
        auto probs = predictor_forward(tape, posterior.shape, posterior.members[idx], x01, acts);
        member_ttc[idx] = ttc_from_profile(profile_from(probs, 0), kDt, 0.5f);
      }
      ttcs[static_cast<size_t>(i)] = member_ttc[idx];
    }
  } else {
    for (int i = 0; i < n_w; ++i) {
      const uint64_t draw_seed = derive_seed(seed, 0, static_cast<uint64_t>(i));
      ttcs[static_cast<size_t>(i)] =
          ttc_from_profile(predict(posterior, x01, actions_deg, draw_seed), kDt, 0.5f);
    }
  }
  return risk_from_ttcs(std::move(ttcs), 1, n_w);
}

Tensor bbb_kl(Tape& tape, const ParamSet& mu, const ParamSet& rho, float prior_sigma) {
  if (!(prior_sigma > 0.0f)) throw ConfigError("prior sigma must be positive");
  const float log_sp = std::log(prior_sigma);
  const float inv_2sp2 = 1.0f / (2.0f * prior_sigma * prior_sigma);
  Tensor total;
  bool first = true;
  for (const auto& [name, m] : mu.items()) {
    Tensor r = rho.at(name);
    Tensor sg = softplus(tape, r);
    Tensor quad = mul_scalar(tape, sum(tape, add(tape, mul(tape, sg, sg), mul(tape, m, m))),
                             inv_2sp2);
    Tensor log_sg = sum(tape, log(tape, sg));
    Tensor part = add_scalar(tape, sub(tape, quad, log_sg),
                             static_cast<float>(m.size()) * (log_sp - 0.5f));
    total = first ? part : add(tape, total, part);
    first = false;
  }
  return total;
}

namespace {

struct Prepared {
  std::vector<float> images;   // n * c*h*w, scaled to [0,1]
  std::vector<float> actions;  // n * 16, normalized to [-1,1]
  std::vector<float> labels;   // n * 16
  int n = 0;
  size_t img_size = 0;
};

Prepared prepare(const Dataset& data) {
  Prepared prep;
  prep.n = static_cast<int>(data.motions.size());
  prep.img_size = static_cast<size_t>(data.c) * data.h * data.w;
  prep.images.resize(static_cast<size_t>(prep.n) * prep.img_size);
  prep.actions.resize(static_cast<size_t>(prep.n) * kHorizon);
  prep.labels.resize(static_cast<size_t>(prep.n) * kHorizon);
  for (int i = 0; i < prep.n; ++i) {
    const Motion& m = data.motions[static_cast<size_t>(i)];
    if (m.observation.size() != prep.img_size)
      throw DimensionError("motion image size does not match dataset dims");
    float* img = prep.images.data() + static_cast<size_t>(i) * prep.img_size;
    for (size_t j = 0; j < prep.img_size; ++j)
      img[j] = static_cast<float>(m.observation[j]) / 255.0f;
    for (int t = 0; t < kHorizon; ++t) {
      prep.actions[static_cast<size_t>(i) * kHorizon + t] =
          m.actions[static_cast<size_t>(t)] / kMaxSteeringDeg;
      prep.labels[static_cast<size_t>(i) * kHorizon + t] =
          m.labels[static_cast<size_t>(t)] ? 1.0f : 0.0f;
    }
  }
  return prep;
}

// Concrete dropout regularizer: each gate couples to the weights its mask
// drops rows of (the next layer), plus the gate entropy scaled by the number
// of gated units.
struct GateCoupling {
  const char* gate;
  std::vector<const char*> next_weights;
  int units;
};

std::vector<GateCoupling> gate_couplings(const PredictorShape& s) {
  return {
      {"drop.conv1", {"conv2.k"}, s.channels[0] * s.oh[0] * s.ow[0]},
      {"drop.conv2", {"conv3.k"}, s.channels[1] * s.oh[1] * s.ow[1]},
      {"drop.conv3", {"conv4.k"}, s.channels[2] * s.oh[2] * s.ow[2]},
      {"drop.conv4", {"fc.w"}, s.flat},
      {"drop.fc", {"h0.w", "c0.w"}, s.fc_units},
      {"drop.head1", {"head2.w"}, s.head_units},
      {"drop.head2", {"out.w"}, s.head_units},
  };
}

Tensor dropout_regularizer(Tape& tape, const PredictorShape& s, const ParamSet& w,
                           const ParamSet& logits, float weight_decay) {
  Tensor total;
  bool first = true;
  for (const auto& gc : gate_couplings(s)) {
    Tensor p = clamp(tape, sigmoid(tape, logits.at(gc.gate)), 1e-6f, 1.0f - 1e-6f);
    Tensor keep = add_scalar(tape, mul_scalar(tape, p, -1.0f), 1.0f);  // 1 - p
    Tensor weight_sq;
    bool w_first = true;
    for (const char* name : gc.next_weights) {
      Tensor wt = w.at(name);
      Tensor sq = sum(tape, mul(tape, wt, wt));
      weight_sq = w_first ? sq : add(tape, weight_sq, sq);
      w_first = false;
    }
    Tensor wterm = mul_scalar(tape, mul(tape, keep, weight_sq), weight_decay);
    Tensor entropy = add(tape, mul(tape, p, log(tape, p)), mul(tape, keep, log(tape, keep)));
    Tensor part = add(tape, wterm, mul_scalar(tape, entropy, static_cast<float>(gc.units)));
    total = first ? part : add(tape, total, part);
    first = false;
  }
  return total;
}

}  // namespace

TrainResult train_posterior(PosteriorKind kind, const Dataset& data, const TrainHyper& hyper) {
  if (data.motions.empty()) throw ContractError("train_posterior needs a non-empty dataset");
  if (hyper.epochs < 1 || hyper.batch < 1)
    throw ConfigError("epochs and batch must be positive");
  const int n_members = kind == PosteriorKind::ensemble ? hyper.ensemble_m : 1;
  if (n_members < 1) throw ConfigError("ensemble needs at least one member");

  PredictorShape shape(data.c, data.h, data.w);
  const Prepared prep = prepare(data);
  const int n = prep.n;

  TrainResult result;
  result.posterior.kind = kind;
  result.posterior.shape = shape;
  result.posterior.dropout_temperature = hyper.dropout_temperature;
  result.posterior.prior_sigma = hyper.prior_sigma;
  result.posterior.members.resize(
      kind == PosteriorKind::bayes_backprop ? 2 : static_cast<size_t>(n_members));
  result.traces.resize(static_cast<size_t>(n_members));

  if (kind == PosteriorKind::concrete_dropout)
    result.posterior.dropout_logits = init_dropout_logits(hyper.dropout_p0);

  auto train_member = [&](std::size_t mi) {
    const int m = static_cast<int>(mi);
    const uint64_t mseed = derive_seed(hyper.seed, 100, static_cast<uint64_t>(m));
    ParamSet weights = init_predictor_params(shape, mseed);

    // The set Adam updates; dropout logits and BBB rho ride along by handle.
    ParamSet opt;
    for (auto& [name, t] : weights.items()) opt.add(name, t);

    ParamSet mu, rho;
    if (kind == PosteriorKind::bayes_backprop) {
      mu = weights;
      const float rho0 = std::log(std::exp(hyper.bbb_init_sigma) - 1.0f);
      for (const auto& [name, t] : mu.items()) rho.add(name, Tensor::full(t.shape(), rho0));
      for (auto& [name, t] : rho.items()) opt.add("rho." + name, t);
    }
    if (kind == PosteriorKind::concrete_dropout)
      for (auto& [name, t] : result.posterior.dropout_logits.items()) opt.add(name, t);

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    if (hyper.bootstrap) {
      Rng boot(derive_seed(hyper.seed, 200, static_cast<uint64_t>(m)));
      for (auto& idx : order) idx = static_cast<int>(boot.uniform_index(static_cast<size_t>(n)));
    }
    Rng shuffle_rng(derive_seed(hyper.seed, 300, static_cast<uint64_t>(m)));
    Rng noise_rng(derive_seed(hyper.seed, 400, static_cast<uint64_t>(m)));

    Tape tape;
    AdamState adam;
    AdamConfig acfg;
    acfg.lr = hyper.lr;
    const size_t img = prep.img_size;

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
      for (int i = n - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[shuffle_rng.uniform_index(static_cast<size_t>(i) + 1)]);

      double bce_acc = 0.0, extra_acc = 0.0;
      for (int start = 0; start < n; start += hyper.batch) {
        const int b = std::min(hyper.batch, n - start);
        Tensor xb = Tensor::zeros({b, data.c, data.h, data.w});
        Tensor ab = Tensor::zeros({b, kHorizon});
        Tensor lb = Tensor::zeros({b, kHorizon});
        for (int r = 0; r < b; ++r) {
          const size_t src = static_cast<size_t>(order[static_cast<size_t>(start + r)]);
          std::memcpy(xb.raw() + static_cast<size_t>(r) * img, prep.images.data() + src * img,
                      sizeof(float) * img);
          std::memcpy(ab.raw() + static_cast<size_t>(r) * kHorizon,
                      prep.actions.data() + src * kHorizon, sizeof(float) * kHorizon);
          std::memcpy(lb.raw() + static_cast<size_t>(r) * kHorizon,
                      prep.labels.data() + src * kHorizon, sizeof(float) * kHorizon);
        }

        std::vector<Tensor> probs;
        Tensor extra;
        bool has_extra = false;
        if (kind == PosteriorKind::concrete_dropout) {
          DropoutPlan plan{&result.posterior.dropout_logits, hyper.dropout_temperature,
                           &noise_rng, false};
          probs = predictor_forward(tape, shape, weights, xb, ab, &plan);
          extra = mul_scalar(tape,
                             dropout_regularizer(tape, shape, weights,
                                                 result.posterior.dropout_logits,
                                                 hyper.dropout_weight_decay),
                             1.0f / static_cast<float>(n));
          has_extra = true;
        } else if (kind == PosteriorKind::bayes_backprop) {
          ParamSet sampled;
          for (const auto& [name, mt] : mu.items()) {
            Tensor eps = Tensor::randn(mt.shape(), noise_rng);
            Tensor wt = add(tape, mt, mul(tape, softplus(tape, rho.at(name)), eps));
            sampled.add(name, wt);
          }
          probs = predictor_forward(tape, shape, sampled, xb, ab);
          extra = mul_scalar(tape, bbb_kl(tape, mu, rho, hyper.prior_sigma),
                             1.0f / static_cast<float>(n));
          has_extra = true;
        } else {
          probs = predictor_forward(tape, shape, weights, xb, ab);
        }

        Tensor bce;
        for (int t = 0; t < kHorizon; ++t) {
          Tensor step = bce_loss(tape, probs[static_cast<size_t>(t)],
                                 slice_cols(tape, lb, t, t + 1));
          bce = t == 0 ? step : add(tape, bce, step);
        }
        bce = mul_scalar(tape, bce, 1.0f / static_cast<float>(kHorizon));
        Tensor loss = has_extra ? add(tape, bce, extra) : bce;

        const double bce_item = bce.item();
        const double extra_item = has_extra ? extra.item() : 0.0;
        if (!std::isfinite(bce_item) || !std::isfinite(extra_item))
          throw NumericError("posterior training diverged at epoch " + std::to_string(epoch) +
                             " (member " + std::to_string(m) + ", bce " +
                             std::to_string(bce_item) + ")");
        bce_acc += bce_item * b;
        extra_acc += extra_item * b;

        backward(tape, loss);
        adam_step(opt, adam, acfg);
        opt.zero_grad();
      }
      result.traces[static_cast<size_t>(m)].push_back(
          {epoch, bce_acc / n, extra_acc / n});
    }

    if (kind == PosteriorKind::bayes_backprop) {
      result.posterior.members[0] = mu;
      result.posterior.members[1] = rho;
    } else {
      result.posterior.members[static_cast<size_t>(m)] = weights;
    }
  };

  parallel_for(static_cast<std::size_t>(n_members), train_member);
  result.posterior.trained = true;
  return result;
}

void save_posterior(const std::string& path, const Posterior& posterior) {
  std::vector<std::pair<std::string, Tensor>> records;
  Tensor meta = Tensor::zeros({8});
  meta.raw()[0] = static_cast<float>(posterior.kind);
  meta.raw()[1] = static_cast<float>(posterior.members.size());
  meta.raw()[2] = static_cast<float>(posterior.shape.c);
  meta.raw()[3] = static_cast<float>(posterior.shape.h);
  meta.raw()[4] = static_cast<float>(posterior.shape.w);
  meta.raw()[5] = posterior.dropout_temperature;
  meta.raw()[6] = posterior.prior_sigma;
  meta.raw()[7] = posterior.trained ? 1.0f : 0.0f;
  records.emplace_back("meta", meta);
  for (size_t i = 0; i < posterior.members.size(); ++i)
    for (const auto& [name, t] : posterior.members[i].items())
      records.emplace_back("m" + std::to_string(i) + "." + name, t);
  for (const auto& [name, t] : posterior.dropout_logits.items()) records.emplace_back(name, t);
  save_tensors(path, records);
}

Posterior load_posterior(const std::string& path) {
  auto records = load_tensors(path);
  const Tensor* meta = nullptr;
  for (const auto& [name, t] : records)
    if (name == "meta") meta = &t;
  if (meta == nullptr || meta->size() != 8)
    throw IoError("posterior file has no meta record: " + path);

  const int kind_i = static_cast<int>(meta->raw()[0]);
  if (kind_i < 0 || kind_i > 3) throw IoError("posterior file has unknown kind: " + path);
  const int n_members = static_cast<int>(meta->raw()[1]);
  const int c = static_cast<int>(meta->raw()[2]);
  const int h = static_cast<int>(meta->raw()[3]);
  const int w = static_cast<int>(meta->raw()[4]);
  if (n_members < 1 || c < 1 || h < 1 || w < 1)
    throw IoError("posterior file has invalid meta values: " + path);

  Posterior p;
  p.kind = static_cast<PosteriorKind>(kind_i);
  p.shape = PredictorShape(c, h, w);
  p.dropout_temperature = meta->raw()[5];
  p.prior_sigma = meta->raw()[6];
  p.trained = meta->raw()[7] != 0.0f;

  auto fill = [&](ParamSet& dst, const std::string& prefix) {
    for (auto& [name, t] : dst.items()) {
      const std::string want = prefix + name;
      bool found = false;
      for (const auto& [rname, rt] : records) {
        if (rname != want) continue;
        if (rt.shape() != t.shape())
          throw DimensionError("posterior record " + want + " has wrong shape");
        std::memcpy(t.raw(), rt.raw(), sizeof(float) * static_cast<size_t>(t.size()));
        found = true;
        break;
      }
      if (!found) throw IoError("posterior file is missing record " + want);
    }
  };

  p.members.resize(static_cast<size_t>(n_members));
  for (int i = 0; i < n_members; ++i) {
    p.members[static_cast<size_t>(i)] = init_predictor_params(p.shape, 0);
    fill(p.members[static_cast<size_t>(i)], "m" + std::to_string(i) + ".");
  }
  if (p.kind == PosteriorKind::concrete_dropout) {
    p.dropout_logits = init_dropout_logits(0.1f);
    fill(p.dropout_logits, "");
  }
  if (p.kind == PosteriorKind::bayes_backprop && n_members != 2)
    throw IoError("bayes-by-backprop posterior file must hold mu and rho: " + path);
  return p;
}

}  // namespace oodcp
