#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "oodcp/pipeline.hpp"
#include "oodcp/sim.hpp"

using namespace oodcp;

namespace {

std::array<float, 16> zero_actions() { return {}; }

ConvVae tiny_vae() { return ConvVae(1, 10, 12, 4, 0.1f, 33); }

Tensor random_image(uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({1, 10, 12}, rng, 0.0f, 1.0f);
}

// All-zero weights except the output bias, so each member emits one flat
// probability profile. A single bias makes a deterministic posterior.
Posterior flat_profile_ensemble(const PredictorShape& s, const std::vector<float>& out_biases) {
  Posterior post;
  post.kind = out_biases.size() == 1 ? PosteriorKind::deterministic : PosteriorKind::ensemble;
  post.shape = s;
  for (float b : out_biases) {
    ParamSet w = init_predictor_params(s, 0);
    for (auto& [name, t] : w.items())
      std::fill(t.raw(), t.raw() + t.size(), 0.0f);
    w.at("out.b").raw()[0] = b;
    post.members.push_back(std::move(w));
  }
  post.trained = true;
  return post;
}

Posterior random_weight_posterior(PosteriorKind kind, const PredictorShape& s,
                                  std::vector<uint64_t> member_seeds) {
  Posterior post;
  post.kind = kind;
  post.shape = s;
  for (uint64_t ms : member_seeds) post.members.push_back(init_predictor_params(s, ms));
  post.trained = true;
  return post;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int i = 0; i < a.size(); ++i)
    if (a.raw()[i] != b.raw()[i]) return false;
  return true;
}

Tensor decode_mean01(const Vae& vae, const Tensor& x01) {
  Tape tape;
  tape.set_enabled(false);
  LatentDistribution dist = vae.encode01(tape, x01);
  Tensor noise = Tensor::zeros({dist.mean.shape()[0]});
  return clamp(tape, vae.decode(tape, reparameterize(tape, dist, noise)), 0.0f, 1.0f);
}

std::vector<double> average_ranks(const std::vector<float>& v) {
  const size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Rank correlation with average ranks for ties; constant inputs map to 0.
double spearman(const std::vector<float>& a, const std::vector<float>& b) {
  REQUIRE(a.size() == b.size());
  REQUIRE(a.size() >= 2);
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

double mean_of(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("label-derived ttc") {
  std::array<uint8_t, 16> labels{};
  CHECK(true_ttc_from_labels(labels, kDt) == kTtcSentinel);

  labels[0] = 1;
  CHECK(true_ttc_from_labels(labels, kDt) == doctest::Approx(0.125).epsilon(1e-7));

  labels[0] = 0;
  for (int t = 4; t < 16; ++t) labels[static_cast<size_t>(t)] = 1;
  CHECK(true_ttc_from_labels(labels, kDt) == doctest::Approx(0.625).epsilon(1e-7));

  CHECK(true_ttc_from_labels(labels, 0.25f) == doctest::Approx(1.25).epsilon(1e-7));
  CHECK_THROWS_AS(true_ttc_from_labels(labels, 0.0f), ContractError);
}

TEST_CASE("single-decode projection collapses onto direct prediction") {
  ConvVae vae = tiny_vae();
  Tensor x = random_image(71);
  std::array<float, 16> acts = zero_actions();
  const PredictorShape shape(1, 10, 12);

  std::vector<Tensor> decodes = project_latent_decodes(vae, x, 1, 4001);
  REQUIRE(decodes.size() == 1);
  CHECK(tensors_equal(decodes[0], decode_mean01(vae, x)));
  for (int i = 0; i < decodes[0].size(); ++i) {
    CHECK(decodes[0].raw()[i] >= 0.0f);
    CHECK(decodes[0].raw()[i] <= 1.0f);
  }

  // Deterministic weights: every pooled sample equals the direct one and the
  // spread is exactly zero.
  Posterior det = random_weight_posterior(PosteriorKind::deterministic, shape, {5});
  RiskEstimate proj = project_and_predict(vae, det, x, acts, 1, 7, 9001);
  RiskEstimate direct = mc_predict_direct(det, decodes[0], acts, 7, 9001);
  REQUIRE(proj.ttc_samples.size() == 7);
  REQUIRE(direct.ttc_samples.size() == 7);
  for (size_t i = 0; i < 7; ++i) CHECK(proj.ttc_samples[i] == direct.ttc_samples[i]);
  CHECK(proj.mu == direct.mu);
  CHECK(proj.sigma == 0.0f);

  // Stochastic weights keep the identity because cell (0, w) reuses the
  // direct per-draw seeds.
  Posterior two = flat_profile_ensemble(shape, {1.0f, -1.0f});
  RiskEstimate proj2 = project_and_predict(vae, two, x, acts, 1, 50, 777);
  RiskEstimate direct2 = mc_predict_direct(two, decodes[0], acts, 50, 777);
  REQUIRE(proj2.ttc_samples.size() == 50);
  for (size_t i = 0; i < 50; ++i) CHECK(proj2.ttc_samples[i] == direct2.ttc_samples[i]);
  CHECK(proj2.mu == direct2.mu);
  CHECK(proj2.sigma == direct2.sigma);
}

TEST_CASE("pooled sample layout, seeding, and repeatability") {
  ConvVae vae = tiny_vae();
  Tensor x = random_image(72);
  std::array<float, 16> acts{};
  for (int t = 0; t < 16; ++t) acts[static_cast<size_t>(t)] = (t % 2 == 0) ? 12.0f : -9.0f;
  const PredictorShape shape(1, 10, 12);
  Posterior two = flat_profile_ensemble(shape, {1.0f, -1.0f});

  std::vector<Tensor> decodes = project_latent_decodes(vae, x, 2, 600);
  REQUIRE(decodes.size() == 2);
  CHECK_FALSE(tensors_equal(decodes[0], decodes[1]));

  RiskEstimate est = predict_over_decodes(two, decodes, acts, 3, 600);
  REQUIRE(est.ttc_samples.size() == 6);
  CHECK(est.n_z == 2);
  CHECK(est.n_w == 3);

  // Sample (zi, wi) sits at zi * n_w + wi and uses the derived cell seed.
  for (int zi = 0; zi < 2; ++zi)
    for (int wi = 0; wi < 3; ++wi) {
      const uint64_t cell =
          derive_seed(600, static_cast<uint64_t>(zi), static_cast<uint64_t>(wi));
      const float direct = ttc_from_profile(
          predict(two, decodes[static_cast<size_t>(zi)], acts, cell), kDt,
          kCollisionProbThreshold);
      CHECK(est.ttc_samples[static_cast<size_t>(zi * 3 + wi)] == direct);
    }

  // Statistics are recomputable from the pooled samples.
  double mean = 0;
  for (float t : est.ttc_samples) mean += t;
  mean /= 6.0;
  double var = 0;
  for (float t : est.ttc_samples) var += (t - mean) * (t - mean);
  var /= 6.0;
  CHECK(est.mu == doctest::Approx(mean).epsilon(1e-6));
  CHECK(est.sigma == doctest::Approx(std::sqrt(var)).epsilon(1e-6));
  int censored = 0;
  for (float t : est.ttc_samples)
    if (t == kTtcSentinel) ++censored;
  CHECK(est.censored_fraction == doctest::Approx(censored / 6.0).epsilon(1e-7));
  for (float t : est.ttc_samples) {
    CHECK(t > 0.0f);
    CHECK(t <= kTtcSentinel);
  }

  // A fixed seed reproduces the estimate bit for bit; a new seed moves it.
  RiskEstimate again = project_and_predict(vae, two, x, acts, 4, 5, 31337);
  RiskEstimate same = project_and_predict(vae, two, x, acts, 4, 5, 31337);
  REQUIRE(again.ttc_samples.size() == 20);
  REQUIRE(same.ttc_samples.size() == 20);
  for (size_t i = 0; i < 20; ++i) CHECK(again.ttc_samples[i] == same.ttc_samples[i]);
  CHECK(again.mu == same.mu);
  CHECK(again.sigma == same.sigma);

  RiskEstimate other = project_and_predict(vae, two, x, acts, 4, 5, 31338);
  bool any_diff = false;
  for (size_t i = 0; i < 20; ++i) any_diff = any_diff || other.ttc_samples[i] != again.ttc_samples[i];
  CHECK(any_diff);
}

TEST_CASE("pooled variance splits into within- and between-decode parts") {
  ConvVae vae = tiny_vae();
  Tensor x = random_image(73);
  std::array<float, 16> acts = zero_actions();
  const PredictorShape shape(1, 10, 12);
  Posterior two = flat_profile_ensemble(shape, {0.3f, -0.6f});

  const int n_z = 5, n_w = 6;
  std::vector<Tensor> decodes = project_latent_decodes(vae, x, n_z, 880);
  RiskEstimate est = predict_over_decodes(two, decodes, acts, n_w, 880);
  REQUIRE(est.ttc_samples.size() == static_cast<size_t>(n_z * n_w));

  double within = 0;
  std::vector<double> group_means;
  for (int zi = 0; zi < n_z; ++zi) {
    double gm = 0;
    for (int wi = 0; wi < n_w; ++wi) gm += est.ttc_samples[static_cast<size_t>(zi * n_w + wi)];
    gm /= n_w;
    group_means.push_back(gm);
    double gv = 0;
    for (int wi = 0; wi < n_w; ++wi) {
      const double d = est.ttc_samples[static_cast<size_t>(zi * n_w + wi)] - gm;
      gv += d * d;
    }
    within += gv / n_w;
  }
  within /= n_z;
  double grand = 0;
  for (double gm : group_means) grand += gm;
  grand /= n_z;
  double between = 0;
  for (double gm : group_means) between += (gm - grand) * (gm - grand);
  between /= n_z;

  const double pooled = static_cast<double>(est.sigma) * est.sigma;
  CHECK(pooled == doctest::Approx(within + between).epsilon(1e-5));
  CHECK(pooled + 1e-9 >= within);
}

TEST_CASE("projection input validation") {
  ConvVae vae = tiny_vae();
  Tensor x = random_image(74);
  std::array<float, 16> acts = zero_actions();
  const PredictorShape shape(1, 10, 12);
  Posterior det = random_weight_posterior(PosteriorKind::deterministic, shape, {5});

  CHECK_THROWS_AS(project_latent_decodes(vae, x, 0, 1), ContractError);
  CHECK_THROWS_AS(project_and_predict(vae, det, x, acts, 1, 0, 1), ContractError);

  Rng rng(9);
  Tensor batch = Tensor::uniform({2, 1, 10, 12}, rng, 0.0f, 1.0f);
  CHECK_THROWS_AS(project_latent_decodes(vae, batch, 2, 1), DimensionError);

  Posterior untrained = det;
  untrained.trained = false;
  CHECK_THROWS_AS(project_and_predict(vae, untrained, x, acts, 1, 1, 1), ContractError);

  CHECK_THROWS_AS(predict_over_decodes(det, {}, acts, 1, 1), ContractError);

  // Decoder output shaped for a different predictor input.
  Posterior small = random_weight_posterior(PosteriorKind::deterministic,
                                            PredictorShape(1, 8, 8), {5});
  CHECK_THROWS_AS(project_and_predict(vae, small, x, acts, 1, 1, 1), DimensionError);
}

TEST_CASE("reconstruction gallery layout and seeding") {
  ConvVae vae = tiny_vae();
  std::vector<Tensor> images = {random_image(75), random_image(76), random_image(77)};

  std::vector<Tensor> plain = reconstruction_gallery(vae, images, 1, 12);
  REQUIRE(plain.size() == 3);
  {
    Tape tape;
    tape.set_enabled(false);
    for (size_t i = 0; i < images.size(); ++i) {
      LatentDistribution dist = vae.encode01(tape, images[i]);
      Tensor noise = Tensor::zeros({dist.mean.shape()[0]});
      Tensor mean_view = vae.decode(tape, reparameterize(tape, dist, noise));
      CHECK(tensors_equal(plain[i], mean_view));
    }
  }

  std::vector<Tensor> gallery = reconstruction_gallery(vae, images, 4, 12);
  REQUIRE(gallery.size() == 12);
  for (size_t i = 0; i < images.size(); ++i) {
    CHECK(tensors_equal(gallery[i * 4], plain[i]));
    for (int j = 1; j < 4; ++j)
      CHECK_FALSE(tensors_equal(gallery[i * 4 + static_cast<size_t>(j)], plain[i]));
  }

  std::vector<Tensor> repeat = reconstruction_gallery(vae, images, 4, 12);
  for (size_t i = 0; i < gallery.size(); ++i) CHECK(tensors_equal(gallery[i], repeat[i]));

  CHECK(reconstruction_gallery(vae, {}, 2, 1).empty());
  CHECK_THROWS_AS(reconstruction_gallery(vae, images, 0, 1), ContractError);
}

TEST_CASE("risk records round-trip through json") {
  RiskRecordFile file;
  file.metadata["seed"] = "7";
  file.metadata["method"] = "ensemble+projection";

  RiskRecord a;
  a.episode = 3;
  a.step = 11;
  a.would_crash = true;
  a.true_ttc = 0.625f;
  a.nll = 61.2509765625;
  a.risk = risk_from_ttcs({0.125f, 2.125f, 0.625f, 2.125f}, 2, 2);
  RiskRecord b;
  b.episode = 4;
  b.step = 0;
  b.would_crash = false;
  b.true_ttc = kTtcSentinel;
  b.nll = -3.25;
  b.risk = risk_from_ttcs({1.0f}, 1, 1);
  file.records = {a, b};

  const std::string text = risk_records_to_json(file);
  RiskRecordFile back = risk_records_from_json(text);
  REQUIRE(back.records.size() == 2);
  CHECK(back.metadata == file.metadata);
  for (size_t i = 0; i < 2; ++i) {
    const RiskRecord& x = file.records[i];
    const RiskRecord& y = back.records[i];
    CHECK(y.episode == x.episode);
    CHECK(y.step == x.step);
    CHECK(y.would_crash == x.would_crash);
    CHECK(y.true_ttc == x.true_ttc);
    CHECK(y.nll == x.nll);
    CHECK(y.risk.mu == x.risk.mu);
    CHECK(y.risk.sigma == x.risk.sigma);
    CHECK(y.risk.n_z == x.risk.n_z);
    CHECK(y.risk.n_w == x.risk.n_w);
    CHECK(y.risk.censored_fraction == x.risk.censored_fraction);
    REQUIRE(y.risk.ttc_samples.size() == x.risk.ttc_samples.size());
    for (size_t j = 0; j < x.risk.ttc_samples.size(); ++j)
      CHECK(y.risk.ttc_samples[j] == x.risk.ttc_samples[j]);
  }

  // Serialization is deterministic, so reruns rewrite artifacts byte for byte.
  CHECK(risk_records_to_json(back) == text);

  const std::string path = "pipeline_records_roundtrip.json";
  save_risk_records(path, file);
  RiskRecordFile loaded = load_risk_records(path);
  CHECK(risk_records_to_json(loaded) == text);
  std::remove(path.c_str());

  CHECK_THROWS_AS(risk_records_from_json("not json"), IoError);
  CHECK_THROWS_AS(risk_records_from_json("{\"metadata\":{}}"), IoError);
  CHECK_THROWS_AS(risk_records_from_json("{\"records\":5}"), IoError);
  CHECK_THROWS_AS(load_risk_records("no_such_dir/records.json"), IoError);
}

TEST_CASE("texture shift widens spread while in-distribution ranking survives projection") {
  WorldSpec base = make_corridor_world(0);
  WorldSpec swapped = make_shifted_world(base, ShiftKind::texture_swap, 0);

  // Training spans the three palette variants, mirroring the experiment
  // protocol; geometry is shared, appearance is not.
  CollectConfig cc;
  cc.n_motions = 171;
  cc.seed = 21;
  Dataset train = collect_dataset(base, cc);
  for (int v = 1; v < 3; ++v) {
    cc.seed = 21 + static_cast<uint64_t>(v);
    Dataset extra = collect_dataset(make_corridor_world(v), cc);
    for (auto& m : extra.motions) train.motions.push_back(std::move(m));
  }

  cc.n_motions = 96;
  cc.seed = 77;
  Dataset eval_in = collect_dataset(base, cc);
  Dataset eval_sh = collect_dataset(swapped, cc);
  REQUIRE(eval_in.motions.size() == eval_sh.motions.size());
  // The palette swap keeps the geometry, so the paired rollouts agree.
  for (size_t i = 0; i < eval_in.motions.size(); ++i) {
    REQUIRE(eval_in.motions[i].labels == eval_sh.motions[i].labels);
    REQUIRE(eval_in.motions[i].actions == eval_sh.motions[i].actions);
  }

  ConvVae vae(3, 18, 32, 32, 0.1f, 5);
  VaeTrainConfig vc;
  vc.epochs = 24;
  vc.batch = 32;
  vc.lr = 1.5e-3f;
  vc.seed = 40;
  train_vae(vae, train, vc);

  TrainHyper hyper;
  hyper.epochs = 30;
  hyper.batch = 32;
  hyper.lr = 2e-3f;
  hyper.seed = 4;
  Posterior det =
      train_posterior(PosteriorKind::deterministic, train, hyper).posterior;

  const int n = static_cast<int>(eval_in.motions.size());
  std::vector<float> sigma_in, sigma_sh, mu_in, truth;
  for (int i = 0; i < n; ++i) {
    const Motion& m_in = eval_in.motions[static_cast<size_t>(i)];
    const Motion& m_sh = eval_sh.motions[static_cast<size_t>(i)];
    Tensor x_in = image_to_tensor(m_in.observation, train.c, train.h, train.w);
    Tensor x_sh = image_to_tensor(m_sh.observation, train.c, train.h, train.w);
    const uint64_t seed = derive_seed(4242, static_cast<uint64_t>(i));

    RiskEstimate est_in = project_and_predict(vae, det, x_in, m_in.actions, 10, 1, seed);
    RiskEstimate est_sh = project_and_predict(vae, det, x_sh, m_sh.actions, 10, 1, seed);
    sigma_in.push_back(est_in.sigma);
    sigma_sh.push_back(est_sh.sigma);
    mu_in.push_back(est_in.mu);
    truth.push_back(true_ttc_from_labels(m_sh.labels, kDt));
  }

  // Latent spread reacts to the shift: decoded views of an off-distribution
  // image disagree more than views of an in-distribution one.
  const double mean_sigma_in = mean_of(sigma_in);
  const double mean_sigma_sh = mean_of(sigma_sh);
  INFO("mean sigma in-dist ", mean_sigma_in, " shifted ", mean_sigma_sh);
  CHECK(mean_sigma_sh > mean_sigma_in);

  // Passing images through encode/decode keeps the in-distribution ranking
  // usable; a collapsed projection would push this toward zero.
  const double rho_in = spearman(mu_in, truth);
  INFO("spearman projected in-dist ", rho_in);
  CHECK(rho_in > 0.5);

  // Reconstructions sit closer to training images than to shifted ones.
  std::vector<Tensor> train_imgs, shifted_imgs;
  for (int i = 0; i < 48; ++i) {
    train_imgs.push_back(image_to_tensor(train.motions[static_cast<size_t>(i)].observation,
                                         train.c, train.h, train.w));
    shifted_imgs.push_back(image_to_tensor(eval_sh.motions[static_cast<size_t>(i)].observation,
                                           train.c, train.h, train.w));
  }
  auto recon_mse = [&](const std::vector<Tensor>& imgs) {
    std::vector<Tensor> recon = reconstruction_gallery(vae, imgs, 1, 1);
    double total = 0;
    size_t count = 0;
    for (size_t i = 0; i < imgs.size(); ++i) {
      for (int j = 0; j < imgs[i].size(); ++j) {
        const double d = recon[i].raw()[j] - imgs[i].raw()[j];
        total += d * d;
      }
      count += static_cast<size_t>(imgs[i].size());
    }
    return total / static_cast<double>(count);
  };
  const double mse_train = recon_mse(train_imgs);
  const double mse_shifted = recon_mse(shifted_imgs);
  INFO("recon mse train ", mse_train, " shifted ", mse_shifted);
  CHECK(mse_train < mse_shifted);
}
