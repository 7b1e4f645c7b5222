#include "oodcp/vae.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "oodcp/nn.hpp"

namespace oodcp {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// Per-image additive constant of the Gaussian log-likelihood.
double recon_constant(double n_pixels, double sigma_x) {
  return -n_pixels * (std::log(sigma_x) + 0.5 * kLog2Pi);
}

}  // namespace

Tensor image_to_tensor(const std::vector<uint8_t>& pixels, int c, int h, int w) {
  const size_t n = static_cast<size_t>(c) * h * w;
  if (pixels.size() != n)
    throw DimensionError("image has " + std::to_string(pixels.size()) + " bytes, expected " +
                         std::to_string(n));
  Tensor t = Tensor::zeros({c, h, w});
  float* out = t.raw();
  for (size_t i = 0; i < n; ++i) out[i] = pixels[i] * (1.0f / 255.0f);
  return t;
}

Tensor reparameterize(Tape& tape, const LatentDistribution& dist, Tensor noise) {
  if (noise.shape() != dist.mean.shape() || dist.mean.shape() != dist.logvar.shape())
    throw DimensionError("reparameterize: mean/logvar/noise shapes disagree");
  Tensor std_dev = exp(tape, mul_scalar(tape, dist.logvar, 0.5f));
  return add(tape, dist.mean, mul(tape, std_dev, noise));
}

Tensor kl_diag_gaussian(Tape& tape, const LatentDistribution& dist) {
  Tensor mu2 = mul(tape, dist.mean, dist.mean);
  Tensor inner =
      sub(tape, add(tape, mu2, exp(tape, dist.logvar)), add_scalar(tape, dist.logvar, 1.0f));
  return mul_scalar(tape, sum(tape, inner), 0.5f);
}

ElboParts elbo(Tape& tape, const Vae& model, Tensor x01, Tensor noise) {
  LatentDistribution dist = model.encode01(tape, x01);
  Tensor z = reparameterize(tape, dist, noise);
  Tensor x_hat = model.decode(tape, z);
  if (x_hat.shape() != x01.shape())
    throw DimensionError("decoder output shape does not match the input");
  Tensor diff = sub(tape, x01, x_hat);
  const float sx = model.sigma_x();
  Tensor sq = sum(tape, mul(tape, diff, diff));
  Tensor recon =
      add_scalar(tape, mul_scalar(tape, sq, -1.0f / (2.0f * sx * sx)),
                 static_cast<float>(recon_constant(static_cast<double>(x01.size()), sx)));
  Tensor kl = kl_diag_gaussian(tape, dist);
  if (!recon.all_finite()) throw NumericError("elbo reconstruction term is not finite");
  if (!kl.all_finite()) throw NumericError("elbo kl term is not finite");
  return {sub(tape, recon, kl), recon, kl};
}

double nll_estimate_with_noise(const Vae& model, Tensor x01,
                               const std::vector<Tensor>& noises) {
  if (noises.empty()) throw ContractError("nll_estimate needs at least one latent draw");
  const int L = model.latent_dim();
  Tape tape;
  tape.set_enabled(false);
  LatentDistribution dist = model.encode01(tape, x01);
  if (dist.mean.size() != L)
    throw ContractError("nll_estimate evaluates one image at a time");
  const float* mu = dist.mean.raw();
  const float* lv = dist.logvar.raw();
  const double sx = model.sigma_x();
  const double d = static_cast<double>(x01.size());

  std::vector<double> logw;
  logw.reserve(noises.size());
  for (const Tensor& noise : noises) {
    if (noise.size() != L) throw DimensionError("latent noise has the wrong length");
    Tensor z = Tensor::zeros({L});
    float* zp = z.raw();
    const float* np = noise.raw();
    for (int i = 0; i < L; ++i)
      zp[i] = mu[i] + std::exp(lv[i] * 0.5f) * np[i];

    Tensor x_hat = model.decode(tape, z);
    if (x_hat.size() != x01.size())
      throw DimensionError("decoder output size does not match the input");
    const float* xh = x_hat.raw();
    const float* x = x01.raw();
    double sq = 0.0;
    for (int64_t i = 0; i < x01.size(); ++i) {
      const double e = static_cast<double>(x[i]) - xh[i];
      sq += e * e;
    }
    const double log_px_z = -sq / (2.0 * sx * sx) + recon_constant(d, sx);

    double zz = 0.0, qq = 0.0;
    for (int i = 0; i < L; ++i) {
      const double zi = zp[i];
      zz += zi * zi;
      const double dz = zi - mu[i];
      qq += dz * dz * std::exp(-static_cast<double>(lv[i])) + lv[i];
    }
    const double log_pz = -0.5 * (zz + L * kLog2Pi);
    const double log_qz = -0.5 * (qq + L * kLog2Pi);
    logw.push_back(log_px_z + log_pz - log_qz);
  }

  const double m = *std::max_element(logw.begin(), logw.end());
  double acc = 0.0;
  for (double w : logw) acc += std::exp(w - m);
  return -(m + std::log(acc / static_cast<double>(logw.size())));
}

double nll_estimate(const Vae& model, Tensor x01, int k, uint64_t seed) {
  if (k < 1) throw ContractError("nll_estimate needs k >= 1");
  Rng rng(derive_seed(seed, 0x11eULL));
  std::vector<Tensor> noises;
  noises.reserve(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j)
    noises.push_back(Tensor::randn({model.latent_dim()}, rng));
  return nll_estimate_with_noise(model, x01, noises);
}

// --- convolutional model ---------------------------------------------------

ConvVae::ConvVae(int c, int h, int w, int latent_dim, float sigma_x, uint64_t seed)
    : c_(c), h_(h), w_(w), latent_dim_(latent_dim), sigma_x_(sigma_x) {
  if (c < 1) throw ConfigError("vae needs at least one channel");
  if (h < 1 || w < 1) throw ConfigError("observation dims must be positive");
  if (latent_dim < 1) throw ConfigError("vae needs at least one latent");
  if (!(sigma_x > 0.0f)) throw ConfigError("sigma_x must be positive");
  e1h_ = conv_output_size(h, 5, 2, 2);
  e1w_ = conv_output_size(w, 5, 2, 2);
  e2h_ = conv_output_size(e1h_, 5, 2, 2);
  e2w_ = conv_output_size(e1w_, 5, 2, 2);
  e3h_ = conv_output_size(e2h_, 5, 2, 2);
  e3w_ = conv_output_size(e2w_, 5, 2, 2);
  flat_ = 128 * e3h_ * e3w_;

  Rng rng(derive_seed(seed, 0xaeULL));
  auto he = [](int fan_in) { return std::sqrt(2.0f / static_cast<float>(fan_in)); };
  params_.add("enc.conv1.k", Tensor::randn({32, c, 5, 5}, rng, he(c * 25)));
  params_.add("enc.conv1.b", Tensor::zeros({32}));
  params_.add("enc.conv2.k", Tensor::randn({64, 32, 5, 5}, rng, he(32 * 25)));
  params_.add("enc.conv2.b", Tensor::zeros({64}));
  params_.add("enc.conv3.k", Tensor::randn({128, 64, 5, 5}, rng, he(64 * 25)));
  params_.add("enc.conv3.b", Tensor::zeros({128}));
  params_.add("enc.mean.w", Tensor::randn({flat_, latent_dim}, rng, 0.01f));
  params_.add("enc.mean.b", Tensor::zeros({latent_dim}));
  params_.add("enc.logvar.w", Tensor::randn({flat_, latent_dim}, rng, 0.01f));
  params_.add("enc.logvar.b", Tensor::zeros({latent_dim}));
  params_.add("dec.fc.w", Tensor::randn({latent_dim, flat_}, rng, he(latent_dim)));
  params_.add("dec.fc.b", Tensor::zeros({flat_}));
  params_.add("dec.deconv1.k", Tensor::randn({128, 64, 5, 5}, rng, he(128 * 25)));
  params_.add("dec.deconv1.b", Tensor::zeros({64}));
  params_.add("dec.deconv2.k", Tensor::randn({64, 32, 5, 5}, rng, he(64 * 25)));
  params_.add("dec.deconv2.b", Tensor::zeros({32}));
  params_.add("dec.deconv3.k", Tensor::randn({32, c, 5, 5}, rng, he(32 * 25)));
  params_.add("dec.deconv3.b", Tensor::zeros({c}));
}

LatentDistribution ConvVae::encode01(Tape& tape, Tensor x01) const {
  const bool batched = x01.rank() == 4;
  if (!batched && x01.rank() != 3) throw DimensionError("encode expects [C,H,W] or [N,C,H,W]");
  const int n = batched ? x01.shape()[0] : 1;
  const int off = batched ? 1 : 0;
  if (x01.shape()[off] != c_ || x01.shape()[off + 1] != h_ || x01.shape()[off + 2] != w_)
    throw DimensionError("encode input dims do not match the model");

  const auto& P = params_;
  Tensor a1 = relu(tape, bias_add_channel(tape, conv2d(tape, x01, P.at("enc.conv1.k"), 2, 2),
                                          P.at("enc.conv1.b")));
  Tensor a2 = relu(tape, bias_add_channel(tape, conv2d(tape, a1, P.at("enc.conv2.k"), 2, 2),
                                          P.at("enc.conv2.b")));
  Tensor a3 = relu(tape, bias_add_channel(tape, conv2d(tape, a2, P.at("enc.conv3.k"), 2, 2),
                                          P.at("enc.conv3.b")));
  Tensor flat = reshape(tape, a3, {n, flat_});
  Tensor mean = dense_forward(tape, flat, P.at("enc.mean.w"), P.at("enc.mean.b"),
                              Activation::identity);
  Tensor logvar = clamp(tape,
                        dense_forward(tape, flat, P.at("enc.logvar.w"), P.at("enc.logvar.b"),
                                      Activation::identity),
                        -10.0f, 10.0f);
  if (!batched) {
    mean = reshape(tape, mean, {latent_dim_});
    logvar = reshape(tape, logvar, {latent_dim_});
  }
  return {mean, logvar};
}

Tensor ConvVae::decode(Tape& tape, Tensor z) const {
  const bool batched = z.rank() == 2;
  if (!batched && z.rank() != 1) throw DimensionError("decode expects [L] or [N,L]");
  const int n = batched ? z.shape()[0] : 1;
  if ((batched ? z.shape()[1] : z.shape()[0]) != latent_dim_)
    throw DimensionError("latent vector length does not match the model");

  const auto& P = params_;
  Tensor z2 = batched ? z : reshape(tape, z, {1, latent_dim_});
  Tensor f = dense_forward(tape, z2, P.at("dec.fc.w"), P.at("dec.fc.b"), Activation::relu);
  Tensor g = reshape(tape, f, {n, 128, e3h_, e3w_});
  Tensor d1 = relu(tape, bias_add_channel(tape,
                                          deconv2d(tape, g, P.at("dec.deconv1.k"), 2, 2, e2h_, e2w_),
                                          P.at("dec.deconv1.b")));
  Tensor d2 = relu(tape, bias_add_channel(tape,
                                          deconv2d(tape, d1, P.at("dec.deconv2.k"), 2, 2, e1h_, e1w_),
                                          P.at("dec.deconv2.b")));
  Tensor out = sigmoid(tape, bias_add_channel(tape,
                                              deconv2d(tape, d2, P.at("dec.deconv3.k"), 2, 2, h_, w_),
                                              P.at("dec.deconv3.b")));
  return batched ? out : reshape(tape, out, {c_, h_, w_});
}

// --- training ----------------------------------------------------------------

std::vector<VaeEpochStats> train_vae(ConvVae& model, const Dataset& data,
                                     const VaeTrainConfig& cfg) {
  if (data.motions.empty()) throw ContractError("train_vae needs a non-empty dataset");
  if (data.c != model.channels() || data.h != model.height() || data.w != model.width())
    throw DimensionError("dataset dims do not match the vae");
  if (cfg.epochs < 1 || cfg.batch < 1) throw ConfigError("epochs and batch must be positive");

  const int n = static_cast<int>(data.motions.size());
  const int c = data.c, h = data.h, w = data.w;
  const size_t img_size = static_cast<size_t>(c) * h * w;
  std::vector<std::vector<float>> images(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& px = data.motions[static_cast<size_t>(i)].observation;
    images[static_cast<size_t>(i)].resize(img_size);
    for (size_t j = 0; j < img_size; ++j)
      images[static_cast<size_t>(i)][j] = px[j] * (1.0f / 255.0f);
  }

  Tape tape;
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  AdamState adam_state;
  Rng shuffle_rng(derive_seed(cfg.seed, 11));
  Rng noise_rng(derive_seed(cfg.seed, 12));
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  const double sx = model.sigma_x();
  const double per_image_const = recon_constant(static_cast<double>(img_size), sx);
  std::vector<VaeEpochStats> trace;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

    double sum_recon = 0.0, sum_kl = 0.0;
    for (int start = 0; start < n; start += cfg.batch) {
      const int b = std::min(cfg.batch, n - start);
      Tensor xb = Tensor::zeros({b, c, h, w});
      for (int r = 0; r < b; ++r)
        std::memcpy(xb.raw() + static_cast<size_t>(r) * img_size,
                    images[static_cast<size_t>(order[static_cast<size_t>(start + r)])].data(),
                    img_size * sizeof(float));
      Tensor noise = Tensor::randn({b, model.latent_dim()}, noise_rng);

      LatentDistribution dist = model.encode01(tape, xb);
      Tensor z = reparameterize(tape, dist, noise);
      Tensor x_hat = model.decode(tape, z);
      Tensor diff = sub(tape, xb, x_hat);
      Tensor sq = sum(tape, mul(tape, diff, diff));
      Tensor kl = kl_diag_gaussian(tape, dist);
      Tensor loss = mul_scalar(
          tape, add(tape, mul_scalar(tape, sq, 1.0f / (2.0f * sx * sx * 1.0f)), kl),
          1.0f / static_cast<float>(b));

      const double sq_val = static_cast<double>(sq.item());
      const double kl_val = static_cast<double>(kl.item());
      if (!std::isfinite(sq_val) || !std::isfinite(kl_val) || !loss.all_finite())
        throw NumericError("vae training diverged at epoch " + std::to_string(epoch) +
                           " (recon_sq=" + std::to_string(sq_val) +
                           ", kl=" + std::to_string(kl_val) + ")");
      sum_recon += -sq_val / (2.0 * sx * sx) + per_image_const * b;
      sum_kl += kl_val;

      backward(tape, loss);
      adam_step(model.params(), adam_state, adam_cfg);
      model.params().zero_grad();
    }
    VaeEpochStats s;
    s.epoch = epoch;
    s.recon = sum_recon / n;
    s.kl = sum_kl / n;
    s.elbo = s.recon - s.kl;
    trace.push_back(s);
  }
  return trace;
}

void save_loss_trace(const std::string& path, const std::vector<VaeEpochStats>& trace) {
  std::ostringstream out;
  out << "epoch,elbo,recon,kl\n";
  for (const auto& s : trace) {
    char line[160];
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g\n", s.epoch, s.elbo, s.recon, s.kl);
    out << line;
  }
  const std::string text = out.str();
  write_file_bytes(path, std::vector<uint8_t>(text.begin(), text.end()));
}

void save_vae(const std::string& path, const ConvVae& model) {
  std::vector<std::pair<std::string, Tensor>> items;
  items.emplace_back("meta",
                     Tensor::from({static_cast<float>(model.channels()),
                                   static_cast<float>(model.height()),
                                   static_cast<float>(model.width()),
                                   static_cast<float>(model.latent_dim()), model.sigma_x()},
                                  {5}));
  for (const auto& [name, t] : model.params().items()) items.emplace_back(name, t);
  save_tensors(path, items);
}

ConvVae load_vae(const std::string& path) {
  auto items = load_tensors(path);
  const Tensor* meta = nullptr;
  for (const auto& [name, t] : items)
    if (name == "meta") meta = &t;
  if (!meta || meta->size() != 5) throw IoError(path + " is not a vae weights file");
  const float* mv = meta->raw();
  ConvVae model(static_cast<int>(mv[0]), static_cast<int>(mv[1]), static_cast<int>(mv[2]),
                static_cast<int>(mv[3]), mv[4], 0);
  for (auto& [name, dst] : model.params().items()) {
    const Tensor* src = nullptr;
    for (const auto& [lname, lt] : items)
      if (lname == name) src = &lt;
    if (!src) throw IoError(path + " is missing tensor '" + name + "'");
    if (src->shape() != dst.shape())
      throw DimensionError("tensor '" + name + "' in " + path + " has the wrong shape");
    std::memcpy(dst.raw(), src->raw(), static_cast<size_t>(dst.size()) * sizeof(float));
  }
  return model;
}

}  // namespace oodcp
