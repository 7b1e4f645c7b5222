#include "oodcp/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>
#include <utility>

namespace oodcp {

namespace {

constexpr uint64_t kLatentDrawTag = 0x7A;

}  // namespace

float true_ttc_from_labels(const std::array<uint8_t, 16>& labels, float dt) {
  if (!(dt > 0.0f)) throw ContractError("true_ttc_from_labels needs dt > 0");
  for (int t = 0; t < kHorizon; ++t)
    if (labels[static_cast<size_t>(t)] != 0) return dt * static_cast<float>(t + 1);
  return dt * static_cast<float>(kHorizon + 1);
}

std::vector<Tensor> project_latent_decodes(const Vae& vae, const Tensor& x01, int n_z,
                                           uint64_t seed) {
  if (n_z < 1) throw ContractError("project_latent_decodes needs n_z >= 1");
  if (x01.rank() != 3) throw DimensionError("projection expects one [C,H,W] image");

  Tape tape;
  tape.set_enabled(false);
  LatentDistribution dist = vae.encode01(tape, x01);
  const int latent = dist.mean.shape()[0];

  std::vector<Tensor> decodes;
  decodes.reserve(static_cast<size_t>(n_z));
  for (int zi = 0; zi < n_z; ++zi) {
    Tensor noise = Tensor::zeros({latent});
    if (n_z > 1) {
      Rng rng(derive_seed(seed, kLatentDrawTag, static_cast<uint64_t>(zi)));
      noise = Tensor::randn({latent}, rng);
    }
    Tensor z = reparameterize(tape, dist, noise);
    decodes.push_back(clamp(tape, vae.decode(tape, z), 0.0f, 1.0f));
  }
  return decodes;
}

RiskEstimate predict_over_decodes(const Posterior& posterior, const std::vector<Tensor>& decodes,
                                  const std::array<float, 16>& actions_deg, int n_w,
                                  uint64_t seed) {
  if (decodes.empty()) throw ContractError("predict_over_decodes needs at least one image");
  if (n_w < 1) throw ContractError("predict_over_decodes needs n_w >= 1");
  if (!posterior.trained) throw ContractError("posterior is not trained");

  const int n_z = static_cast<int>(decodes.size());
  std::vector<float> ttcs;
  ttcs.reserve(static_cast<size_t>(n_z) * static_cast<size_t>(n_w));
  for (int zi = 0; zi < n_z; ++zi) {
    const Tensor& img = decodes[static_cast<size_t>(zi)];
    if (img.rank() != 3 || img.shape()[0] != posterior.shape.c ||
        img.shape()[1] != posterior.shape.h || img.shape()[2] != posterior.shape.w)
      throw DimensionError("decoded image " + shape_str(img.shape()) +
                           " does not match the predictor input [" +
                           std::to_string(posterior.shape.c) + "," +
                           std::to_string(posterior.shape.h) + "," +
                           std::to_string(posterior.shape.w) + "]");
    for (int wi = 0; wi < n_w; ++wi) {
      const uint64_t cell =
          derive_seed(seed, static_cast<uint64_t>(zi), static_cast<uint64_t>(wi));
      CollisionProfile profile = predict(posterior, img, actions_deg, cell);
      ttcs.push_back(ttc_from_profile(profile, kDt, kCollisionProbThreshold));
    }
  }
  return risk_from_ttcs(std::move(ttcs), n_z, n_w);
}

RiskEstimate project_and_predict(const Vae& vae, const Posterior& posterior, const Tensor& x01,
                                 const std::array<float, 16>& actions_deg, int n_z, int n_w,
                                 uint64_t seed) {
  return predict_over_decodes(posterior, project_latent_decodes(vae, x01, n_z, seed),
                              actions_deg, n_w, seed);
}

std::vector<Tensor> reconstruction_gallery(const Vae& vae, const std::vector<Tensor>& images01,
                                           int k_per_image, uint64_t seed) {
  if (k_per_image < 1) throw ContractError("reconstruction_gallery needs k_per_image >= 1");

  Tape tape;
  tape.set_enabled(false);
  std::vector<Tensor> out;
  out.reserve(images01.size() * static_cast<size_t>(k_per_image));
  for (size_t i = 0; i < images01.size(); ++i) {
    LatentDistribution dist = vae.encode01(tape, images01[i]);
    const int latent = dist.mean.shape()[0];
    for (int j = 0; j < k_per_image; ++j) {
      Tensor noise = Tensor::zeros({latent});
      if (j > 0) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(i), static_cast<uint64_t>(j)));
        noise = Tensor::randn({latent}, rng);
      }
      out.push_back(vae.decode(tape, reparameterize(tape, dist, noise)));
    }
  }
  return out;
}

// --- record serialization ------------------------------------------------------

namespace {

nlohmann::json risk_to_json(const RiskEstimate& r) {
  return nlohmann::json{{"mu", r.mu},
                        {"sigma", r.sigma},
                        {"n_z", r.n_z},
                        {"n_w", r.n_w},
                        {"censored_fraction", r.censored_fraction},
                        {"ttc_samples", r.ttc_samples}};
}

RiskEstimate risk_from_json(const nlohmann::json& j) {
  RiskEstimate r;
  r.mu = j.at("mu").get<float>();
  r.sigma = j.at("sigma").get<float>();
  r.n_z = j.at("n_z").get<int>();
  r.n_w = j.at("n_w").get<int>();
  r.censored_fraction = j.at("censored_fraction").get<float>();
  r.ttc_samples = j.at("ttc_samples").get<std::vector<float>>();
  return r;
}

}  // namespace

std::string risk_records_to_json(const RiskRecordFile& file) {
  nlohmann::json j;
  j["metadata"] = file.metadata;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& rec : file.records) {
    arr.push_back(nlohmann::json{{"episode", rec.episode},
                                 {"step", rec.step},
                                 {"would_crash", rec.would_crash},
                                 {"true_ttc", rec.true_ttc},
                                 {"nll", rec.nll},
                                 {"risk", risk_to_json(rec.risk)}});
  }
  j["records"] = std::move(arr);
  return j.dump();
}

RiskRecordFile risk_records_from_json(const std::string& text) {
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    RiskRecordFile file;
    if (j.contains("metadata"))
      file.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
    for (const auto& item : j.at("records")) {
      RiskRecord rec;
      rec.episode = item.at("episode").get<uint32_t>();
      rec.step = item.at("step").get<uint32_t>();
      rec.would_crash = item.at("would_crash").get<bool>();
      rec.true_ttc = item.at("true_ttc").get<float>();
      rec.nll = item.at("nll").get<double>();
      rec.risk = risk_from_json(item.at("risk"));
      file.records.push_back(std::move(rec));
    }
    return file;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("risk record parse failed: ") + e.what());
  }
}

void save_risk_records(const std::string& path, const RiskRecordFile& file) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << risk_records_to_json(file);
  if (!out) throw IoError("write to '" + path + "' failed");
}

RiskRecordFile load_risk_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return risk_records_from_json(buf.str());
}

}  // namespace oodcp
