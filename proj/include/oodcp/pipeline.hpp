#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oodcp/bnn.hpp"
#include "oodcp/vae.hpp"

namespace oodcp {

// Collision-probability level above which a step counts as the collision
// time; shared by every TTC readout in the inference path.
constexpr float kCollisionProbThreshold = 0.5f;

// Label-derived ground truth: dt * (1 + index of the first collision label),
// or the right-censoring sentinel dt * (kHorizon + 1) when the window is
// clean.
float true_ttc_from_labels(const std::array<uint8_t, 16>& labels, float dt);

// Projection half of the estimator: encode one [C,H,W] image, draw n_z
// latents from the recognition distribution, and decode each to an
// in-distribution image clamped to [0,1]. n_z = 1 skips the latent noise and
// decodes the posterior mean. Draw zi is seeded from (seed, 0x7A, zi), so a
// fixed seed fixes the gallery.
std::vector<Tensor> project_latent_decodes(const Vae& vae, const Tensor& x01, int n_z,
                                           uint64_t seed);

// Prediction half: n_w weight draws per decoded image, pooled into one TTC
// sample set in z-major order (all draws for decode 0, then decode 1, ...).
// Cell (zi, wi) uses seed derive_seed(seed, zi, wi), so with a single decode
// the draws line up exactly with mc_predict_direct on that image.
RiskEstimate predict_over_decodes(const Posterior& posterior, const std::vector<Tensor>& decodes,
                                  const std::array<float, 16>& actions_deg, int n_w,
                                  uint64_t seed);

// project_latent_decodes followed by predict_over_decodes: the full
// OOD-projection risk estimate for one observation and action plan.
RiskEstimate project_and_predict(const Vae& vae, const Posterior& posterior, const Tensor& x01,
                                 const std::array<float, 16>& actions_deg, int n_z, int n_w,
                                 uint64_t seed);

// k_per_image decoded views of each input, flattened image-major. View 0 is
// the decoder mean; views j >= 1 are seeded recognition draws
// (derive_seed(seed, image_index, j)), so k_per_image = 1 yields plain
// reconstructions.
std::vector<Tensor> reconstruction_gallery(const Vae& vae, const std::vector<Tensor>& images01,
                                           int k_per_image, uint64_t seed);

// One evaluated motion: ground truth from the labels next to the estimator
// output, the unit decision sweeps consume.
struct RiskRecord {
  uint32_t episode = 0;
  uint32_t step = 0;
  bool would_crash = false;  // any collision label inside the window
  float true_ttc = 0.0f;     // label-derived, sentinel when censored
  double nll = 0.0;          // importance-weighted bound on the raw observation
  RiskEstimate risk;
};

// Records plus free-form provenance strings (config hash, seed, method, ...).
struct RiskRecordFile {
  std::map<std::string, std::string> metadata;
  std::vector<RiskRecord> records;
};

std::string risk_records_to_json(const RiskRecordFile& file);
RiskRecordFile risk_records_from_json(const std::string& text);

void save_risk_records(const std::string& path, const RiskRecordFile& file);
RiskRecordFile load_risk_records(const std::string& path);

}  // namespace oodcp
