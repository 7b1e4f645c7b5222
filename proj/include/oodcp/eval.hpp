#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "oodcp/pipeline.hpp"
#include "oodcp/vae.hpp"

namespace oodcp {

// Intervention window: anything predicted to collide sooner than this is a
// candidate stop. Equals kDt * kHorizon.
constexpr float kDecisionHorizonSeconds = 2.0f;

enum class RuleKind { bayesian, deterministic, nll, combined };
RuleKind parse_rule_kind(const std::string& name);
std::string rule_kind_name(RuleKind kind);

// Training-set NLL location/scale used to z-score the combined rule's NLL
// term, making the two thresholds commensurable.
struct NllStats {
  double mean = 0.0;
  double std = 1.0;
};
NllStats compute_nll_stats(const std::vector<RiskRecord>& train_records);

// One decision rule instance. Only the members a kind reads are meaningful:
// bayesian beta_sigma; deterministic beta_mu; nll beta_nll (raw NLL units);
// combined beta_mu + beta_nll (z-score units) + train_nll stats.
struct DecisionRule {
  RuleKind kind = RuleKind::deterministic;
  double beta_sigma = 0.0;
  double beta_mu = 0.0;
  double beta_nll = 0.0;
  NllStats train_nll;
};

// true = request an intervention. estimate may be null for the nll rule and
// nll may be null for bayesian/deterministic; a missing required input is a
// contract violation.
bool decide(const DecisionRule& rule, const RiskEstimate* estimate, const double* nll);

struct CurvePoint {
  double beta = 0.0;      // the swept threshold (beta_mu for combined)
  double beta_nll = 0.0;  // combined only: the paired NLL threshold
  double autonomy = 0.0;  // (TN+FN)/total, motion-wise
  double averted = 0.0;   // TP/(TP+FN); 1.0 + flag when no crashes exist
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

struct TradeoffCurve {
  std::string method;  // caller-supplied label for tables and reports
  RuleKind kind = RuleKind::deterministic;
  bool averted_defined = true;  // false when the record set has no crashes
  std::string interpolation = "linear";
  std::vector<CurvePoint> points;
};

// One curve point per beta, in grid order. Combined sweeps take two grids
// and live in sweep_combined.
TradeoffCurve sweep(RuleKind kind, const std::vector<RiskRecord>& records,
                    const std::vector<double>& beta_grid, const std::string& method_label);

// Evaluates every (beta_mu, beta_nll) pair and keeps, for each achieved
// autonomy value, the pair with the highest averted fraction; points are
// ordered by descending autonomy.
TradeoffCurve sweep_combined(const std::vector<RiskRecord>& records,
                             const std::vector<double>& beta_mu_grid,
                             const std::vector<double>& beta_nll_grid, const NllStats& train_stats,
                             const std::string& method_label);

// 30 log-spaced negative magnitudes, zero, 30 log-spaced positive magnitudes
// spanning [-10, 10] (61 ascending values).
std::vector<double> default_beta_sigma_grid();
// 41 values linear over [-2, 2] seconds.
std::vector<double> default_beta_mu_grid();
// Empirical quantiles of the given NLLs at levels 0, 0.02, ..., 1 (51 values,
// linear-interpolation quantile definition).
std::vector<double> nll_quantile_grid(std::vector<double> nlls);

struct AutonomyTable {
  std::vector<double> levels;
  std::vector<std::string> methods;
  std::vector<std::vector<double>> averted;  // [method][level]
  std::string interpolation = "linear";
};

// Reads averted fractions off each curve at the requested autonomy levels,
// linearly interpolating between achieved points; levels outside a curve's
// achieved autonomy range are a domain error (no extrapolation).
AutonomyTable table_at_autonomy(const std::vector<TradeoffCurve>& curves,
                                const std::vector<double>& levels = {0.5, 0.6, 0.7, 0.8, 0.9});

struct NllHistogram {
  std::vector<double> edges;  // bins + 1 shared edges
  std::vector<double> train_density, test_density;  // per-bin fractions
  std::vector<double> train_nlls, test_nlls;        // per-image values (k=16)
  double overlap = 0.0;                             // sum of per-bin minima
};

NllHistogram nll_histogram(const Vae& vae, const std::vector<Tensor>& train_images,
                           const std::vector<Tensor>& test_images, int bins, uint64_t seed);

// Latent geometry diagnostic: recognition samples from three image sets are
// projected to 2D by a PCA fit on the train samples (power iteration; a
// degenerate covariance falls back to the first two latent coordinates) and
// rasterized onto shared 64x64 occupancy grids.
struct LatentDiagnostic {
  static constexpr int kGrid = 64;
  std::array<double, 4> bounds{};  // min_x, min_y, max_x, max_y over all sets
  std::vector<double> train_grid, holdout_grid, ood_grid;  // normalized occupancy
  std::vector<double> prob_diff_holdout, prob_diff_ood;    // set minus train
  std::vector<int> support_diff_holdout, support_diff_ood; // -1 train-only, +1 set-only
  std::array<double, 2> component_variance{};
  bool pca_degenerate = false;
};

// Sample s of image i uses seed stream (seed, i, s) regardless of which set
// the image sits in, so identical image lists produce identical grids.
LatentDiagnostic latent_diagnostic(const Vae& vae, const std::vector<Tensor>& train,
                                   const std::vector<Tensor>& holdout,
                                   const std::vector<Tensor>& ood, int samples_per_image,
                                   uint64_t seed);

// Total variation distance between two normalized occupancy grids.
double grid_tv_distance(const std::vector<double>& a, const std::vector<double>& b);

// Plot-ready text emitters. Deterministic output: rerunning a report rewrites
// byte-identical files.
std::string curve_to_csv(const TradeoffCurve& curve);
std::string curves_to_json(const std::vector<TradeoffCurve>& curves);
std::string table_to_csv(const AutonomyTable& table);
std::string table_to_json(const AutonomyTable& table);
std::string histogram_to_csv(const NllHistogram& hist);
std::string grid_to_csv(const std::vector<double>& grid, int width);
std::string support_grid_to_csv(const std::vector<int>& grid, int width);
void save_text_file(const std::string& path, const std::string& content);

}  // namespace oodcp
