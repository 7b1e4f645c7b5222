#include "oodcp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "oodcp/common.hpp"

namespace oodcp {
namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

long count_crashes(const std::vector<RiskRecord>& records) {
  long c = 0;
  for (const auto& r : records) c += r.would_crash ? 1 : 0;
  return c;
}

struct Confusion {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion count_confusion(const DecisionRule& rule, const std::vector<RiskRecord>& records) {
  Confusion c;
  for (const auto& r : records) {
    const bool intervened = decide(rule, &r.risk, &r.nll);
    if (intervened) {
      (r.would_crash ? c.tp : c.fp)++;
    } else {
      (r.would_crash ? c.fn : c.tn)++;
    }
  }
  return c;
}

CurvePoint make_point(double beta, double beta_nll, const Confusion& c, long total,
                      bool averted_defined) {
  CurvePoint p;
  p.beta = beta;
  p.beta_nll = beta_nll;
  p.tp = c.tp;
  p.fp = c.fp;
  p.fn = c.fn;
  p.tn = c.tn;
  p.autonomy = static_cast<double>(c.tn + c.fn) / static_cast<double>(total);
  p.averted = averted_defined
                  ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn)
                  : 1.0;
  return p;
}

void check_sweep_inputs(const std::vector<RiskRecord>& records, const std::vector<double>& grid,
                        const char* grid_name) {
  if (records.empty()) throw ContractError("sweep needs at least one motion record");
  if (grid.empty()) throw ContractError(std::string("sweep needs a non-empty ") + grid_name);
}

}  // namespace

RuleKind parse_rule_kind(const std::string& name) {
  if (name == "bayesian") return RuleKind::bayesian;
  if (name == "deterministic") return RuleKind::deterministic;
  if (name == "nll") return RuleKind::nll;
  if (name == "combined") return RuleKind::combined;
  throw ConfigError("unknown decision rule: " + name);
}

std::string rule_kind_name(RuleKind kind) {
  switch (kind) {
    case RuleKind::bayesian: return "bayesian";
    case RuleKind::deterministic: return "deterministic";
    case RuleKind::nll: return "nll";
    case RuleKind::combined: return "combined";
  }
  throw ContractError("invalid rule kind");
}

NllStats compute_nll_stats(const std::vector<RiskRecord>& train_records) {
  if (train_records.empty()) throw ContractError("nll stats need at least one record");
  double mean = 0.0;
  for (const auto& r : train_records) mean += r.nll;
  mean /= static_cast<double>(train_records.size());
  double var = 0.0;
  for (const auto& r : train_records) {
    const double d = r.nll - mean;
    var += d * d;
  }
  var /= static_cast<double>(train_records.size());
  return NllStats{mean, std::sqrt(var)};
}

bool decide(const DecisionRule& rule, const RiskEstimate* estimate, const double* nll) {
  switch (rule.kind) {
    case RuleKind::bayesian:
      if (estimate == nullptr) throw ContractError("bayesian rule needs a risk estimate");
      return estimate->mu - rule.beta_sigma * estimate->sigma < kDecisionHorizonSeconds;
    case RuleKind::deterministic:
      if (estimate == nullptr) throw ContractError("deterministic rule needs a risk estimate");
      return estimate->mu - rule.beta_mu < kDecisionHorizonSeconds;
    case RuleKind::nll:
      if (nll == nullptr) throw ContractError("nll rule needs a likelihood value");
      return *nll > rule.beta_nll;
    case RuleKind::combined: {
      if (estimate == nullptr || nll == nullptr)
        throw ContractError("combined rule needs both a risk estimate and a likelihood value");
      if (!(rule.train_nll.std > 0.0))
        throw ContractError("combined rule needs a positive training nll spread");
      const double z = (*nll - rule.train_nll.mean) / rule.train_nll.std;
      return estimate->mu - rule.beta_mu - rule.beta_nll * z < kDecisionHorizonSeconds;
    }
  }
  throw ContractError("invalid rule kind");
}

TradeoffCurve sweep(RuleKind kind, const std::vector<RiskRecord>& records,
                    const std::vector<double>& beta_grid, const std::string& method_label) {
  check_sweep_inputs(records, beta_grid, "beta grid");
  if (kind == RuleKind::combined)
    throw ContractError("combined sweeps take two grids; use sweep_combined");
  const long total = static_cast<long>(records.size());
  const long crashes = count_crashes(records);
  TradeoffCurve curve;
  curve.method = method_label;
  curve.kind = kind;
  curve.averted_defined = crashes > 0;
  curve.points.reserve(beta_grid.size());
  for (double beta : beta_grid) {
    DecisionRule rule;
    rule.kind = kind;
    switch (kind) {
      case RuleKind::bayesian: rule.beta_sigma = beta; break;
      case RuleKind::deterministic: rule.beta_mu = beta; break;
      case RuleKind::nll: rule.beta_nll = beta; break;
      case RuleKind::combined: break;
    }
    curve.points.push_back(
        make_point(beta, 0.0, count_confusion(rule, records), total, curve.averted_defined));
  }
  return curve;
}

TradeoffCurve sweep_combined(const std::vector<RiskRecord>& records,
                             const std::vector<double>& beta_mu_grid,
                             const std::vector<double>& beta_nll_grid, const NllStats& train_stats,
                             const std::string& method_label) {
  check_sweep_inputs(records, beta_mu_grid, "beta_mu grid");
  if (beta_nll_grid.empty()) throw ContractError("sweep needs a non-empty beta_nll grid");
  if (!(train_stats.std > 0.0))
    throw ContractError("combined rule needs a positive training nll spread");
  const long total = static_cast<long>(records.size());
  const long crashes = count_crashes(records);
  const bool defined = crashes > 0;

  // Exhaustive pair evaluation; for each achieved autonomy keep the pair with
  // the highest averted fraction (first such pair in grid order on ties).
  std::map<double, CurvePoint> best;
  for (double bm : beta_mu_grid) {
    for (double bn : beta_nll_grid) {
      DecisionRule rule;
      rule.kind = RuleKind::combined;
      rule.beta_mu = bm;
      rule.beta_nll = bn;
      rule.train_nll = train_stats;
      const CurvePoint p = make_point(bm, bn, count_confusion(rule, records), total, defined);
      auto it = best.find(p.autonomy);
      if (it == best.end()) {
        best.emplace(p.autonomy, p);
      } else if (p.averted > it->second.averted) {
        it->second = p;
      }
    }
  }
  TradeoffCurve curve;
  curve.method = method_label;
  curve.kind = RuleKind::combined;
  curve.averted_defined = defined;
  curve.points.reserve(best.size());
  for (auto it = best.rbegin(); it != best.rend(); ++it) curve.points.push_back(it->second);
  return curve;
}

std::vector<double> default_beta_sigma_grid() {
  constexpr int kHalf = 30;
  constexpr double kLo = 0.01, kHi = 10.0;
  std::vector<double> pos(kHalf);
  for (int i = 0; i < kHalf; ++i) {
    const double t = static_cast<double>(i) / (kHalf - 1);
    pos[i] = std::exp(std::log(kLo) + t * (std::log(kHi) - std::log(kLo)));
  }
  pos.back() = kHi;
  std::vector<double> grid;
  grid.reserve(2 * kHalf + 1);
  for (int i = kHalf - 1; i >= 0; --i) grid.push_back(-pos[i]);
  grid.push_back(0.0);
  for (int i = 0; i < kHalf; ++i) grid.push_back(pos[i]);
  return grid;
}

std::vector<double> default_beta_mu_grid() {
  constexpr int kN = 41;
  std::vector<double> grid(kN);
  for (int i = 0; i < kN; ++i) grid[i] = -2.0 + 4.0 * static_cast<double>(i) / (kN - 1);
  return grid;
}

std::vector<double> nll_quantile_grid(std::vector<double> nlls) {
  if (nlls.empty()) throw ContractError("quantile grid needs at least one value");
  std::sort(nlls.begin(), nlls.end());
  const size_t n = nlls.size();
  std::vector<double> grid;
  grid.reserve(51);
  for (int i = 0; i <= 50; ++i) {
    const double q = static_cast<double>(i) / 50.0;
    const double pos = q * static_cast<double>(n - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, n - 1);
    const double frac = pos - static_cast<double>(lo);
    grid.push_back(nlls[lo] * (1.0 - frac) + nlls[hi] * frac);
  }
  return grid;
}

AutonomyTable table_at_autonomy(const std::vector<TradeoffCurve>& curves,
                                const std::vector<double>& levels) {
  if (curves.empty()) throw ContractError("autonomy table needs at least one curve");
  if (levels.empty()) throw ContractError("autonomy table needs at least one level");
  AutonomyTable table;
  table.levels = levels;
  for (const auto& curve : curves) {
    if (curve.points.empty()) throw ContractError("autonomy table got an empty curve");
    // Distinct achieved (autonomy, averted) pairs, ascending in autonomy.
    // Equal autonomy means an identical intervention count, hence equal
    // confusion counts, so dropping duplicates loses nothing.
    std::map<double, double> achieved;
    for (const auto& p : curve.points) achieved.emplace(p.autonomy, p.averted);
    std::vector<double> xs, ys;
    xs.reserve(achieved.size());
    ys.reserve(achieved.size());
    for (const auto& [x, y] : achieved) {
      xs.push_back(x);
      ys.push_back(y);
    }
    std::vector<double> row;
    row.reserve(levels.size());
    for (double level : levels) {
      if (level < xs.front() || level > xs.back())
        throw DomainError("autonomy level " + fmt_double(level) + " is outside the achieved range [" +
                          fmt_double(xs.front()) + ", " + fmt_double(xs.back()) + "] of " +
                          curve.method);
      const auto it = std::lower_bound(xs.begin(), xs.end(), level);
      const size_t hi = static_cast<size_t>(it - xs.begin());
      if (xs[hi] == level) {
        row.push_back(ys[hi]);
        continue;
      }
      const size_t lo = hi - 1;
      const double t = (level - xs[lo]) / (xs[hi] - xs[lo]);
      row.push_back(ys[lo] * (1.0 - t) + ys[hi] * t);
    }
    table.methods.push_back(curve.method);
    table.averted.push_back(std::move(row));
  }
  return table;
}

NllHistogram nll_histogram(const Vae& vae, const std::vector<Tensor>& train_images,
                           const std::vector<Tensor>& test_images, int bins, uint64_t seed) {
  if (bins < 1) throw ContractError("histogram needs at least one bin");
  if (train_images.empty() || test_images.empty())
    throw ContractError("histogram needs non-empty image sets");
  constexpr int kNllSamples = 16;
  NllHistogram hist;
  hist.train_nlls.reserve(train_images.size());
  hist.test_nlls.reserve(test_images.size());
  // Image i of either set uses seed stream (seed, i): identical sets yield
  // identical values and an overlap of exactly 1.
  for (size_t i = 0; i < train_images.size(); ++i)
    hist.train_nlls.push_back(nll_estimate(vae, train_images[i], kNllSamples,
                                           derive_seed(seed, static_cast<uint64_t>(i))));
  for (size_t i = 0; i < test_images.size(); ++i)
    hist.test_nlls.push_back(nll_estimate(vae, test_images[i], kNllSamples,
                                          derive_seed(seed, static_cast<uint64_t>(i))));

  double lo = hist.train_nlls.front(), hi = lo;
  for (const auto* vals : {&hist.train_nlls, &hist.test_nlls}) {
    for (double v : *vals) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  hist.edges.resize(static_cast<size_t>(bins) + 1);
  for (int i = 0; i <= bins; ++i)
    hist.edges[static_cast<size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / bins;

  auto bin_counts = [&](const std::vector<double>& vals) {
    std::vector<long> counts(static_cast<size_t>(bins), 0);
    const double w = (hi - lo) / bins;
    for (double v : vals) {
      int b = static_cast<int>((v - lo) / w);
      b = std::clamp(b, 0, bins - 1);
      counts[static_cast<size_t>(b)]++;
    }
    return counts;
  };
  const std::vector<long> train_counts = bin_counts(hist.train_nlls);
  const std::vector<long> test_counts = bin_counts(hist.test_nlls);
  const long n_train = static_cast<long>(hist.train_nlls.size());
  const long n_test = static_cast<long>(hist.test_nlls.size());
  hist.train_density.resize(static_cast<size_t>(bins));
  hist.test_density.resize(static_cast<size_t>(bins));
  // Overlap as one exact integer ratio, so identical sets give exactly 1 and
  // disjoint sets exactly 0.
  long overlap_num = 0;
  for (int b = 0; b < bins; ++b) {
    const size_t k = static_cast<size_t>(b);
    hist.train_density[k] = static_cast<double>(train_counts[k]) / static_cast<double>(n_train);
    hist.test_density[k] = static_cast<double>(test_counts[k]) / static_cast<double>(n_test);
    overlap_num += std::min(train_counts[k] * n_test, test_counts[k] * n_train);
  }
  hist.overlap = static_cast<double>(overlap_num) / static_cast<double>(n_train * n_test);
  return hist;
}

namespace {

// Rows of recognition-posterior samples, one matrix per image set.
std::vector<std::vector<double>> sample_latents(const Vae& vae, const std::vector<Tensor>& images,
                                                int samples_per_image, uint64_t seed) {
  std::vector<std::vector<double>> rows;
  rows.reserve(images.size() * static_cast<size_t>(samples_per_image));
  const int latent = vae.latent_dim();
  Tape tape;
  tape.set_enabled(false);
  for (size_t i = 0; i < images.size(); ++i) {
    const LatentDistribution dist = vae.encode01(tape, images[i]);
    for (int s = 0; s < samples_per_image; ++s) {
      Rng rng(derive_seed(seed, static_cast<uint64_t>(i), static_cast<uint64_t>(s)));
      std::vector<double> row(static_cast<size_t>(latent));
      for (int d = 0; d < latent; ++d) {
        const size_t k = static_cast<size_t>(d);
        row[k] = static_cast<double>(dist.mean.raw()[k]) +
                 std::exp(0.5 * static_cast<double>(dist.logvar.raw()[k])) * rng.normal();
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

struct Pca2 {
  std::vector<double> mean;
  std::array<std::vector<double>, 2> comp;
  std::array<double, 2> eigenvalue{};
  bool degenerate = false;
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Pca2 fit_pca2(const std::vector<std::vector<double>>& rows) {
  const size_t n = rows.size();
  const size_t dim = rows.front().size();
  if (dim < 2) throw ContractError("latent diagnostic needs a latent dimension of at least 2");
  Pca2 pca;
  pca.mean.assign(dim, 0.0);
  for (const auto& r : rows)
    for (size_t j = 0; j < dim; ++j) pca.mean[j] += r[j];
  for (double& m : pca.mean) m /= static_cast<double>(n);

  std::vector<double> cov(dim * dim, 0.0);
  for (const auto& r : rows) {
    for (size_t a = 0; a < dim; ++a) {
      const double da = r[a] - pca.mean[a];
      for (size_t b = a; b < dim; ++b) cov[a * dim + b] += da * (r[b] - pca.mean[b]);
    }
  }
  double trace = 0.0;
  for (size_t a = 0; a < dim; ++a) {
    for (size_t b = a; b < dim; ++b) {
      cov[a * dim + b] /= static_cast<double>(n);
      cov[b * dim + a] = cov[a * dim + b];
    }
    trace += cov[a * dim + a];
  }

  auto apply = [&](const std::vector<double>& v) {
    std::vector<double> out(dim, 0.0);
    for (size_t a = 0; a < dim; ++a) {
      double s = 0.0;
      for (size_t b = 0; b < dim; ++b) s += cov[a * dim + b] * v[b];
      out[a] = s;
    }
    return out;
  };
  auto normalize = [](std::vector<double>& v) {
    double norm = std::sqrt(dot(v, v));
    if (norm > 0.0)
      for (double& x : v) x /= norm;
    return norm;
  };

  const double floor = 1e-12 * std::max(1.0, trace);
  for (int which = 0; which < 2; ++which) {
    std::vector<double> v(dim);
    for (size_t j = 0; j < dim; ++j) v[j] = 1.0 + 1e-3 * static_cast<double>(j + which);
    if (which == 1) {
      const double proj = dot(v, pca.comp[0]);
      for (size_t j = 0; j < dim; ++j) v[j] -= proj * pca.comp[0][j];
    }
    normalize(v);
    for (int iter = 0; iter < 300; ++iter) {
      v = apply(v);
      if (which == 1) {
        const double proj = dot(v, pca.comp[0]);
        for (size_t j = 0; j < dim; ++j) v[j] -= proj * pca.comp[0][j];
      }
      if (normalize(v) == 0.0) break;
    }
    const std::vector<double> cv = apply(v);
    pca.eigenvalue[static_cast<size_t>(which)] = dot(v, cv);
    pca.comp[static_cast<size_t>(which)] = std::move(v);
    if (pca.eigenvalue[static_cast<size_t>(which)] <= floor) {
      pca.degenerate = true;
      break;
    }
  }
  if (pca.degenerate) {
    // Spread is too small to orient components; fall back to the first two
    // latent coordinates so the maps stay well defined.
    for (int which = 0; which < 2; ++which) {
      std::vector<double> v(dim, 0.0);
      v[static_cast<size_t>(which)] = 1.0;
      pca.comp[static_cast<size_t>(which)] = std::move(v);
      pca.eigenvalue[static_cast<size_t>(which)] = cov[static_cast<size_t>(which) * dim + which];
    }
  }
  return pca;
}

std::vector<std::array<double, 2>> project2(const Pca2& pca,
                                            const std::vector<std::vector<double>>& rows) {
  std::vector<std::array<double, 2>> out;
  out.reserve(rows.size());
  std::vector<double> centered(pca.mean.size());
  for (const auto& r : rows) {
    for (size_t j = 0; j < centered.size(); ++j) centered[j] = r[j] - pca.mean[j];
    out.push_back({dot(centered, pca.comp[0]), dot(centered, pca.comp[1])});
  }
  return out;
}

std::vector<double> rasterize(const std::vector<std::array<double, 2>>& pts,
                              const std::array<double, 4>& bounds) {
  constexpr int g = LatentDiagnostic::kGrid;
  std::vector<double> grid(static_cast<size_t>(g) * g, 0.0);
  const double wx = bounds[2] - bounds[0];
  const double wy = bounds[3] - bounds[1];
  for (const auto& p : pts) {
    int cx = static_cast<int>((p[0] - bounds[0]) / wx * g);
    int cy = static_cast<int>((p[1] - bounds[1]) / wy * g);
    cx = std::clamp(cx, 0, g - 1);
    cy = std::clamp(cy, 0, g - 1);
    grid[static_cast<size_t>(cy) * g + cx] += 1.0 / static_cast<double>(pts.size());
  }
  return grid;
}

}  // namespace

LatentDiagnostic latent_diagnostic(const Vae& vae, const std::vector<Tensor>& train,
                                   const std::vector<Tensor>& holdout,
                                   const std::vector<Tensor>& ood, int samples_per_image,
                                   uint64_t seed) {
  if (train.empty() || holdout.empty() || ood.empty())
    throw ContractError("latent diagnostic needs non-empty image sets");
  if (samples_per_image < 1)
    throw ContractError("latent diagnostic needs at least one sample per image");
  const auto train_rows = sample_latents(vae, train, samples_per_image, seed);
  const auto holdout_rows = sample_latents(vae, holdout, samples_per_image, seed);
  const auto ood_rows = sample_latents(vae, ood, samples_per_image, seed);

  const Pca2 pca = fit_pca2(train_rows);
  const auto train_pts = project2(pca, train_rows);
  const auto holdout_pts = project2(pca, holdout_rows);
  const auto ood_pts = project2(pca, ood_rows);

  LatentDiagnostic diag;
  diag.pca_degenerate = pca.degenerate;
  diag.component_variance = pca.eigenvalue;
  diag.bounds = {train_pts.front()[0], train_pts.front()[1], train_pts.front()[0],
                 train_pts.front()[1]};
  for (const auto* pts : {&train_pts, &holdout_pts, &ood_pts}) {
    for (const auto& p : *pts) {
      diag.bounds[0] = std::min(diag.bounds[0], p[0]);
      diag.bounds[1] = std::min(diag.bounds[1], p[1]);
      diag.bounds[2] = std::max(diag.bounds[2], p[0]);
      diag.bounds[3] = std::max(diag.bounds[3], p[1]);
    }
  }
  if (diag.bounds[2] == diag.bounds[0]) {
    diag.bounds[0] -= 0.5;
    diag.bounds[2] += 0.5;
  }
  if (diag.bounds[3] == diag.bounds[1]) {
    diag.bounds[1] -= 0.5;
    diag.bounds[3] += 0.5;
  }
  diag.train_grid = rasterize(train_pts, diag.bounds);
  diag.holdout_grid = rasterize(holdout_pts, diag.bounds);
  diag.ood_grid = rasterize(ood_pts, diag.bounds);

  const size_t cells = diag.train_grid.size();
  auto diff_maps = [&](const std::vector<double>& set_grid, std::vector<double>& prob,
                       std::vector<int>& support) {
    prob.resize(cells);
    support.resize(cells);
    for (size_t i = 0; i < cells; ++i) {
      prob[i] = set_grid[i] - diag.train_grid[i];
      const bool in_train = diag.train_grid[i] > 0.0;
      const bool in_set = set_grid[i] > 0.0;
      support[i] = in_train == in_set ? 0 : (in_set ? 1 : -1);
    }
  };
  diff_maps(diag.holdout_grid, diag.prob_diff_holdout, diag.support_diff_holdout);
  diff_maps(diag.ood_grid, diag.prob_diff_ood, diag.support_diff_ood);
  return diag;
}

double grid_tv_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("tv distance needs equal-size grids");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

std::string curve_to_csv(const TradeoffCurve& curve) {
  std::string out;
  const bool combined = curve.kind == RuleKind::combined;
  out += combined ? "beta_mu,beta_nll,autonomy,averted,tp,fp,fn,tn\n"
                  : "beta,autonomy,averted,tp,fp,fn,tn\n";
  for (const auto& p : curve.points) {
    out += fmt_double(p.beta);
    if (combined) out += "," + fmt_double(p.beta_nll);
    out += "," + fmt_double(p.autonomy) + "," + fmt_double(p.averted) + "," +
           std::to_string(p.tp) + "," + std::to_string(p.fp) + "," + std::to_string(p.fn) + "," +
           std::to_string(p.tn) + "\n";
  }
  return out;
}

std::string curves_to_json(const std::vector<TradeoffCurve>& curves) {
  nlohmann::json root = nlohmann::json::array();
  for (const auto& curve : curves) {
    nlohmann::json c;
    c["method"] = curve.method;
    c["rule"] = rule_kind_name(curve.kind);
    c["interpolation"] = curve.interpolation;
    c["averted_defined"] = curve.averted_defined;
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : curve.points) {
      nlohmann::json j;
      j["beta"] = p.beta;
      if (curve.kind == RuleKind::combined) j["beta_nll"] = p.beta_nll;
      j["autonomy"] = p.autonomy;
      j["averted"] = p.averted;
      j["tp"] = p.tp;
      j["fp"] = p.fp;
      j["fn"] = p.fn;
      j["tn"] = p.tn;
      pts.push_back(std::move(j));
    }
    c["points"] = std::move(pts);
    root.push_back(std::move(c));
  }
  return root.dump(2) + "\n";
}

std::string table_to_csv(const AutonomyTable& table) {
  std::string out = "method";
  for (double level : table.levels) out += "," + fmt_double(level);
  out += "\n";
  for (size_t m = 0; m < table.methods.size(); ++m) {
    out += table.methods[m];
    for (double v : table.averted[m]) out += "," + fmt_double(v);
    out += "\n";
  }
  return out;
}

std::string table_to_json(const AutonomyTable& table) {
  nlohmann::json root;
  root["interpolation"] = table.interpolation;
  root["levels"] = table.levels;
  nlohmann::json rows = nlohmann::json::object();
  for (size_t m = 0; m < table.methods.size(); ++m) rows[table.methods[m]] = table.averted[m];
  root["averted"] = std::move(rows);
  return root.dump(2) + "\n";
}

std::string histogram_to_csv(const NllHistogram& hist) {
  std::string out = "bin_lo,bin_hi,train_density,test_density\n";
  for (size_t b = 0; b + 1 < hist.edges.size(); ++b) {
    out += fmt_double(hist.edges[b]) + "," + fmt_double(hist.edges[b + 1]) + "," +
           fmt_double(hist.train_density[b]) + "," + fmt_double(hist.test_density[b]) + "\n";
  }
  return out;
}

std::string grid_to_csv(const std::vector<double>& grid, int width) {
  if (width < 1 || grid.size() % static_cast<size_t>(width) != 0)
    throw DimensionError("grid size is not a multiple of the row width");
  std::string out;
  for (size_t i = 0; i < grid.size(); ++i) {
    out += fmt_double(grid[i]);
    out += (i % static_cast<size_t>(width) == static_cast<size_t>(width) - 1) ? '\n' : ',';
  }
  return out;
}

std::string support_grid_to_csv(const std::vector<int>& grid, int width) {
  if (width < 1 || grid.size() % static_cast<size_t>(width) != 0)
    throw DimensionError("grid size is not a multiple of the row width");
  std::string out;
  for (size_t i = 0; i < grid.size(); ++i) {
    out += std::to_string(grid[i]);
    out += (i % static_cast<size_t>(width) == static_cast<size_t>(width) - 1) ? '\n' : ',';
  }
  return out;
}

void save_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << content;
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace oodcp
