#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "oodcp/eval.hpp"
#include "oodcp/sim.hpp"

using namespace oodcp;

namespace {

RiskRecord make_record(float mu, float sigma, double nll, bool crash) {
  RiskRecord r;
  r.would_crash = crash;
  r.nll = nll;
  r.risk.mu = mu;
  r.risk.sigma = sigma;
  r.risk.n_z = 1;
  r.risk.n_w = 1;
  return r;
}

RiskEstimate make_estimate(float mu, float sigma) {
  RiskEstimate e;
  e.mu = mu;
  e.sigma = sigma;
  return e;
}

// Mixed synthetic record set: crashers sit below the horizon with spread
// predictions, safe motions above it.
std::vector<RiskRecord> mixed_records() {
  std::vector<RiskRecord> records;
  Rng rng(424242);
  for (int i = 0; i < 60; ++i) {
    const bool crash = rng.uniform() < 0.35;
    const float mu = crash ? static_cast<float>(rng.uniform(0.3, 1.9))
                           : static_cast<float>(rng.uniform(2.05, 2.125));
    const float sigma = static_cast<float>(rng.uniform(0.05, 0.6));
    const double nll = rng.uniform(-1500.0, -1300.0) + (crash ? 60.0 : 0.0);
    records.push_back(make_record(mu, sigma, nll, crash));
  }
  return records;
}

bool curves_points_equal(const TradeoffCurve& a, const TradeoffCurve& b) {
  if (a.points.size() != b.points.size()) return false;
  for (size_t i = 0; i < a.points.size(); ++i) {
    const auto& p = a.points[i];
    const auto& q = b.points[i];
    if (p.beta != q.beta || p.autonomy != q.autonomy || p.averted != q.averted || p.tp != q.tp ||
        p.fp != q.fp || p.fn != q.fn || p.tn != q.tn)
      return false;
  }
  return true;
}

ConvVae tiny_vae() { return ConvVae(1, 10, 12, 4, 0.1f, 33); }

Tensor random_image(uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({1, 10, 12}, rng, 0.0f, 1.0f);
}

// Constant recognition posterior with vanishing spread: every latent sample
// collapses onto one point, so the train covariance is numerically zero.
class PointMassVae : public Vae {
 public:
  LatentDistribution encode01(Tape&, Tensor) const override {
    LatentDistribution dist;
    dist.mean = Tensor::zeros({3});
    dist.mean.raw()[0] = 1.0f;
    dist.mean.raw()[1] = -2.0f;
    dist.mean.raw()[2] = 0.5f;
    dist.logvar = Tensor::full({3}, -80.0f);
    return dist;
  }
  Tensor decode(Tape&, Tensor) const override { return Tensor::zeros({1, 2, 2}); }
  int latent_dim() const override { return 3; }
  float sigma_x() const override { return 0.1f; }
};

}  // namespace

TEST_CASE("rule kind names round-trip") {
  for (RuleKind kind : {RuleKind::bayesian, RuleKind::deterministic, RuleKind::nll,
                        RuleKind::combined})
    CHECK(parse_rule_kind(rule_kind_name(kind)) == kind);
  CHECK_THROWS_AS(parse_rule_kind("frequentist"), ConfigError);
}

TEST_CASE("decision rules follow their threshold arithmetic") {
  SUBCASE("bayesian") {
    DecisionRule rule;
    rule.kind = RuleKind::bayesian;
    const RiskEstimate certain_safe = make_estimate(2.5f, 0.0f);
    for (double beta : {-5.0, 0.0, 1.0, 100.0, 1e9}) {
      rule.beta_sigma = beta;
      CHECK_FALSE(decide(rule, &certain_safe, nullptr));
    }
    rule.beta_sigma = 0.0;
    const RiskEstimate below = make_estimate(1.9f, 0.7f);
    CHECK(decide(rule, &below, nullptr));
    rule.beta_sigma = 1.0;
    const RiskEstimate uncertain = make_estimate(2.2f, 0.5f);
    CHECK(decide(rule, &uncertain, nullptr));  // 2.2 - 0.5 = 1.7 < 2
    // Exactly on the horizon is not an intervention: 2.5 - 1 * 0.5 = 2.
    const RiskEstimate boundary = make_estimate(2.5f, 0.5f);
    CHECK_FALSE(decide(rule, &boundary, nullptr));
    rule.beta_sigma = 1.0000001;
    CHECK(decide(rule, &boundary, nullptr));
  }
  SUBCASE("deterministic") {
    DecisionRule rule;
    rule.kind = RuleKind::deterministic;
    const RiskEstimate est = make_estimate(2.5f, 0.9f);  // sigma must be ignored
    rule.beta_mu = 0.6;
    CHECK(decide(rule, &est, nullptr));
    rule.beta_mu = 0.4;
    CHECK_FALSE(decide(rule, &est, nullptr));
    rule.beta_mu = 0.5;  // exactly on the horizon
    CHECK_FALSE(decide(rule, &est, nullptr));
  }
  SUBCASE("nll") {
    DecisionRule rule;
    rule.kind = RuleKind::nll;
    rule.beta_nll = 4.0;
    const double low = 3.5, exact = 4.0, high = 5.0;
    CHECK_FALSE(decide(rule, nullptr, &low));
    CHECK_FALSE(decide(rule, nullptr, &exact));
    CHECK(decide(rule, nullptr, &high));
  }
  SUBCASE("combined z-scores the likelihood term") {
    DecisionRule rule;
    rule.kind = RuleKind::combined;
    rule.train_nll = NllStats{10.0, 2.0};
    rule.beta_mu = 0.25;
    const RiskEstimate est = make_estimate(2.5f, 0.0f);
    const double nll = 14.0;  // z = 2
    rule.beta_nll = 0.25;     // 2.5 - 0.25 - 0.5 = 1.75
    CHECK(decide(rule, &est, &nll));
    rule.beta_nll = 0.125;  // 2.5 - 0.25 - 0.25 = 2 exactly
    CHECK_FALSE(decide(rule, &est, &nll));
    // Below-average likelihoods push the margin the other way.
    const double familiar = 8.0;  // z = -1
    rule.beta_nll = 0.5;          // 2.5 - 0.25 + 0.5 = 2.75
    CHECK_FALSE(decide(rule, &est, &familiar));
  }
  SUBCASE("missing inputs are contract errors") {
    DecisionRule rule;
    const RiskEstimate est = make_estimate(2.5f, 0.1f);
    const double nll = 1.0;
    rule.kind = RuleKind::bayesian;
    CHECK_THROWS_AS(decide(rule, nullptr, &nll), ContractError);
    rule.kind = RuleKind::deterministic;
    CHECK_THROWS_AS(decide(rule, nullptr, &nll), ContractError);
    rule.kind = RuleKind::nll;
    CHECK_THROWS_AS(decide(rule, &est, nullptr), ContractError);
    rule.kind = RuleKind::combined;
    CHECK_THROWS_AS(decide(rule, &est, nullptr), ContractError);
    CHECK_THROWS_AS(decide(rule, nullptr, &nll), ContractError);
    rule.train_nll = NllStats{0.0, 0.0};  // no spread to z-score against
    CHECK_THROWS_AS(decide(rule, &est, &nll), ContractError);
  }
}

TEST_CASE("bayesian decisions are scale consistent") {
  // Scaling the horizon margin and the spread by the same positive factor
  // must leave the flip threshold beta* = (mu - 2) / sigma unchanged.
  const std::array<std::array<float, 2>, 3> cases = {{{2.75f, 0.25f}, {2.1f, 0.8f}, {3.5f, 0.5f}}};
  for (const auto& [mu, sigma] : cases) {
    for (float c : {0.25f, 3.0f, 7.5f}) {
      const RiskEstimate orig = make_estimate(mu, sigma);
      const RiskEstimate scaled = make_estimate(2.0f + c * (mu - 2.0f), c * sigma);
      const double flip = static_cast<double>(mu - 2.0f) / sigma;
      DecisionRule rule;
      rule.kind = RuleKind::bayesian;
      for (double offset : {-0.01, 0.01}) {
        rule.beta_sigma = flip * (1.0 + offset);
        CHECK(decide(rule, &orig, nullptr) == decide(rule, &scaled, nullptr));
      }
      rule.beta_sigma = flip * 1.01;
      CHECK(decide(rule, &orig, nullptr));
      rule.beta_sigma = flip * 0.99;
      CHECK_FALSE(decide(rule, &orig, nullptr));
    }
  }
}

TEST_CASE("sweep counts partition the record set") {
  const std::vector<RiskRecord> records = mixed_records();
  const long total = static_cast<long>(records.size());
  const std::vector<double> grid = default_beta_sigma_grid();
  const TradeoffCurve curve = sweep(RuleKind::bayesian, records, grid, "pooled bayesian");
  REQUIRE(curve.points.size() == grid.size());
  CHECK(curve.method == "pooled bayesian");
  CHECK(curve.kind == RuleKind::bayesian);
  CHECK(curve.averted_defined);
  CHECK(curve.interpolation == "linear");
  for (size_t i = 0; i < curve.points.size(); ++i) {
    const auto& p = curve.points[i];
    CHECK(p.beta == grid[i]);
    CHECK(p.tp + p.fp + p.fn + p.tn == total);
    CHECK(p.autonomy >= 0.0);
    CHECK(p.autonomy <= 1.0);
    CHECK(p.averted >= 0.0);
    CHECK(p.averted <= 1.0);
  }
  SUBCASE("ascending beta never loses interventions") {
    for (size_t i = 1; i < curve.points.size(); ++i) {
      CHECK(curve.points[i].autonomy <= curve.points[i - 1].autonomy);
      CHECK(curve.points[i].averted >= curve.points[i - 1].averted);
    }
    // Set inclusion on the records themselves, not just the counts.
    DecisionRule lo, hi;
    lo.kind = hi.kind = RuleKind::bayesian;
    for (size_t i = 1; i < grid.size(); ++i) {
      lo.beta_sigma = grid[i - 1];
      hi.beta_sigma = grid[i];
      for (const auto& r : records) {
        if (decide(lo, &r.risk, &r.nll)) CHECK(decide(hi, &r.risk, &r.nll));
      }
    }
  }
  SUBCASE("record order does not matter") {
    std::vector<RiskRecord> shuffled = records;
    Rng rng(7);
    for (size_t i = shuffled.size(); i > 1; --i)
      std::swap(shuffled[i - 1], shuffled[rng.uniform_index(i)]);
    const TradeoffCurve again = sweep(RuleKind::bayesian, shuffled, grid, "pooled bayesian");
    CHECK(curves_points_equal(curve, again));
  }
  SUBCASE("input validation") {
    CHECK_THROWS_AS(sweep(RuleKind::bayesian, {}, grid, "x"), ContractError);
    CHECK_THROWS_AS(sweep(RuleKind::bayesian, records, {}, "x"), ContractError);
    CHECK_THROWS_AS(sweep(RuleKind::combined, records, grid, "x"), ContractError);
  }
}

TEST_CASE("sweep endpoints pin the curve") {
  std::vector<RiskRecord> records;
  for (int i = 0; i < 40; ++i) {
    const bool crash = i % 4 == 0;
    const float mu = crash ? 1.2f : 2.1f;
    records.push_back(make_record(mu + 0.01f * i, 0.3f, -1400.0, crash));
  }
  const TradeoffCurve curve =
      sweep(RuleKind::bayesian, records, {-1e9, 0.0, 1e9}, "endpoint check");
  // At huge positive beta any spread swallows the margin, so everything is
  // intervened; at huge negative beta the spread is credited as margin and
  // nothing is.
  CHECK(curve.points.front().autonomy == 1.0);
  CHECK(curve.points.front().averted == 0.0);
  const auto& hi = curve.points.back();
  CHECK(hi.autonomy == 0.0);
  CHECK(hi.averted == 1.0);
  CHECK(hi.tp + hi.fp == 40);

  std::vector<RiskRecord> all_safe_mu;
  for (int i = 0; i < 10; ++i)
    all_safe_mu.push_back(make_record(2.05f + 0.005f * i, 0.2f, -1400.0, i % 2 == 0));
  const TradeoffCurve relaxed =
      sweep(RuleKind::bayesian, all_safe_mu, {-1e9}, "never intervene");
  CHECK(relaxed.points[0].autonomy == 1.0);
  CHECK(relaxed.points[0].averted == 0.0);

  SUBCASE("a crash-free set flags averted as undefined") {
    std::vector<RiskRecord> safe;
    for (int i = 0; i < 8; ++i) safe.push_back(make_record(2.1f, 0.1f, -1400.0, false));
    const TradeoffCurve c = sweep(RuleKind::bayesian, safe, {0.0, 1.0}, "no crashes");
    CHECK_FALSE(c.averted_defined);
    for (const auto& p : c.points) CHECK(p.averted == 1.0);
  }
}

TEST_CASE("an oracle estimator recovers the genuinely safe fraction") {
  // Brute-force ground truth: draw motions with known first-collision steps,
  // hand the sweep exact TTCs with zero spread, and count the confusion
  // matrix directly from the generator.
  std::vector<RiskRecord> records;
  Rng rng(90210);
  long expected_safe = 0;
  for (int i = 0; i < 240; ++i) {
    const bool crash = rng.uniform() < 0.4;
    float ttc = kTtcSentinel;
    if (crash) {
      const int first = static_cast<int>(rng.uniform_index(15));  // steps 0..14
      ttc = kDt * static_cast<float>(first + 1);
    } else {
      ++expected_safe;
    }
    records.push_back(make_record(ttc, 0.0f, -1400.0, crash));
  }
  const TradeoffCurve curve =
      sweep(RuleKind::deterministic, records, default_beta_mu_grid(), "oracle");
  const auto zero = std::find_if(curve.points.begin(), curve.points.end(),
                                 [](const CurvePoint& p) { return p.beta == 0.0; });
  REQUIRE(zero != curve.points.end());
  CHECK(zero->averted == 1.0);
  CHECK(zero->autonomy == static_cast<double>(expected_safe) / 240.0);
  CHECK(zero->fp == 0);
  CHECK(zero->fn == 0);
  CHECK(zero->tp == 240 - expected_safe);
  CHECK(zero->tn == expected_safe);

  // A collision exactly at the horizon boundary needs a positive margin: the
  // comparison is strict, so beta_mu = 0 leaves it alone.
  const RiskEstimate boundary = make_estimate(2.0f, 0.0f);
  DecisionRule rule;
  rule.kind = RuleKind::deterministic;
  rule.beta_mu = 0.0;
  CHECK_FALSE(decide(rule, &boundary, nullptr));
  rule.beta_mu = 0.2;
  CHECK(decide(rule, &boundary, nullptr));
}

TEST_CASE("beta grids match their published shapes") {
  SUBCASE("beta_sigma: mirrored log spacing around zero") {
    const std::vector<double> grid = default_beta_sigma_grid();
    REQUIRE(grid.size() == 61);
    CHECK(grid.front() == -10.0);
    CHECK(grid.back() == 10.0);
    CHECK(grid[30] == 0.0);
    for (size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] > grid[i - 1]);
    for (size_t i = 0; i < grid.size(); ++i) CHECK(grid[i] == -grid[grid.size() - 1 - i]);
    CHECK(grid[29] == doctest::Approx(-0.01));
    CHECK(grid[31] == doctest::Approx(0.01));
  }
  SUBCASE("beta_mu: linear over [-2, 2]") {
    const std::vector<double> grid = default_beta_mu_grid();
    REQUIRE(grid.size() == 41);
    CHECK(grid.front() == -2.0);
    CHECK(grid.back() == 2.0);
    for (size_t i = 1; i < grid.size(); ++i)
      CHECK(grid[i] - grid[i - 1] == doctest::Approx(0.1));
  }
  SUBCASE("beta_nll: empirical quantiles") {
    const std::vector<double> grid = nll_quantile_grid({5.0, 1.0, 3.0, 2.0, 4.0});
    REQUIRE(grid.size() == 51);
    CHECK(grid.front() == 1.0);
    CHECK(grid.back() == 5.0);
    CHECK(grid[25] == 3.0);
    for (size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] >= grid[i - 1]);
    const std::vector<double> single = nll_quantile_grid({7.0});
    for (double v : single) CHECK(v == 7.0);
    CHECK_THROWS_AS(nll_quantile_grid({}), ContractError);
  }
}

TEST_CASE("autonomy table interpolates between achieved points") {
  TradeoffCurve curve;
  curve.method = "toy";
  CurvePoint a;
  a.beta = 0.0;
  a.autonomy = 0.4;
  a.averted = 0.9;
  CurvePoint b;
  b.beta = 1.0;
  b.autonomy = 0.6;
  b.averted = 0.7;
  curve.points = {a, b};

  const AutonomyTable mid = table_at_autonomy({curve}, {0.5});
  CHECK(mid.averted[0][0] == 0.8);
  CHECK(mid.interpolation == "linear");
  CHECK(mid.methods == std::vector<std::string>{"toy"});

  const AutonomyTable exact = table_at_autonomy({curve}, {0.4, 0.6});
  CHECK(exact.averted[0][0] == 0.9);
  CHECK(exact.averted[0][1] == 0.7);

  CHECK_THROWS_AS(table_at_autonomy({curve}, {0.3}), DomainError);
  CHECK_THROWS_AS(table_at_autonomy({curve}, {0.7}), DomainError);
  CHECK_THROWS_AS(table_at_autonomy({}, {0.5}), ContractError);
  CHECK_THROWS_AS(table_at_autonomy({curve}, {}), ContractError);
}

TEST_CASE("a combined sweep dominates single thresholds at matched autonomy") {
  // Two crash families: one the TTC head sees (low mu), one only the
  // likelihood flags (confidently wrong mu, far-out nll). A single mu
  // threshold can reach the second family only by stopping everything.
  std::vector<RiskRecord> records;
  for (int i = 0; i < 5; ++i) records.push_back(make_record(1.5f, 0.1f, 10.0, true));
  for (int i = 0; i < 5; ++i) records.push_back(make_record(3.0f, 0.1f, 30.0, true));
  Rng rng(3);
  for (int i = 0; i < 30; ++i)
    records.push_back(
        make_record(3.0f, 0.1f, rng.uniform(9.0, 11.0), false));
  const NllStats stats{10.0, 2.0};

  std::vector<double> beta_nll_grid;
  std::vector<double> train_z;
  for (const auto& r : records)
    if (!r.would_crash) train_z.push_back((r.nll - stats.mean) / stats.std);
  beta_nll_grid = nll_quantile_grid(train_z);

  const TradeoffCurve det =
      sweep(RuleKind::deterministic, records, default_beta_mu_grid(), "deterministic");
  const TradeoffCurve comb =
      sweep_combined(records, default_beta_mu_grid(), beta_nll_grid, stats, "combined");

  for (const auto& p : comb.points) {
    CHECK(p.tp + p.fp + p.fn + p.tn == 40);
    CHECK(p.autonomy >= 0.0);
    CHECK(p.autonomy <= 1.0);
  }
  for (size_t i = 1; i < comb.points.size(); ++i)
    CHECK(comb.points[i].autonomy < comb.points[i - 1].autonomy);

  const AutonomyTable table = table_at_autonomy({det, comb}, {0.75});
  const double det_averted = table.averted[0][0];
  const double comb_averted = table.averted[1][0];
  CHECK(comb_averted == 1.0);
  CHECK(comb_averted > det_averted);

  CHECK_THROWS_AS(sweep_combined({}, default_beta_mu_grid(), beta_nll_grid, stats, "x"),
                  ContractError);
  CHECK_THROWS_AS(sweep_combined(records, {}, beta_nll_grid, stats, "x"), ContractError);
  CHECK_THROWS_AS(sweep_combined(records, default_beta_mu_grid(), {}, stats, "x"),
                  ContractError);
  CHECK_THROWS_AS(
      sweep_combined(records, default_beta_mu_grid(), beta_nll_grid, NllStats{0.0, 0.0}, "x"),
      ContractError);
}

TEST_CASE("nll stats summarize the training records") {
  std::vector<RiskRecord> records;
  for (double v : {4.0, 6.0, 8.0, 10.0}) records.push_back(make_record(2.1f, 0.1f, v, false));
  const NllStats stats = compute_nll_stats(records);
  CHECK(stats.mean == 7.0);
  CHECK(stats.std == doctest::Approx(std::sqrt(5.0)));
  CHECK_THROWS_AS(compute_nll_stats({}), ContractError);
}

TEST_CASE("nll histogram overlap endpoints") {
  const ConvVae vae = tiny_vae();
  std::vector<Tensor> images;
  for (uint64_t i = 0; i < 6; ++i) images.push_back(random_image(100 + i));

  SUBCASE("identical sets overlap completely") {
    const NllHistogram hist = nll_histogram(vae, images, images, 16, 9001);
    CHECK(hist.overlap == 1.0);
    CHECK(hist.train_nlls == hist.test_nlls);
    REQUIRE(hist.edges.size() == 17);
    for (size_t i = 1; i < hist.edges.size(); ++i) CHECK(hist.edges[i] > hist.edges[i - 1]);
    double train_mass = 0.0, test_mass = 0.0;
    for (size_t b = 0; b < 16; ++b) {
      train_mass += hist.train_density[b];
      test_mass += hist.test_density[b];
    }
    CHECK(train_mass == doctest::Approx(1.0));
    CHECK(test_mass == doctest::Approx(1.0));
  }
  SUBCASE("wildly off-distribution inputs share no bins") {
    std::vector<Tensor> far;
    for (const auto& img : images) {
      Tensor t = img.clone();
      for (int i = 0; i < t.size(); ++i) t.raw()[i] += 100.0f;
      far.push_back(std::move(t));
    }
    const NllHistogram hist = nll_histogram(vae, images, far, 16, 9001);
    CHECK(hist.overlap == 0.0);
  }
  SUBCASE("input validation") {
    CHECK_THROWS_AS(nll_histogram(vae, images, images, 0, 1), ContractError);
    CHECK_THROWS_AS(nll_histogram(vae, {}, images, 8, 1), ContractError);
    CHECK_THROWS_AS(nll_histogram(vae, images, {}, 8, 1), ContractError);
  }
}

TEST_CASE("latent diagnostic grids and difference maps") {
  const ConvVae vae = tiny_vae();
  std::vector<Tensor> train, ood;
  for (uint64_t i = 0; i < 8; ++i) train.push_back(random_image(200 + i));
  for (const auto& img : train) {
    Tensor t = img.clone();
    for (int i = 0; i < t.size(); ++i) t.raw()[i] = t.raw()[i] * 3.0f + 50.0f;
    ood.push_back(std::move(t));
  }
  const LatentDiagnostic diag = latent_diagnostic(vae, train, train, ood, 12, 515);

  SUBCASE("a set compared against itself vanishes from the maps") {
    for (double d : diag.prob_diff_holdout) CHECK(d == 0.0);
    for (int s : diag.support_diff_holdout) CHECK(s == 0);
    CHECK(grid_tv_distance(diag.holdout_grid, diag.train_grid) == 0.0);
  }
  SUBCASE("shifted inputs land farther from the train occupancy") {
    CHECK(grid_tv_distance(diag.ood_grid, diag.train_grid) >
          grid_tv_distance(diag.holdout_grid, diag.train_grid));
    bool any_ood_only = false;
    for (int s : diag.support_diff_ood) {
      CHECK(s >= -1);
      CHECK(s <= 1);
      any_ood_only |= s == 1;
    }
    CHECK(any_ood_only);
  }
  SUBCASE("grids are normalized occupancy maps") {
    REQUIRE(diag.train_grid.size() == 64u * 64u);
    double mass = 0.0;
    for (double v : diag.train_grid) {
      CHECK(v >= 0.0);
      mass += v;
    }
    CHECK(mass == doctest::Approx(1.0));
    CHECK_FALSE(diag.pca_degenerate);
    CHECK(diag.component_variance[0] >= diag.component_variance[1]);
    CHECK(diag.bounds[0] < diag.bounds[2]);
    CHECK(diag.bounds[1] < diag.bounds[3]);
  }
  SUBCASE("degenerate recognition spread falls back to raw coordinates") {
    const PointMassVae point;
    const LatentDiagnostic flat = latent_diagnostic(point, train, train, train, 4, 1);
    CHECK(flat.pca_degenerate);
    double mass = 0.0;
    for (double v : flat.train_grid) mass += v;
    CHECK(mass == doctest::Approx(1.0));
  }
  SUBCASE("input validation") {
    CHECK_THROWS_AS(latent_diagnostic(vae, {}, train, ood, 4, 1), ContractError);
    CHECK_THROWS_AS(latent_diagnostic(vae, train, train, ood, 0, 1), ContractError);
  }
}

TEST_CASE("report emitters produce stable plot-ready text") {
  TradeoffCurve curve;
  curve.method = "toy";
  curve.kind = RuleKind::bayesian;
  CurvePoint p;
  p.beta = 0.5;
  p.autonomy = 0.25;
  p.averted = 0.75;
  p.tp = 3;
  p.fp = 1;
  p.fn = 1;
  p.tn = 3;
  curve.points = {p};

  SUBCASE("curve csv") {
    const std::string csv = curve_to_csv(curve);
    CHECK(csv == "beta,autonomy,averted,tp,fp,fn,tn\n0.5,0.25,0.75,3,1,1,3\n");
    TradeoffCurve comb = curve;
    comb.kind = RuleKind::combined;
    comb.points[0].beta_nll = 0.125;
    const std::string ccsv = curve_to_csv(comb);
    CHECK(ccsv == "beta_mu,beta_nll,autonomy,averted,tp,fp,fn,tn\n0.5,0.125,0.25,0.75,3,1,1,3\n");
  }
  SUBCASE("curves json") {
    const std::string json = curves_to_json({curve});
    CHECK(json.find("\"method\": \"toy\"") != std::string::npos);
    CHECK(json.find("\"rule\": \"bayesian\"") != std::string::npos);
    CHECK(json.find("\"interpolation\": \"linear\"") != std::string::npos);
    CHECK(curves_to_json({curve}) == json);
  }
  SUBCASE("table csv and json") {
    AutonomyTable table;
    table.levels = {0.5, 0.6};
    table.methods = {"a", "b"};
    table.averted = {{0.9, 0.8}, {0.7, 0.6}};
    CHECK(table_to_csv(table) == "method,0.5,0.6\na,0.9,0.8\nb,0.7,0.6\n");
    const std::string json = table_to_json(table);
    CHECK(json.find("\"interpolation\": \"linear\"") != std::string::npos);
    CHECK(json.find("\"a\"") != std::string::npos);
  }
  SUBCASE("histogram csv") {
    NllHistogram hist;
    hist.edges = {0.0, 1.0, 2.0};
    hist.train_density = {0.75, 0.25};
    hist.test_density = {0.5, 0.5};
    CHECK(histogram_to_csv(hist) ==
          "bin_lo,bin_hi,train_density,test_density\n0,1,0.75,0.5\n1,2,0.25,0.5\n");
  }
  SUBCASE("grid csv") {
    CHECK(grid_to_csv({1.0, 0.5, 0.25, 0.0}, 2) == "1,0.5\n0.25,0\n");
    CHECK(support_grid_to_csv({-1, 0, 1, 0}, 2) == "-1,0\n1,0\n");
    CHECK_THROWS_AS(grid_to_csv({1.0, 2.0, 3.0}, 2), DimensionError);
  }
  SUBCASE("files round-trip and bad paths fail loudly") {
    const std::string path = "eval_emit_check.csv";
    save_text_file(path, "a,b\n1,2\n");
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    CHECK(std::string(bytes.begin(), bytes.end()) == "a,b\n1,2\n");
    std::remove(path.c_str());
    CHECK_THROWS_AS(save_text_file("no-such-dir-xyz/file.csv", "x"), IoError);
  }
}

TEST_CASE("trained recognition statistics separate the palette shift") {
  const WorldSpec base = make_corridor_world(0);
  const WorldSpec swapped = make_shifted_world(base, ShiftKind::texture_swap);
  CollectConfig cc;
  cc.n_motions = 96;
  cc.seed = 51;
  const Dataset train = collect_dataset(base, cc);
  cc.n_motions = 32;
  cc.seed = 52;
  const Dataset holdout = collect_dataset(base, cc);
  const Dataset shifted = collect_dataset(swapped, cc);  // same states, swapped palette

  ConvVae vae(3, 18, 32, 16, 0.1f, 5);
  VaeTrainConfig tc;
  tc.epochs = 10;
  tc.batch = 32;
  tc.lr = 1.5e-3f;
  tc.seed = 40;
  train_vae(vae, train, tc);

  auto images_of = [](const Dataset& data, size_t n) {
    std::vector<Tensor> out;
    for (size_t i = 0; i < n; ++i)
      out.push_back(image_to_tensor(data.motions[i].observation, data.c, data.h, data.w));
    return out;
  };
  const std::vector<Tensor> train_imgs = images_of(train, 48);
  const std::vector<Tensor> holdout_imgs = images_of(holdout, 32);
  const std::vector<Tensor> shifted_imgs = images_of(shifted, 32);

  const NllHistogram hist = nll_histogram(vae, train_imgs, shifted_imgs, 20, 1234);
  double mean_train = 0.0, mean_shift = 0.0;
  for (double v : hist.train_nlls) mean_train += v / static_cast<double>(hist.train_nlls.size());
  for (double v : hist.test_nlls) mean_shift += v / static_cast<double>(hist.test_nlls.size());
  INFO("mean train nll " << mean_train << ", mean shifted nll " << mean_shift << ", overlap "
                         << hist.overlap);
  CHECK(mean_shift > mean_train);
  CHECK(hist.overlap < 1.0);
  CHECK(hist.overlap > 0.0);

  const LatentDiagnostic diag =
      latent_diagnostic(vae, train_imgs, holdout_imgs, shifted_imgs, 8, 97);
  const double tv_holdout = grid_tv_distance(diag.holdout_grid, diag.train_grid);
  const double tv_ood = grid_tv_distance(diag.ood_grid, diag.train_grid);
  INFO("tv holdout " << tv_holdout << ", tv shifted " << tv_ood);
  CHECK(tv_ood > tv_holdout);
  CHECK_FALSE(diag.pca_degenerate);
}
