#pragma once
// Compound Poisson-Gamma (Tweedie) primitives for variance power 1 < p < 2:
// variance law, compound-representation conversion, sampling, unit deviance.
// Support is [0, inf): an atom at zero plus a continuous positive part.
//
// The density normalizer (an infinite series) is never evaluated; fitting and
// scoring work entirely through the deviance, which is closed-form.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace flexrate {

struct TweedieParams {
  double mu;      // mean, > 0
  double weight;  // known prior weight w, > 0
  double phi;     // dispersion, > 0
  double power;   // variance power p, strictly inside (1, 2)
};

// Parameters of the equivalent compound sum: Y = sum_{k<=N} Z_k,
// N ~ Poisson(poisson_mean), Z_k ~ Gamma(gamma_shape, mean gamma_mean).
struct CompoundRepresentation {
  double poisson_mean;
  double gamma_shape;
  double gamma_mean;
};

inline void validate(const TweedieParams& q) {
  if (!(q.mu > 0.0)) throw std::invalid_argument("tweedie: mu must be positive");
  if (!(q.weight > 0.0)) throw std::invalid_argument("tweedie: weight must be positive");
  if (!(q.phi > 0.0)) throw std::invalid_argument("tweedie: phi must be positive");
  if (!(q.power > 1.0 && q.power < 2.0))
    throw std::invalid_argument("tweedie: power must lie strictly inside (1,2)");
}

// Var{Y} = (phi / w) * mu^p.
inline double variance(const TweedieParams& q) {
  validate(q);
  return q.phi / q.weight * std::pow(q.mu, q.power);
}

inline CompoundRepresentation to_compound(const TweedieParams& q) {
  validate(q);
  const double p = q.power;
  CompoundRepresentation c;
  c.poisson_mean = q.weight * std::pow(q.mu, 2.0 - p) / ((2.0 - p) * q.phi);
  c.gamma_shape = (2.0 - p) / (p - 1.0);
  c.gamma_mean = (2.0 - p) * q.phi / (q.weight * std::pow(q.mu, 1.0 - p));
  return c;
}

struct TweedieDraw {
  double total;        // aggregate loss, 0 when claim_count = 0
  std::int64_t claim_count;
};

// One draw via the compound construction. Deterministic given the rng state;
// parallel callers must own independently seeded streams.
inline TweedieDraw sample_with_count(const TweedieParams& q, std::mt19937_64& rng) {
  const CompoundRepresentation c = to_compound(q);
  std::poisson_distribution<std::int64_t> pois(c.poisson_mean);
  const std::int64_t n = pois(rng);
  if (n == 0) return {0.0, 0};
  // std::gamma_distribution is (shape, scale); scale = mean / shape.
  std::gamma_distribution<double> gam(c.gamma_shape, c.gamma_mean / c.gamma_shape);
  double total = 0.0;
  for (std::int64_t k = 0; k < n; ++k) total += gam(rng);
  return {total, n};
}

inline double sample(const TweedieParams& q, std::mt19937_64& rng) {
  return sample_with_count(q, rng).total;
}

// 2 * [ y (y^{1-p} - mu^{1-p}) / (1-p) - (y^{2-p} - mu^{2-p}) / (2-p) ].
// The y = 0 case is the analytic limit 2 mu^{2-p} / (2-p), not an epsilon fix.
inline double unit_deviance(double y, double mu, double power) {
  if (y < 0.0) throw std::invalid_argument("unit_deviance: y must be nonnegative");
  if (!(mu > 0.0)) throw std::invalid_argument("unit_deviance: mu must be positive");
  if (!(power > 1.0 && power < 2.0))
    throw std::invalid_argument("unit_deviance: power must lie strictly inside (1,2)");
  const double p = power;
  if (y == 0.0) return 2.0 * std::pow(mu, 2.0 - p) / (2.0 - p);
  const double term1 = y * (std::pow(y, 1.0 - p) - std::pow(mu, 1.0 - p)) / (1.0 - p);
  const double term2 = (std::pow(y, 2.0 - p) - std::pow(mu, 2.0 - p)) / (2.0 - p);
  return 2.0 * (term1 - term2);
}

}  // namespace flexrate
